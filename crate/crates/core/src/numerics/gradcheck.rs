//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_error < tol
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `d loss / d p` from backward against `(L(p+h) - L(p-h)) / 2h`
/// for every element of every parameter (or those accepted by `filter`).
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    step: f64,
    filter: impl Fn(&str) -> bool,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&analytic, &mut g)?;
    g.backward(loss)?;
    g.export_grads(&mut analytic)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss_fn(s, &mut g)?;
        g.value(l).item()
    };

    let mut report = GradCheckReport {
        checked: 0,
        worst_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.names().filter(|n| filter(n)).map(String::from).collect();
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.numel());
        let grad = analytic
            .get(&name)
            .and_then(|t| t.grad().map(<[f64]>::to_vec))
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = store.get(&name).expect("name from store").data()[i];
            probe.get_mut(&name).expect("name").data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(&name).expect("name").data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(&name).expect("name").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("{name}[{i}] finite difference")));
            }
            let err = rel_error(grad[i], numeric);
            report.checked += 1;
            if err > report.worst_rel_error || report.worst_param.is_empty() {
                report.worst_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = grad[i];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[2, 2], vec![0.3, -0.2, 0.5, 0.9]).unwrap());
        let x = Tensor::new(&[2, 1], vec![1.5, -0.5]).unwrap();
        let report = check_gradients(&s, 1e-5, |_| true, |s, g| {
            let w = g.param(s, "w")?;
            let xv = g.constant(x.clone());
            let y = g.matmul(w, xv)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.passes(1e-6), "{report:?}");

        // A loss whose graph hides the parameter dependence fails the check.
        let bad = check_gradients(&s, 1e-5, |_| true, |s, g| {
            let w = g.param(s, "w")?;
            let d = if g.is_recording() { g.detach(w) } else { w };
            let y = g.mul(d, d)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(!bad.passes(1e-4));
    }
}
