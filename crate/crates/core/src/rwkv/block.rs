use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init, Graph, ParamStore, Scalar, Tensor, Var};
use crate::rwkv::BlockState;

/// Shape hyper-parameters of one Time Mix + Channel Mix block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    /// Inner rank of the five token-shift interpolation LoRAs.
    pub lora_rank: usize,
    /// Inner rank of the decay LoRA.
    pub decay_rank: usize,
    /// Hidden width of Channel Mix.
    pub ffn_dim: usize,
    pub norm_eps: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dimension {} not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if self.lora_rank == 0 || self.decay_rank == 0 || self.ffn_dim == 0 {
            return Err(Error::config("LoRA ranks and channel-mix width must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

const MIX_TARGETS: [&str; 5] = ["r", "k", "v", "w", "g"];

/// Creates all parameters of block `layer` (of `depth`) under `prefix`.
///
/// Interpolation mixers and decay speeds follow the usual depth-dependent
/// RWKV schedule; LoRA up-projections start near zero.
pub fn init_block<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    layer: usize,
    depth: usize,
    rng: &mut R,
) {
    let d = cfg.dim;
    let ratio_0_to_1 = if depth > 1 { layer as f64 / (depth - 1) as f64 } else { 0.0 };
    let ratio_1_to_0 = 1.0 - layer as f64 / depth as f64;
    let frac = |i: usize| i as f64 / d as f64;
    let p = |name: &str| format!("{prefix}{name}");

    for ln in ["ln1", "ln2"] {
        store.insert(p(&format!("{ln}.weight")), Tensor::full(&[d], T::one()));
        store.insert(p(&format!("{ln}.bias")), Tensor::zeros(&[d]));
    }

    let mix = |power: f64| (0..d).map(move |i| 1.0 - frac(i).powf(power));
    store.insert(p("att.mu_x"), init::from_f64(&[d], mix(ratio_1_to_0)));
    store.insert(p("att.mu_r"), init::from_f64(&[d], mix(0.5 * ratio_1_to_0)));
    store.insert(p("att.mu_k"), init::from_f64(&[d], mix(ratio_1_to_0)));
    store.insert(
        p("att.mu_v"),
        init::from_f64(&[d], (0..d).map(|i| 1.0 - (frac(i).powf(ratio_1_to_0) + 0.3 * ratio_0_to_1))),
    );
    store.insert(p("att.mu_w"), init::from_f64(&[d], mix(ratio_1_to_0)));
    store.insert(p("att.mu_g"), init::from_f64(&[d], mix(0.5 * ratio_1_to_0)));
    for t in MIX_TARGETS {
        store.insert(
            p(&format!("att.lora_a.{t}")),
            init::uniform(&[d, cfg.lora_rank], 1e-2, rng),
        );
        store.insert(
            p(&format!("att.lora_b.{t}")),
            init::uniform(&[cfg.lora_rank, d], 1e-2, rng),
        );
    }

    let denom = (d.max(2) - 1) as f64;
    store.insert(
        p("att.w0"),
        init::from_f64(
            &[d],
            (0..d).map(|i| -6.0 + 5.0 * (i as f64 / denom).powf(0.7 + 1.3 * ratio_0_to_1)),
        ),
    );
    store.insert(p("att.decay_a"), init::uniform(&[d, cfg.decay_rank], 1e-2, rng));
    store.insert(p("att.decay_b"), init::uniform(&[cfg.decay_rank, d], 1e-2, rng));
    store.insert(
        p("att.u"),
        init::from_f64(
            &[d],
            (0..d).map(|i| {
                ratio_0_to_1 * (1.0 - i as f64 / denom) + 0.1 * (((i + 1) % 3) as f64 - 1.0)
            }),
        ),
    );

    let std = 1.0 / (d as f64).sqrt();
    for w in ["w_r", "w_k", "w_v", "w_g"] {
        store.insert(p(&format!("att.{w}")), init::normal(&[d, d], std, rng));
    }
    store.insert(p("att.w_o"), init::normal(&[d, d], 0.5 * std, rng));
    store.insert(p("att.gn.weight"), Tensor::full(&[d], T::one()));
    store.insert(p("att.gn.bias"), Tensor::zeros(&[d]));

    store.insert(p("ffn.mu_k"), init::from_f64(&[d], mix(ratio_1_to_0)));
    store.insert(p("ffn.mu_r"), init::from_f64(&[d], mix(ratio_1_to_0)));
    store.insert(p("ffn.w_k"), init::normal(&[d, cfg.ffn_dim], std, rng));
    store.insert(
        p("ffn.w_v"),
        init::normal(&[cfg.ffn_dim, d], 0.5 / (cfg.ffn_dim as f64).sqrt(), rng),
    );
    store.insert(p("ffn.w_r"), init::normal(&[d, d], std, rng));
}

/// Graph handles for every parameter of one block.
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
    pub mu_x: Var,
    /// `(mu_i, A_i, B_i)` for r, k, v, w, g.
    pub mix: [(Var, Var, Var); 5],
    pub w0: Var,
    pub decay_a: Var,
    pub decay_b: Var,
    pub u: Var,
    pub w_r: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_g: Var,
    pub w_o: Var,
    pub gn: (Var, Var),
    pub ffn_mu_k: Var,
    pub ffn_mu_r: Var,
    pub ffn_w_k: Var,
    pub ffn_w_v: Var,
    pub ffn_w_r: Var,
}

impl BlockVars {
    pub fn load<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let mut p = |name: &str| g.param(store, &format!("{prefix}{name}"));
        let mut mix = Vec::with_capacity(5);
        for t in MIX_TARGETS {
            mix.push((
                p(&format!("att.mu_{t}"))?,
                p(&format!("att.lora_a.{t}"))?,
                p(&format!("att.lora_b.{t}"))?,
            ));
        }
        Ok(Self {
            ln1: (p("ln1.weight")?, p("ln1.bias")?),
            ln2: (p("ln2.weight")?, p("ln2.bias")?),
            mu_x: p("att.mu_x")?,
            mix: mix.try_into().map_err(|_| Error::contract("five mix targets"))?,
            w0: p("att.w0")?,
            decay_a: p("att.decay_a")?,
            decay_b: p("att.decay_b")?,
            u: p("att.u")?,
            w_r: p("att.w_r")?,
            w_k: p("att.w_k")?,
            w_v: p("att.w_v")?,
            w_g: p("att.w_g")?,
            w_o: p("att.w_o")?,
            gn: (p("att.gn.weight")?, p("att.gn.bias")?),
            ffn_mu_k: p("ffn.mu_k")?,
            ffn_mu_r: p("ffn.mu_r")?,
            ffn_w_k: p("ffn.w_k")?,
            ffn_w_v: p("ffn.w_v")?,
            ffn_w_r: p("ffn.w_r")?,
        })
    }
}

/// `x + (mu_i + tanh(m A) B) * diff` where `diff = x_prev - x` and `m` is the
/// shared first interpolation.
fn ddlerp_shared<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    diff: Var,
    m: Var,
    (mu, a, b): (Var, Var, Var),
) -> Result<Var> {
    let low = g.matmul(m, a)?;
    let low = g.tanh(low);
    let delta = g.matmul(low, b)?;
    let coef = g.add(delta, mu)?;
    let step = g.mul(diff, coef)?;
    g.add(x, step)
}

/// Data-dependent token-shift interpolation:
/// `m = x + mu_x (x_prev - x)`, result `x + (mu_i + tanh(m A) B) (x_prev - x)`.
#[allow(clippy::too_many_arguments)]
pub fn ddlerp<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    x_prev: Var,
    mu_x: Var,
    mu_i: Var,
    a: Var,
    b: Var,
) -> Result<Var> {
    let diff = g.sub(x_prev, x)?;
    let m = g.lerp(x, x_prev, mu_x)?;
    ddlerp_shared(g, x, diff, m, (mu_i, a, b))
}

fn last_row<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    t.row(t.rows() - 1).to_vec()
}

/// Time Mix over the rows of `x` (already layer-normed), in order, carrying
/// `state.ts_time` and `state.wkv`.
pub fn time_mix<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    state: &mut BlockState<T>,
    p: &BlockVars,
    cfg: &BlockConfig,
) -> Result<Var> {
    if g.value(x).rows() == 0 {
        return Err(Error::contract("time mix over an empty chunk"));
    }
    state.check(cfg.dim, cfg.heads)?;
    let prev = g.shift_rows(x, &state.ts_time)?;
    let diff = g.sub(prev, x)?;
    let m = g.lerp(x, prev, p.mu_x)?;
    let mut mixed = Vec::with_capacity(5);
    for &target in &p.mix {
        mixed.push(ddlerp_shared(g, x, diff, m, target)?);
    }
    let [xr, xk, xv, xw, xg]: [Var; 5] = mixed.try_into().expect("five");

    let r = g.matmul(xr, p.w_r)?;
    let k = g.matmul(xk, p.w_k)?;
    let v = g.matmul(xv, p.w_v)?;
    let gate = g.matmul(xg, p.w_g)?;
    let gate = g.silu(gate);

    let dlow = g.matmul(xw, p.decay_a)?;
    let dlow = g.tanh(dlow);
    let dd = g.matmul(dlow, p.decay_b)?;
    let d = g.add(dd, p.w0)?;
    let w = g.neg_exp_exp(d);

    let (y, wkv) = g.wkv(r, k, v, w, p.u, cfg.heads, &state.wkv)?;
    let eps = T::from_f64_lossy(cfg.norm_eps);
    let y = g.group_norm(y, p.gn.0, p.gn.1, cfg.heads, eps)?;
    let y = g.mul(y, gate)?;
    let out = g.matmul(y, p.w_o)?;

    state.wkv = wkv;
    state.ts_time = last_row(g.value(x));
    Ok(out)
}

/// Channel Mix over the rows of `x` (already layer-normed), carrying
/// `state.ts_chan`.
pub fn channel_mix<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    state: &mut BlockState<T>,
    p: &BlockVars,
    cfg: &BlockConfig,
) -> Result<Var> {
    if g.value(x).rows() == 0 {
        return Err(Error::contract("channel mix over an empty chunk"));
    }
    state.check(cfg.dim, cfg.heads)?;
    let prev = g.shift_rows(x, &state.ts_chan)?;
    let xk = g.lerp(x, prev, p.ffn_mu_k)?;
    let xr = g.lerp(x, prev, p.ffn_mu_r)?;
    let k = g.matmul(xk, p.ffn_w_k)?;
    let k = g.relu_squared(k);
    let kv = g.matmul(k, p.ffn_w_v)?;
    let r = g.matmul(xr, p.ffn_w_r)?;
    let r = g.sigmoid(r);
    let out = g.mul(r, kv)?;
    state.ts_chan = last_row(g.value(x));
    Ok(out)
}

/// Pre-norm residual block: `x + TimeMix(LN1 x)`, then `+ ChannelMix(LN2 .)`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    state: &mut BlockState<T>,
    p: &BlockVars,
    cfg: &BlockConfig,
) -> Result<Var> {
    let eps = T::from_f64_lossy(cfg.norm_eps);
    let a = g.layer_norm(x, p.ln1.0, p.ln1.1, eps)?;
    let tm = time_mix(g, a, state, p, cfg)?;
    let x1 = g.add(x, tm)?;
    let b = g.layer_norm(x1, p.ln2.0, p.ln2.1, eps)?;
    let cm = channel_mix(g, b, state, p, cfg)?;
    g.add(x1, cm)
}
