//! The slide-level model: tile feature projection plus positional embedding,
//! a stack of RWKV blocks, an output norm and the multi-task module.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{positional_embedding, TileBag};
use crate::error::{Error, Result};
use crate::mtl::{head_forward, mtl_project, select_max_tile, MtlDesign, TaskKind, TaskSpec};
use crate::numerics::{decode_checkpoint, encode_checkpoint, init, Graph, ParamStore, Scalar, Tensor, Var};
use crate::rwkv::{block_forward, init_block, BlockConfig, BlockVars, RwkvState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub decay_rank: usize,
    pub ffn_dim: usize,
    pub use_pe: bool,
    pub tasks: Vec<TaskSpec>,
    pub mtl_design: MtlDesign,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Defaults for everything except the input width, model width and tasks.
    pub fn new(d_in: usize, dim: usize, tasks: Vec<TaskSpec>) -> Self {
        Self {
            d_in,
            dim,
            depth: 2,
            heads: (dim / 64).max(1),
            lora_rank: 32,
            decay_rank: 64,
            ffn_dim: dim * 7 / 2,
            use_pe: true,
            tasks,
            mtl_design: MtlDesign::Ours,
            norm_eps: 1e-5,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            lora_rank: self.lora_rank,
            decay_rank: self.decay_rank,
            ffn_dim: self.ffn_dim,
            norm_eps: self.norm_eps,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.depth == 0 {
            return Err(Error::config("input width and depth must be positive"));
        }
        if self.dim % 4 != 0 {
            return Err(Error::config(format!(
                "model dimension {} must be divisible by 4 for the positional embedding",
                self.dim
            )));
        }
        self.block().validate()?;
        if self.tasks.is_empty() {
            return Err(Error::config("model needs at least one task"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate()?;
            if self.tasks[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::config(format!("task `{}` listed twice", t.name)));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Standardisation of a regression target: `z = (y - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl TargetStats {
    /// Mean and standard deviation of `values`; a degenerate spread falls
    /// back to 1.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn restore(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// A task prediction in label units.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutput {
    Probabilities(Vec<f64>),
    Value(f64),
}

impl TaskOutput {
    /// Most probable class of a classification output.
    pub fn predicted_class(&self) -> Option<usize> {
        match self {
            TaskOutput::Probabilities(p) => p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i),
            TaskOutput::Value(_) => None,
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

const STATS_PREFIX: &str = "stats.";

#[derive(Clone, Debug)]
pub struct PathRwkv<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    /// One entry per task; only regression tasks use theirs.
    pub target_stats: Vec<TargetStats>,
}

fn block_prefix(b: usize) -> String {
    format!("blocks.{b}.")
}

impl<T: Scalar> PathRwkv<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        store.insert("embed.weight", init::normal(&[cfg.d_in, d], 1.0 / (cfg.d_in as f64).sqrt(), &mut rng));
        store.insert("embed.bias", Tensor::zeros(&[d]));
        let bc = cfg.block();
        for b in 0..cfg.depth {
            init_block(&mut store, &block_prefix(b), &bc, b, cfg.depth, &mut rng);
        }
        store.insert("ln_out.weight", Tensor::full(&[d], T::one()));
        store.insert("ln_out.bias", Tensor::zeros(&[d]));
        let t = cfg.num_tasks();
        match cfg.mtl_design {
            MtlDesign::Ours => {
                store.insert("mtl.proj.weight", init::normal(&[d, d * t], 1.0 / (d as f64).sqrt(), &mut rng));
                store.insert("mtl.proj.bias", Tensor::zeros(&[d * t]));
            }
            MtlDesign::Through => {
                store.insert("mtl.tokens", init::normal(&[t, d], 1.0, &mut rng));
            }
            MtlDesign::To => {}
        }
        for task in &cfg.tasks {
            let k = task.outputs();
            store.insert(
                format!("head.{}.weight", task.name),
                init::normal(&[d, k], 0.1 / (d as f64).sqrt(), &mut rng),
            );
            store.insert(format!("head.{}.bias", task.name), Tensor::zeros(&[k]));
        }
        let target_stats = vec![TargetStats::default(); t];
        Ok(Self {
            cfg,
            store,
            target_stats,
        })
    }

    pub fn cast<U: Scalar>(&self) -> PathRwkv<U> {
        PathRwkv {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            target_stats: self.target_stats.clone(),
        }
    }

    pub fn fresh_state(&self) -> RwkvState<T> {
        RwkvState::new(self.cfg.depth, self.cfg.dim, self.cfg.heads)
    }

    fn check_input(&self, feats: &Tensor<T>, coords: &[(i32, i32)]) -> Result<()> {
        if feats.rank() != 2 || feats.cols() != self.cfg.d_in {
            return Err(Error::format(
                0,
                format!(
                    "tile features {:?} do not match model input width {}",
                    feats.shape(),
                    self.cfg.d_in
                ),
            ));
        }
        if feats.rows() != coords.len() {
            return Err(Error::dim(format!(
                "{} feature rows with {} coordinates",
                feats.rows(),
                coords.len()
            )));
        }
        if feats.rows() == 0 {
            return Err(Error::EmptySlide("no tiles to embed".into()));
        }
        Ok(())
    }

    /// `X W + b + PE(coords)` as a graph node.
    pub fn embed(&self, g: &mut Graph<T>, feats: &Tensor<T>, coords: &[(i32, i32)]) -> Result<Var> {
        self.check_input(feats, coords)?;
        let x = g.constant(feats.clone());
        let w = g.param(&self.store, "embed.weight")?;
        let b = g.param(&self.store, "embed.bias")?;
        let h = g.matmul(x, w)?;
        let h = g.add(h, b)?;
        if !self.cfg.use_pe {
            return Ok(h);
        }
        let pe = g.constant(positional_embedding(coords, self.cfg.dim, true)?);
        g.add(h, pe)
    }

    /// Runs the block stack over `x` carrying `state`, then the output norm.
    pub fn backbone(&self, g: &mut Graph<T>, x: Var, state: &mut RwkvState<T>) -> Result<Var> {
        let bc = self.cfg.block();
        let mut h = x;
        for b in 0..self.cfg.depth {
            let vars = BlockVars::load(g, &self.store, &block_prefix(b))?;
            h = block_forward(g, h, state.slot(b)?, &vars, &bc)?;
        }
        let gamma = g.param(&self.store, "ln_out.weight")?;
        let beta = g.param(&self.store, "ln_out.bias")?;
        g.layer_norm(h, gamma, beta, T::from_f64_lossy(self.cfg.norm_eps))
    }

    /// Per-task per-tile features `[n, D]` of the projection design.
    pub fn task_tile_features(&self, g: &mut Graph<T>, h: Var) -> Result<Vec<Var>> {
        let w = g.param(&self.store, "mtl.proj.weight")?;
        let b = g.param(&self.store, "mtl.proj.bias")?;
        mtl_project(g, h, w, b, self.cfg.num_tasks())
    }

    /// The learned `[T, D]` task tokens of the through design.
    fn token_rows(&self, g: &mut Graph<T>) -> Result<Var> {
        g.param(&self.store, "mtl.tokens")
    }

    /// One `[D]` pooled feature per task, computed over the whole slide in a
    /// single pass with a fresh state.
    pub fn pooled_features(&self, g: &mut Graph<T>, feats: &Tensor<T>, coords: &[(i32, i32)]) -> Result<Vec<Var>> {
        let x = self.embed(g, feats, coords)?;
        self.pooled_from_embedded(g, x)
    }

    /// As [`Self::pooled_features`], starting from already embedded rows.
    pub fn pooled_from_embedded(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut state = self.fresh_state();
        let t = self.cfg.num_tasks();
        match self.cfg.mtl_design {
            MtlDesign::Ours => {
                let h = self.backbone(g, x, &mut state)?;
                let parts = self.task_tile_features(g, h)?;
                parts.into_iter().map(|p| select_max_tile(g, p)).collect()
            }
            MtlDesign::To => {
                let h = self.backbone(g, x, &mut state)?;
                let m = g.col_mean(h)?;
                Ok(vec![m; t])
            }
            MtlDesign::Through => {
                let n = g.shape(x)[0];
                let tokens = self.token_rows(g)?;
                let x = g.concat_rows(x, tokens)?;
                let h = self.backbone(g, x, &mut state)?;
                (0..t)
                    .map(|i| {
                        let row = g.slice_rows(h, n + i, 1)?;
                        g.reshape(row, &[self.cfg.dim])
                    })
                    .collect()
            }
        }
    }

    /// Embedded rows `X W + b + PE` as a plain tensor.
    pub fn embed_tensor(&self, feats: &Tensor<T>, coords: &[(i32, i32)]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = self.embed(&mut g, feats, coords)?;
        Ok(g.value(x).clone())
    }

    /// Head outputs (logits or standardised values) from pooled features.
    pub fn heads(&self, g: &mut Graph<T>, pooled: &[Var]) -> Result<Vec<Var>> {
        self.cfg
            .tasks
            .iter()
            .zip(pooled)
            .map(|(task, &f)| {
                let w = g.param(&self.store, &format!("head.{}.weight", task.name))?;
                let b = g.param(&self.store, &format!("head.{}.bias", task.name))?;
                head_forward(g, f, w, b)
            })
            .collect()
    }

    /// Single-pass forward over a whole tile sequence.
    pub fn forward(&self, g: &mut Graph<T>, feats: &Tensor<T>, coords: &[(i32, i32)]) -> Result<Vec<Var>> {
        let pooled = self.pooled_features(g, feats, coords)?;
        self.heads(g, &pooled)
    }

    pub fn forward_bag(&self, g: &mut Graph<T>, bag: &TileBag) -> Result<Vec<Var>> {
        self.forward(g, &bag.features.cast(), &bag.coords)
    }

    /// Head outputs for plain pooled feature vectors.
    pub fn head_outputs(&self, pooled: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = pooled
            .iter()
            .map(|p| g.constant(Tensor::new(&[p.len()], p.clone()).expect("vector")))
            .collect();
        let out = self.heads(&mut g, &vars)?;
        Ok(out.into_iter().map(|v| g.value(v).data().to_vec()).collect())
    }

    /// Converts raw head outputs into probabilities or label-unit values.
    pub fn interpret(&self, raw: &[Vec<T>]) -> Vec<TaskOutput> {
        self.cfg
            .tasks
            .iter()
            .zip(raw)
            .zip(&self.target_stats)
            .map(|((task, r), stats)| {
                let r: Vec<f64> = r.iter().map(|x| x.as_f64()).collect();
                match task.kind {
                    TaskKind::Classification { .. } => TaskOutput::Probabilities(softmax(&r)),
                    TaskKind::Regression => TaskOutput::Value(stats.restore(r[0])),
                }
            })
            .collect()
    }

    /// Predictions over all tiles in one pass (no chunking).
    pub fn predict_full(&self, feats: &Tensor<T>, coords: &[(i32, i32)]) -> Result<Vec<TaskOutput>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, feats, coords)?;
        let raw: Vec<Vec<T>> = out.iter().map(|&v| g.value(v).data().to_vec()).collect();
        Ok(self.interpret(&raw))
    }

    /// Checkpoint bytes: parameters plus `stats.<task>` entries.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut store = self.store.clone();
        for (task, s) in self.cfg.tasks.iter().zip(&self.target_stats) {
            store.insert(
                format!("{STATS_PREFIX}{}", task.name),
                init::from_f64(&[2], [s.mean, s.std]),
            );
        }
        encode_checkpoint(&store)
    }

    pub fn from_checkpoint(cfg: ModelConfig, bytes: &[u8]) -> Result<Self> {
        let reference = Self::init(cfg.clone(), 0)?;
        let mut loaded = decode_checkpoint::<T>(bytes)?;
        let mut target_stats = Vec::with_capacity(cfg.num_tasks());
        for task in &cfg.tasks {
            let name = format!("{STATS_PREFIX}{}", task.name);
            let s = loaded.get(&name).map(|t| t.data().to_vec());
            target_stats.push(match s.as_deref() {
                Some([m, s]) => TargetStats {
                    mean: m.as_f64(),
                    std: s.as_f64(),
                },
                _ => TargetStats::default(),
            });
        }
        let mut store = ParamStore::new();
        for (name, t) in reference.store.iter() {
            let got = loaded
                .get_mut(name)
                .ok_or_else(|| Error::format(0, format!("checkpoint lacks parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::format(
                    0,
                    format!("parameter `{name}` has shape {:?}, model expects {:?}", got.shape(), t.shape()),
                ));
            }
            store.insert(name, got.clone());
        }
        Ok(Self {
            cfg,
            store,
            target_stats,
        })
    }

    /// Writes the checkpoint and a JSON config sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))?;
        let side = config_sidecar(path);
        let json = serde_json::to_string_pretty(&self.cfg).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = config_sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", side.display())))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(cfg, &bytes)
    }
}

pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    checkpoint.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtl::TaskSpec;

    pub(crate) fn tiny(design: MtlDesign) -> ModelConfig {
        ModelConfig {
            d_in: 6,
            dim: 8,
            depth: 2,
            heads: 2,
            lora_rank: 3,
            decay_rank: 4,
            ffn_dim: 12,
            use_pe: true,
            tasks: vec![TaskSpec::classification("c", 3), TaskSpec::regression("r")],
            mtl_design: design,
            norm_eps: 1e-5,
        }
    }

    fn input(n: usize) -> (Tensor<f64>, Vec<(i32, i32)>) {
        (
            Tensor::from_fn(&[n, 6], |i| ((i * 7 % 11) as f64 * 0.3).sin()),
            (0..n as i32).map(|i| (i % 5, i / 5)).collect(),
        )
    }

    #[test]
    fn forward_shapes_for_every_design() {
        for design in MtlDesign::ALL {
            let m = PathRwkv::<f64>::init(tiny(design), 1).unwrap();
            let (x, c) = input(5);
            let mut g = Graph::inference();
            let out = m.forward(&mut g, &x, &c).unwrap();
            assert_eq!(g.shape(out[0]), [3]);
            assert_eq!(g.shape(out[1]), [1]);
        }
    }

    #[test]
    fn through_design_lengthens_sequence_by_task_count() {
        let m = PathRwkv::<f64>::init(tiny(MtlDesign::Through), 1).unwrap();
        let (x, c) = input(4);
        let mut g = Graph::inference();
        let e = m.embed(&mut g, &x, &c).unwrap();
        let tokens = m.token_rows(&mut g).unwrap();
        let joined = g.concat_rows(e, tokens).unwrap();
        assert_eq!(g.shape(joined)[0], 4 + 2);
    }

    #[test]
    fn input_width_mismatch_is_format_error() {
        let m = PathRwkv::<f64>::init(tiny(MtlDesign::Ours), 1).unwrap();
        let x = Tensor::zeros(&[2, 5]);
        let mut g = Graph::inference();
        assert!(matches!(
            m.forward(&mut g, &x, &[(0, 0), (1, 0)]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_keeps_params_and_stats() {
        let mut m = PathRwkv::<f32>::init(tiny(MtlDesign::Ours), 3).unwrap();
        m.target_stats[1] = TargetStats { mean: 0.25, std: 2.0 };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.prwk");
        m.save(&p).unwrap();
        let back = PathRwkv::<f32>::load(&p).unwrap();
        assert_eq!(back.store.len(), m.store.len());
        for (name, t) in m.store.iter() {
            assert_eq!(back.store.get(name).unwrap().data(), t.data());
        }
        assert_eq!(back.target_stats, m.target_stats);
    }

    #[test]
    fn checkpoint_for_other_config_rejected() {
        let m = PathRwkv::<f32>::init(tiny(MtlDesign::Ours), 3).unwrap();
        let mut other = tiny(MtlDesign::Ours);
        other.d_in = 7;
        assert!(PathRwkv::<f32>::from_checkpoint(other, &m.to_checkpoint()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(MtlDesign::Ours);
        c.dim = 6;
        c.heads = 1;
        assert!(c.validate().is_err());
        let mut c = tiny(MtlDesign::Ours);
        c.tasks.push(TaskSpec::regression("r"));
        assert!(c.validate().is_err());
        let mut c = tiny(MtlDesign::Ours);
        c.tasks.clear();
        assert!(c.validate().is_err());
        let d = ModelConfig::new(384, 1024, vec![TaskSpec::regression("x")]);
        assert_eq!(d.heads, 16);
        assert!(d.validate().is_ok());
    }

    #[test]
    fn target_stats_round_trip() {
        let s = TargetStats::fit(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(s.restore(s.standardize(7.5)), 7.5);
        assert_eq!(TargetStats::fit(&[4.0, 4.0]).std, 1.0);
    }
}
