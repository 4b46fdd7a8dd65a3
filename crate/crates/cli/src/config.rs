use std::fs;
use std::path::{Path, PathBuf};

use pathrwkv::data::{DatasetSpec, FilterConfig, SampleMethod, SyntheticSlideSpec};
use pathrwkv::model::ModelConfig;
use pathrwkv::mtl::{MtlDesign, TaskSpec};
use pathrwkv::train::{EvalMode, EvalOptions, Precision, TrainConfig};
use pathrwkv::verify::VerifyLevel;
use pathrwkv::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Every setting of every command in one flat document. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // dataset generation
    pub data_dir: PathBuf,
    pub n_slides: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub tile_px: usize,
    pub witness_rate: f64,
    pub prevalence: f64,
    pub noise_sigma: f64,
    pub flat_rate: f64,
    pub missing_rate: f64,
    pub d_in: usize,
    pub embed_seed: u64,
    pub coverage_thresh: f64,
    pub var_thresh: f64,
    pub intensity_split: f64,

    // model; 0 picks the size-derived default
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub decay_rank: usize,
    pub ffn_dim: usize,
    pub use_pe: bool,
    pub mtl_design: MtlDesign,
    /// Task names to train; empty means every task of the dataset.
    pub tasks: Vec<String>,

    // training
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub max_n_tiles: usize,
    pub sampling: SampleMethod,
    pub precision: Precision,
    pub seed: u64,
    pub workers: usize,
    pub split_train: f64,
    pub split_val: f64,

    // inference and evaluation
    pub checkpoint: PathBuf,
    pub mode: EvalMode,
    pub bag_size: usize,

    // experiments
    pub ablation_grid: Vec<String>,
    pub bench_n: Vec<usize>,
    pub bench_quadratic_max_n: usize,
    pub bench_reps: usize,
    pub verify_level: VerifyLevel,
}

impl Default for RunConfig {
    fn default() -> Self {
        let slide = SyntheticSlideSpec::default();
        let filter = FilterConfig::default();
        let data = DatasetSpec::default();
        let train = TrainConfig::default();
        let eval = EvalOptions::default();
        Self {
            data_dir: PathBuf::from("data"),
            n_slides: data.n_slides,
            grid_w: slide.grid_w,
            grid_h: slide.grid_h,
            tile_px: slide.tile_px,
            witness_rate: slide.witness_rate,
            prevalence: slide.prevalence,
            noise_sigma: slide.noise_sigma,
            flat_rate: slide.flat_rate,
            missing_rate: slide.missing_rate,
            d_in: data.d_in,
            embed_seed: data.embed_seed,
            coverage_thresh: filter.coverage_thresh,
            var_thresh: filter.var_thresh,
            intensity_split: filter.intensity_split,
            dim: 64,
            depth: 2,
            heads: 0,
            lora_rank: 32,
            decay_rank: 64,
            ffn_dim: 0,
            use_pe: true,
            mtl_design: MtlDesign::Ours,
            tasks: Vec::new(),
            epochs: train.epochs,
            warmup_epochs: train.warmup_epochs,
            base_lr: train.base_lr,
            lr_floor: train.lr_floor,
            batch_size: train.batch_size,
            max_n_tiles: train.max_n_tiles,
            sampling: train.sampling,
            precision: train.precision,
            seed: train.seed,
            workers: train.workers,
            split_train: 0.7,
            split_val: 0.1,
            checkpoint: PathBuf::from("model.prwk"),
            mode: eval.mode,
            bag_size: eval.bag_size,
            ablation_grid: Vec::new(),
            bench_n: vec![1024, 2048, 4096, 8192, 16384, 32768],
            bench_quadratic_max_n: 4096,
            bench_reps: 3,
            verify_level: VerifyLevel::Fast,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical TOML: every key, in declaration order.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config not representable as TOML: {e}")))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical()?.as_bytes()))
    }

    /// TOML integers are signed 64-bit, so larger seeds could not be written
    /// back into a config file.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("seed", self.seed), ("embed_seed", self.embed_seed)] {
            if i64::try_from(v).is_err() {
                return Err(Error::Config(format!("{name} {v} exceeds {}", i64::MAX)));
            }
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_slides: self.n_slides,
            slide: SyntheticSlideSpec {
                grid_w: self.grid_w,
                grid_h: self.grid_h,
                tile_px: self.tile_px,
                witness_rate: self.witness_rate,
                prevalence: self.prevalence,
                noise_sigma: self.noise_sigma,
                flat_rate: self.flat_rate,
                missing_rate: self.missing_rate,
                seed: self.seed,
            },
            filter: FilterConfig {
                coverage_thresh: self.coverage_thresh,
                var_thresh: self.var_thresh,
                intensity_split: self.intensity_split,
            },
            d_in: self.d_in,
            embed_seed: self.embed_seed,
        }
    }

    pub fn model_config(&self, d_in: usize, tasks: Vec<TaskSpec>) -> ModelConfig {
        let mut cfg = ModelConfig::new(d_in, self.dim, tasks);
        cfg.depth = self.depth;
        if self.heads > 0 {
            cfg.heads = self.heads;
        }
        if self.ffn_dim > 0 {
            cfg.ffn_dim = self.ffn_dim;
        }
        cfg.lora_rank = self.lora_rank;
        cfg.decay_rank = self.decay_rank;
        cfg.use_pe = self.use_pe;
        cfg.mtl_design = self.mtl_design;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            base_lr: self.base_lr,
            lr_floor: self.lr_floor,
            batch_size: self.batch_size,
            max_n_tiles: self.max_n_tiles,
            sampling: self.sampling,
            precision: self.precision,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn eval_options(&self, mode: EvalMode) -> EvalOptions {
        EvalOptions {
            mode,
            max_n_tiles: self.max_n_tiles,
            sampling: self.sampling,
            bag_size: self.bag_size,
            seed: self.seed,
            workers: self.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_library_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.dataset_spec(), DatasetSpec::default());
        assert_eq!((c.epochs, c.base_lr, c.max_n_tiles, c.batch_size), (100, 1e-4, 2000, 4));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("epochs = 3\nepochz = 4\n"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_key_order_and_spelled_out_defaults() {
        let a = RunConfig::from_toml("epochs = 3\nseed = 9\n").unwrap();
        let b = RunConfig::from_toml("seed = 9\n\nepochs = 3 # three\n").unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig::from_toml(&a.canonical().unwrap()).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.canonical().unwrap(), c.canonical().unwrap());
        assert_ne!(a.hash().unwrap(), RunConfig::default().hash().unwrap());
    }

    proptest::proptest! {
        #[test]
        fn canonical_form_round_trips(seed in 0..=i64::MAX as u64, epochs in 1usize..500, lr in 1e-6f64..1.0, pe: bool, k in 1usize..6) {
            let mut c = RunConfig { seed, epochs, base_lr: lr, use_pe: pe, ..Default::default() };
            c.bench_n = (0..k).map(|i| 64 << i).collect();
            let back = RunConfig::from_toml(&c.canonical().unwrap()).unwrap();
            proptest::prop_assert_eq!(&back, &c);
            proptest::prop_assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        }
    }

    #[test]
    fn seeds_beyond_toml_range_are_config_errors() {
        let c = RunConfig { seed: u64::MAX, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(matches!(c.hash(), Err(Error::Config(_))));
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn enums_parse_from_snake_case() {
        let c = RunConfig::from_toml("sampling = \"z_order\"\nmode = \"sampled\"\nprecision = \"f64\"\nmtl_design = \"through\"\n").unwrap();
        assert_eq!(c.sampling, SampleMethod::ZOrder);
        assert_eq!(c.mode, EvalMode::Sampled);
        assert_eq!(c.precision, Precision::F64);
        assert_eq!(c.mtl_design, MtlDesign::Through);
    }
}
