use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mtl::{Label, LabelSet, TaskSpec};

/// Witness counts at or above each edge fall into the next burden class.
pub const BURDEN_EDGES: [usize; 3] = [1, 50, 100];

const BACKGROUND_LEVEL: f32 = 0.05;
const TEXTURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSlideSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    /// Tile edge length in pixels.
    pub tile_px: usize,
    /// Witness probability per tissue tile in a positive slide (before the
    /// per-slide spread exponent).
    pub witness_rate: f64,
    /// Fraction of slides that are positive.
    pub prevalence: f64,
    /// Standard deviation of the Gaussian noise on regression labels.
    pub noise_sigma: f64,
    /// Fraction of tissue tiles rendered flat (removed by the variance filter).
    pub flat_rate: f64,
    /// Probability that each label is withheld.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSlideSpec {
    fn default() -> Self {
        Self {
            grid_w: 48,
            grid_h: 48,
            tile_px: 16,
            witness_rate: 0.05,
            prevalence: 0.5,
            noise_sigma: 0.005,
            flat_rate: 0.02,
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSlideSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(Error::config("slide grid has no tiles"));
        }
        if self.tile_px < 2 {
            return Err(Error::config("tiles need at least 2x2 pixels"));
        }
        for (name, v) in [
            ("witness_rate", self.witness_rate),
            ("prevalence", self.prevalence),
            ("flat_rate", self.flat_rate),
            ("missing_rate", self.missing_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// The four tasks every synthetic slide is labelled with.
pub fn synthetic_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::classification("witness", 2),
        TaskSpec::classification("burden", BURDEN_EDGES.len() + 1),
        TaskSpec::regression("fraction"),
        TaskSpec::regression("stain"),
    ]
}

pub fn burden_class(count: usize) -> usize {
    BURDEN_EDGES.iter().filter(|&&e| count >= e).count()
}

/// Grayscale tile image in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TileImage {
    pub gx: i32,
    pub gy: i32,
    pub px: usize,
    pub pixels: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideTruth {
    pub positive: bool,
    /// Tissue tiles that carry content (flat tiles excluded).
    pub tissue_tiles: usize,
    pub witness_count: usize,
    pub witness_fraction: f64,
    pub stain: f64,
    pub labels: LabelSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlide {
    pub tiles: Vec<TileImage>,
    /// Parallel to `tiles`.
    pub is_witness: Vec<bool>,
    pub truth: SlideTruth,
}

fn texture(kind: usize, x: usize, y: usize, px: usize, phase: f32) -> f32 {
    let (xf, yf) = (x as f32, y as f32);
    let tau = std::f32::consts::TAU;
    match kind {
        0 => (tau * (yf + phase) / 4.0).sin(),
        1 => (tau * (xf + yf + phase) / 6.0).sin() * (tau * (xf - yf) / 9.0).cos(),
        _ => {
            let c = px as f32 / 2.0;
            let r = ((xf - c).powi(2) + (yf - c * 0.5 - phase).powi(2)).sqrt();
            (tau * r / 5.0).cos()
        }
    }
}

fn witness_pattern(x: usize, y: usize, px: usize) -> f32 {
    let c = (px as f32 - 1.0) / 2.0;
    let r = ((x as f32 - c).powi(2) + (y as f32 - c).powi(2)).sqrt();
    let outer = px as f32 * 0.42;
    let inner = px as f32 * 0.22;
    if r < inner {
        0.95
    } else if r < outer {
        0.3
    } else {
        0.9
    }
}

/// Renders one synthetic slide: an elliptical tissue region on a near-black
/// background, textured tissue tiles, and witness tiles carrying a ring
/// pattern.
pub fn generate_slide(spec: &SyntheticSlideSpec) -> Result<SyntheticSlide> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (gw, gh, px) = (spec.grid_w, spec.grid_h, spec.tile_px);

    let cx = gw as f64 / 2.0 + rng.random_range(-0.05..=0.05) * gw as f64;
    let cy = gh as f64 / 2.0 + rng.random_range(-0.05..=0.05) * gh as f64;
    let ax = (gw as f64 / 2.0 * rng.random_range(0.6..=0.95)).max(0.75);
    let ay = (gh as f64 / 2.0 * rng.random_range(0.6..=0.95)).max(0.75);
    let mix: [f64; TEXTURES] = Dirichlet::new([2.0; TEXTURES])
        .expect("positive concentration")
        .sample(&mut rng);
    let stain = rng.random_range(0.8..=1.2);
    let positive = rng.random_bool(spec.prevalence);
    let fraction_target = if positive {
        spec.witness_rate.powf(rng.random_range(0.7..=1.3))
    } else {
        0.0
    };
    let pixel_noise = Normal::new(0.0f32, 0.05).expect("finite");
    let bg_noise = Normal::new(0.0f32, 0.02).expect("finite");

    let mut tiles = Vec::with_capacity(gw * gh);
    let mut is_witness = Vec::with_capacity(gw * gh);
    let mut tissue_tiles = 0;
    let mut witness_count = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            let dx = (gx as f64 + 0.5 - cx) / ax;
            let dy = (gy as f64 + 0.5 - cy) / ay;
            let tissue = dx * dx + dy * dy <= 1.0;
            let mut pixels = Vec::with_capacity(px * px);
            let mut witness = false;
            if !tissue {
                for _ in 0..px * px {
                    pixels.push((BACKGROUND_LEVEL + bg_noise.sample(&mut rng).abs()).clamp(0.0, 1.0));
                }
            } else if rng.random_bool(spec.flat_rate) {
                pixels.resize(px * px, (0.6 * stain) as f32);
            } else {
                tissue_tiles += 1;
                witness = rng.random_bool(fraction_target);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let kind = mix
                    .iter()
                    .position(|&p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(TEXTURES - 1);
                let phase = rng.random_range(0.0..4.0f32);
                for y in 0..px {
                    for x in 0..px {
                        let base = if witness {
                            witness_pattern(x, y, px)
                        } else {
                            0.55 + 0.25 * texture(kind, x, y, px, phase)
                        };
                        let v = base * stain as f32 + pixel_noise.sample(&mut rng);
                        pixels.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            witness_count += witness as usize;
            is_witness.push(witness);
            tiles.push(TileImage {
                gx: gx as i32,
                gy: gy as i32,
                px,
                pixels,
            });
        }
    }

    let witness_fraction = if tissue_tiles == 0 {
        0.0
    } else {
        witness_count as f64 / tissue_tiles as f64
    };
    let label_noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite");
    let noise = |rng: &mut ChaCha8Rng| if spec.noise_sigma > 0.0 { label_noise.sample(rng) } else { 0.0 };
    let full = [
        Label::Class((witness_count > 0) as usize),
        Label::Class(burden_class(witness_count)),
        Label::Value(witness_fraction + noise(&mut rng)),
        Label::Value(stain + noise(&mut rng)),
    ];
    let labels = LabelSet(
        full.into_iter()
            .map(|l| (!rng.random_bool(spec.missing_rate)).then_some(l))
            .collect(),
    );
    Ok(SyntheticSlide {
        tiles,
        is_witness,
        truth: SlideTruth {
            positive,
            tissue_tiles,
            witness_count,
            witness_fraction,
            stain,
            labels,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub coverage_thresh: f64,
    pub var_thresh: f64,
    /// Pixels brighter than this count as tissue.
    pub intensity_split: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            coverage_thresh: 0.5,
            var_thresh: 0.01,
            intensity_split: 0.15,
        }
    }
}

/// Tissue coverage (fraction of pixels above the intensity split) and
/// population variance of a tile.
pub fn tile_stats(pixels: &[f32], intensity_split: f64) -> (f64, f64) {
    let n = pixels.len().max(1) as f64;
    let covered = pixels.iter().filter(|&&p| p as f64 > intensity_split).count() as f64 / n;
    let mean = pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var = pixels.iter().map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / n;
    (covered, var)
}

pub fn keep_tile(pixels: &[f32], cfg: &FilterConfig) -> bool {
    let (coverage, var) = tile_stats(pixels, cfg.intensity_split);
    coverage >= cfg.coverage_thresh && var >= cfg.var_thresh
}

/// Indices of the tiles that pass the coverage and variance filters.
pub fn filter_tiles(tiles: &[TileImage], cfg: &FilterConfig) -> Result<Vec<usize>> {
    let kept: Vec<usize> = tiles
        .iter()
        .enumerate()
        .filter(|(_, t)| keep_tile(&t.pixels, cfg))
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptySlide(format!(
            "all {} tiles removed by filtering",
            tiles.len()
        )));
    }
    Ok(kept)
}
