use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TileBag;
use crate::error::{Error, Result};

/// Interleaves the bits of `x` (even positions) and `y` (odd positions).
pub fn morton(x: u32, y: u32) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut v = v as u64;
        v = (v | (v << 16)) & 0x0000_ffff_0000_ffff;
        v = (v | (v << 8)) & 0x00ff_00ff_00ff_00ff;
        v = (v | (v << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
        v = (v | (v << 2)) & 0x3333_3333_3333_3333;
        v = (v | (v << 1)) & 0x5555_5555_5555_5555;
        v
    }
    spread(x) | (spread(y) << 1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMethod {
    /// Uniform subset without replacement, shuffled.
    #[default]
    Random,
    /// Contiguous run of the Morton-sorted tiles from a seeded offset.
    ZOrder,
    /// Evenly strided picks along the Morton-sorted tiles.
    ZOrderStrided,
}

impl SampleMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMethod::Random => "random",
            SampleMethod::ZOrder => "z_order",
            SampleMethod::ZOrderStrided => "z_order_strided",
        }
    }
}

impl fmt::Display for SampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SampleMethod::Random),
            "z_order" | "zorder" => Ok(SampleMethod::ZOrder),
            "z_order_strided" => Ok(SampleMethod::ZOrderStrided),
            other => Err(Error::config(format!("unknown sampling method `{other}`"))),
        }
    }
}

/// Tile indices of `bag` sorted by Morton code (coordinates shifted to be
/// non-negative first).
pub fn morton_order(coords: &[(i32, i32)]) -> Vec<usize> {
    let min_x = coords.iter().map(|c| c.0).min().unwrap_or(0);
    let min_y = coords.iter().map(|c| c.1).min().unwrap_or(0);
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    idx.sort_by_key(|&i| {
        let (x, y) = coords[i];
        (morton((x - min_x) as u32, (y - min_y) as u32), i)
    });
    idx
}

/// Indices selected by `method` from a bag of `coords`, in processing order.
pub fn sample_indices(coords: &[(i32, i32)], max_n: usize, method: SampleMethod, seed: u64) -> Result<Vec<usize>> {
    if max_n == 0 {
        return Err(Error::contract("max_n must be at least 1"));
    }
    let n = coords.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match method {
        SampleMethod::Random => {
            let mut idx = if n <= max_n {
                (0..n).collect()
            } else {
                index::sample(&mut rng, n, max_n).into_vec()
            };
            idx.shuffle(&mut rng);
            idx
        }
        SampleMethod::ZOrder => {
            let sorted = morton_order(coords);
            if n <= max_n {
                sorted
            } else {
                let start = rng.random_range(0..=n - max_n);
                sorted[start..start + max_n].to_vec()
            }
        }
        SampleMethod::ZOrderStrided => {
            let sorted = morton_order(coords);
            if n <= max_n {
                sorted
            } else {
                let stride = n as f64 / max_n as f64;
                let offset: f64 = rng.random_range(0.0..stride);
                (0..max_n)
                    .map(|i| sorted[((offset + i as f64 * stride) as usize).min(n - 1)])
                    .collect()
            }
        }
    })
}

/// At most `max_n` tiles of `bag`, ordered as the method defines.
pub fn sample_tiles(bag: &TileBag, max_n: usize, method: SampleMethod, seed: u64) -> Result<TileBag> {
    let idx = sample_indices(&bag.coords, max_n, method, seed)?;
    bag.select(&idx)
}

/// Mean grid distance between consecutive tiles of a sequence.
pub fn mean_step_distance(coords: &[(i32, i32)]) -> f64 {
    if coords.len() < 2 {
        return 0.0;
    }
    let total: f64 = coords
        .windows(2)
        .map(|w| {
            let dx = (w[1].0 - w[0].0) as f64;
            let dy = (w[1].1 - w[0].1) as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    total / (coords.len() - 1) as f64
}
