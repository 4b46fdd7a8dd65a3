use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, Scalar, Tensor};

pub const DEFAULT_EMBED_DIM: usize = 384;
pub const DEFAULT_EMBED_SEED: u64 = 0x0e3b_ed5e;

/// Stand-in for a pretrained tile encoder: a fixed random projection of the
/// flattened pixels plus bias, squashed by `tanh`.
#[derive(Clone, Debug)]
pub struct StubEmbedder {
    pixels: usize,
    dim: usize,
    /// `[pixels, dim]`
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl StubEmbedder {
    pub fn new(tile_px: usize, dim: usize, seed: u64) -> Self {
        let pixels = tile_px * tile_px;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight: Tensor<f32> = init::normal(&[pixels, dim], 2.0 / (pixels as f64).sqrt(), &mut rng);
        let bias: Tensor<f32> = init::normal(&[dim], 0.5, &mut rng);
        Self {
            pixels,
            dim,
            weight: weight.into_data(),
            bias: bias.into_data(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, pixels: &[f32]) -> Result<Vec<f32>> {
        Ok(self.embed_batch(&[pixels])?.into_data())
    }

    /// Embeds several tiles at once, giving `[tiles, dim]`.
    pub fn embed_batch(&self, tiles: &[&[f32]]) -> Result<Tensor<f32>> {
        let n = tiles.len();
        let mut flat = Vec::with_capacity(n * self.pixels);
        for t in tiles {
            if t.len() != self.pixels {
                return Err(Error::dim(format!(
                    "embedder built for {} pixels, tile has {}",
                    self.pixels,
                    t.len()
                )));
            }
            flat.extend_from_slice(t);
        }
        let mut out: Vec<f32> = (0..n).flat_map(|_| self.bias.iter().copied()).collect();
        let (p, d) = (self.pixels as isize, self.dim as isize);
        f32::gemm(
            n,
            self.pixels,
            self.dim,
            1.0,
            &flat,
            (p, 1),
            &self.weight,
            (d, 1),
            1.0,
            &mut out,
            (d, 1),
        );
        out.iter_mut().for_each(|x| *x = x.tanh());
        Tensor::new(&[n, self.dim], out)
    }
}

/// Frequencies shared by both axes: `10000^(-k / F)` for `k < F = dim / 4`.
fn frequencies(dim: usize) -> Vec<f64> {
    let f = dim / 4;
    (0..f).map(|k| 10000f64.powf(-(k as f64) / f as f64)).collect()
}

/// Two-dimensional sinusoidal encoding of grid coordinates. Each row is
/// `[sin(gx f), cos(gx f), sin(gy f), cos(gy f)]` over `dim / 4`
/// frequencies. With `enabled = false` the result is all zeros.
pub fn positional_embedding<T: Scalar>(coords: &[(i32, i32)], dim: usize, enabled: bool) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!(
            "positional embedding needs a dimension divisible by 4, got {dim}"
        )));
    }
    let mut out = Tensor::zeros(&[coords.len(), dim]);
    if !enabled {
        return Ok(out);
    }
    let freqs = frequencies(dim);
    let f = freqs.len();
    for (i, &(gx, gy)) in coords.iter().enumerate() {
        let row = out.row_mut(i);
        for (k, &w) in freqs.iter().enumerate() {
            let (ax, ay) = (gx as f64 * w, gy as f64 * w);
            row[k] = T::from_f64_lossy(ax.sin());
            row[f + k] = T::from_f64_lossy(ax.cos());
            row[2 * f + k] = T::from_f64_lossy(ay.sin());
            row[3 * f + k] = T::from_f64_lossy(ay.cos());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn zero_image_embeds_to_tanh_bias() {
        let e = StubEmbedder::new(4, 16, 1);
        let v = e.embed(&[0.0; 16]).unwrap();
        let expect: Vec<f32> = e.bias.iter().map(|b| b.tanh()).collect();
        assert_eq!(v, expect);
    }

    #[test]
    fn embedding_is_deterministic_and_matches_loop() {
        let e = StubEmbedder::new(4, 8, 2);
        let tile: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let a = e.embed(&tile).unwrap();
        assert_eq!(a, StubEmbedder::new(4, 8, 2).embed(&tile).unwrap());
        for j in 0..8 {
            let mut acc = e.bias[j] as f64;
            for (p, &x) in tile.iter().enumerate() {
                acc += x as f64 * e.weight[p * 8 + j] as f64;
            }
            assert!((a[j] as f64 - acc.tanh()).abs() < 1e-5);
        }
        assert!(e.embed(&tile[..15]).is_err());
    }

    #[test]
    fn origin_has_zero_sines_and_unit_cosines() {
        let pe = positional_embedding::<f64>(&[(0, 0)], 16, true).unwrap();
        let row = pe.row(0);
        assert!(row[0..4].iter().all(|&x| x == 0.0));
        assert!(row[4..8].iter().all(|&x| x == 1.0));
        assert!(row[8..12].iter().all(|&x| x == 0.0));
        assert!(row[12..16].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn encodings_are_distinct_over_grid() {
        let coords: Vec<(i32, i32)> = (0..64).flat_map(|y| (0..64).map(move |x| (x, y))).collect();
        let pe = positional_embedding::<f64>(&coords, 32, true).unwrap();
        let keys: HashSet<Vec<u64>> = (0..coords.len())
            .map(|i| pe.row(i).iter().map(|x| (x * 1e9).round() as i64 as u64).collect())
            .collect();
        assert_eq!(keys.len(), coords.len());
    }

    #[test]
    fn disabled_is_zero_and_bad_dim_rejected() {
        let pe = positional_embedding::<f32>(&[(3, 4), (1, 1)], 8, false).unwrap();
        assert!(pe.data().iter().all(|&x| x == 0.0));
        assert!(matches!(
            positional_embedding::<f32>(&[(0, 0)], 10, true),
            Err(Error::Config(_))
        ));
    }
}
