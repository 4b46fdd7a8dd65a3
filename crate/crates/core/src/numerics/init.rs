use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::numerics::{Scalar, Tensor};

pub fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

pub fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

pub fn from_f64<T: Scalar>(shape: &[usize], values: impl IntoIterator<Item = f64>) -> Tensor<T> {
    let data: Vec<T> = values.into_iter().map(T::from_f64_lossy).collect();
    Tensor::new(shape, data).expect("caller supplies matching element count")
}
