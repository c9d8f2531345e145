//! Minimal f64 neural-network toolkit with explicit analytic gradients.
//!
//! Layers are stateless: parameters live in a central [`ParamSet`] keyed by
//! [`ParamId`], forward passes return the caches their backward passes need,
//! and gradients accumulate into a [`GradSet`] with the same layout. The flat
//! indexing on `ParamSet` exists so finite-difference checks can perturb any
//! single scalar parameter.

mod adam;
mod layers;

pub use adam::Adam;
pub use layers::{col2im, im2col, Conv2d, Conv2dCache, Film, FilmCache, Linear, Upsample2x};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Handle to one named tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Weight initialization rule.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    FanInUniform { fan_in: usize },
}

/// Named tensor store for one network.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha12Rng,
    ) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let tensor = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::FanInUniform { fan_in } => {
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut t = ArrayD::zeros(IxDyn(shape));
                for v in t.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
                t
            }
        };
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Replaces a tensor wholesale; shape must match (checkpoint loading).
    pub fn load_named(&mut self, name: &str, tensor: ArrayD<f64>) -> Result<(), String> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.tensors[idx].shape() != tensor.shape() {
            return Err(format!(
                "shape mismatch for {name}: have {:?}, got {:?}",
                self.tensors[idx].shape(),
                tensor.shape()
            ));
        }
        self.tensors[idx] = tensor;
        Ok(())
    }

    pub fn zeros_like(&self) -> GradSet {
        GradSet {
            bufs: self
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    // Flat scalar access for finite-difference checks.

    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in &self.tensors {
            if idx < t.len() {
                return *t.iter().nth(idx).expect("index in range");
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for t in &mut self.tensors {
            if idx < t.len() {
                *t.iter_mut().nth(idx).expect("index in range") = value;
                return;
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator matching a [`ParamSet`] layout.
#[derive(Debug, Clone)]
pub struct GradSet {
    bufs: Vec<ArrayD<f64>>,
}

impl GradSet {
    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.bufs[id.0]
    }

    pub fn add(&mut self, id: ParamId, contribution: &ArrayD<f64>) {
        self.bufs[id.0] += contribution;
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            b.mapv_inplace(|v| v * factor);
        }
    }

    /// Accumulates another gradient set (fixed order keeps training
    /// deterministic regardless of worker count).
    pub fn accumulate(&mut self, other: &GradSet) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            *a += b;
        }
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in &self.bufs {
            if idx < t.len() {
                return *t.iter().nth(idx).expect("index in range");
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn l2_norm(&self) -> f64 {
        self.bufs
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Leaky ReLU used throughout the codec trunks.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Backward of leaky ReLU given its input.
pub fn leaky_relu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    gy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
    gx
}

pub fn softplus(x: f64) -> f64 {
    // Numerically stable log(1 + e^x).
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_derivative(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Max relative error between an analytic gradient and central finite
/// differences of `loss` over every parameter scalar.
pub fn finite_difference_check<F>(
    params: &mut ParamSet,
    analytic: &GradSet,
    step: f64,
    mut loss: F,
) -> f64
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut worst = 0.0f64;
    for idx in 0..params.flat_len() {
        let original = params.get_flat(idx);
        params.set_flat(idx, original + step);
        let plus = loss(params);
        params.set_flat(idx, original - step);
        let minus = loss(params);
        params.set_flat(idx, original);
        let fd = (plus - minus) / (2.0 * step);
        let an = analytic.get_flat(idx);
        let denom = an.abs().max(fd.abs()).max(1e-3);
        worst = worst.max((an - fd).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_derive;

    #[test]
    fn register_and_flat_access_roundtrip() {
        let mut rng = rng_derive(1, &[0]).rng();
        let mut ps = ParamSet::new();
        let a = ps.register("a", &[2, 3], Init::FanInUniform { fan_in: 3 }, &mut rng);
        let b = ps.register("b", &[4], Init::Zeros, &mut rng);
        assert_eq!(ps.flat_len(), 10);
        assert_eq!(ps.get(b).len(), 4);
        ps.set_flat(7, 5.5);
        assert_eq!(ps.get_flat(7), 5.5);
        assert_eq!(ps.get(b)[[1]], 5.5);
        assert_eq!(ps.get(a).shape(), &[2, 3]);
    }

    #[test]
    fn softplus_matches_limits() {
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-12);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
        assert!(softplus(-40.0) > 0.0);
        assert!((softplus_derivative(0.0) - 0.5).abs() < 1e-12);
    }
}
