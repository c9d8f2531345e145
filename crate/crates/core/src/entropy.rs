//! Gaussian entropy model over latent tokens.
//!
//! Each token channel is modelled as a Gaussian whose mean and scale are
//! predicted from the token vector by a two-layer network. Likelihoods use the
//! unit-width bin convention from learned compression: the probability of a
//! value is the Gaussian mass over `[y - 0.5, y + 0.5]` with the feature
//! rounded to the nearest integer bin centre, floored at [`PROB_FLOOR`]. The
//! per-token bit estimates form the entropy map that is quantized onto a
//! discrete rate set to obtain the rate preset map.

use ndarray::{s, Array2};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::codec::FeatureMap;
use crate::nn::{leaky_relu, leaky_relu_backward, softplus, softplus_derivative};
use crate::nn::{GradSet, Linear, ParamSet};

/// Lower clamp on predicted Gaussian scales.
pub const SIGMA_MIN: f64 = 0.01;

/// Floor on bin probabilities; caps per-channel entropy at about 29.897 bits.
pub const PROB_FLOOR: f64 = 1e-9;

/// Maximum entropy a single channel can contribute, `-log2(PROB_FLOOR)`.
pub fn max_bits_per_channel() -> f64 {
    -PROB_FLOOR.log2()
}

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("shape mismatch: features {f_n}x{f_d} vs params {p_n}x{p_d}")]
    ShapeMismatch {
        f_n: usize,
        f_d: usize,
        p_n: usize,
        p_d: usize,
    },
    #[error("rate set must be non-empty")]
    EmptyRateSet,
    #[error("rate set must be strictly increasing, offending pair ({a}, {b})")]
    NotIncreasing { a: u32, b: u32 },
    #[error("eta must be positive, got {0}")]
    NonPositiveEta(f64),
    #[error("entropy model produced a non-finite value (training divergence)")]
    NonFinite,
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Strictly increasing symbol budgets per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct RateSet {
    rates: Vec<u32>,
}

impl RateSet {
    pub fn new(rates: Vec<u32>) -> Result<Self, EntropyError> {
        if rates.is_empty() {
            return Err(EntropyError::EmptyRateSet);
        }
        for pair in rates.windows(2) {
            if pair[1] <= pair[0] {
                return Err(EntropyError::NotIncreasing {
                    a: pair[0],
                    b: pair[1],
                });
            }
        }
        Ok(Self { rates })
    }

    pub fn rates(&self) -> &[u32] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rate(&self, idx: usize) -> u32 {
        self.rates[idx]
    }

    pub fn max_rate(&self) -> u32 {
        *self.rates.last().expect("rate set non-empty")
    }

    /// Index of the lower median, the uniform budget used by the fixed-rate
    /// comparison scheme.
    pub fn median_index(&self) -> usize {
        (self.rates.len() - 1) / 2
    }

    /// Side-information bits needed to announce one token's rate index.
    pub fn bits_per_index(&self) -> u32 {
        let n = self.rates.len() as u32;
        if n <= 1 {
            0
        } else {
            32 - (n - 1).leading_zeros()
        }
    }
}

impl Default for RateSet {
    fn default() -> Self {
        Self {
            rates: vec![0, 2, 4, 8, 12, 16, 24, 32],
        }
    }
}

impl TryFrom<Vec<u32>> for RateSet {
    type Error = String;
    fn try_from(v: Vec<u32>) -> Result<Self, String> {
        RateSet::new(v).map_err(|e| e.to_string())
    }
}

impl From<RateSet> for Vec<u32> {
    fn from(r: RateSet) -> Vec<u32> {
        r.rates
    }
}

/// Per-token estimated bits, shape `[grid_h, grid_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub bits: Array2<f64>,
}

impl EntropyMap {
    pub fn grid(&self) -> (usize, usize) {
        self.bits.dim()
    }
}

/// Per-token indices into a [`RateSet`], shape `[grid_h, grid_w]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateIndexMap {
    pub idx: Array2<usize>,
}

impl RateIndexMap {
    pub fn uniform(grid_h: usize, grid_w: usize, idx: usize) -> Self {
        Self {
            idx: Array2::from_elem((grid_h, grid_w), idx),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.idx.dim()
    }

    /// Total payload symbols implied by this map.
    pub fn total_symbols(&self, rates: &RateSet) -> usize {
        self.idx.iter().map(|&i| rates.rate(i) as usize).sum()
    }

    /// Side-information symbols to announce the map, at 2 bits per symbol.
    pub fn side_symbols(&self, rates: &RateSet) -> usize {
        let bits = rates.bits_per_index() as usize * self.idx.len();
        bits.div_ceil(2)
    }
}

/// Predicted Gaussian parameters for every token channel, `[N, depth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

/// Bits for one integer-binned sample under `N(mu, sigma)`.
///
/// Probability is the Gaussian mass of the unit bin around `y`, evaluated in
/// the lower tail for accuracy and floored at [`PROB_FLOOR`].
pub fn token_entropy(y: f64, mu: f64, sigma: f64) -> f64 {
    -bin_probability(y, mu, sigma).max(PROB_FLOOR).log2()
}

fn bin_probability(y: f64, mu: f64, sigma: f64) -> f64 {
    let centered = (y - mu).abs();
    let upper = (0.5 - centered) / sigma;
    let lower = (-0.5 - centered) / sigma;
    normal_cdf(upper) - normal_cdf(lower)
}

/// Entropy map plus the analytic gradients of total bits.
#[derive(Debug, Clone)]
pub struct EntropyEval {
    pub map: EntropyMap,
    /// d(total bits)/d(mu), `[N, depth]`.
    pub d_mu: Array2<f64>,
    /// d(total bits)/d(sigma), `[N, depth]`.
    pub d_sigma: Array2<f64>,
    /// d(total bits)/d(feature), straight-through over rounding, `[N, depth]`.
    pub d_y: Array2<f64>,
}

/// Per-token entropies: channel-wise bits summed over depth, with features
/// rounded to integer bin centres first.
pub fn entropy_map(f: &FeatureMap, gp: &GaussianParams) -> Result<EntropyMap, EntropyError> {
    Ok(entropy_map_with_grads(f, gp)?.map)
}

pub fn entropy_map_with_grads(
    f: &FeatureMap,
    gp: &GaussianParams,
) -> Result<EntropyEval, EntropyError> {
    let (n, d) = f.tokens.dim();
    if gp.mu.dim() != (n, d) || gp.sigma.dim() != (n, d) {
        return Err(EntropyError::ShapeMismatch {
            f_n: n,
            f_d: d,
            p_n: gp.mu.dim().0,
            p_d: gp.mu.dim().1,
        });
    }
    let (gh, gw) = (f.grid_h, f.grid_w);
    let mut bits = Array2::zeros((gh, gw));
    let mut d_mu = Array2::zeros((n, d));
    let mut d_sigma = Array2::zeros((n, d));
    let mut d_y = Array2::zeros((n, d));
    let ln2 = std::f64::consts::LN_2;
    for tok in 0..n {
        let mut total = 0.0;
        for ch in 0..d {
            let y = f.tokens[[tok, ch]].round();
            let mu = gp.mu[[tok, ch]];
            let sigma = gp.sigma[[tok, ch]];
            let p = bin_probability(y, mu, sigma);
            if p <= PROB_FLOOR {
                total += -PROB_FLOOR.log2();
                continue; // flat region of the floor: zero gradient
            }
            total += -p.log2();
            let hi = (y + 0.5 - mu) / sigma;
            let lo = (y - 0.5 - mu) / sigma;
            let phi_hi = normal_pdf(hi);
            let phi_lo = normal_pdf(lo);
            let dp_dmu = (phi_lo - phi_hi) / sigma;
            let dp_dsigma = (phi_lo * lo - phi_hi * hi) / sigma;
            let dp_dy = (phi_hi - phi_lo) / sigma;
            let scale = -1.0 / (p * ln2);
            d_mu[[tok, ch]] = scale * dp_dmu;
            d_sigma[[tok, ch]] = scale * dp_dsigma;
            d_y[[tok, ch]] = scale * dp_dy;
        }
        bits[[tok / gw, tok % gw]] = total;
    }
    Ok(EntropyEval {
        map: EntropyMap { bits },
        d_mu,
        d_sigma,
        d_y,
    })
}

/// Quantizes `eta * entropy` onto the rate set; ties break toward the lower
/// index to conserve bandwidth.
pub fn rate_preset_map(
    e: &EntropyMap,
    rate_set: &RateSet,
    eta: f64,
) -> Result<RateIndexMap, EntropyError> {
    if eta <= 0.0 {
        return Err(EntropyError::NonPositiveEta(eta));
    }
    let idx = e.bits.mapv(|bits| nearest_rate_index(rate_set, eta * bits));
    Ok(RateIndexMap { idx })
}

fn nearest_rate_index(rate_set: &RateSet, target: f64) -> usize {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, &r) in rate_set.rates().iter().enumerate() {
        let dist = (r as f64 - target).abs();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    best
}

/// Differentiable rate proxy: mean entropy over tokens, in bits.
pub fn rate_loss(e: &EntropyMap) -> f64 {
    let n = e.bits.len();
    if n == 0 {
        return 0.0;
    }
    e.bits.sum() / n as f64
}

/// Two-layer network predicting per-channel Gaussian parameters from the
/// token vector itself (no hyper-link; sigma through softplus then clamped).
#[derive(Debug, Clone)]
pub struct EntropyModel {
    pub l1: Linear,
    pub l2: Linear,
    pub depth: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct EntropyModelCache {
    x: Array2<f64>,
    pre1: Array2<f64>,
    h: Array2<f64>,
    raw: Array2<f64>,
}

impl EntropyModel {
    pub fn new(ps: &mut ParamSet, depth: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        let l1 = Linear::new(ps, "entropy.l1", depth, hidden, false, rng);
        // Zero-initialized head: mu = 0, sigma = softplus(0) everywhere.
        let l2 = Linear::new(ps, "entropy.l2", hidden, 2 * depth, true, rng);
        Self {
            l1,
            l2,
            depth,
            hidden,
        }
    }

    pub fn predict(
        &self,
        ps: &ParamSet,
        tokens: &Array2<f64>,
    ) -> Result<(GaussianParams, EntropyModelCache), EntropyError> {
        let pre1 = self.l1.forward(ps, tokens);
        let h = leaky_relu(&pre1);
        let out = self.l2.forward(ps, &h);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(EntropyError::NonFinite);
        }
        let mu = out.slice(s![.., ..self.depth]).to_owned();
        let raw = out.slice(s![.., self.depth..]).to_owned();
        let sigma = raw.mapv(|r| softplus(r).max(SIGMA_MIN));
        Ok((
            GaussianParams { mu, sigma },
            EntropyModelCache {
                x: tokens.clone(),
                pre1,
                h,
                raw,
            },
        ))
    }

    /// Backpropagates gradients w.r.t. mu and sigma; returns the gradient
    /// w.r.t. the input tokens.
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &EntropyModelCache,
        g_mu: &Array2<f64>,
        g_sigma: &Array2<f64>,
        grads: &mut GradSet,
    ) -> Array2<f64> {
        let n = cache.x.dim().0;
        let mut g_out = Array2::zeros((n, 2 * self.depth));
        g_out.slice_mut(s![.., ..self.depth]).assign(g_mu);
        {
            // Through the clamped softplus.
            let mut g_raw = g_out.slice_mut(s![.., self.depth..]);
            for ((gr, &gs), &raw) in g_raw.iter_mut().zip(g_sigma.iter()).zip(cache.raw.iter()) {
                let active = softplus(raw) > SIGMA_MIN;
                *gr = if active {
                    gs * softplus_derivative(raw)
                } else {
                    0.0
                };
            }
        }
        let gh = self.l2.backward(ps, &cache.h, &g_out, grads);
        let gpre1 = leaky_relu_backward(&cache.pre1, &gh);
        self.l1.backward(ps, &cache.x, &gpre1, grads)
    }
}
