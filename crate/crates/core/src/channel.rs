//! AWGN channel simulation with power normalization and the SNR map consumed
//! by the rate-control agent.
//!
//! Convention: one channel symbol is one complex baseband value. A block is
//! power-normalized to unit mean symbol energy before transmission so that
//! `snr_db` fully determines the noise level: total complex noise variance is
//! `10^(-snr_db/10)`, split evenly between the real and imaginary parts.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{sample_standard_normal, RngStream};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("cannot normalize an empty symbol block")]
    EmptyBlock,
    #[error("cannot normalize an all-zero symbol block: scale is undefined")]
    ZeroPower,
    #[error("length mismatch: clean {clean} vs noisy {noisy}")]
    LengthMismatch { clean: usize, noisy: usize },
}

/// Channel model selector. AWGN is the only kind in this release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChannelKind {
    Awgn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub snr_db: f64,
}

impl ChannelSpec {
    pub fn awgn(snr_db: f64) -> Self {
        Self {
            kind: ChannelKind::Awgn,
            snr_db,
        }
    }

    /// Total complex noise variance `10^(-snr_db/10)`.
    pub fn noise_variance(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }
}

/// Sequence of complex channel symbols.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SymbolBlock(pub Vec<Complex64>);

impl SymbolBlock {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.0.len() as f64
    }
}

/// Scales the block so that mean symbol energy is exactly 1.
pub fn normalize_power(block: &SymbolBlock) -> Result<SymbolBlock, ChannelError> {
    if block.is_empty() {
        return Err(ChannelError::EmptyBlock);
    }
    let power = block.mean_power();
    if power == 0.0 {
        return Err(ChannelError::ZeroPower);
    }
    let scale = 1.0 / power.sqrt();
    Ok(SymbolBlock(block.0.iter().map(|s| s * scale).collect()))
}

/// Adds circularly symmetric complex Gaussian noise at the spec's SNR.
///
/// Deterministic for a given `rng` stream; an empty block passes through.
pub fn awgn(block: &SymbolBlock, spec: &ChannelSpec, rng: &RngStream) -> SymbolBlock {
    let sigma_component = (spec.noise_variance() / 2.0).sqrt();
    let mut generator = rng.rng();
    SymbolBlock(
        block
            .0
            .iter()
            .map(|s| {
                let re = sample_standard_normal(&mut generator) * sigma_component;
                let im = sample_standard_normal(&mut generator) * sigma_component;
                s + Complex64::new(re, im)
            })
            .collect(),
    )
}

/// Broadcast SNR map `gamma` fed to the agent state; flat for AWGN.
pub fn snr_map(spec: &ChannelSpec, grid_h: usize, grid_w: usize) -> Array2<f64> {
    Array2::from_elem((grid_h, grid_w), spec.snr_db)
}

/// Measured SNR `10*log10(signal energy / noise energy)`, capped at 99 dB
/// when the noise energy is zero.
pub fn empirical_snr(clean: &SymbolBlock, noisy: &SymbolBlock) -> Result<f64, ChannelError> {
    if clean.len() != noisy.len() || clean.is_empty() {
        return Err(ChannelError::LengthMismatch {
            clean: clean.len(),
            noisy: noisy.len(),
        });
    }
    let signal: f64 = clean.0.iter().map(|s| s.norm_sqr()).sum();
    let noise: f64 = clean
        .0
        .iter()
        .zip(&noisy.0)
        .map(|(c, n)| (n - c).norm_sqr())
        .sum();
    if noise == 0.0 {
        return Ok(99.0);
    }
    Ok(10.0 * (signal / noise).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_derive;

    #[test]
    fn normalize_keeps_unit_power_block() {
        let block = SymbolBlock(vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)]);
        let out = normalize_power(&block).unwrap();
        assert_eq!(out, block);
    }

    #[test]
    fn normalize_scales_by_mean_power() {
        let block = SymbolBlock(vec![Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)]);
        let out = normalize_power(&block).unwrap();
        let expect = 2.0f64.sqrt();
        assert!((out.0[0].re - expect).abs() < 1e-12);
        assert_eq!(out.0[1], Complex64::new(0.0, 0.0));
        assert!((out.mean_power() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_rejects_degenerate_blocks() {
        assert_eq!(
            normalize_power(&SymbolBlock(vec![])),
            Err(ChannelError::EmptyBlock)
        );
        let zeros = SymbolBlock(vec![Complex64::new(0.0, 0.0); 4]);
        assert_eq!(normalize_power(&zeros), Err(ChannelError::ZeroPower));
    }

    #[test]
    fn noise_variance_examples() {
        assert!((ChannelSpec::awgn(10.0).noise_variance() - 0.1).abs() < 1e-15);
        assert!((ChannelSpec::awgn(0.0).noise_variance() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn awgn_passes_empty_block_through() {
        let spec = ChannelSpec::awgn(10.0);
        let out = awgn(&SymbolBlock(vec![]), &spec, &rng_derive(1, &[0]));
        assert!(out.is_empty());
    }

    #[test]
    fn awgn_is_deterministic_per_stream() {
        let spec = ChannelSpec::awgn(5.0);
        let block = SymbolBlock(vec![Complex64::new(1.0, -1.0); 32]);
        let stream = rng_derive(11, &[3, 1]);
        let a = awgn(&block, &spec, &stream);
        let b = awgn(&block, &spec, &stream);
        assert_eq!(a, b);
        let c = awgn(&block, &spec, &rng_derive(11, &[3, 2]));
        assert_ne!(a, c);
    }

    #[test]
    fn snr_map_broadcasts_scalar() {
        let m = snr_map(&ChannelSpec::awgn(10.0), 16, 16);
        assert_eq!(m.dim(), (16, 16));
        assert!(m.iter().all(|&v| v == 10.0));
        let single = snr_map(&ChannelSpec::awgn(0.0), 1, 1);
        assert_eq!(single[[0, 0]], 0.0);
        let rect = snr_map(&ChannelSpec::awgn(-5.0), 2, 3);
        assert_eq!(rect.dim(), (2, 3));
        assert!(rect.iter().all(|&v| v == -5.0));
    }

    #[test]
    fn empirical_snr_of_identical_blocks_caps() {
        let block = SymbolBlock(vec![Complex64::new(1.0, 0.0); 8]);
        assert_eq!(empirical_snr(&block, &block).unwrap(), 99.0);
    }

    // Monte Carlo calibration over 10^6 symbols; the acceptance suite repeats
    // this at tighter integration scope.
    #[test]
    fn awgn_calibration_one_million_symbols() {
        let n = 1_000_000;
        let block = SymbolBlock(vec![Complex64::new(1.0, 0.0); n]);
        for &snr in &[0.0, 10.0] {
            let spec = ChannelSpec::awgn(snr);
            let noisy = awgn(&block, &spec, &rng_derive(2024, &[snr as u64]));
            let measured = empirical_snr(&block, &noisy).unwrap();
            assert!(
                (measured - snr).abs() < 0.1,
                "snr {snr}: measured {measured}"
            );

            // Zero-mean noise per component and variance within 1%.
            let mut sum_re = 0.0;
            let mut sum_im = 0.0;
            let mut energy = 0.0;
            for (c, y) in block.0.iter().zip(&noisy.0) {
                let d = y - c;
                sum_re += d.re;
                sum_im += d.im;
                energy += d.norm_sqr();
            }
            let mean_re = sum_re / n as f64;
            let mean_im = sum_im / n as f64;
            assert!(mean_re.abs() < 5e-3 && mean_im.abs() < 5e-3);
            let var = energy / n as f64;
            let target = spec.noise_variance();
            assert!((var - target).abs() < 0.01 * target);
        }
    }
}
