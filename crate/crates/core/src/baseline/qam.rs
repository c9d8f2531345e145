//! Gray-mapped 16-QAM modulation and exact max-log LLR demodulation.
//!
//! Mapping: the first 2 bits of each group of 4 select the I level, the last
//! 2 the Q level, each through Gray order 00 -> -3, 01 -> -1, 11 -> +1,
//! 10 -> +3, scaled by 1/sqrt(10) for unit mean symbol energy. LLRs are
//! positive when bit 0 is the more likely value.

use num_complex::Complex64;

use crate::channel::SymbolBlock;

/// Amplitude scale: mean energy of {±1, ±3}^2 / 10 is exactly 1.
pub const QAM16_SCALE: f64 = 0.316227766016837933; // 1/sqrt(10)

/// Gray order on 2 bits: index b1b0 -> level.
const GRAY_LEVELS: [(u8, u8, f64); 4] = [
    (0, 0, -3.0),
    (0, 1, -1.0),
    (1, 1, 1.0),
    (1, 0, 3.0),
];

fn bits_to_level(b0: u8, b1: u8) -> f64 {
    for &(x0, x1, level) in &GRAY_LEVELS {
        if (x0, x1) == (b0, b1) {
            return level * QAM16_SCALE;
        }
    }
    unreachable!("all four bit pairs are covered")
}

/// Maps bits (multiples of 4; the caller pads) onto 16-QAM symbols.
pub fn qam16_mod(bits: &[u8]) -> SymbolBlock {
    assert!(
        bits.len() % 4 == 0,
        "bit count must be a multiple of 4, got {}",
        bits.len()
    );
    let symbols = bits
        .chunks_exact(4)
        .map(|b| Complex64::new(bits_to_level(b[0], b[1]), bits_to_level(b[2], b[3])))
        .collect();
    SymbolBlock(symbols)
}

/// Exact max-log LLRs for each of the 4 bits per received symbol.
///
/// `noise_var` is the total complex noise variance; each axis sees half.
/// LLR(b) = (min_{b=1} d^2 - min_{b=0} d^2) / noise_var, computed per axis.
pub fn qam16_demod_llr(received: &SymbolBlock, noise_var: f64) -> Vec<f64> {
    let mut llrs = Vec::with_capacity(received.len() * 4);
    for s in &received.0 {
        axis_llrs(s.re, noise_var, &mut llrs);
        axis_llrs(s.im, noise_var, &mut llrs);
    }
    llrs
}

fn axis_llrs(x: f64, noise_var: f64, out: &mut Vec<f64>) {
    let mut min_b0_zero = f64::INFINITY;
    let mut min_b0_one = f64::INFINITY;
    let mut min_b1_zero = f64::INFINITY;
    let mut min_b1_one = f64::INFINITY;
    for &(b0, b1, level) in &GRAY_LEVELS {
        let d = x - level * QAM16_SCALE;
        let d2 = d * d;
        if b0 == 0 {
            min_b0_zero = min_b0_zero.min(d2);
        } else {
            min_b0_one = min_b0_one.min(d2);
        }
        if b1 == 0 {
            min_b1_zero = min_b1_zero.min(d2);
        } else {
            min_b1_one = min_b1_one.min(d2);
        }
    }
    out.push((min_b0_one - min_b0_zero) / noise_var);
    out.push((min_b1_one - min_b1_zero) / noise_var);
}

/// Hard decision from LLR sign: positive means bit 0.
pub fn hard_decision(llrs: &[f64]) -> Vec<u8> {
    llrs.iter().map(|&l| if l >= 0.0 { 0 } else { 1 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_derive;
    use rand::Rng;

    #[test]
    fn declared_mapping_corner() {
        let block = qam16_mod(&[0, 0, 0, 0]);
        let expect = Complex64::new(-3.0 * QAM16_SCALE, -3.0 * QAM16_SCALE);
        assert!((block.0[0] - expect).norm() < 1e-12);
    }

    #[test]
    fn unit_mean_energy_over_constellation() {
        let mut bits = Vec::new();
        for v in 0..16u8 {
            bits.extend_from_slice(&[(v >> 3) & 1, (v >> 2) & 1, (v >> 1) & 1, v & 1]);
        }
        let block = qam16_mod(&bits);
        assert_eq!(block.len(), 16);
        assert!((block.mean_power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gray_property_adjacent_levels_differ_one_bit() {
        // Levels sorted ascending must differ in exactly one bit.
        let mut sorted = GRAY_LEVELS;
        sorted.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
        for pair in sorted.windows(2) {
            let diff = (pair[0].0 ^ pair[1].0) + (pair[0].1 ^ pair[1].1);
            assert_eq!(diff, 1);
        }
    }

    #[test]
    fn noiseless_roundtrip_10k_bits() {
        let mut rng = rng_derive(77, &[0]).rng();
        let bits: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..2u8)).collect();
        let padded = {
            let mut b = bits.clone();
            while b.len() % 4 != 0 {
                b.push(0);
            }
            b
        };
        let block = qam16_mod(&padded);
        let llrs = qam16_demod_llr(&block, 0.1);
        let decided = hard_decision(&llrs);
        assert_eq!(&decided[..bits.len()], &bits[..]);
    }

    #[test]
    fn llr_sign_convention() {
        // A symbol deep in the (0,0,0,0) corner gives four positive LLRs.
        let block = SymbolBlock(vec![Complex64::new(-1.2, -1.2)]);
        let llrs = qam16_demod_llr(&block, 0.2);
        assert!(llrs.iter().all(|&l| l > 0.0), "{llrs:?}");
    }
}
