//! Reconstruction and bandwidth metrics: MSE, PSNR, CBR.
//!
//! All metrics run in f64 regardless of model precision so that report values
//! are stable across platforms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

/// PSNR reported for a zero-MSE reconstruction; keeps CSV aggregation finite.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {a_h}x{a_w} vs {b_h}x{b_w}")]
    ShapeMismatch {
        a_h: usize,
        a_w: usize,
        b_h: usize,
        b_w: usize,
    },
}

/// Aggregated link-level result for one (scheme, SNR) evaluation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub scheme: String,
    pub snr_db: f64,
    pub cbr: f64,
    pub psnr_db: f64,
    pub n_images: usize,
    pub seed: u64,
}

/// Mean squared intensity difference over all `H*W*3` positions.
pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::ShapeMismatch {
            a_h: a.height(),
            a_w: a.width(),
            b_h: b.height(),
            b_w: b.width(),
        });
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(total / a.source_symbols() as f64)
}

/// `10*log10(255^2 / MSE)`, capped at [`PSNR_CAP_DB`] when the MSE is zero.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    let v = 10.0 * (255.0f64 * 255.0 / mse).log10();
    v.min(PSNR_CAP_DB)
}

/// Channel bandwidth ratio: transmitted complex symbols (payload plus side
/// information) over source symbols.
pub fn cbr(channel_symbols: usize, side_info_symbols: usize, image: &Image) -> f64 {
    (channel_symbols + side_info_symbols) as f64 / image.source_symbols() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_identity_is_zero() {
        let a = Image::filled(4, 4, 17);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mse_full_scale_is_255_squared() {
        let a = Image::filled(4, 4, 0);
        let b = Image::filled(4, 4, 255);
        assert_eq!(mse(&a, &b).unwrap(), 65025.0);
    }

    #[test]
    fn mse_unit_difference() {
        let a = Image::filled(4, 4, 0);
        let b = Image::filled(4, 4, 1);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let a = Image::filled(4, 4, 0);
        let b = Image::filled(4, 5, 0);
        assert!(matches!(
            mse(&a, &b),
            Err(MetricError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn psnr_caps_at_99_for_identical_images() {
        let a = Image::filled(4, 4, 200);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_of_full_scale_error_is_zero() {
        let a = Image::filled(4, 4, 0);
        let b = Image::filled(4, 4, 255);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn psnr_of_unit_mse_matches_20_log10_255() {
        let a = Image::filled(4, 4, 0);
        let b = Image::filled(4, 4, 1);
        let expect = 20.0 * 255.0f64.log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 48.1308).abs() < 1e-4);
    }

    #[test]
    fn cbr_examples() {
        // 100 symbols over 1000 source symbols -> 0.1; pixels give 10x10x3=300,
        // so scale the same ratio: 30 symbols over 300 source symbols.
        let img = Image::filled(10, 10, 0);
        assert!((cbr(30, 0, &img) - 0.1).abs() < 1e-15);
        assert_eq!(cbr(0, 0, &img), 0.0);

        let img256 = Image::filled(256, 256, 0);
        let v = cbr(4915, 8, &img256);
        assert_eq!(v, 4923.0 / 196608.0);
        assert!((v - 0.025039).abs() < 1e-6);
    }

    proptest! {
        // psnr is strictly decreasing in MSE for positive MSE.
        #[test]
        fn psnr_strictly_decreasing(m1 in 1e-6f64..65025.0, delta in 1e-6f64..100.0) {
            let m2 = m1 + delta;
            prop_assert!(psnr_from_mse(m1) > psnr_from_mse(m2));
        }

        // cbr is additive in the symbol count: the numerator is assembled in
        // integer arithmetic, so splitting differs by at most rounding of the
        // final division.
        #[test]
        fn cbr_additive(k1 in 0usize..10_000, k2 in 0usize..10_000, s in 0usize..64) {
            let img = Image::filled(16, 16, 0);
            let lhs = cbr(k1 + k2, s, &img);
            let rhs = cbr(k1, s, &img) + cbr(k2, 0, &img);
            prop_assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * lhs.abs());
        }
    }
}
