//! Baseline JPEG (ITU-T T.81) source coding via the `image` crate's
//! conformant codec. Decode failure is a result, not a crash; the chain maps
//! it to the mid-gray failure reconstruction.

use thiserror::Error;

use crate::image::Image;

/// Identity string recorded in reports for auditability.
pub const JPEG_ENCODER_ID: &str = "image-rs/jpeg";

#[derive(Debug, Error)]
pub enum JpegError {
    #[error("quality {0} outside 1..=100")]
    QualityRange(u8),
    #[error("jpeg encode failed: {0}")]
    Encode(String),
}

/// Decode failure carries the reason; corrupted streams land here.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("jpeg decode failed: {reason}")]
pub struct JpegDecodeFailure {
    pub reason: String,
}

pub fn jpeg_encode(img: &Image, quality: u8) -> Result<Vec<u8>, JpegError> {
    if quality == 0 || quality > 100 {
        return Err(JpegError::QualityRange(quality));
    }
    let mut out = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
    image::ImageEncoder::write_image(
        encoder,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| JpegError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn jpeg_decode(bytes: &[u8]) -> Result<Image, JpegDecodeFailure> {
    let dynamic = image::load_from_memory_with_format(bytes, image::ImageFormat::Jpeg)
        .map_err(|e| JpegDecodeFailure {
            reason: e.to_string(),
        })?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::from_raw(h as usize, w as usize, rgb.into_raw()).map_err(|e| JpegDecodeFailure {
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::rng::rng_derive;
    use rand::Rng;

    /// Piecewise-smooth test image: gradients plus blocks, JPEG-friendly.
    fn natural_like(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rng_derive(seed, &[0]).rng();
        let mut img = Image::filled(h, w, 0);
        let base: [f64; 3] = [
            rng.random_range(40.0..200.0),
            rng.random_range(40.0..200.0),
            rng.random_range(40.0..200.0),
        ];
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    let v = base[c] + 40.0 * (i as f64 / h as f64) + 30.0 * (j as f64 / w as f64);
                    img.set(i, j, c, v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        // A few constant rectangles.
        for _ in 0..4 {
            let bi = rng.random_range(0..h / 2);
            let bj = rng.random_range(0..w / 2);
            let bh = rng.random_range(4..h / 2);
            let bw = rng.random_range(4..w / 2);
            let color: [u8; 3] = [rng.random(), rng.random(), rng.random()];
            for i in bi..(bi + bh).min(h) {
                for j in bj..(bj + bw).min(w) {
                    for c in 0..3 {
                        img.set(i, j, c, color[c]);
                    }
                }
            }
        }
        img
    }

    #[test]
    fn quality_validation() {
        let img = Image::filled(16, 16, 128);
        assert!(matches!(jpeg_encode(&img, 0), Err(JpegError::QualityRange(0))));
        assert!(jpeg_encode(&img, 100).is_ok());
    }

    #[test]
    fn intact_roundtrip_high_quality_psnr() {
        let img = natural_like(64, 64, 3);
        let bytes = jpeg_encode(&img, 90).unwrap();
        let decoded = jpeg_decode(&bytes).unwrap();
        assert!(decoded.same_shape(&img));
        let p = psnr(&img, &decoded).unwrap();
        assert!(p > 30.0, "quality-90 psnr {p}");
    }

    #[test]
    fn bitstream_length_nondecreasing_in_quality() {
        let img = natural_like(64, 64, 4);
        let l50 = jpeg_encode(&img, 50).unwrap().len();
        let l75 = jpeg_encode(&img, 75).unwrap().len();
        let l95 = jpeg_encode(&img, 95).unwrap().len();
        assert!(l50 <= l75 && l75 <= l95, "{l50} {l75} {l95}");
    }

    #[test]
    fn corrupted_payload_is_detected_or_failed() {
        let img = natural_like(64, 64, 5);
        let bytes = jpeg_encode(&img, 85).unwrap();
        let mut rng = rng_derive(6, &[0]).rng();
        let mut detected = 0;
        let trials = 20;
        for _ in 0..trials {
            let mut corrupted = bytes.clone();
            // Flip 1% of payload bits, sparing the first 64 header bytes.
            let start = 64.min(corrupted.len());
            let nbits = (corrupted.len() - start) * 8;
            for _ in 0..nbits / 100 {
                let bit = rng.random_range(0..nbits);
                corrupted[start + bit / 8] ^= 1 << (bit % 8);
            }
            match jpeg_decode(&corrupted) {
                Err(_) => detected += 1,
                Ok(decoded) => {
                    // Not an error: flag corruption when the image is unusable.
                    if !decoded.same_shape(&img) || psnr(&img, &decoded).unwrap() < 15.0 {
                        detected += 1;
                    }
                }
            }
        }
        assert!(
            detected >= trials * 7 / 10,
            "only {detected}/{trials} corruptions detected"
        );
    }
}
