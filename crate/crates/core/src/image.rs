//! 8-bit RGB image container shared by the codecs, baselines and metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of colour channels; everything in the pipeline is RGB.
pub const CHANNELS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("pixel buffer has {got} bytes, expected {expected} for {height}x{width}x3")]
    BufferSize {
        got: usize,
        expected: usize,
        height: usize,
        width: usize,
    },
}

/// Row-major RGB image with intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    /// Wraps a row-major interleaved RGB buffer of length `height * width * 3`.
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyDimensions { height, width });
        }
        let expected = height * width * CHANNELS;
        if data.len() != expected {
            return Err(ImageError::BufferSize {
                got: data.len(),
                expected,
                height,
                width,
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Constant-valued image, useful for tests and the baseline failure path.
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::from_raw(height, width, vec![value; height * width * CHANNELS])
            .expect("filled image dimensions are validated by the caller")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    /// Total number of source symbols (pixel components), the CBR denominator.
    pub fn source_symbols(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    /// Intensity at (row, col, channel).
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * CHANNELS + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: u8) {
        self.data[(row * self.width + col) * CHANNELS + ch] = value;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_raw_validates_buffer_length() {
        assert!(Image::from_raw(2, 2, vec![0; 12]).is_ok());
        let err = Image::from_raw(2, 2, vec![0; 11]).unwrap_err();
        assert_eq!(
            err,
            ImageError::BufferSize {
                got: 11,
                expected: 12,
                height: 2,
                width: 2
            }
        );
    }

    #[test]
    fn from_raw_rejects_empty_dimensions() {
        assert!(matches!(
            Image::from_raw(0, 4, vec![]),
            Err(ImageError::EmptyDimensions { .. })
        ));
    }

    #[test]
    fn indexing_is_row_major_interleaved() {
        let mut img = Image::filled(2, 3, 0);
        img.set(1, 2, 1, 77);
        assert_eq!(img.get(1, 2, 1), 77);
        assert_eq!(img.data()[(1 * 3 + 2) * 3 + 1], 77);
    }
}
