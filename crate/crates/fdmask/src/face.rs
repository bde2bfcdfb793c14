//! Aligned face images and occlusion region masks.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::scalar::Scalar;

/// A geometrically aligned face crop, `(channels, height, width)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFace<S: Scalar> {
    pixels: Array3<S>,
}

impl<S: Scalar> AlignedFace<S> {
    /// Wraps a pixel volume. All dimensions must be positive and every value
    /// finite and inside `[0, 1]`.
    pub fn new(pixels: Array3<S>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid_argument(format!(
                "face dimensions must be positive, got ({c}, {h}, {w})"
            )));
        }
        for &v in pixels.iter() {
            if !v.is_finite() || v < S::zero() || v > S::one() {
                return Err(Error::invalid_argument(format!(
                    "face pixels must be finite and in [0, 1], found {v}"
                )));
            }
        }
        Ok(AlignedFace { pixels })
    }

    pub fn pixels(&self) -> &Array3<S> {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut Array3<S> {
        &mut self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Binary pixel mask marking occluded pixels of one face (1 = occluded).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionRegion {
    mask: Array2<u8>,
}

impl OcclusionRegion {
    /// All-clear region.
    pub fn empty(height: usize, width: usize) -> Self {
        OcclusionRegion {
            mask: Array2::zeros((height, width)),
        }
    }

    /// Region from an explicit 0/1 mask.
    pub fn from_mask(mask: Array2<u8>) -> Result<Self> {
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::invalid_argument(
                "occlusion masks must contain only 0/1 values",
            ));
        }
        Ok(OcclusionRegion { mask })
    }

    /// Region covering one rectangle; the rectangle must fit inside the image.
    pub fn from_rect(height: usize, width: usize, rect: Rect) -> Result<Self> {
        if !rect.fits_in(height, width) {
            return Err(Error::invalid_argument(format!(
                "rect {rect:?} does not fit in {height}x{width}"
            )));
        }
        let mut mask = Array2::zeros((height, width));
        for y in rect.y..rect.bottom() {
            for x in rect.x..rect.right() {
                mask[(y, x)] = 1;
            }
        }
        Ok(OcclusionRegion { mask })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    /// Number of occluded pixels.
    pub fn area(&self) -> usize {
        self.mask.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.iter().all(|&v| v == 0)
    }

    /// Pixelwise union with another region of the same dimensions.
    pub fn union(&self, other: &OcclusionRegion) -> Result<OcclusionRegion> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                format!("{:?}", self.dims()),
                format!("{:?}", other.dims()),
            ));
        }
        let mut mask = self.mask.clone();
        for (m, &o) in mask.iter_mut().zip(other.mask.iter()) {
            *m |= o;
        }
        Ok(OcclusionRegion { mask })
    }
}
