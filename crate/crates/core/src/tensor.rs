//! Dense feature maps and masks.
//!
//! A [`FeatureMap`] is stored channel-major (`C x H x W`, row-major), the same
//! layout as the on-disk tensor format. Per-position processing (the adapter,
//! the discriminator, patch matching) works on the transposed position-major
//! view returned by [`FeatureMap::to_positions`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{shape_err, Result};

/// Floating point scalar used by the numeric core. Training runs in `f32`,
/// gradient verification in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(shape_err(format!(
                "feature map dims must be nonzero, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(shape_err(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    /// Builds a map from position-major rows (`H*W` rows of `C` values).
    pub fn from_positions(
        channels: usize,
        height: usize,
        width: usize,
        rows: &[T],
    ) -> Result<Self> {
        let hw = height * width;
        if rows.len() != hw * channels {
            return Err(shape_err(format!(
                "{} position values for {channels}x{height}x{width}",
                rows.len()
            )));
        }
        let mut data = vec![T::zero(); rows.len()];
        for pos in 0..hw {
            for c in 0..channels {
                data[c * hw + pos] = rows[pos * channels + c];
            }
        }
        FeatureMap::new(channels, height, width, data)
    }

    /// Position-major copy: row `h*W + w` holds the channel vector at `(h, w)`.
    pub fn to_positions(&self) -> Vec<T> {
        let hw = self.height * self.width;
        let mut rows = vec![T::zero(); self.data.len()];
        for c in 0..self.channels {
            let plane = &self.data[c * hw..(c + 1) * hw];
            for (pos, &v) in plane.iter().enumerate() {
                rows[pos * self.channels + c] = v;
            }
        }
        rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> T {
        self.data[(c * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: T) {
        self.data[(c * self.height + h) * self.width + w] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.spatial();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn position(&self, h: usize, w: usize) -> Vec<T> {
        (0..self.channels).map(|c| self.get(c, h, w)).collect()
    }

    pub fn same_dims<U: Real>(&self, other: &FeatureMap<U>) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_dims<U: Real>(&self, other: &FeatureMap<U>, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }
}

/// Ground-truth segmentation mask; any value > 0 marks an anomalous pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err("mask dims must be nonzero"));
        }
        if data.len() != height * width {
            return Err(shape_err(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn set(&mut self, h: usize, w: usize, v: u8) {
        self.data[h * self.width + w] = v;
    }

    pub fn is_anomalous(&self, h: usize, w: usize) -> bool {
        self.data[h * self.width + w] > 0
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v > 0)
    }
}
