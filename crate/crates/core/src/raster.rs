//! Row-major image layers shared by every stage of the pipeline.
//!
//! Units by convention: depth in meters (0 marks an invalid pixel), RGB and
//! confidence unitless in [0, 1], flow in pixels from frame t to t+1.

use crate::error::{Error, Result};

/// Dense row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type DepthFrame = Raster<f64>;
pub type RgbFrame = Raster<[f64; 3]>;
pub type ConfidenceMap = Raster<f64>;
pub type Mask = Raster<bool>;
pub type VectorMap = Raster<[f64; 3]>;

impl<T: Clone> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Raster<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} raster",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Errors unless `other` has the same dimensions.
    pub fn ensure_same_dims<U>(&self, other: &Raster<U>, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Errors unless both dimensions are multiples of `factor`.
    pub fn ensure_divisible(&self, factor: usize) -> Result<()> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor)
        {
            return Err(Error::DimensionNotDivisible {
                width: self.width,
                height: self.height,
                factor,
            });
        }
        Ok(())
    }
}

impl<T: Clone> Raster<T> {
    /// Copies the `size`×`size` block whose top-left corner is (`x0`, `y0`).
    pub fn block(&self, x0: usize, y0: usize, size: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            out.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + size]);
        }
        out
    }
}

/// Dense optical flow from frame t to frame t+1 with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub vectors: Raster<[f64; 2]>,
    pub valid: Mask,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            vectors: Raster::filled(width, height, [0.0, 0.0]),
            valid: Raster::filled(width, height, true),
        }
    }

    pub fn uniform(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        Self {
            vectors: Raster::filled(width, height, [dx, dy]),
            valid: Raster::filled(width, height, true),
        }
    }

    /// Builds a flow field; non-finite vectors are marked invalid.
    pub fn new(vectors: Raster<[f64; 2]>) -> Self {
        let valid = vectors.map(|v| v[0].is_finite() && v[1].is_finite());
        Self { vectors, valid }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.vectors.dims()
    }
}

/// Valid-depth mask: finite and strictly positive.
pub fn valid_depth_mask(depth: &DepthFrame) -> Mask {
    depth.map(|&d| d.is_finite() && d > 0.0)
}
