//! Dense 4-D tensors in NCHW layout.

use std::fmt;

use crate::error::{Result, TensorError};

/// `[batch, channels, height, width]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Number of elements in one `[h, w]` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub const fn with_spatial(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `[h, w]` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(TensorError::ShapeMismatch {
                expected: shape,
                actual: self.shape,
            });
        }
        Ok(())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Empty("concat"))?.shape;
        let mut channels = 0;
        for p in parts {
            let s = p.shape;
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(TensorError::ShapeMismatch {
                    expected: s.with_channels(first.c).with_spatial(first.h, first.w),
                    actual: s,
                });
            }
            channels += s.c;
        }
        let shape = first.with_channels(channels);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for p in parts {
                data.extend_from_slice(p.sample(n));
            }
        }
        Ok(Self { shape, data })
    }

    /// Channels `[start, start + len)`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.shape.c {
            return Err(TensorError::ChannelRange {
                start,
                len,
                channels: self.shape.c,
            });
        }
        let p = self.shape.plane();
        let shape = self.shape.with_channels(len);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            let s = self.sample(n);
            data.extend_from_slice(&s[start * p..(start + len) * p]);
        }
        Ok(Self { shape, data })
    }

    /// Batch `n` as a one-sample tensor.
    pub fn select_sample(&self, n: usize) -> Self {
        Self {
            shape: Shape { n: 1, ..self.shape },
            data: self.sample(n).to_vec(),
        }
    }

    /// Stack one-sample tensors along the batch axis.
    pub fn stack(samples: &[&Tensor]) -> Result<Self> {
        let first = samples.first().ok_or(TensorError::Empty("stack"))?.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for s in samples {
            if s.shape.c != first.c || s.shape.h != first.h || s.shape.w != first.w {
                return Err(TensorError::ShapeMismatch {
                    expected: s.shape.with_channels(first.c).with_spatial(first.h, first.w),
                    actual: s.shape,
                });
            }
            n += s.shape.n;
            data.extend_from_slice(&s.data);
        }
        Ok(Self {
            shape: Shape { n, ..first },
            data,
        })
    }

    /// Repeats a single-channel tensor `c` times along the channel axis.
    pub fn repeat_channels(&self, c: usize) -> Self {
        let mut data = Vec::with_capacity(self.shape.numel() * c);
        for n in 0..self.shape.n {
            let s = self.sample(n);
            for _ in 0..c {
                data.extend_from_slice(s);
            }
        }
        Self {
            shape: self.shape.with_channels(self.shape.c * c),
            data,
        }
    }

    /// Mirror every plane left-to-right.
    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        let mut out = self.clone();
        for plane in out.data.chunks_mut(s.w.max(1)) {
            plane.reverse();
        }
        debug_assert_eq!(out.shape, s);
        out
    }
}

/// Sampling table for one axis of a bilinear resize with half-pixel centers.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub(crate) fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { pos - i0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize (half-pixel centers, edge clamped) of every plane to `h × w`.
///
/// Interpolation is written as `a + t * (b - a)` so constant planes stay
/// exactly constant and same-size resizes are the identity.
pub fn resize_bilinear(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = input.shape();
    if h == 0 || w == 0 || s.h == 0 || s.w == 0 {
        return Err(TensorError::EmptySpatial(s.with_spatial(h, w)));
    }
    if (s.h, s.w) == (h, w) {
        return Ok(input.clone());
    }
    let ty = AxisTaps::new(s.h, h);
    let tx = AxisTaps::new(s.w, w);
    let out_shape = s.with_spatial(h, w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in input.data().chunks(s.plane()) {
        for oy in 0..h {
            let r0 = &plane[ty.lo[oy] * s.w..(ty.lo[oy] + 1) * s.w];
            let r1 = &plane[ty.hi[oy] * s.w..(ty.hi[oy] + 1) * s.w];
            let fy = ty.frac[oy];
            for ox in 0..w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bottom = r1[x0] + fx * (r1[x1] - r1[x0]);
                out.push(top + fy * (bottom - top));
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Area-weighted resize: every output pixel is the coverage-weighted mean of
/// the source pixels its footprint overlaps (fractional overlaps included).
pub fn resize_area(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = input.shape();
    if h == 0 || w == 0 || s.h == 0 || s.w == 0 {
        return Err(TensorError::EmptySpatial(s.with_spatial(h, w)));
    }
    if (s.h, s.w) == (h, w) {
        return Ok(input.clone());
    }
    let wy = area_weights(s.h, h);
    let wx = area_weights(s.w, w);
    let out_shape = s.with_spatial(h, w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in input.data().chunks(s.plane()) {
        for row in &wy {
            for col in &wx {
                let mut acc = 0.0;
                for &(sy, ay) in row {
                    let src = &plane[sy * s.w..(sy + 1) * s.w];
                    for &(sx, ax) in col {
                        acc += ay * ax * src[sx];
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Per output index: (source index, normalized overlap weight).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let start = i as f64 * scale;
            let end = (i + 1) as f64 * scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (first..last)
                .filter_map(|j| {
                    let overlap = (end.min(j as f64 + 1.0) - start.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = Tensor::from_fn(Shape::new(2, 2, 3, 3), |n, c, y, x| (n * 100 + c * 10 + y * 3 + x) as f64);
        let b = Tensor::from_fn(Shape::new(2, 1, 3, 3), |n, _, y, x| -((n * 9 + y * 3 + x) as f64));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 3, 3, 3));
        assert_eq!(cat.narrow_channels(0, 2).unwrap(), a);
        assert_eq!(cat.narrow_channels(2, 1).unwrap(), b);
    }

    #[test]
    fn bilinear_constant_is_exact() {
        let t = Tensor::full(Shape::new(1, 4, 11, 11), 0.5);
        for (h, w) in [(22, 22), (6, 6), (3, 3), (44, 44), (1, 1)] {
            let r = resize_bilinear(&t, h, w).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn bilinear_upsample_matches_half_pixel_convention() {
        // [0, 1] upsampled to 4 columns: taps at -0.25, 0.25, 0.75, 1.25.
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&t, 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn area_resize_averages_blocks() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 4), vec![1., 3., 5., 7., 1., 3., 5., 7.]).unwrap();
        let r = resize_area(&t, 1, 2).unwrap();
        assert_eq!(r.data(), &[2.0, 6.0]);
        // 3 -> 2 uses fractional coverage: [a, b/2] / 1.5 and [b/2, c] / 1.5.
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 3.0, 6.0]).unwrap();
        let r = resize_area(&t, 1, 2).unwrap();
        assert!((r.data()[0] - 1.0).abs() < 1e-12);
        assert!((r.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 1, 2, 3));
        assert!(matches!(
            a.zip_map(&b, |x, y| x + y),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }
}
