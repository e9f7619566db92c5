//! Dense arrays, probability volumes, label maps and the crop/resize operator.
//!
//! All rasters are stored planar and row-major: a `C×H×W` volume keeps one
//! contiguous `H×W` plane per channel (or class), so per-class scans and
//! per-row convolution loops walk memory linearly.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point scalar used by the differentiable parts of the crate.
///
/// Everything trains in `f32`; the `f64` instantiation exists so gradient
/// checks can run the same code at double precision.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Label value for pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::U8 => "uint8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// An n-dimensional row-major array of `f32` or `u8`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Shape(format!(
                "extents must be non-empty and positive, got {dims:?}"
            )));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::DimsOverflow(dims.iter().map(|&d| d as u64).collect()))?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {n} values but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(dims, TensorData::F32(data))
    }

    pub fn from_u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Tensor::new(dims, TensorData::U8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::DtypeMismatch {
                expected: "float32",
                actual: other.dtype().name(),
            }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(Error::DtypeMismatch {
                expected: "uint8",
                actual: other.dtype().name(),
            }),
        }
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Split the dims into `(planes, height, width)`; accepts `H×W` and `C×H×W`.
    fn planar(&self) -> Result<(usize, usize, usize)> {
        match *self.dims.as_slice() {
            [h, w] => Ok((1, h, w)),
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected H×W or C×H×W, got {:?}",
                self.dims
            ))),
        }
    }
}

/// Axis-aligned window inside a raster, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Rect {
            row,
            col,
            height,
            width,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Rect::new(0, 0, height, width)
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        let fits = self.height >= 1
            && self.width >= 1
            && self.row + self.height <= height
            && self.col + self.width <= width;
        if fits {
            Ok(())
        } else {
            Err(Error::RectOutOfBounds {
                rect: *self,
                height,
                width,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    Nearest,
    Bilinear,
}

/// Planar `C×H×W` array with no value constraints; used for logits and
/// intermediate activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type Logits<T = f32> = Volume<T>;

impl<T: Copy + Default> Volume<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Volume {
            channels,
            height,
            width,
            data: vec![T::default(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels * height * width != data.len() || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{channels}×{height}×{width} volume cannot hold {} values",
                data.len()
            )));
        }
        Ok(Volume {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl<T: Real> Volume<T> {
    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

impl Volume<f32> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(self.dims().to_vec(), self.data.clone()).expect("volume dims are valid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.planar()?;
        Volume::from_vec(c, h, w, t.as_f32()?.to_vec())
    }
}

/// RGB image, planar `3×H×W`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "3×{height}×{width} image cannot hold {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape(format!(
                "image value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![3, self.height, self.width], self.data.clone())
            .expect("image dims are valid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [3, h, w] => Image::new(h, w, t.as_f32()?.to_vec()),
            _ => Err(Error::Shape(format!("expected 3×H×W, got {:?}", t.dims()))),
        }
    }

    pub fn crop_resize(&self, rect: Rect, out_h: usize, out_w: usize) -> Result<Image> {
        rect.check(self.height, self.width)?;
        let data = resize_planes_linear(&self.data, 3, self.height, self.width, rect, out_h, out_w);
        Ok(Image {
            height: out_h,
            width: out_w,
            data,
        })
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        let mut out = [0.0; 3];
        for (c, m) in out.iter_mut().enumerate() {
            *m = self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / n;
        }
        out
    }
}

/// Per-pixel class distribution, planar `C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume<T = f32> {
    vol: Volume<T>,
}

impl<T: Real> ProbVolume<T> {
    /// Wrap `data`, checking range and per-pixel normalisation.
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let vol = Volume::from_vec(classes, height, width, data)?;
        let hw = height * width;
        for px in 0..hw {
            let mut sum = 0.0f64;
            for c in 0..classes {
                let v = vol.data[c * hw + px].as_f64();
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Shape(format!(
                        "probability {v} at class {c}, pixel {px} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Shape(format!(
                    "probabilities at pixel {px} sum to {sum}"
                )));
            }
        }
        Ok(ProbVolume { vol })
    }

    /// Build a volume from a per-pixel function returning `C` probabilities.
    pub fn from_pixels(
        classes: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize) -> Vec<T>,
    ) -> Result<Self> {
        let hw = height * width;
        let mut data = vec![T::zero(); classes * hw];
        for px in 0..hw {
            let p = f(px);
            if p.len() != classes {
                return Err(Error::Shape(format!(
                    "pixel {px} has {} probabilities, expected {classes}",
                    p.len()
                )));
            }
            for (c, v) in p.into_iter().enumerate() {
                data[c * hw + px] = v;
            }
        }
        ProbVolume::new(classes, height, width, data)
    }

    pub fn classes(&self) -> usize {
        self.vol.channels
    }

    pub fn height(&self) -> usize {
        self.vol.height
    }

    pub fn width(&self) -> usize {
        self.vol.width
    }

    pub fn pixels(&self) -> usize {
        self.vol.plane_len()
    }

    pub fn data(&self) -> &[T] {
        &self.vol.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        self.vol.plane(c)
    }

    #[inline]
    pub fn get(&self, class: usize, pixel: usize) -> T {
        self.vol.data[class * self.pixels() + pixel]
    }

    pub fn pixel(&self, px: usize) -> Vec<T> {
        (0..self.classes()).map(|c| self.get(c, px)).collect()
    }

    pub fn as_volume(&self) -> &Volume<T> {
        &self.vol
    }

    /// Bilinear crop/resize followed by per-pixel renormalisation.
    pub fn crop_resize(&self, rect: Rect, out_h: usize, out_w: usize) -> Result<Self> {
        rect.check(self.height(), self.width())?;
        let mut data = resize_planes_linear(
            &self.vol.data,
            self.classes(),
            self.height(),
            self.width(),
            rect,
            out_h,
            out_w,
        );
        renormalize(&mut data, self.classes(), out_h * out_w);
        Ok(ProbVolume {
            vol: Volume {
                channels: self.classes(),
                height: out_h,
                width: out_w,
                data,
            },
        })
    }
}

impl ProbVolume<f32> {
    pub fn to_tensor(&self) -> Tensor {
        self.vol.to_tensor()
    }
}

fn renormalize<T: Real>(data: &mut [T], classes: usize, hw: usize) {
    for px in 0..hw {
        let sum = (0..classes).fold(T::zero(), |s, c| s + data[c * hw + px]);
        if sum > T::zero() {
            for c in 0..classes {
                let v = data[c * hw + px] / sum;
                data[c * hw + px] = v.min(T::one());
            }
        }
    }
}

/// Dense per-pixel class ids, `IGNORE` for unlabelled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}×{width} label map cannot hold {} values",
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Error if any non-ignore label is `>= classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&l| l != IGNORE && l as usize >= classes)
        {
            Some(pixel) => Err(Error::LabelOutOfRange {
                label: self.data[pixel],
                pixel,
                classes,
            }),
            None => Ok(()),
        }
    }

    pub fn crop_resize(&self, rect: Rect, out_h: usize, out_w: usize) -> Result<LabelMap> {
        rect.check(self.height, self.width)?;
        let data = resize_planes_nearest(&self.data, 1, self.height, self.width, rect, out_h, out_w);
        Ok(LabelMap {
            height: out_h,
            width: out_w,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_u8(vec![self.height, self.width], self.data.clone())
            .expect("label dims are valid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [h, w] => LabelMap::new(h, w, t.as_u8()?.to_vec()),
            _ => Err(Error::Shape(format!("expected H×W, got {:?}", t.dims()))),
        }
    }
}

/// Numerically stable per-pixel softmax over the class axis.
pub fn softmax<T: Real>(logits: &Logits<T>) -> Result<ProbVolume<T>> {
    let hw = logits.plane_len();
    let classes = logits.channels;
    if let Some(index) = logits.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogit {
            index,
            class: index / hw,
            pixel: index % hw,
        });
    }
    let mut data = vec![T::zero(); logits.data.len()];
    for px in 0..hw {
        let mut max = T::neg_infinity();
        for c in 0..classes {
            max = max.max(logits.data[c * hw + px]);
        }
        let mut sum = T::zero();
        for c in 0..classes {
            let e = (logits.data[c * hw + px] - max).exp();
            data[c * hw + px] = e;
            sum = sum + e;
        }
        for c in 0..classes {
            data[c * hw + px] = data[c * hw + px] / sum;
        }
    }
    Ok(ProbVolume {
        vol: Volume {
            channels: classes,
            height: logits.height,
            width: logits.width,
            data,
        },
    })
}

/// Per-pixel index of the most probable class; ties go to the lowest index.
pub fn argmax_labels<T: Real>(p: &ProbVolume<T>) -> LabelMap {
    let hw = p.pixels();
    let mut best = vec![0u8; hw];
    let mut best_v: Vec<T> = p.plane(0).to_vec();
    for c in 1..p.classes() {
        for (px, &v) in p.plane(c).iter().enumerate() {
            if v > best_v[px] {
                best_v[px] = v;
                best[px] = c as u8;
            }
        }
    }
    LabelMap {
        height: p.height(),
        width: p.width(),
        data: best,
    }
}

/// Per-pixel maximum probability (the `M` map of the class-confidence score).
pub fn max_prob<T: Real>(p: &ProbVolume<T>) -> Vec<T> {
    let mut best: Vec<T> = p.plane(0).to_vec();
    for c in 1..p.classes() {
        for (b, &v) in best.iter_mut().zip(p.plane(c)) {
            if v > *b {
                *b = v;
            }
        }
    }
    best
}

/// Crop `rect` out of `t` and resize it to `out_h×out_w`.
///
/// Works on `H×W` and `C×H×W` tensors of either dtype. Bilinear sampling on
/// `u8` rounds half up.
pub fn crop_resize(
    t: &Tensor,
    rect: Rect,
    out_h: usize,
    out_w: usize,
    mode: Resample,
) -> Result<Tensor> {
    let (planes, h, w) = t.planar()?;
    rect.check(h, w)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("output extents must be positive".into()));
    }
    let mut dims = t.dims().to_vec();
    let n = dims.len();
    dims[n - 2] = out_h;
    dims[n - 1] = out_w;
    let data = match (t.data(), mode) {
        (TensorData::F32(v), Resample::Nearest) => {
            TensorData::F32(resize_planes_nearest(v, planes, h, w, rect, out_h, out_w))
        }
        (TensorData::F32(v), Resample::Bilinear) => {
            TensorData::F32(resize_planes_linear(v, planes, h, w, rect, out_h, out_w))
        }
        (TensorData::U8(v), Resample::Nearest) => {
            TensorData::U8(resize_planes_nearest(v, planes, h, w, rect, out_h, out_w))
        }
        (TensorData::U8(v), Resample::Bilinear) => {
            let as_f: Vec<f64> = v.iter().map(|&b| b as f64).collect();
            let out = resize_planes_linear(&as_f, planes, h, w, rect, out_h, out_w);
            TensorData::U8(out.into_iter().map(|x| (x + 0.5).floor() as u8).collect())
        }
    };
    Tensor::new(dims, data)
}

/// Source index for nearest sampling with half-pixel centres.
#[inline]
fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    s.min(in_len - 1)
}

/// `(i0, i1, frac)` for linear sampling with half-pixel centres, clamped at the edges.
#[inline]
fn linear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let s = s.clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

pub(crate) fn resize_planes_nearest<T: Copy>(
    src: &[T],
    planes: usize,
    h: usize,
    w: usize,
    rect: Rect,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let rows: Vec<usize> = (0..out_h)
        .map(|y| rect.row + nearest_index(y, rect.height, out_h))
        .collect();
    let cols: Vec<usize> = (0..out_w)
        .map(|x| rect.col + nearest_index(x, rect.width, out_w))
        .collect();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &r in &rows {
            let row = &plane[r * w..(r + 1) * w];
            out.extend(cols.iter().map(|&c| row[c]));
        }
    }
    out
}

pub(crate) fn resize_planes_linear<T: Real>(
    src: &[T],
    planes: usize,
    h: usize,
    w: usize,
    rect: Rect,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let rows: Vec<_> = (0..out_h)
        .map(|y| linear_taps(y, rect.height, out_h))
        .collect();
    let cols: Vec<_> = (0..out_w)
        .map(|x| linear_taps(x, rect.width, out_w))
        .collect();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let at = |r: usize, c: usize| plane[(rect.row + r) * w + rect.col + c].as_f64();
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                let (a, b, c, d) = (at(r0, c0), at(r0, c1), at(r1, c0), at(r1, c1));
                let top = a * (1.0 - fx) + b * fx;
                let bot = c * (1.0 - fx) + d * fx;
                let v = top * (1.0 - fy) + bot * fy;
                let lo = a.min(b).min(c).min(d);
                let hi = a.max(b).max(c).max(d);
                out.push(T::from_f64(v.clamp(lo, hi)));
            }
        }
    }
    out
}
