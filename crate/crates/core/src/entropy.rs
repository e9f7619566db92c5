//! Normalised self-entropy and the class-conditional reliability filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax_labels, LabelMap, ProbVolume, Real, Rect, Tensor};

/// Per-pixel entropy divided by `ln C`, so values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl EntropyMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.height, self.width], self.data.clone()).expect("valid dims")
    }
}

/// Binary mask of pixels whose pseudo-label is trusted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl FilterMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{height}×{width} filter cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Shape("filter map must be binary".into()));
        }
        Ok(FilterMap {
            height,
            width,
            data,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        FilterMap {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FilterMap {
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    #[inline]
    pub fn is_set(&self, px: usize) -> bool {
        self.data[px] == 1
    }

    /// Nearest-neighbour crop/resize; stays binary.
    pub fn crop_resize(&self, rect: Rect, out_h: usize, out_w: usize) -> Result<FilterMap> {
        rect.check(self.height, self.width)?;
        let data = crate::tensor::resize_planes_nearest(
            &self.data,
            1,
            self.height,
            self.width,
            rect,
            out_h,
            out_w,
        );
        Ok(FilterMap {
            height: out_h,
            width: out_w,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_u8(vec![self.height, self.width], self.data.clone()).expect("valid dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [h, w] => FilterMap::new(h, w, t.as_u8()?.to_vec()),
            _ => Err(Error::Shape(format!("expected H×W, got {:?}", t.dims()))),
        }
    }
}

/// Per-class entropy cut-offs. `None` marks a class with no usable estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    pub values: Vec<Option<f32>>,
}

impl ThresholdVector {
    pub fn uniform(classes: usize, h: f32) -> Self {
        ThresholdVector {
            values: vec![Some(h); classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    /// Value substituted for classes without a threshold: the mean of the
    /// valid ones, or 0.5 when none are valid.
    pub fn fallback(&self) -> f32 {
        let valid: Vec<f64> = self.values.iter().flatten().map(|&v| v as f64).collect();
        if valid.is_empty() {
            0.5
        } else {
            (valid.iter().sum::<f64>() / valid.len() as f64) as f32
        }
    }

    /// Thresholds with the fallback filled in.
    pub fn resolved(&self) -> Vec<f32> {
        let fb = self.fallback();
        self.values.iter().map(|v| v.unwrap_or(fb)).collect()
    }
}

/// `-Σ p ln p / ln C` per pixel, with `0 ln 0 = 0`.
pub fn self_entropy<T: Real>(p: &ProbVolume<T>) -> Result<EntropyMap> {
    let classes = p.classes();
    if classes < 2 {
        return Err(Error::TooFewClasses(classes));
    }
    let norm = (classes as f64).ln();
    let hw = p.pixels();
    let mut acc = vec![0.0f64; hw];
    for c in 0..classes {
        for (a, &v) in acc.iter_mut().zip(p.plane(c)) {
            let v = v.as_f64();
            if v > 0.0 {
                *a -= v * v.ln();
            }
        }
    }
    Ok(EntropyMap {
        height: p.height(),
        width: p.width(),
        data: acc
            .into_iter()
            .map(|e| (e / norm).clamp(0.0, 1.0) as f32)
            .collect(),
    })
}

/// `F = 1` where the pixel's entropy is at most the threshold of its argmax class.
pub fn filter_map<T: Real>(
    p: &ProbVolume<T>,
    e: &EntropyMap,
    h: &ThresholdVector,
) -> Result<FilterMap> {
    if (e.height, e.width) != (p.height(), p.width()) {
        return Err(Error::DimMismatch {
            what: "entropy map",
            expected: vec![p.height(), p.width()],
            actual: vec![e.height, e.width],
        });
    }
    if h.classes() != p.classes() {
        return Err(Error::DimMismatch {
            what: "threshold vector",
            expected: vec![p.classes()],
            actual: vec![h.classes()],
        });
    }
    let labels = argmax_labels(p);
    Ok(filter_from_labels(&labels, e, &h.resolved()))
}

pub(crate) fn filter_from_labels(labels: &LabelMap, e: &EntropyMap, resolved: &[f32]) -> FilterMap {
    let data = labels
        .data()
        .iter()
        .zip(&e.data)
        .map(|(&c, &ent)| u8::from(ent <= resolved[c as usize]))
        .collect();
    FilterMap {
        height: labels.height(),
        width: labels.width(),
        data,
    }
}
