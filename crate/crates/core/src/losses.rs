//! Segmentation objectives and their gradients with respect to logits.
//!
//! Every loss here is a function of the softmax output `p` and returns the
//! gradient through the softmax, so callers can hand it straight to the
//! model's backward pass.

use serde::{Deserialize, Serialize};

use crate::entropy::FilterMap;
use crate::error::{Error, Result};
use crate::scale_examples::ScaleExample;
use crate::tensor::{LabelMap, ProbVolume, Real, Volume, IGNORE};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Plain pixel sum.
    #[default]
    Sum,
    /// Sum divided by the number of contributing pixels.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focusing exponent of the focal term.
    pub gamma: f64,
    /// Weight of the focal term inside the adaptation loss.
    pub beta: f64,
    /// Also apply the reliability filter to the focal term.
    pub focal_masked: bool,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 3.0,
            beta: 0.1,
            focal_masked: false,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub loss: f64,
    /// Gradient with respect to the logits, same shape as the prediction.
    pub grad: Volume<T>,
    /// Pixels that contributed to the loss.
    pub count: usize,
}

impl<T: Real> LossValue<T> {
    pub fn reduce(mut self, reduction: Reduction) -> Self {
        if reduction == Reduction::Mean && self.count > 0 {
            let n = self.count as f64;
            self.loss /= n;
            let inv = T::from_f64(1.0 / n);
            self.grad.data.iter_mut().for_each(|g| *g = *g * inv);
        }
        self
    }

    /// Multiply loss and gradient by `k`.
    pub fn scale(mut self, k: f64) -> Self {
        self.loss *= k;
        let k = T::from_f64(k);
        self.grad.data.iter_mut().for_each(|g| *g = *g * k);
        self
    }
}

fn check_dims<T: Real>(p: &ProbVolume<T>, y: &LabelMap, f: Option<&FilterMap>) -> Result<()> {
    if (y.height(), y.width()) != (p.height(), p.width()) {
        return Err(Error::DimMismatch {
            what: "label map",
            expected: vec![p.height(), p.width()],
            actual: vec![y.height(), y.width()],
        });
    }
    if let Some(f) = f {
        if (f.height(), f.width()) != (p.height(), p.width()) {
            return Err(Error::DimMismatch {
                what: "filter map",
                expected: vec![p.height(), p.width()],
                actual: vec![f.height(), f.width()],
            });
        }
    }
    y.validate(p.classes())
}

/// Shared per-pixel kernel. `gamma = None` is plain cross-entropy.
fn pixel_loss<T: Real>(
    p: &ProbVolume<T>,
    y: &LabelMap,
    mask: Option<&FilterMap>,
    gamma: Option<f64>,
) -> Result<LossValue<T>> {
    check_dims(p, y, mask)?;
    let classes = p.classes();
    let hw = p.pixels();
    let mut grad = Volume::<T>::zeros(classes, p.height(), p.width());
    let mut loss = 0.0f64;
    let mut count = 0usize;
    for (px, &label) in y.data().iter().enumerate() {
        if label == IGNORE || mask.is_some_and(|m| !m.is_set(px)) {
            continue;
        }
        count += 1;
        let t = label as usize;
        let pt = p.get(t, px).as_f64();
        let log_pt = pt.max(LOG_FLOOR).ln();
        // d loss / d z_j = coef * (δ_tj − p_j)
        let coef = match gamma {
            None => {
                loss -= log_pt;
                -1.0
            }
            Some(g) => {
                let q = 1.0 - pt;
                let w = q.powf(g);
                loss -= log_pt * w;
                let dw = if g == 0.0 || q <= 0.0 {
                    0.0
                } else {
                    g * q.powf(g - 1.0) * pt * log_pt
                };
                dw - w
            }
        };
        for c in 0..classes {
            let delta = if c == t { 1.0 } else { 0.0 };
            let pc = p.get(c, px).as_f64();
            grad.data[c * hw + px] = T::from_f64(coef * (delta - pc));
        }
    }
    Ok(LossValue { loss, grad, count })
}

/// `−Σ log p_y` over labelled pixels.
pub fn ce_loss<T: Real>(p: &ProbVolume<T>, y: &LabelMap) -> Result<LossValue<T>> {
    pixel_loss(p, y, None, None)
}

/// Cross-entropy restricted to pixels with `F = 1`.
pub fn filtered_ce_loss<T: Real>(
    p: &ProbVolume<T>,
    y: &LabelMap,
    f: &FilterMap,
) -> Result<LossValue<T>> {
    pixel_loss(p, y, Some(f), None)
}

/// `−Σ (1 − p_y)^γ log p_y`; the filter applies only with `focal_masked`.
pub fn focal_loss<T: Real>(
    p: &ProbVolume<T>,
    y: &LabelMap,
    f: &FilterMap,
    cfg: &LossConfig,
) -> Result<LossValue<T>> {
    pixel_loss(p, y, cfg.focal_masked.then_some(f), Some(cfg.gamma))
}

/// Loss of one batch of scale-invariant examples.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationLoss<T> {
    /// `β·focal + filtered CE`, after reduction.
    pub total: f64,
    pub ce: f64,
    pub focal: f64,
    /// Per-example gradient with respect to that example's logits.
    pub grads: Vec<Volume<T>>,
    pub ce_count: usize,
    pub focal_count: usize,
}

/// `Σ_i β·L_FL(i) + L_seg(i)` over the examples, each evaluated on the
/// model's prediction for that patch.
///
/// In [`Reduction::Mean`] mode the two terms are each divided by their own
/// contributing-pixel count across the whole batch.
pub fn adaptation_loss<T: Real>(
    examples: &[ScaleExample],
    outputs: &[ProbVolume<T>],
    cfg: &LossConfig,
) -> Result<AdaptationLoss<T>> {
    if examples.len() != outputs.len() {
        return Err(Error::DimMismatch {
            what: "model outputs per example",
            expected: vec![examples.len()],
            actual: vec![outputs.len()],
        });
    }
    if examples.is_empty() {
        log::warn!("adaptation loss over an empty example list");
    }
    let mut parts = Vec::with_capacity(examples.len());
    for (ex, p) in examples.iter().zip(outputs) {
        let ce = filtered_ce_loss(p, &ex.labels, &ex.filter)?;
        let fl = focal_loss(p, &ex.labels, &ex.filter, cfg)?;
        parts.push((ce, fl));
    }
    let ce_count: usize = parts.iter().map(|(c, _)| c.count).sum();
    let focal_count: usize = parts.iter().map(|(_, f)| f.count).sum();
    let (ce_scale, fl_scale) = match cfg.reduction {
        Reduction::Sum => (1.0, 1.0),
        Reduction::Mean => (
            if ce_count > 0 { 1.0 / ce_count as f64 } else { 0.0 },
            if focal_count > 0 { 1.0 / focal_count as f64 } else { 0.0 },
        ),
    };
    let mut ce_total = 0.0;
    let mut fl_total = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for (ce, fl) in parts {
        ce_total += ce.loss * ce_scale;
        fl_total += fl.loss * fl_scale;
        let a = T::from_f64(ce_scale);
        let b = T::from_f64(cfg.beta * fl_scale);
        let mut g = ce.grad;
        for (x, &y) in g.data.iter_mut().zip(&fl.grad.data) {
            *x = *x * a + y * b;
        }
        grads.push(g);
    }
    Ok(AdaptationLoss {
        total: cfg.beta * fl_total + ce_total,
        ce: ce_total,
        focal: fl_total,
        grads,
        ce_count,
        focal_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softmax, Logits, Rect};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single(pt: f64) -> ProbVolume<f64> {
        ProbVolume::from_pixels(2, 1, 1, |_| vec![pt, 1.0 - pt]).unwrap()
    }

    #[test]
    fn ce_fixtures() {
        let p = ProbVolume::<f32>::from_pixels(3, 2, 2, |px| {
            let mut v = vec![0.0; 3];
            v[px % 3] = 1.0;
            v
        })
        .unwrap();
        let y = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let l = ce_loss(&p, &y).unwrap();
        assert_eq!(l.loss, 0.0);
        assert_eq!(l.count, 4);

        let l = ce_loss(&single(0.5), &LabelMap::new(1, 1, vec![0]).unwrap()).unwrap();
        assert_abs_diff_eq!(l.loss, std::f64::consts::LN_2, epsilon = 1e-12);

        let l = ce_loss(&single(0.3), &LabelMap::filled(1, 1, IGNORE)).unwrap();
        assert_eq!((l.loss, l.count), (0.0, 0));
        assert!(l.grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ce_rejects_bad_labels() {
        assert!(matches!(
            ce_loss(&single(0.3), &LabelMap::new(1, 1, vec![2]).unwrap()),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn filtered_fixtures() {
        let p = ProbVolume::<f64>::from_pixels(2, 1, 2, |px| {
            if px == 0 {
                vec![0.7, 0.3]
            } else {
                vec![0.2, 0.8]
            }
        })
        .unwrap();
        let y = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let ce = ce_loss(&p, &y).unwrap();
        let all = filtered_ce_loss(&p, &y, &FilterMap::ones(1, 2)).unwrap();
        assert_eq!(ce, all);
        let none = filtered_ce_loss(&p, &y, &FilterMap::zeros(1, 2)).unwrap();
        assert_eq!(none.loss, 0.0);
        let first = filtered_ce_loss(&p, &y, &FilterMap::new(1, 2, vec![1, 0]).unwrap()).unwrap();
        assert_abs_diff_eq!(first.loss, -(0.7f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn focal_fixtures() {
        let cfg = LossConfig::default();
        let y = LabelMap::new(1, 1, vec![0]).unwrap();
        let f = FilterMap::ones(1, 1);
        for gamma in [0.0, 0.5, 3.0, 5.0] {
            let c = LossConfig { gamma, ..cfg };
            assert_eq!(focal_loss(&single(1.0), &y, &f, &c).unwrap().loss, 0.0);
        }
        let l = focal_loss(&single(0.5), &y, &f, &cfg).unwrap();
        assert_abs_diff_eq!(l.loss, 0.0866, epsilon = 1e-4);

        let c0 = LossConfig { gamma: 0.0, ..cfg };
        let p = single(0.37);
        let a = focal_loss(&p, &y, &f, &c0).unwrap();
        let b = ce_loss(&p, &y).unwrap();
        assert!((a.loss - b.loss).abs() <= 1e-7);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn focal_mask_flag() {
        let y = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let p = ProbVolume::<f64>::from_pixels(2, 1, 2, |_| vec![0.6, 0.4]).unwrap();
        let f = FilterMap::new(1, 2, vec![1, 0]).unwrap();
        let open = focal_loss(&p, &y, &f, &LossConfig::default()).unwrap();
        let masked = focal_loss(
            &p,
            &y,
            &f,
            &LossConfig {
                focal_masked: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((open.count, masked.count), (2, 1));
    }

    fn example(labels: LabelMap, filter: FilterMap) -> ScaleExample {
        let (h, w) = (labels.height(), labels.width());
        ScaleExample {
            image: crate::tensor::Image::new(h, w, vec![0.0; 3 * h * w]).unwrap(),
            labels,
            filter,
            source_id: 0,
            index: 0,
            rect: Rect::full(h, w),
        }
    }

    #[test]
    fn adaptation_arithmetic() {
        let y = LabelMap::new(1, 1, vec![0]).unwrap();
        let p = single(0.5);
        let ex = example(y.clone(), FilterMap::ones(1, 1));
        let cfg = LossConfig::default();
        let l = adaptation_loss(std::slice::from_ref(&ex), std::slice::from_ref(&p), &cfg).unwrap();
        let ce = std::f64::consts::LN_2;
        assert_abs_diff_eq!(l.total, 0.1 * ce * 0.125 + ce, epsilon = 1e-12);

        let zero_beta = LossConfig { beta: 0.0, ..cfg };
        let l0 = adaptation_loss(std::slice::from_ref(&ex), std::slice::from_ref(&p), &zero_beta).unwrap();
        assert_abs_diff_eq!(l0.total, l0.ce, epsilon = 0.0);

        let twice = adaptation_loss(&[ex.clone(), ex.clone()], &[p.clone(), p.clone()], &cfg)
            .unwrap();
        assert_eq!(twice.total, 2.0 * l.total);
        for g in &twice.grads {
            assert_eq!(g, &l.grads[0]);
        }

        let empty = adaptation_loss::<f64>(&[], &[], &cfg).unwrap();
        assert_eq!(empty.total, 0.0);
    }

    #[test]
    fn adaptation_hand_values() {
        // β·FL + CE with FL = 0.2, CE = 1.0, β = 0.1
        assert_abs_diff_eq!(0.1 * 0.2 + 1.0, 1.02, epsilon = 1e-12);
        let y = LabelMap::new(1, 1, vec![0]).unwrap();
        let pt = (-1.0f64).exp();
        let p = single(pt);
        let gamma = (0.2f64).ln() / (1.0 - pt).ln();
        let cfg = LossConfig {
            gamma,
            beta: 0.1,
            ..Default::default()
        };
        let l = adaptation_loss(&[example(y, FilterMap::ones(1, 1))], &[p], &cfg).unwrap();
        assert_abs_diff_eq!(l.ce, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.focal, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(l.total, 1.02, epsilon = 1e-12);
    }

    #[test]
    fn mean_reduction_divides_by_count() {
        let y = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let p = ProbVolume::<f64>::from_pixels(2, 1, 2, |_| vec![0.5, 0.5]).unwrap();
        let l = ce_loss(&p, &y).unwrap().reduce(Reduction::Mean);
        assert_abs_diff_eq!(l.loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    fn arb_logits() -> impl Strategy<Value = (Logits<f64>, LabelMap)> {
        (
            prop::collection::vec(-4.0f64..4.0, 2 * 9),
            prop::collection::vec(0u8..2, 9),
        )
            .prop_map(|(z, y)| {
                (
                    Volume::from_vec(2, 3, 3, z).unwrap(),
                    LabelMap::new(3, 3, y).unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn focal_never_exceeds_ce((z, y) in arb_logits(), gamma in 0.0f64..5.0) {
            let p = softmax(&z).unwrap();
            let ce = ce_loss(&p, &y).unwrap();
            let cfg = LossConfig { gamma, ..Default::default() };
            let fl = focal_loss(&p, &y, &FilterMap::ones(3, 3), &cfg).unwrap();
            prop_assert!(fl.loss <= ce.loss + 1e-12);
            prop_assert!(fl.loss >= 0.0);
            prop_assert!(ce.loss >= 0.0);
        }
    }
}
