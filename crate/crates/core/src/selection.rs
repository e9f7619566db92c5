//! Class-based sorting of target images and dynamic threshold extraction.
//!
//! Every target image gets one confidence per class it predicts: the mean of
//! the per-pixel maximum probability over the pixels assigned to that class.
//! For each class the images are ranked by that score and the top
//! `ceil(N_c · p / C)` are kept; the union of the per-class picks is the
//! confident subset. The last image kept for a class (the boundary image)
//! sets that class's entropy threshold.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{self_entropy, ThresholdVector};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{argmax_labels, max_prob, ProbVolume, Real};

pub type ImageId = u32;

/// Per-class confidence of one image; `None` where the class never wins the argmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: ImageId,
    pub confidence: Vec<Option<f32>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassConfidenceTable {
    pub classes: usize,
    pub rows: Vec<ImageScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Portion selected in round 0.
    pub p0: f64,
    /// Added to the portion after every round.
    pub delta_p: f64,
    pub classes: usize,
    pub round: usize,
}

impl SelectionConfig {
    pub fn new(classes: usize, round: usize) -> Self {
        SelectionConfig {
            p0: 0.1,
            delta_p: 0.05,
            classes,
            round,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 <= 1.0) {
            return Err(Error::Config(format!("p0 must lie in (0, 1], got {}", self.p0)));
        }
        if self.delta_p.is_nan() || self.delta_p < 0.0 {
            return Err(Error::Config(format!("delta_p must be >= 0, got {}", self.delta_p)));
        }
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        Ok(())
    }
}

/// Effective portion for the configured round, clamped to 1.
pub fn round_portion(cfg: &SelectionConfig) -> f64 {
    (cfg.p0 + cfg.round as f64 * cfg.delta_p).min(1.0)
}

/// Number of images to keep from a class list of length `n`.
///
/// The product is taken up with a small tolerance so that values like
/// `0.25000000000000006 · 24 / 6` count as exactly 1.
pub fn portion_len(n: usize, p: f64, classes: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = n as f64 * p / classes as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(n)
}

pub fn score_image<T: Real>(p: &ProbVolume<T>) -> Vec<Option<f32>> {
    let labels = argmax_labels(p);
    let maxes = max_prob(p);
    let mut sums = vec![0.0f64; p.classes()];
    let mut counts = vec![0usize; p.classes()];
    for (&c, &m) in labels.data().iter().zip(&maxes) {
        sums[c as usize] += m.as_f64();
        counts[c as usize] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| (s / n as f64) as f32))
        .collect()
}

/// Score every image in parallel. Output order follows the input order.
pub fn score_images<T: Real>(images: &[(ImageId, &ProbVolume<T>)]) -> ClassConfidenceTable {
    let classes = images.first().map(|(_, p)| p.classes()).unwrap_or(0);
    let rows = par::map(images, |(id, p)| ImageScore {
        id: *id,
        confidence: score_image(p),
    });
    ClassConfidenceTable { classes, rows }
}

/// Per-class rankings and the confident union.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentSubset {
    /// Full ranking per class: ids whose argmax contains the class, best first.
    pub sorted: Vec<Vec<ImageId>>,
    /// How many of each ranking are kept.
    pub len_th: Vec<usize>,
    /// Deduplicated union, class 0's picks first.
    pub union: Vec<ImageId>,
}

impl ConfidentSubset {
    pub fn selected(&self, class: usize) -> &[ImageId] {
        &self.sorted[class][..self.len_th[class]]
    }

    /// Last kept image of a class, if the class was seen at all.
    pub fn boundary(&self, class: usize) -> Option<ImageId> {
        self.len_th[class]
            .checked_sub(1)
            .map(|i| self.sorted[class][i])
    }
}

pub fn select_confident(
    table: &ClassConfidenceTable,
    cfg: &SelectionConfig,
) -> Result<ConfidentSubset> {
    if table.rows.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    cfg.validate()?;
    let p = round_portion(cfg);
    let mut sorted = Vec::with_capacity(table.classes);
    let mut len_th = Vec::with_capacity(table.classes);
    for c in 0..table.classes {
        let mut ranked: Vec<(f32, ImageId)> = table
            .rows
            .iter()
            .filter_map(|r| r.confidence.get(c).copied().flatten().map(|u| (u, r.id)))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        len_th.push(portion_len(ranked.len(), p, cfg.classes));
        sorted.push(ranked.into_iter().map(|(_, id)| id).collect::<Vec<_>>());
    }
    let mut seen = HashSet::new();
    let mut union = Vec::new();
    for (list, &n) in sorted.iter().zip(&len_th) {
        for &id in &list[..n] {
            if seen.insert(id) {
                union.push(id);
            }
        }
    }
    Ok(ConfidentSubset {
        sorted,
        len_th,
        union,
    })
}

/// Mean normalised entropy of the boundary image's class-`c` pixels, per class.
///
/// `probs` resolves an image id to its current prediction.
pub fn extract_thresholds<'a, T, F>(subset: &ConfidentSubset, probs: F) -> Result<ThresholdVector>
where
    T: Real,
    F: Fn(ImageId) -> Option<&'a ProbVolume<T>>,
{
    let mut values = Vec::with_capacity(subset.sorted.len());
    for c in 0..subset.sorted.len() {
        let Some(id) = subset.boundary(c) else {
            values.push(None);
            continue;
        };
        let p = probs(id).ok_or(Error::MissingProbVolume(id))?;
        let labels = argmax_labels(p);
        let e = self_entropy(p)?;
        let (sum, n) = labels
            .data()
            .iter()
            .zip(&e.data)
            .filter(|(&l, _)| l as usize == c)
            .fold((0.0f64, 0usize), |(s, n), (_, &v)| (s + v as f64, n + 1));
        values.push((n > 0).then(|| (sum / n as f64) as f32));
    }
    Ok(ThresholdVector { values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSelection {
    pub ids: Vec<ImageId>,
    pub threshold: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub round: usize,
    pub p: f64,
    pub selected: Vec<ImageId>,
    pub thresholds: ThresholdVector,
    pub per_class: Vec<ClassSelection>,
}

impl SelectionResult {
    /// Per-class selected counts before deduplication.
    pub fn histogram(&self) -> Vec<usize> {
        self.per_class.iter().map(|c| c.ids.len()).collect()
    }

    pub fn to_record(&self) -> SelectionRecord {
        SelectionRecord {
            round: self.round,
            p: self.p,
            selected: self.selected.clone(),
            per_class: self
                .per_class
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    (
                        c,
                        ClassRecord {
                            count: s.ids.len(),
                            h: s.threshold,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_record()).expect("serialisable");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// On-disk form of a [`SelectionResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub round: usize,
    pub p: f64,
    pub selected: Vec<ImageId>,
    pub per_class: BTreeMap<usize, ClassRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub count: usize,
    pub h: Option<f32>,
}

impl SelectionRecord {
    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_owned(),
            source,
        })
    }
}

/// Score, rank, slice, union and extract thresholds in one pass.
pub fn class_based_sorting<T: Real>(
    images: &[(ImageId, &ProbVolume<T>)],
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    if images.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    let table = score_images(images);
    let subset = select_confident(&table, cfg)?;
    let lookup: std::collections::HashMap<ImageId, &ProbVolume<T>> =
        images.iter().map(|(id, p)| (*id, *p)).collect();
    let thresholds = extract_thresholds(&subset, |id| lookup.get(&id).copied())?;
    let per_class = (0..table.classes)
        .map(|c| ClassSelection {
            ids: subset.selected(c).to_vec(),
            threshold: thresholds.values[c],
        })
        .collect();
    Ok(SelectionResult {
        round: cfg.round,
        p: round_portion(cfg),
        selected: subset.union,
        thresholds,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn row(id: ImageId, conf: &[Option<f32>]) -> ImageScore {
        ImageScore {
            id,
            confidence: conf.to_vec(),
        }
    }

    #[test]
    fn portion_schedule() {
        let mut cfg = SelectionConfig::new(6, 0);
        assert_abs_diff_eq!(round_portion(&cfg), 0.10, epsilon = 1e-12);
        cfg.round = 3;
        assert_abs_diff_eq!(round_portion(&cfg), 0.25, epsilon = 1e-12);
        cfg.round = 100;
        assert_eq!(round_portion(&cfg), 1.0);
    }

    #[test]
    fn portion_len_rules() {
        assert_eq!(portion_len(10, 0.2, 2), 1);
        assert_eq!(portion_len(24, 0.1 + 3.0 * 0.05, 6), 1);
        assert_eq!(portion_len(1, 0.1, 6), 1);
        assert_eq!(portion_len(0, 0.1, 6), 0);
        assert_eq!(portion_len(7, 1.0, 1), 7);
        assert_eq!(portion_len(11, 0.2, 2), 2);
    }

    #[test]
    fn score_fixtures() {
        let p = ProbVolume::<f32>::from_pixels(3, 2, 2, |_| vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(score_image(&p), vec![Some(1.0), None, None]);

        let px = [[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.2, 0.8]];
        let p = ProbVolume::<f64>::from_pixels(2, 2, 2, |i| px[i].to_vec()).unwrap();
        let s = score_image(&p);
        assert_abs_diff_eq!(s[0].unwrap(), 0.75, epsilon = 1e-6);
        assert_abs_diff_eq!(s[1].unwrap(), 0.75, epsilon = 1e-6);

        let p = ProbVolume::<f64>::from_pixels(3, 2, 2, |_| vec![1.0 / 3.0; 3]).unwrap();
        let s = score_image(&p);
        assert_abs_diff_eq!(s[0].unwrap(), 1.0 / 3.0, epsilon = 1e-6);
        assert_eq!(&s[1..], &[None, None]);
    }

    #[test]
    fn full_portion_single_class_takes_everything() {
        let table = ClassConfidenceTable {
            classes: 1,
            rows: (0..5).map(|i| row(i, &[Some(i as f32 / 10.0)])).collect(),
        };
        let cfg = SelectionConfig {
            p0: 1.0,
            delta_p: 0.0,
            classes: 1,
            round: 0,
        };
        let s = select_confident(&table, &cfg).unwrap();
        assert_eq!(s.union, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn ten_images_two_classes() {
        let table = ClassConfidenceTable {
            classes: 2,
            rows: (0..10)
                .map(|i| row(i, &[Some(0.5 + i as f32 / 100.0), None]))
                .collect(),
        };
        let cfg = SelectionConfig {
            p0: 0.2,
            delta_p: 0.0,
            classes: 2,
            round: 0,
        };
        let s = select_confident(&table, &cfg).unwrap();
        assert_eq!(s.selected(0), &[9]);
        assert_eq!(s.len_th, vec![1, 0]);
        assert_eq!(s.boundary(1), None);
    }

    #[test]
    fn union_deduplicates() {
        let table = ClassConfidenceTable {
            classes: 2,
            rows: vec![row(0, &[Some(0.9), Some(0.9)]), row(1, &[Some(0.5), Some(0.4)])],
        };
        let cfg = SelectionConfig {
            p0: 0.5,
            delta_p: 0.0,
            classes: 2,
            round: 0,
        };
        let s = select_confident(&table, &cfg).unwrap();
        assert_eq!(s.union, vec![0]);
        assert_eq!(s.len_th, vec![1, 1]);
    }

    #[test]
    fn ties_broken_by_ascending_id() {
        let table = ClassConfidenceTable {
            classes: 1,
            rows: vec![row(7, &[Some(0.5)]), row(3, &[Some(0.5)]), row(5, &[Some(0.6)])],
        };
        let cfg = SelectionConfig {
            p0: 1.0,
            delta_p: 0.0,
            classes: 1,
            round: 0,
        };
        assert_eq!(select_confident(&table, &cfg).unwrap().sorted[0], vec![5, 3, 7]);
    }

    #[test]
    fn empty_target_set() {
        let table = ClassConfidenceTable {
            classes: 2,
            rows: vec![],
        };
        assert!(matches!(
            select_confident(&table, &SelectionConfig::new(2, 0)),
            Err(Error::EmptyTargetSet)
        ));
        let none: Vec<(ImageId, &ProbVolume<f32>)> = vec![];
        assert!(matches!(
            class_based_sorting(&none, &SelectionConfig::new(2, 0)),
            Err(Error::EmptyTargetSet)
        ));
    }

    #[test]
    fn thresholds_from_boundary_image() {
        // class 1 pixels: one-hot; class 0 pixels: entropies 0.2 and 0.4 (solved for C=2)
        let p_for = |h: f64| {
            // binary entropy(q)/ln2 = h, solve by bisection
            let (mut lo, mut hi) = (0.5f64, 1.0f64);
            for _ in 0..200 {
                let m = 0.5 * (lo + hi);
                let e = -(m * m.ln() + (1.0 - m) * (1.0 - m).ln()) / 2f64.ln();
                if e > h {
                    lo = m
                } else {
                    hi = m
                }
            }
            lo
        };
        let (a, b) = (p_for(0.2), p_for(0.4));
        let pv = ProbVolume::<f64>::from_pixels(2, 1, 3, |px| match px {
            0 => vec![a, 1.0 - a],
            1 => vec![b, 1.0 - b],
            _ => vec![0.0, 1.0],
        })
        .unwrap();
        let subset = ConfidentSubset {
            sorted: vec![vec![4], vec![4]],
            len_th: vec![1, 1],
            union: vec![4],
        };
        let h = extract_thresholds(&subset, |id| (id == 4).then_some(&pv)).unwrap();
        assert_abs_diff_eq!(h.values[0].unwrap(), 0.3, epsilon = 1e-6);
        assert_eq!(h.values[1], Some(0.0));
    }

    #[test]
    fn threshold_invalid_when_class_absent_from_boundary() {
        let pv = ProbVolume::<f32>::from_pixels(3, 1, 2, |_| vec![1.0, 0.0, 0.0]).unwrap();
        let subset = ConfidentSubset {
            sorted: vec![vec![1], vec![1], vec![]],
            len_th: vec![1, 1, 0],
            union: vec![1],
        };
        let h = extract_thresholds(&subset, |_| Some(&pv)).unwrap();
        assert_eq!(h.values, vec![Some(0.0), None, None]);
        assert!(matches!(
            extract_thresholds::<f32, _>(&subset, |_| None),
            Err(Error::MissingProbVolume(1))
        ));
    }

    #[test]
    fn record_json_shape() {
        let r = SelectionResult {
            round: 2,
            p: 0.2,
            selected: vec![3, 1],
            thresholds: ThresholdVector {
                values: vec![Some(0.25), None],
            },
            per_class: vec![
                ClassSelection {
                    ids: vec![3],
                    threshold: Some(0.25),
                },
                ClassSelection {
                    ids: vec![],
                    threshold: None,
                },
            ],
        };
        let v: serde_json::Value = serde_json::to_value(r.to_record()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "round": 2, "p": 0.2, "selected": [3, 1],
                "per_class": {"0": {"count": 1, "h": 0.25}, "1": {"count": 0, "h": null}}
            })
        );
    }

    fn arb_table() -> impl Strategy<Value = ClassConfidenceTable> {
        (1usize..5, 1usize..20).prop_flat_map(|(classes, n)| {
            prop::collection::vec(
                prop::collection::vec(prop::option::of(0u8..10), classes),
                n,
            )
            .prop_map(move |rows| ClassConfidenceTable {
                classes,
                rows: rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, conf)| ImageScore {
                        id: i as ImageId,
                        confidence: conf.into_iter().map(|c| c.map(|v| v as f32 / 10.0)).collect(),
                    })
                    .collect(),
            })
        })
    }

    proptest! {
        #[test]
        fn order_of_rows_does_not_matter(table in arb_table(), round in 0usize..20, seed in any::<u64>()) {
            let cfg = SelectionConfig::new(table.classes, round);
            let a = select_confident(&table, &cfg).unwrap();
            let mut shuffled = table.clone();
            // deterministic permutation from the seed
            let n = shuffled.rows.len();
            for i in (1..n).rev() {
                let j = ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64)) >> 33) as usize % (i + 1);
                shuffled.rows.swap(i, j);
            }
            let b = select_confident(&shuffled, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn growing_portion_keeps_prefix(table in arb_table(), round in 0usize..20) {
            let lo = select_confident(&table, &SelectionConfig::new(table.classes, round)).unwrap();
            let hi = select_confident(&table, &SelectionConfig::new(table.classes, round + 1)).unwrap();
            for c in 0..table.classes {
                prop_assert!(hi.selected(c).starts_with(lo.selected(c)));
            }
        }
    }
}
