//! Confusion matrices, IoU/mIoU and the CSV reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, ModelParams};
use crate::par;
use crate::selection::SelectionRecord;
use crate::tensor::{argmax_labels, Image, LabelMap, Tensor, IGNORE};

/// Row = ground truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::DimMismatch {
                what: "confusion counts",
                expected: vec![classes, classes],
                actual: vec![counts.len()],
            });
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        let (h, w) = (gt.height(), gt.width());
        if (pred.height(), pred.width()) != (h, w) {
            return Err(Error::DimMismatch {
                what: "prediction",
                expected: vec![h, w],
                actual: vec![pred.height(), pred.width()],
            });
        }
        let c = self.classes;
        for (i, (&g, &p)) in gt.data().iter().zip(pred.data()).enumerate() {
            if g == IGNORE {
                continue;
            }
            for label in [g, p] {
                if label as usize >= c {
                    return Err(Error::LabelOutOfRange {
                        label,
                        pixel: i,
                        classes: c,
                    });
                }
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Row-major float32 `C×C` tensor, the layout of `confusion.lst`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(
            vec![self.classes, self.classes],
            self.counts.iter().map(|&v| v as f32).collect(),
        )
        .expect("C×C")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the class is absent from both ground truth and prediction.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub images: usize,
}

impl EvalReport {
    /// `class,iou` rows followed by a `miou` row; undefined classes are left blank.
    pub fn to_csv(&self, names: Option<&[&str]>) -> String {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.iou.iter().enumerate() {
            let name = names
                .and_then(|n| n.get(c))
                .map(|s| s.to_string())
                .unwrap_or_else(|| c.to_string());
            match iou {
                Some(v) => writeln!(out, "{name},{v:.6}").unwrap(),
                None => writeln!(out, "{name},").unwrap(),
            }
        }
        writeln!(out, "miou,{:.6}", self.miou).unwrap();
        out
    }
}

pub fn miou(cm: &ConfusionMatrix, images: usize) -> Result<EvalReport> {
    let c = cm.classes;
    let mut iou = Vec::with_capacity(c);
    let mut diag = 0u64;
    for k in 0..c {
        let tp = cm.get(k, k);
        let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
        let union = row + col - tp;
        diag += tp;
        iou.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::NoDefinedClasses);
    }
    let total = cm.total();
    Ok(EvalReport {
        miou: defined.iter().sum::<f64>() / defined.len() as f64,
        pixel_accuracy: if total == 0 { 0.0 } else { diag as f64 / total as f64 },
        iou,
        images,
    })
}

/// Confusion matrix of `model` over labelled images. Per-image matrices are
/// built in parallel; the integer merge makes the result schedule-independent.
pub fn confusion(model: &ModelParams, pairs: &[(&Image, &LabelMap)]) -> Result<ConfusionMatrix> {
    let c = model.config.classes;
    let per_image = par::map(pairs, |(x, y)| -> Result<ConfusionMatrix> {
        let pred = argmax_labels(&predict(model, x)?);
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, y)?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(c);
    for cm in per_image {
        total.merge(&cm?);
    }
    Ok(total)
}

pub fn evaluate(model: &ModelParams, pairs: &[(&Image, &LabelMap)]) -> Result<(ConfusionMatrix, EvalReport)> {
    let cm = confusion(model, pairs)?;
    let report = miou(&cm, pairs.len())?;
    Ok((cm, report))
}

/// Writes `report.csv`, `report.json` and `confusion.lst` into `dir`.
pub fn write_report(
    dir: impl AsRef<Path>,
    cm: &ConfusionMatrix,
    report: &EvalReport,
    names: Option<&[&str]>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report.to_csv(names)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("serialisable");
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    crate::lst::write_tensor(dir.join("confusion.lst"), &cm.to_tensor())
}

/// Per-class selected-image counts per round for one or more runs, as CSV:
/// `config,round,p,class,count,threshold`.
pub fn selection_report(runs: &[(&str, &[SelectionRecord])]) -> String {
    let mut out = String::from("config,round,p,class,count,threshold\n");
    for (name, history) in runs {
        for rec in history.iter() {
            for (class, cr) in &rec.per_class {
                let h = cr.h.map(|v| format!("{v:.6}")).unwrap_or_default();
                writeln!(out, "{name},{},{:.4},{class},{},{h}", rec.round, rec.p, cr.count).unwrap();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::ClassRecord;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn lm(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let y = lm(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&y, &y).unwrap();
        assert_eq!(cm.get(1, 1), 2);
        assert_eq!(cm.total(), 4);
        let r = miou(&cm, 1).unwrap();
        assert_eq!(r.iou, vec![Some(1.0); 3]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn ignore_pixels_are_skipped() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&lm(1, 2, &[0, 1]), &lm(1, 2, &[IGNORE, IGNORE])).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
    }

    #[test]
    fn one_by_two_fixture() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&lm(1, 2, &[1, 1]), &lm(1, 2, &[0, 1])).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (0, 1, 0, 1));
    }

    #[test]
    fn hand_computed_iou() {
        // TP0=2 FP0=1 FN0=1, TP1=1 FP1=1 FN1=1
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 1]).unwrap();
        let r = miou(&cm, 1).unwrap();
        assert!((r.iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.iou[1].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.miou - 0.416_666_666).abs() < 1e-6);
    }

    #[test]
    fn absent_class_excluded() {
        let cm = ConfusionMatrix::from_counts(3, vec![3, 0, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        let r = miou(&cm, 1).unwrap();
        assert_eq!(r.iou[1], None);
        assert_eq!(r.miou, 1.0);
        assert!(r.to_csv(None).contains("\n1,\n"));
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(miou(&ConfusionMatrix::new(2), 0), Err(Error::NoDefinedClasses)));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&lm(1, 2, &[0, 0]), &lm(2, 1, &[0, 0])).is_err());
    }

    fn history(counts: &[usize]) -> Vec<SelectionRecord> {
        counts
            .iter()
            .enumerate()
            .map(|(r, &n)| SelectionRecord {
                round: r,
                p: 0.1 + 0.05 * r as f64,
                selected: (0..n as u32).collect(),
                per_class: BTreeMap::from([(0, ClassRecord { count: n, h: Some(0.5) })]),
            })
            .collect()
    }

    #[test]
    fn selection_report_rows() {
        let a = history(&[1, 2, 2, 3]);
        let csv = selection_report(&[("with_fl", &a), ("without_fl", &a)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 8);
        assert_eq!(lines[1], "with_fl,0,0.1000,0,1,0.500000");
        assert_eq!(csv, selection_report(&[("with_fl", &a), ("without_fl", &a)]));
        let counts: Vec<usize> = lines[1..5]
            .iter()
            .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
    }

    fn maps() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
        prop::collection::vec(
            (prop::collection::vec(0u8..4, 6), prop::collection::vec(0u8..4, 6)),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn accumulate_order_independent(pairs in maps()) {
            let build = |order: &mut dyn Iterator<Item = &(Vec<u8>, Vec<u8>)>| {
                let mut cm = ConfusionMatrix::new(4);
                for (p, g) in order {
                    cm.accumulate(&lm(2, 3, p), &lm(2, 3, g)).unwrap();
                }
                cm
            };
            prop_assert_eq!(build(&mut pairs.iter()), build(&mut pairs.iter().rev()));
        }

        #[test]
        fn relabel_invariant(pairs in maps(), perm in Just([2u8, 0, 3, 1])) {
            let mut a = ConfusionMatrix::new(4);
            let mut b = ConfusionMatrix::new(4);
            for (p, g) in &pairs {
                a.accumulate(&lm(2, 3, p), &lm(2, 3, g)).unwrap();
                let pp: Vec<u8> = p.iter().map(|&v| perm[v as usize]).collect();
                let gg: Vec<u8> = g.iter().map(|&v| perm[v as usize]).collect();
                b.accumulate(&lm(2, 3, &pp), &lm(2, 3, &gg)).unwrap();
            }
            let (ra, rb) = (miou(&a, 1).unwrap(), miou(&b, 1).unwrap());
            prop_assert!((ra.miou - rb.miou).abs() < 1e-12);
            for c in 0..4 {
                prop_assert_eq!(ra.iou[c], rb.iou[perm[c] as usize]);
            }
        }

        #[test]
        fn iou_one_iff_diagonal(pairs in maps()) {
            let mut cm = ConfusionMatrix::new(4);
            for (p, g) in &pairs {
                cm.accumulate(&lm(2, 3, p), &lm(2, 3, g)).unwrap();
            }
            let r = miou(&cm, 1).unwrap();
            for k in 0..4 {
                let off: u64 = (0..4).filter(|&j| j != k).map(|j| cm.get(k, j) + cm.get(j, k)).sum();
                if let Some(v) = r.iou[k] {
                    prop_assert!((0.0..=1.0).contains(&v));
                    prop_assert_eq!(v == 1.0, off == 0);
                }
            }
        }
    }
}
