//! Overlap metrics for masks and confusion-matrix metrics for grading.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::models::{HGG, LGG};
use crate::volcore::Tensor;

pub const CLASS_NAMES: [&str; 2] = ["HGG", "LGG"];

/// Voxel counts of two binary masks. Adding overlaps pools the counts, so
/// the Dice of a sum is the volume-weighted Dice of a set of cases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub p: usize,
    pub q: usize,
    pub intersection: usize,
}

impl Overlap {
    pub fn dice(&self) -> f64 {
        if self.p + self.q == 0 {
            return 1.0;
        }
        2.0 * self.intersection as f64 / (self.p + self.q) as f64
    }

    pub fn iou(&self) -> f64 {
        let union = self.p + self.q - self.intersection;
        if union == 0 {
            return 1.0;
        }
        self.intersection as f64 / union as f64
    }
}

impl std::ops::Add for Overlap {
    type Output = Overlap;

    fn add(self, o: Overlap) -> Overlap {
        Overlap {
            p: self.p + o.p,
            q: self.q + o.q,
            intersection: self.intersection + o.intersection,
        }
    }
}

impl std::iter::Sum for Overlap {
    fn sum<I: Iterator<Item = Overlap>>(iter: I) -> Overlap {
        iter.fold(Overlap::default(), |a, b| a + b)
    }
}

pub fn overlap(p: &Tensor<f32>, q: &Tensor<f32>) -> Result<Overlap> {
    if p.shape() != q.shape() {
        return Err(Error::shape("overlap", p.shape(), q.shape()));
    }
    let mut counts = Overlap {
        p: 0,
        q: 0,
        intersection: 0,
    };
    for (&a, &b) in p.data().iter().zip(q.data()) {
        if !(a == 0.0 || a == 1.0) || !(b == 0.0 || b == 1.0) {
            return Err(Error::InvalidArgument(format!("overlap expects binary masks, found {a} / {b}")));
        }
        let (a, b) = (a == 1.0, b == 1.0);
        counts.p += a as usize;
        counts.q += b as usize;
        counts.intersection += (a && b) as usize;
    }
    Ok(counts)
}

/// `2|P∩Q| / (|P| + |Q|)`; two empty masks score 1.
pub fn dice(p: &Tensor<f32>, q: &Tensor<f32>) -> Result<f64> {
    Ok(overlap(p, q)?.dice())
}

/// `|P∩Q| / |P∪Q|`; two empty masks score 1.
pub fn miou(p: &Tensor<f32>, q: &Tensor<f32>) -> Result<f64> {
    Ok(overlap(p, q)?.iou())
}

/// Binarizes probabilities at `tau` (inclusive).
pub fn threshold(prob: &Tensor<f32>, tau: f32) -> Tensor<f32> {
    prob.map(|p| if p >= tau { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Rows are actual classes, columns predicted, positive class first.
    pub fn to_csv(&self, positive: usize) -> String {
        let (pos, neg) = (CLASS_NAMES[positive], CLASS_NAMES[1 - positive]);
        format!(
            "actual\\predicted,{pos},{neg}\n{pos},{},{}\n{neg},{},{}\n",
            self.tp, self.fn_, self.fp, self.tn
        )
    }
}

/// Tallies predictions against labels; class ids are [`HGG`] and [`LGG`].
pub fn confusion(preds: &[usize], labels: &[usize], positive: usize) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "confusion: {} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let known = |c: usize| c == HGG || c == LGG;
    if !known(positive) {
        return Err(Error::InvalidArgument(format!("unknown positive class {positive}")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in preds.iter().zip(labels) {
        if !known(p) || !known(y) {
            return Err(Error::InvalidArgument(format!("unknown class id in pair ({p}, {y})")));
        }
        match (p == positive, y == positive) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// A ratio that may be undefined; undefined values carry the reason.
#[derive(Clone, Debug, PartialEq)]
pub enum Metric {
    Value(f64),
    Absent(String),
}

impl Metric {
    fn ratio(num: usize, den: usize, reason: &str) -> Self {
        if den == 0 {
            Metric::Absent(reason.to_string())
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Absent(_) => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.6}"),
            Metric::Absent(why) => write!(f, "n/a ({why})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub counts: ConfusionCounts,
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub specificity: Metric,
    pub f1: Metric,
    pub dice: Metric,
    pub miou: Metric,
}

pub fn classification_metrics(c: ConfusionCounts) -> Result<MetricReport> {
    if c.total() == 0 {
        return Err(Error::InvalidArgument("classification_metrics: no samples".into()));
    }
    let precision = Metric::ratio(c.tp, c.tp + c.fp, "no positive predictions (TP+FP=0)");
    let recall = Metric::ratio(c.tp, c.tp + c.fn_, "no positive labels (TP+FN=0)");
    let f1 = match (precision.value(), recall.value()) {
        (Some(p), Some(r)) if p + r > 0.0 => Metric::Value(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Metric::Absent("precision and recall are both 0".into()),
        _ => Metric::Absent("precision or recall undefined".into()),
    };
    let not_seg = || Metric::Absent("no segmentation in this run".into());
    Ok(MetricReport {
        run_id: String::new(),
        counts: c,
        accuracy: Metric::ratio(c.tp + c.tn, c.total(), "no samples"),
        precision,
        recall,
        specificity: Metric::ratio(c.tn, c.tn + c.fp, "no negative labels (TN+FP=0)"),
        f1,
        dice: not_seg(),
        miou: not_seg(),
    })
}

/// A report for a run that segmented but did not grade: overlap metrics
/// only, every classification quantity absent.
pub fn segmentation_metrics(o: Overlap) -> MetricReport {
    let no_grades = || Metric::Absent("no grade predictions in this run".into());
    MetricReport {
        run_id: String::new(),
        counts: ConfusionCounts::default(),
        accuracy: no_grades(),
        precision: no_grades(),
        recall: no_grades(),
        specificity: no_grades(),
        f1: no_grades(),
        dice: Metric::Value(o.dice()),
        miou: Metric::Value(o.iou()),
    }
}

impl MetricReport {
    pub fn with_run_id(mut self, id: impl Into<String>) -> Self {
        self.run_id = id.into();
        self
    }

    pub fn with_overlap(mut self, o: Overlap) -> Self {
        self.dice = Metric::Value(o.dice());
        self.miou = Metric::Value(o.iou());
        self
    }

    fn named(&self) -> [(&'static str, &Metric); 7] {
        [
            ("accuracy", &self.accuracy),
            ("precision", &self.precision),
            ("recall", &self.recall),
            ("specificity", &self.specificity),
            ("f1", &self.f1),
            ("dice", &self.dice),
            ("miou", &self.miou),
        ]
    }

    /// Long format: one `run_id,metric,value,note` row per quantity. Values
    /// are written with full round-trip precision; absent values leave
    /// `value` empty and explain in `note`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_id,metric,value,note\n");
        let c = &self.counts;
        for (name, v) in [("tp", c.tp), ("tn", c.tn), ("fp", c.fp), ("fn", c.fn_)] {
            let _ = writeln!(out, "{},{name},{v},", self.run_id);
        }
        for (name, m) in self.named() {
            let _ = match m {
                Metric::Value(v) => writeln!(out, "{},{name},{v},", self.run_id),
                Metric::Absent(why) => writeln!(out, "{},{name},,{why}", self.run_id),
            };
        }
        out
    }

    pub fn to_text(&self) -> String {
        let c = &self.counts;
        let mut out = String::new();
        if !self.run_id.is_empty() {
            let _ = writeln!(out, "run: {}", self.run_id);
        }
        let _ = writeln!(out, "samples: {} (TP {}, TN {}, FP {}, FN {})", c.total(), c.tp, c.tn, c.fp, c.fn_);
        for (name, m) in self.named() {
            let _ = writeln!(out, "{name:<12} {m}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mask(bits: &[u8]) -> Tensor<f32> {
        Tensor::from_fn([bits.len()], |i| bits[i] as f32)
    }

    #[test]
    fn overlap_examples() {
        let p = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let q = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&p, &q).unwrap(), 0.5);
        assert_eq!(miou(&p, &q).unwrap(), 2.0 / 6.0);
        assert_eq!(dice(&p, &p).unwrap(), 1.0);
        assert_eq!(miou(&p, &p).unwrap(), 1.0);
        let r = mask(&[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&p, &r).unwrap(), 0.0);
        let empty = mask(&[0; 8]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(miou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &p).unwrap(), 0.0);
        assert!(dice(&p, &mask(&[1; 7])).is_err());
        assert!(dice(&p, &Tensor::full([8], 0.5)).is_err());
    }

    #[test]
    fn overlap_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..64);
            let density = rng.random_range(0.0..1.0);
            let a: Vec<u8> = (0..n).map(|_| rng.random_bool(density) as u8).collect();
            let b: Vec<u8> = (0..n).map(|_| rng.random_bool(density) as u8).collect();
            let (mut inter, mut union, mut sa, mut sb) = (0, 0, 0, 0);
            for i in 0..n {
                inter += (a[i] & b[i]) as usize;
                union += (a[i] | b[i]) as usize;
                sa += a[i] as usize;
                sb += b[i] as usize;
            }
            let o = overlap(&mask(&a), &mask(&b)).unwrap();
            assert_eq!((o.p, o.q, o.intersection), (sa, sb, inter));
            let d = dice(&mask(&a), &mask(&b)).unwrap();
            let j = miou(&mask(&a), &mask(&b)).unwrap();
            if sa + sb > 0 {
                assert!((d - 2.0 * inter as f64 / (sa + sb) as f64).abs() <= 1e-12);
                assert!((j - inter as f64 / union as f64).abs() <= 1e-12);
            }
            assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
            assert!(d >= j && (0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
            assert_eq!(d, dice(&mask(&b), &mask(&a)).unwrap());
        }
    }

    #[test]
    fn confusion_examples() {
        let labels = [HGG, LGG, HGG, LGG, HGG];
        let c = confusion(&labels, &labels, HGG).unwrap();
        assert_eq!((c.fp, c.fn_, c.tp + c.tn), (0, 0, 5));
        let all_hgg = [HGG; 4];
        let half = [HGG, LGG, HGG, LGG];
        assert_eq!(confusion(&all_hgg, &half, HGG).unwrap().fp, 2);
        assert!(confusion(&[HGG], &[HGG, LGG], HGG).is_err());
        assert!(confusion(&[2], &[HGG], HGG).is_err());
        assert!(confusion(&[HGG], &[HGG], 5).is_err());
    }

    #[test]
    fn confusion_matches_pairwise_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let positive = rng.random_range(0..2);
            let tally = |p: bool, y: bool| {
                preds.iter().zip(&labels).filter(|(&a, &b)| (a == positive) == p && (b == positive) == y).count()
            };
            let c = confusion(&preds, &labels, positive).unwrap();
            assert_eq!(c.tp, tally(true, true));
            assert_eq!(c.tn, tally(false, false));
            assert_eq!(c.fp, tally(true, false));
            assert_eq!(c.fn_, tally(false, true));
            assert_eq!(c.total(), n);
        }
    }

    #[test]
    fn worked_example() {
        let r = classification_metrics(ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 4 }).unwrap();
        assert_eq!(r.precision, Metric::Value(0.75));
        assert_eq!(r.recall, Metric::Value(0.6));
        assert_eq!(r.accuracy, Metric::Value(0.7));
        assert_eq!(r.specificity, Metric::Value(0.8));
        let f1 = r.f1.value().unwrap();
        assert_eq!(f1, 2.0 * 0.75 * 0.6 / 1.35);
        assert_eq!(format!("{f1:.4}"), "0.6667");
    }

    #[test]
    fn perfect_and_degenerate_reports() {
        let r = classification_metrics(ConfusionCounts { tp: 5, tn: 5, fp: 0, fn_: 0 }).unwrap();
        for m in [&r.accuracy, &r.precision, &r.recall, &r.specificity, &r.f1] {
            assert_eq!(m, &Metric::Value(1.0));
        }
        let r = classification_metrics(ConfusionCounts { tp: 0, fp: 0, tn: 3, fn_: 2 }).unwrap();
        assert!(matches!(&r.precision, Metric::Absent(why) if why.contains("TP+FP")));
        assert!(r.f1.value().is_none());
        assert!(r.to_csv().contains("precision,,no positive predictions"));
        assert!(r.to_text().contains("n/a"));
        assert!(classification_metrics(ConfusionCounts::default()).is_err());
    }

    #[test]
    fn reports_serialize() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 4 };
        let r = classification_metrics(c).unwrap().with_run_id("r1").with_overlap(Overlap { p: 4, q: 4, intersection: 2 });
        let csv = r.to_csv();
        assert!(csv.starts_with("run_id,metric,value,note\nr1,tp,3,\n"));
        assert!(csv.contains("r1,dice,0.5,\n"));
        assert!(csv.contains("r1,precision,0.75,\n"));
        assert_eq!(c.to_csv(HGG), "actual\\predicted,HGG,LGG\nHGG,3,2\nLGG,1,4\n");
    }

    #[test]
    fn pooled_overlap_weights_by_volume() {
        let a = Overlap { p: 10, q: 10, intersection: 10 };
        let b = Overlap { p: 1, q: 1, intersection: 0 };
        let pooled: Overlap = [a, b].into_iter().sum();
        assert_eq!(pooled, Overlap { p: 11, q: 11, intersection: 10 });
        assert_eq!(pooled.dice(), 20.0 / 22.0);
        let r = segmentation_metrics(pooled).with_run_id("s");
        assert_eq!(r.dice.value(), Some(20.0 / 22.0));
        assert!(r.accuracy.value().is_none());
        assert!(r.to_csv().contains("s,accuracy,,no grade predictions in this run\n"));
    }

    proptest! {
        #[test]
        fn report_values_recompute_from_counts(tp in 0usize..50, tn in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            prop_assume!(tp + tn + fp + fn_ > 0);
            let c = ConfusionCounts { tp, tn, fp, fn_ };
            let r = classification_metrics(c).unwrap();
            prop_assert_eq!(r.clone(), classification_metrics(c).unwrap());
            for m in [&r.accuracy, &r.precision, &r.recall, &r.specificity, &r.f1] {
                if let Some(v) = m.value() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            if let (Some(p), Some(rc), Some(f)) = (r.precision.value(), r.recall.value(), r.f1.value()) {
                prop_assert!((1.0 / f - 0.5 * (1.0 / p + 1.0 / rc)).abs() * f <= 1e-12 || p == 0.0 || rc == 0.0);
                prop_assert!((f - 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64).abs() <= 1e-12);
            }
        }
    }
}
