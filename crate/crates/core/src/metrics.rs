//! Mean prediction accuracy and mean balanced accuracy over attributes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Decision threshold; a probability equal to it counts as positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Counts for one attribute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttrCounts {
    /// `T`
    pub total: u64,
    /// `T_a`
    pub correct: u64,
    /// `P_a`
    pub positives: u64,
    /// `P'_a`
    pub correct_positives: u64,
    /// `I_a`
    pub negatives: u64,
    /// `I'_a`
    pub correct_negatives: u64,
}

impl AttrCounts {
    pub fn record(&mut self, prob: f64, label: bool, threshold: f64) {
        let predicted = prob >= threshold;
        self.total += 1;
        if label {
            self.positives += 1;
        } else {
            self.negatives += 1;
        }
        if predicted == label {
            self.correct += 1;
            if label {
                self.correct_positives += 1;
            } else {
                self.correct_negatives += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.total += other.total;
        self.correct += other.correct;
        self.positives += other.positives;
        self.correct_positives += other.correct_positives;
        self.negatives += other.negatives;
        self.correct_negatives += other.correct_negatives;
    }

    pub fn is_consistent(&self) -> bool {
        self.total == self.positives + self.negatives
            && self.correct == self.correct_positives + self.correct_negatives
            && self.correct_positives <= self.positives
            && self.correct_negatives <= self.negatives
    }

    pub fn prediction_accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    /// `None` unless both classes are present.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        (self.positives > 0 && self.negatives > 0).then(|| {
            (self.correct_positives as f64 / self.positives as f64 + self.correct_negatives as f64 / self.negatives as f64) / 2.0
        })
    }
}

/// Mergeable per-attribute counters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricCounters {
    pub threshold: f64,
    pub attrs: Vec<AttrCounts>,
}

impl MetricCounters {
    pub fn new(n_attrs: usize, threshold: f64) -> Self {
        assert!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0, 1)");
        Self { threshold, attrs: vec![AttrCounts::default(); n_attrs] }
    }

    pub fn accumulate(&mut self, attr: usize, prob: f64, label: bool) {
        let t = self.threshold;
        self.attrs[attr].record(prob, label, t);
    }

    /// Records one sample: `probs[a]` against `labels[a]` for every attribute.
    pub fn accumulate_sample(&mut self, probs: &[f64], labels: &[u8]) {
        for (a, (&p, &y)) in probs.iter().zip(labels).enumerate() {
            self.accumulate(a, p, y != 0);
        }
    }

    /// Associative, commutative merge of shard counters.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.attrs.len(), other.attrs.len());
        self.attrs.iter_mut().zip(&other.attrs).for_each(|(a, b)| a.merge(b));
    }

    pub fn finalize(&self) -> EvalReport {
        let per_attr: Vec<AttrMetrics> = self
            .attrs
            .iter()
            .map(|c| AttrMetrics { prediction: c.prediction_accuracy().unwrap_or(0.0), balanced: c.balanced_accuracy() })
            .collect();
        let n = per_attr.len().max(1) as f64;
        let mean_prediction = per_attr.iter().map(|m| m.prediction).sum::<f64>() / n;
        let defined: Vec<f64> = per_attr.iter().filter_map(|m| m.balanced).collect();
        let mean_balanced = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let warnings = per_attr
            .iter()
            .enumerate()
            .filter(|(_, m)| m.balanced.is_none())
            .map(|(a, _)| format!("attribute {} has a single class; balanced accuracy excluded from the mean", a + 1))
            .collect();
        EvalReport { threshold: self.threshold, per_attr, mean_prediction, mean_balanced, warnings }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttrMetrics {
    pub prediction: f64,
    pub balanced: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub per_attr: Vec<AttrMetrics>,
    pub mean_prediction: f64,
    /// Mean over attributes whose balanced accuracy is defined.
    pub mean_balanced: Option<f64>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// `index,name,pred_acc,bal_acc` rows plus a `MEAN` row; undefined
    /// balanced accuracies are left empty.
    pub fn to_csv(&self, names: &[String]) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("index,name,pred_acc,bal_acc\n");
        for (a, m) in self.per_attr.iter().enumerate() {
            let name = names.get(a).map(String::as_str).unwrap_or("");
            out.push_str(&format!("{},{name},{:.6},{}\n", a + 1, m.prediction, fmt(m.balanced)));
        }
        out.push_str(&format!("MEAN,,{:.6},{}\n", self.mean_prediction, fmt(self.mean_balanced)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_rules() {
        let mut c = AttrCounts::default();
        c.record(0.7, true, 0.5);
        assert_eq!((c.correct, c.correct_positives), (1, 1));
        let mut c = AttrCounts::default();
        c.record(0.5, false, 0.5);
        assert_eq!((c.negatives, c.correct, c.correct_negatives), (1, 0, 0));
        assert!(c.is_consistent());
    }

    #[test]
    fn constant_positive_predictor() {
        let mut m = MetricCounters::new(1, DEFAULT_THRESHOLD);
        for i in 0..100 {
            m.accumulate(0, 0.9, i < 30);
        }
        let r = m.finalize();
        assert_eq!(r.per_attr[0].prediction, 0.30);
        assert_eq!(r.per_attr[0].balanced, Some(0.5));
    }

    #[test]
    fn mean_prediction_arithmetic() {
        let mut m = MetricCounters::new(2, DEFAULT_THRESHOLD);
        for i in 0..100 {
            m.accumulate(0, if i < 92 { 1.0 } else { 0.0 }, true);
            m.accumulate(1, if i < 88 { 0.0 } else { 1.0 }, false);
        }
        assert!((m.finalize().mean_prediction - 0.90).abs() < 1e-15);
    }

    #[test]
    fn single_class_attribute_is_excluded() {
        let mut m = MetricCounters::new(2, DEFAULT_THRESHOLD);
        for i in 0..10 {
            m.accumulate(0, 0.9, true);
            m.accumulate(1, if i < 5 { 0.9 } else { 0.1 }, i < 5);
        }
        let r = m.finalize();
        assert_eq!(r.per_attr[0].balanced, None);
        assert_eq!(r.mean_balanced, Some(1.0));
        assert_eq!(r.warnings.len(), 1);
        let csv = r.to_csv(&["a".into(), "b".into()]);
        assert!(csv.contains("\n1,a,1.000000,\n"));
        assert!(csv.ends_with("MEAN,,1.000000,1.000000\n"));
    }
}
