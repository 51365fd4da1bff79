//! Accuracy and per-class precision, recall and F1.

use std::fmt::Write;

/// Counts with the private class as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[u8], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn report(&self) -> MetricsReport {
        let total = self.total();
        let accuracy = ratio(self.tp + self.tn, total);
        MetricsReport {
            accuracy,
            private: ClassMetrics::new(self.tp, self.fp, self.fn_),
            public: ClassMetrics::new(self.tn, self.fn_, self.fp),
            confusion: *self,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics { precision, recall, f1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub private: ClassMetrics,
    pub public: ClassMetrics,
    pub confusion: Confusion,
}

pub const TABLE_HEADER: &str =
    "method              accuracy  private_precision  private_recall  private_f1  public_precision  public_recall  public_f1";

impl MetricsReport {
    /// One fixed-width row under [`TABLE_HEADER`], values in percent.
    pub fn table_row(&self, method: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{method:<18}  {:>8.2}  {:>17.2}  {:>14.2}  {:>10.2}  {:>16.2}  {:>13.2}  {:>9.2}",
            100.0 * self.accuracy,
            100.0 * self.private.precision,
            100.0 * self.private.recall,
            100.0 * self.private.f1,
            100.0 * self.public.precision,
            100.0 * self.public.recall,
            100.0 * self.public.f1,
        );
        s
    }
}

/// Thresholds the private probability at 0.5.
pub fn threshold(private_probs: &[f64]) -> Vec<u8> {
    private_probs.iter().map(|&p| u8::from(p >= 0.5)).collect()
}
