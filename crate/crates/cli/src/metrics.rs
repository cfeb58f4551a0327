use std::fmt::Write as _;

use groupnet::Tensor;

/// Fraction of rows whose label is among the `k` largest logits. Ties are
/// broken toward the lower class index.
pub fn top_k(logits: &Tensor<f64>, labels: &[usize], k: usize) -> f64 {
    let classes = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let target = row[l];
            let above = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < l))
                .count();
            above < k
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Per-pixel argmax of `(n, c, h, w)` logits, laid out `(n, h, w)`.
pub fn pixel_argmax(logits: &Tensor<f64>) -> Vec<usize> {
    let s = logits.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for j in 1..c {
                if d[(i * c + j) * plane + p] > d[(i * c + best) * plane + p] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Class-by-class counts, `m[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) {
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * self.classes + p] += 1;
        }
    }

    /// Mean intersection-over-union over classes that appear in either the
    /// prediction or the ground truth.
    pub fn mean_iou(&self) -> f64 {
        let c = self.classes;
        let mut total = 0.0;
        let mut present = 0;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let row: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
            let col: u64 = (0..c).map(|t| self.counts[t * c + k]).sum();
            let union = row + col - tp;
            if union > 0 {
                total += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            total / present as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let c = self.classes;
        let diag: u64 = (0..c).map(|k| self.counts[k * c + k]).sum();
        diag as f64 / self.counts.iter().sum::<u64>().max(1) as f64
    }
}

/// Line-oriented metrics log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    pub fn record(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.lines.push(format!("epoch {epoch} split {split} metric {metric} value {value:.6}"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(s, "{l}");
        }
        s
    }

    /// Last recorded value of `metric` on `split`.
    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        let needle = format!(" split {split} metric {metric} value ");
        self.lines
            .iter()
            .rev()
            .find_map(|l| l.split_once(&needle).and_then(|(_, v)| v.parse().ok()))
    }
}
