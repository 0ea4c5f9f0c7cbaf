//! Recognition accuracy.

use std::collections::BTreeMap;
use std::fmt;

/// Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - edit_distance / max(len)`, and 1 when both are empty.
pub fn char_similarity(pred: &str, truth: &str) -> f64 {
    let longest = pred.chars().count().max(truth.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(pred, truth) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Tally {
    pub count: usize,
    pub exact: usize,
    pub char_sum: f64,
}

impl Tally {
    fn add(&mut self, pred: &str, truth: &str) {
        self.count += 1;
        self.exact += usize::from(pred == truth);
        self.char_sum += char_similarity(pred, truth);
    }

    pub fn sequence_accuracy(&self) -> f64 {
        if self.count == 0 { 0.0 } else { self.exact as f64 / self.count as f64 }
    }

    pub fn char_accuracy(&self) -> f64 {
        if self.count == 0 { 0.0 } else { self.char_sum / self.count as f64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub overall: Tally,
    /// Keyed by label length.
    pub by_length: BTreeMap<usize, Tally>,
}

impl Metrics {
    pub fn score<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut m = Metrics::default();
        for (pred, truth) in pairs {
            m.overall.add(pred, truth);
            m.by_length.entry(truth.chars().count()).or_default().add(pred, truth);
        }
        m
    }

    pub fn sequence_accuracy(&self) -> f64 {
        self.overall.sequence_accuracy()
    }

    pub fn char_accuracy(&self) -> f64 {
        self.overall.char_accuracy()
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "samples={} sequence_accuracy={:.4} char_accuracy={:.4}",
            self.overall.count,
            self.sequence_accuracy(),
            self.char_accuracy()
        )?;
        for (len, t) in &self.by_length {
            writeln!(
                f,
                "length={len} samples={} sequence_accuracy={:.4} char_accuracy={:.4}",
                t.count,
                t.sequence_accuracy(),
                t.char_accuracy()
            )?;
        }
        Ok(())
    }
}
