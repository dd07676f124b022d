use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::tagging::TagSet;
use crate::taxonomy::Taxonomy;

/// Binary confusion counts for one tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TagCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl TagCounts {
    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// FP / (FP + TN); undefined without negatives.
    pub fn fpr(&self) -> Option<f64> {
        let d = self.fp + self.tn;
        (d > 0).then(|| self.fp as f64 / d as f64)
    }

    /// TP / (TP + FN); undefined without positives.
    pub fn tpr(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    pub tag: String,
    #[serde(flatten)]
    pub counts: TagCounts,
    pub fpr: Option<f64>,
    pub tpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: u64,
    /// Records whose predicted tag set equals the ground truth exactly.
    pub exact_matches: u64,
    pub accuracy: f64,
    /// Per tag, in taxonomy order (None last).
    pub per_tag: Vec<TagMetrics>,
    /// Ground-truth count per tag.
    pub popularity: BTreeMap<String, u64>,
    /// Records the tagger failed on; scored as `{None}`.
    pub tagger_failures: u64,
    /// Records carrying expected variables, and how many were reproduced
    /// exactly by extraction.
    pub variables_checked: u64,
    pub variables_matched: u64,
}

impl EvalReport {
    pub fn tag(&self, name: &str) -> Option<&TagMetrics> {
        self.per_tag.iter().find(|m| m.tag == name)
    }

    pub fn render_table(&self) -> String {
        let pct = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{:.3}%", v * 100.0));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>5} {:>5} {:>5} {:>5} {:>9} {:>9} {:>6}",
            "tag", "TP", "FP", "TN", "FN", "FPR", "TPR", "truth"
        );
        for m in &self.per_tag {
            let c = m.counts;
            let _ = writeln!(
                s,
                "{:<20} {:>5} {:>5} {:>5} {:>5} {:>9} {:>9} {:>6}",
                m.tag,
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                pct(m.fpr),
                pct(m.tpr),
                self.popularity.get(&m.tag).copied().unwrap_or(0)
            );
        }
        let _ = writeln!(
            s,
            "exact-match accuracy: {}/{} = {:.3}%",
            self.exact_matches,
            self.total,
            self.accuracy * 100.0
        );
        if self.tagger_failures > 0 {
            let _ = writeln!(s, "tagger failures: {}", self.tagger_failures);
        }
        if self.variables_checked > 0 {
            let _ = writeln!(s, "variable extraction: {}/{} exact", self.variables_matched, self.variables_checked);
        }
        s
    }
}

/// Scores predictions against ground truth. Every taxonomy tag gets a row,
/// plus any tag seen in the data but missing from the taxonomy.
pub fn score_predictions(truth: &[TagSet], predicted: &[TagSet], tx: &Taxonomy) -> EvalReport {
    assert_eq!(truth.len(), predicted.len(), "one prediction per record");
    let mut names: Vec<String> = tx.entries().iter().map(|e| e.tag.name.clone()).collect();
    for t in truth.iter().chain(predicted) {
        for n in t.iter() {
            if !names.iter().any(|x| x == n) {
                names.push(n.to_string());
            }
        }
    }
    let mut counts = vec![TagCounts::default(); names.len()];
    let mut exact = 0;
    for (t, p) in truth.iter().zip(predicted) {
        if t.same_tags(p) {
            exact += 1;
        }
        for (name, c) in names.iter().zip(counts.iter_mut()) {
            c.add(t.contains(name), p.contains(name));
        }
    }
    let total = truth.len() as u64;
    EvalReport {
        total,
        exact_matches: exact,
        accuracy: if total == 0 { 0.0 } else { exact as f64 / total as f64 },
        per_tag: names
            .iter()
            .zip(&counts)
            .map(|(n, c)| TagMetrics {
                tag: n.clone(),
                counts: *c,
                fpr: c.fpr(),
                tpr: c.tpr(),
            })
            .collect(),
        popularity: names
            .iter()
            .zip(&counts)
            .map(|(n, c)| (n.clone(), c.tp + c.fn_))
            .collect(),
        tagger_failures: 0,
        variables_checked: 0,
        variables_matched: 0,
    }
}

/// Mean, median and 95th percentile of latency samples in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[u64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut v = samples.to_vec();
        v.sort_unstable();
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        };
        // nearest-rank percentile
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Self {
            count: n,
            mean_us: v.iter().map(|&x| x as f64).sum::<f64>() / n as f64,
            median_us: median,
            p95_us: v[rank - 1] as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::TagSource;
    use crate::taxonomy::default_taxonomy;

    fn ts(t: &[&str]) -> TagSet {
        TagSet::new(t.iter().copied(), TagSource::Oracle)
    }

    #[test]
    fn fpr_formula() {
        let c = TagCounts { tp: 0, fp: 1, tn: 31, fn_: 0 };
        assert_eq!(c.fpr(), Some(0.03125));
        assert_eq!(c.tpr(), None);
    }

    #[test]
    fn exact_match_and_identities() {
        let tx = default_taxonomy();
        let truth = [ts(&["Login"]), ts(&["Login", "ContainsAuthTokens"]), ts(&[])];
        let pred = [ts(&["Login"]), ts(&["Login"]), ts(&["Logout"])];
        let r = score_predictions(&truth, &pred, &tx);
        assert_eq!(r.exact_matches, 1);
        for m in &r.per_tag {
            assert_eq!(m.counts.total(), 3, "{}", m.tag);
        }
        assert_eq!(r.tag("Login").unwrap().counts, TagCounts { tp: 2, fp: 0, tn: 1, fn_: 0 });
        assert_eq!(r.tag("ContainsAuthTokens").unwrap().counts.fn_, 1);
        assert_eq!(r.popularity["None"], 1);
        assert_eq!(r.per_tag.last().unwrap().tag, "None");
    }

    #[test]
    fn latency_stats() {
        let s = LatencyStats::from_samples(&[5, 1, 3, 2, 4]).unwrap();
        assert_eq!(s.median_us, 3.0);
        assert_eq!(s.mean_us, 3.0);
        assert_eq!(s.p95_us, 5.0);
        let even = LatencyStats::from_samples(&[1, 2, 3, 4]).unwrap();
        assert_eq!(even.median_us, 2.5);
        assert!(LatencyStats::from_samples(&[]).is_none());
    }

    #[test]
    fn table_mentions_every_tag() {
        let tx = default_taxonomy();
        let r = score_predictions(&[ts(&["Login"])], &[ts(&["Login"])], &tx);
        let t = r.render_table();
        for e in tx.entries() {
            assert!(t.contains(&e.tag.name));
        }
        assert!(t.contains("100.000%"));
    }
}
