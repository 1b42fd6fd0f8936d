//! Ranking metrics and resampling statistics.
//!
//! AUROC uses the Mann-Whitney convention (ties get half credit); AUPRC is
//! average precision with tied scores grouped into one threshold step.
//! Bootstrap resampling operates on images (rows) to preserve inter-finding
//! correlation, and the permutation test swaps the two models' score rows
//! per image. Every resampling routine draws from named seed substreams and
//! reduces in a fixed order, so results are deterministic regardless of
//! parallelism.

pub mod report;
pub mod survival;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Scores and binary labels for `n` images by `m` findings, aligned by
/// image id.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    image_ids: Vec<u64>,
    scores: Vec<f64>,
    labels: Vec<u8>,
    n_findings: usize,
}

impl ScoreMatrix {
    pub fn new(image_ids: Vec<u64>, scores: Vec<f64>, labels: Vec<u8>, n_findings: usize) -> Result<Self> {
        let n = image_ids.len();
        if scores.len() != n * n_findings || labels.len() != n * n_findings {
            return Err(Error::shape(format!(
                "score matrix: {} ids, {} scores, {} labels, {} findings",
                n,
                scores.len(),
                labels.len(),
                n_findings
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::numeric("non-finite score"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::data("labels must be 0 or 1"));
        }
        Ok(ScoreMatrix { image_ids, scores, labels, n_findings })
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_findings(&self) -> usize {
        self.n_findings
    }

    pub fn image_ids(&self) -> &[u64] {
        &self.image_ids
    }

    pub fn score_row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_findings..(i + 1) * self.n_findings]
    }

    pub fn label_row(&self, i: usize) -> &[u8] {
        &self.labels[i * self.n_findings..(i + 1) * self.n_findings]
    }

    /// Column `j` as (scores, labels).
    pub fn finding(&self, j: usize) -> (Vec<f64>, Vec<u8>) {
        let n = self.n_images();
        let mut s = Vec::with_capacity(n);
        let mut l = Vec::with_capacity(n);
        for i in 0..n {
            s.push(self.scores[i * self.n_findings + j]);
            l.push(self.labels[i * self.n_findings + j]);
        }
        (s, l)
    }

    /// Fraction of positive labels per finding.
    pub fn prevalences(&self) -> Vec<f64> {
        let n = self.n_images() as f64;
        (0..self.n_findings)
            .map(|j| {
                let pos: usize = (0..self.n_images())
                    .filter(|&i| self.labels[i * self.n_findings + j] == 1)
                    .count();
                pos as f64 / n
            })
            .collect()
    }

    /// New matrix from rows at `indices` (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> ScoreMatrix {
        let m = self.n_findings;
        let mut ids = Vec::with_capacity(indices.len());
        let mut scores = Vec::with_capacity(indices.len() * m);
        let mut labels = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            ids.push(self.image_ids[i]);
            scores.extend_from_slice(self.score_row(i));
            labels.extend_from_slice(self.label_row(i));
        }
        ScoreMatrix { image_ids: ids, scores, labels, n_findings: m }
    }

    /// Check that `other` is the same cohort: identical ids and labels.
    pub fn aligned_with(&self, other: &ScoreMatrix) -> Result<()> {
        if self.image_ids != other.image_ids {
            return Err(Error::data("score matrices have misaligned image ids"));
        }
        if self.labels != other.labels || self.n_findings != other.n_findings {
            return Err(Error::data("score matrices have different labels"));
        }
        Ok(())
    }
}

/// AUROC as all-pairs concordance `P(score_pos > score_neg) + 0.5 P(tie)`,
/// computed from mid-ranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    validate_column(scores, labels)?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::numeric("auroc undefined: single-class labels"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based mid-rank of the tie group spanning sorted slots i..j
        let mid = (i + 1 + j) as f64 / 2.0;
        for &t in &idx[i..j] {
            if labels[t] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision over threshold steps, tied scores grouped into a
/// single step.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    validate_column(scores, labels)?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::numeric("auprc undefined: no positives"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        for &t in &idx[i..j] {
            if labels[t] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

fn validate_column(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("scores and labels must be equal-length and non-empty"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("non-finite score"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::data("labels must be 0 or 1"));
    }
    Ok(())
}

/// Which ranking metric to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub fn compute(&self, scores: &[f64], labels: &[u8]) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(scores, labels),
            Metric::Auprc => auprc(scores, labels),
        }
    }
}

/// Per-finding metric values; `None` where the finding is degenerate in
/// this matrix (single-class labels).
pub fn per_finding(matrix: &ScoreMatrix, metric: Metric) -> Vec<Option<f64>> {
    (0..matrix.n_findings())
        .map(|j| {
            let (s, l) = matrix.finding(j);
            metric.compute(&s, &l).ok()
        })
        .collect()
}

/// Arithmetic mean over included findings; excluded/undefined findings are
/// skipped. Errors when nothing is included.
pub fn macro_average(per_finding: &[f64], included: &[bool]) -> Result<f64> {
    if per_finding.len() != included.len() {
        return Err(Error::shape("macro_average mask length mismatch"));
    }
    let vals: Vec<f64> = per_finding
        .iter()
        .zip(included)
        .filter(|(_, &inc)| inc)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return Err(Error::numeric("macro average over zero defined findings"));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Macro metric over a matrix, skipping degenerate findings.
pub fn macro_metric(matrix: &ScoreMatrix, metric: Metric) -> Result<f64> {
    let per = per_finding(matrix, metric);
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::numeric("macro metric undefined for every finding"));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Point estimate with a 95% percentile interval.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ci {
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(mut replicates: Vec<f64>) -> Option<Ci> {
    if replicates.is_empty() {
        return None;
    }
    let mean = replicates.iter().sum::<f64>() / replicates.len() as f64;
    replicates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(Ci {
        mean,
        lo95: percentile(&replicates, 0.025),
        hi95: percentile(&replicates, 0.975),
    })
}

/// Evaluate `eval` on `b` bootstrap resamples of the images (rows, with
/// replacement). Returns one replicate vector per tracked statistic;
/// replicates where a statistic was undefined are dropped for that
/// statistic. Deterministic for a fixed seed.
pub fn bootstrap_columns<F>(matrix: &ScoreMatrix, b: usize, seed: u64, eval: F) -> Vec<Vec<f64>>
where
    F: Fn(&ScoreMatrix) -> Vec<Option<f64>> + Sync,
{
    let n = matrix.n_images();
    let reps: Vec<Vec<Option<f64>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = substream(seed, "bootstrap", rep as u64);
            let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            eval(&matrix.gather_rows(&indices))
        })
        .collect();
    let width = reps.first().map_or(0, Vec::len);
    (0..width)
        .map(|c| reps.iter().filter_map(|r| r[c]).collect())
        .collect()
}

/// Percentile bootstrap interval of `metric` over `b` image resamples.
/// `mean` is the average of the replicate values.
pub fn bootstrap_ci<F>(metric: F, matrix: &ScoreMatrix, b: usize, seed: u64) -> Result<Ci>
where
    F: Fn(&ScoreMatrix) -> Result<f64> + Sync,
{
    if b == 0 {
        return Err(Error::config("bootstrap requires b >= 1"));
    }
    let cols = bootstrap_columns(matrix, b, seed, |m| vec![metric(m).ok()]);
    summarize(cols.into_iter().next().unwrap_or_default())
        .ok_or_else(|| Error::numeric("metric undefined in every bootstrap resample"))
}

/// Two-sided paired permutation test on the difference of a metric.
#[derive(Clone, Copy, Debug)]
pub struct PermutationOutcome {
    pub observed_diff: f64,
    pub p_value: f64,
}

/// Difference statistics for the model pair under per-image swaps.
///
/// `eval` maps a matrix to a vector of statistics; the test is run for each
/// component (entries undefined in the observed data yield `None`).
/// p = (1 + #{|d*| >= |d|}) / (1 + permutations).
pub fn permutation_columns<F>(
    a: &ScoreMatrix,
    b: &ScoreMatrix,
    permutations: usize,
    seed: u64,
    eval: F,
) -> Result<Vec<Option<PermutationOutcome>>>
where
    F: Fn(&ScoreMatrix) -> Vec<Option<f64>> + Sync,
{
    a.aligned_with(b)?;
    let n = a.n_images();
    let m = a.n_findings;
    let stats_a = eval(a);
    let stats_b = eval(b);
    let width = stats_a.len();
    let observed: Vec<Option<f64>> = stats_a
        .iter()
        .zip(&stats_b)
        .map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => Some(x - y),
            _ => None,
        })
        .collect();

    let exceed: Vec<Vec<bool>> = (0..permutations)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, "permutation", k as u64);
            let mut sa = a.scores.clone();
            let mut sb = b.scores.clone();
            for i in 0..n {
                if rng.gen::<bool>() {
                    for j in 0..m {
                        std::mem::swap(&mut sa[i * m + j], &mut sb[i * m + j]);
                    }
                }
            }
            let pa = ScoreMatrix {
                image_ids: a.image_ids.clone(),
                scores: sa,
                labels: a.labels.clone(),
                n_findings: m,
            };
            let pb = ScoreMatrix {
                image_ids: b.image_ids.clone(),
                scores: sb,
                labels: b.labels.clone(),
                n_findings: m,
            };
            let va = eval(&pa);
            let vb = eval(&pb);
            (0..width)
                .map(|c| match (&observed[c], &va[c], &vb[c]) {
                    (Some(obs), Some(x), Some(y)) => (x - y).abs() >= obs.abs(),
                    _ => false,
                })
                .collect()
        })
        .collect();

    Ok((0..width)
        .map(|c| {
            observed[c].map(|obs| {
                let count = exceed.iter().filter(|row| row[c]).count();
                PermutationOutcome {
                    observed_diff: obs,
                    p_value: (1 + count) as f64 / (1 + permutations) as f64,
                }
            })
        })
        .collect())
}

/// Paired permutation test for a single scalar metric (spec operation).
pub fn permutation_test<F>(
    a: &ScoreMatrix,
    b: &ScoreMatrix,
    metric: F,
    permutations: usize,
    seed: u64,
) -> Result<PermutationOutcome>
where
    F: Fn(&ScoreMatrix) -> Result<f64> + Sync,
{
    let cols = permutation_columns(a, b, permutations, seed, |m| vec![metric(m).ok()])?;
    cols.into_iter()
        .next()
        .flatten()
        .ok_or_else(|| Error::numeric("permutation test statistic undefined on observed data"))
}

/// Prevalence tier of a finding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrevalenceTier {
    Low,
    Medium,
    High,
}

impl std::fmt::Display for PrevalenceTier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PrevalenceTier::Low => write!(f, "low"),
            PrevalenceTier::Medium => write!(f, "medium"),
            PrevalenceTier::High => write!(f, "high"),
        }
    }
}

/// Tier boundaries: low < `low_hi` <= medium < `med_hi` <= high.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct PrevalenceCuts {
    pub low_hi: f64,
    pub med_hi: f64,
}

impl Default for PrevalenceCuts {
    fn default() -> Self {
        PrevalenceCuts { low_hi: 0.01, med_hi: 0.10 }
    }
}

/// Assign each finding a tier from its positive-label prevalence.
pub fn stratify_prevalence(prevalences: &[f64], cuts: PrevalenceCuts) -> Vec<PrevalenceTier> {
    prevalences
        .iter()
        .map(|&p| {
            if p < cuts.low_hi {
                PrevalenceTier::Low
            } else if p < cuts.med_hi {
                PrevalenceTier::Medium
            } else {
                PrevalenceTier::High
            }
        })
        .collect()
}
