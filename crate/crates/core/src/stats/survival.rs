//! Kaplan-Meier estimation, the log-rank test, and risk-group splits.

use crate::error::{Error, Result};

/// One subject: follow-up time (days), whether the event occurred (false =
/// censored), and the model's risk score.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub subject_id: u64,
    pub time: f64,
    pub event: bool,
    pub risk_score: f64,
}

/// Product-limit survival curve: `survival[i]` applies from `times[i]`
/// (inclusive) until the next event time.
#[derive(Clone, Debug, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub n_subjects: usize,
    pub n_events: usize,
}

impl KmCurve {
    /// S(t): survival probability at time `t` (S(0) = 1).
    pub fn survival_at(&self, t: f64) -> f64 {
        let mut s = 1.0;
        for (i, &ti) in self.times.iter().enumerate() {
            if ti <= t {
                s = self.survival[i];
            } else {
                break;
            }
        }
        s
    }
}

fn validate(records: &[SurvivalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::data("empty survival cohort"));
    }
    if records.iter().any(|r| !(r.time >= 0.0)) {
        return Err(Error::data("negative or non-finite survival time"));
    }
    Ok(())
}

/// Kaplan-Meier estimator. Steps only at times with at least one event;
/// censored subjects leave the risk set after their time.
pub fn kaplan_meier(records: &[SurvivalRecord]) -> Result<KmCurve> {
    validate(records)?;
    let mut order: Vec<&SurvivalRecord> = records.iter().collect();
    order.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
    let n = order.len();
    let mut times = Vec::new();
    let mut survival = Vec::new();
    let mut s = 1.0;
    let mut n_events = 0;
    let mut i = 0;
    while i < n {
        let t = order[i].time;
        let at_risk = n - i;
        let mut d = 0usize;
        let mut j = i;
        while j < n && order[j].time == t {
            if order[j].event {
                d += 1;
            }
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            times.push(t);
            survival.push(s);
            n_events += d;
        }
        i = j;
    }
    Ok(KmCurve { times, survival, n_subjects: n, n_events })
}

/// One-degree-of-freedom log-rank test result.
#[derive(Clone, Copy, Debug)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub p_value: f64,
}

/// Log-rank test comparing event incidence between two groups: observed vs
/// expected events under hypergeometric pooling at each event time, with the
/// chi-square(1) upper tail via `erfc(sqrt(x/2))`.
pub fn log_rank(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRankResult> {
    validate(group_a)?;
    validate(group_b)?;

    let mut ta: Vec<(f64, bool)> = group_a.iter().map(|r| (r.time, r.event)).collect();
    let mut tb: Vec<(f64, bool)> = group_b.iter().map(|r| (r.time, r.event)).collect();
    ta.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    tb.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut event_times: Vec<f64> = ta
        .iter()
        .chain(tb.iter())
        .filter(|(_, e)| *e)
        .map(|(t, _)| *t)
        .collect();
    event_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    event_times.dedup();
    if event_times.is_empty() {
        return Err(Error::numeric("log-rank undefined: no events in either group"));
    }

    let mut ia = 0usize; // subjects in A with time < t
    let mut ib = 0usize;
    let mut observed_a = 0.0;
    let mut expected_a = 0.0;
    let mut variance = 0.0;
    for &t in &event_times {
        while ia < ta.len() && ta[ia].0 < t {
            ia += 1;
        }
        while ib < tb.len() && tb[ib].0 < t {
            ib += 1;
        }
        let n1 = (ta.len() - ia) as f64;
        let n2 = (tb.len() - ib) as f64;
        let at_risk = n1 + n2;
        let d1 = ta[ia..].iter().take_while(|(ti, _)| *ti == t).filter(|(_, e)| *e).count() as f64;
        let d2 = tb[ib..].iter().take_while(|(ti, _)| *ti == t).filter(|(_, e)| *e).count() as f64;
        let d = d1 + d2;
        if d == 0.0 || at_risk < 1.0 {
            continue;
        }
        observed_a += d1;
        expected_a += d * n1 / at_risk;
        if at_risk > 1.0 {
            variance += d * (n1 / at_risk) * (n2 / at_risk) * (at_risk - d) / (at_risk - 1.0);
        }
    }
    if variance <= 0.0 {
        // happens when the groups never overlap in the risk set
        if (observed_a - expected_a).abs() < 1e-12 {
            return Ok(LogRankResult { chi_square: 0.0, p_value: 1.0 });
        }
        return Err(Error::numeric("log-rank variance is zero"));
    }
    let chi_square = (observed_a - expected_a).powi(2) / variance;
    let p_value = libm::erfc((chi_square / 2.0).sqrt());
    Ok(LogRankResult { chi_square, p_value })
}

/// Split a cohort at the given score quantile; ties go to the low group.
pub fn risk_groups(
    records: &[SurvivalRecord],
    quantile: f64,
) -> Result<(Vec<SurvivalRecord>, Vec<SurvivalRecord>)> {
    if records.is_empty() {
        return Err(Error::data("empty survival cohort"));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::config("risk-group quantile must be in (0, 1)"));
    }
    let mut scores: Vec<f64> = records.iter().map(|r| r.risk_score).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("non-finite risk score"));
    }
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = quantile * (scores.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let threshold = scores[lo] + (scores[hi] - scores[lo]) * (pos - lo as f64);
    let mut low = Vec::new();
    let mut high = Vec::new();
    for r in records {
        if r.risk_score <= threshold {
            low.push(r.clone());
        } else {
            high.push(r.clone());
        }
    }
    Ok((low, high))
}
