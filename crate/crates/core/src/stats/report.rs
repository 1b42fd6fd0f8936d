//! Evaluation report: per-finding and macro AUPRC/AUROC with bootstrap
//! intervals, prevalence tiers, and paired permutation p-values against an
//! optional comparison model. Serializes to JSON (fixed field order) and a
//! flat per-finding CSV.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{
    bootstrap_columns, macro_average, per_finding, permutation_columns, stratify_prevalence, Ci,
    Metric, PrevalenceCuts, PrevalenceTier, ScoreMatrix,
};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReportConfig {
    pub bootstrap_samples: usize,
    pub permutations: usize,
    pub seed: u64,
    pub cuts: PrevalenceCuts,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            bootstrap_samples: 1000,
            permutations: 1000,
            seed: 0,
            cuts: PrevalenceCuts::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricPair {
    pub auprc: Option<Ci>,
    pub auroc: Option<Ci>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FindingReport {
    pub name: String,
    pub prevalence: f64,
    pub tier: PrevalenceTier,
    /// Full-sample point estimates; None when the finding is degenerate.
    pub auprc_point: Option<f64>,
    pub auroc_point: Option<f64>,
    pub auprc: Option<Ci>,
    pub auroc: Option<Ci>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_auprc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_auroc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TierReport {
    pub tier: PrevalenceTier,
    pub n_findings: usize,
    pub auprc: Option<Ci>,
    pub auroc: Option<Ci>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MacroReport {
    pub auprc_point: Option<f64>,
    pub auroc_point: Option<f64>,
    pub auprc: Option<Ci>,
    pub auroc: Option<Ci>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_auprc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_auroc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_images: usize,
    pub n_findings: usize,
    pub bootstrap_samples: usize,
    pub permutations: usize,
    pub seed: u64,
    pub compared: bool,
    pub macro_metrics: MacroReport,
    pub tiers: Vec<TierReport>,
    pub findings: Vec<FindingReport>,
}

/// Index layout of the statistics vector we track per bootstrap resample:
/// per-finding AUPRC, per-finding AUROC, macro AUPRC, macro AUROC, then
/// per-tier macro AUPRC/AUROC for the tiers present.
fn eval_columns(
    matrix: &ScoreMatrix,
    tiers: &[PrevalenceTier],
    tier_list: &[PrevalenceTier],
) -> Vec<Option<f64>> {
    let m = matrix.n_findings();
    let auprc = per_finding(matrix, Metric::Auprc);
    let auroc = per_finding(matrix, Metric::Auroc);
    let mut out = Vec::with_capacity(2 * m + 2 + 2 * tier_list.len());
    out.extend(auprc.iter().copied());
    out.extend(auroc.iter().copied());
    let macro_of = |vals: &[Option<f64>], mask: Option<&PrevalenceTier>| -> Option<f64> {
        let included: Vec<f64> = vals
            .iter()
            .enumerate()
            .filter(|(j, v)| v.is_some() && mask.is_none_or(|t| tiers[*j] == *t))
            .map(|(_, v)| v.unwrap())
            .collect();
        if included.is_empty() {
            None
        } else {
            Some(included.iter().sum::<f64>() / included.len() as f64)
        }
    };
    out.push(macro_of(&auprc, None));
    out.push(macro_of(&auroc, None));
    for t in tier_list {
        out.push(macro_of(&auprc, Some(t)));
        out.push(macro_of(&auroc, Some(t)));
    }
    out
}

fn summarize_columns(cols: Vec<Vec<f64>>) -> Vec<Option<Ci>> {
    cols.into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return None;
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pct = |q: f64| {
                if v.len() == 1 {
                    return v[0];
                }
                let pos = q * (v.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
            };
            Some(Ci { mean, lo95: pct(0.025), hi95: pct(0.975) })
        })
        .collect()
}

/// Build the full evaluation report for `matrix`, optionally comparing
/// against a second model's scores on the same cohort.
pub fn evaluate(
    matrix: &ScoreMatrix,
    finding_names: &[String],
    compare: Option<&ScoreMatrix>,
    cfg: &ReportConfig,
) -> Result<MetricsReport> {
    let m = matrix.n_findings();
    if finding_names.len() != m {
        return Err(Error::shape(format!(
            "{} finding names for {} findings",
            finding_names.len(),
            m
        )));
    }
    if cfg.bootstrap_samples == 0 {
        return Err(Error::config("bootstrap_samples must be >= 1"));
    }
    let prevalences = matrix.prevalences();
    let tiers = stratify_prevalence(&prevalences, cfg.cuts);
    let tier_list: Vec<PrevalenceTier> =
        [PrevalenceTier::Low, PrevalenceTier::Medium, PrevalenceTier::High]
            .into_iter()
            .filter(|t| tiers.contains(t))
            .collect();

    let auprc_point = per_finding(matrix, Metric::Auprc);
    let auroc_point = per_finding(matrix, Metric::Auroc);
    let macro_point = |vals: &[Option<f64>]| -> Option<f64> {
        let defined: Vec<f64> = vals.iter().flatten().copied().collect();
        let mask: Vec<bool> = vec![true; defined.len()];
        macro_average(&defined, &mask).ok()
    };

    let cols = bootstrap_columns(matrix, cfg.bootstrap_samples, cfg.seed, |mm| {
        eval_columns(mm, &tiers, &tier_list)
    });
    let cis = summarize_columns(cols);

    // permutation p-values against the comparison model
    let (mut p_auprc, mut p_auroc, mut p_macro_auprc, mut p_macro_auroc) =
        (vec![None; m], vec![None; m], None, None);
    if let Some(other) = compare {
        if cfg.permutations > 0 {
            let outcomes = permutation_columns(matrix, other, cfg.permutations, cfg.seed, |mm| {
                eval_columns(mm, &tiers, &tier_list)
            })?;
            for j in 0..m {
                p_auprc[j] = outcomes[j].map(|o| o.p_value);
                p_auroc[j] = outcomes[m + j].map(|o| o.p_value);
            }
            p_macro_auprc = outcomes[2 * m].map(|o| o.p_value);
            p_macro_auroc = outcomes[2 * m + 1].map(|o| o.p_value);
        }
    }

    let findings: Vec<FindingReport> = (0..m)
        .map(|j| FindingReport {
            name: finding_names[j].clone(),
            prevalence: prevalences[j],
            tier: tiers[j],
            auprc_point: auprc_point[j],
            auroc_point: auroc_point[j],
            auprc: cis[j],
            auroc: cis[m + j],
            p_auprc: p_auprc[j],
            p_auroc: p_auroc[j],
        })
        .collect();

    let tier_reports: Vec<TierReport> = tier_list
        .iter()
        .enumerate()
        .map(|(k, t)| TierReport {
            tier: *t,
            n_findings: tiers.iter().filter(|x| *x == t).count(),
            auprc: cis[2 * m + 2 + 2 * k],
            auroc: cis[2 * m + 2 + 2 * k + 1],
        })
        .collect();

    Ok(MetricsReport {
        n_images: matrix.n_images(),
        n_findings: m,
        bootstrap_samples: cfg.bootstrap_samples,
        permutations: if compare.is_some() { cfg.permutations } else { 0 },
        seed: cfg.seed,
        compared: compare.is_some(),
        macro_metrics: MacroReport {
            auprc_point: macro_point(&auprc_point),
            auroc_point: macro_point(&auroc_point),
            auprc: cis[2 * m],
            auroc: cis[2 * m + 1],
            p_auprc: p_macro_auprc,
            p_auroc: p_macro_auroc,
        },
        tiers: tier_reports,
        findings,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization") + "\n"
    }

    /// Flat CSV, one row per finding.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "finding,prevalence,tier,auprc_point,auprc_mean,auprc_lo95,auprc_hi95,\
             auroc_point,auroc_mean,auroc_lo95,auroc_hi95,p_auprc,p_auroc\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let ci3 = |c: Option<Ci>| match c {
            Some(c) => format!("{},{},{}", c.mean, c.lo95, c.hi95),
            None => ",,".to_string(),
        };
        for f in &self.findings {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                f.name,
                f.prevalence,
                f.tier,
                opt(f.auprc_point),
                ci3(f.auprc),
                opt(f.auroc_point),
                ci3(f.auroc),
                opt(f.p_auprc),
                opt(f.p_auroc),
            ));
        }
        out
    }
}
