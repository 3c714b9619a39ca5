//! Open-set identification metrics, operating-point selection, rejection
//! curves and the Prediction Rejection Ratio.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::error::{param, Error, Result};
use crate::gallery::Decision;

/// Default upper end of the rejection grid.
pub const DEFAULT_MAX_FRACTION: f64 = 0.5;
/// Default number of grid points.
pub const DEFAULT_N_POINTS: usize = 101;
/// Default number of shuffles averaged into the random reference.
pub const DEFAULT_N_SHUFFLES: usize = 100;

/// Ground truth of a probe: enrolled class index, or absent from the gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    Mated(usize),
    NonMated,
}

/// Decision and confidence scores of one evaluated probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub probe_id: String,
    pub truth: Truth,
    pub decision: Decision,
    pub scores: BTreeMap<Method, f64>,
}

/// How a single decision counts towards the confusion totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    TruePositive,
    /// Mated probe rejected or assigned to the wrong class.
    FalseNegative,
    FalsePositive,
    TrueNegative,
}

impl ProbeOutcome {
    pub fn kind(&self) -> OutcomeKind {
        match (self.truth, self.decision) {
            (Truth::Mated(c), Decision::Accept(a)) if a == c => OutcomeKind::TruePositive,
            (Truth::Mated(_), _) => OutcomeKind::FalseNegative,
            (Truth::NonMated, Decision::Accept(_)) => OutcomeKind::FalsePositive,
            (Truth::NonMated, Decision::Reject) => OutcomeKind::TrueNegative,
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self.kind(), OutcomeKind::FalseNegative | OutcomeKind::FalsePositive)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub n_nonmated: usize,
}

impl Confusion {
    fn add(&mut self, kind: OutcomeKind, sign: isize) {
        let bump = |v: &mut usize| *v = v.wrapping_add_signed(sign);
        match kind {
            OutcomeKind::TruePositive => bump(&mut self.tp),
            OutcomeKind::FalseNegative => bump(&mut self.fn_),
            OutcomeKind::FalsePositive => {
                bump(&mut self.fp);
                bump(&mut self.n_nonmated);
            }
            OutcomeKind::TrueNegative => bump(&mut self.n_nonmated),
        }
    }

    pub fn metrics(&self) -> OsrMetrics {
        osr_metrics(self.tp, self.fn_, self.fp, self.n_nonmated)
    }
}

/// TP, FN and FP counts (plus the number of non-mated probes).
pub fn confusion_counts(outcomes: &[ProbeOutcome]) -> Confusion {
    let mut c = Confusion::default();
    for o in outcomes {
        c.add(o.kind(), 1);
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsrMetrics {
    pub fpir: f64,
    pub fnir: f64,
    pub f1: f64,
}

/// FPIR = FP/|non-mated|, FNIR = FN/(FN+TP), F1 = 2TP/(2TP+FP+FN).
/// Empty denominators give 0 for the rates, and F1 is 0 whenever TP = 0.
pub fn osr_metrics(tp: usize, fn_: usize, fp: usize, n_nonmated: usize) -> OsrMetrics {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    OsrMetrics {
        fpir: ratio(fp, n_nonmated),
        fnir: ratio(fn_, fn_ + tp),
        f1: if tp == 0 { 0.0 } else { ratio(2 * tp, 2 * tp + fp + fn_) },
    }
}

/// Acceptance threshold at which a fraction `⌊target·N⌋/N` of `scores` lies
/// at or above it: the midpoint between the k-th and (k+1)-th largest score.
pub fn threshold_for_fpir(nonmated_scores: &[f64], target: f64) -> Result<f64> {
    if nonmated_scores.is_empty() {
        return Err(param("nonmated_scores", "need at least one non-mated score"));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(param("target", format!("FPIR target must lie in [0, 1], got {target}")));
    }
    let mut sorted = nonmated_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let k = ((target * n as f64 + 1e-9).floor() as usize).min(n);
    let margin = |v: f64| 1e-9 * v.abs().max(1.0);
    Ok(match k {
        0 => sorted[0] + margin(sorted[0]),
        k if k == n => sorted[n - 1] - margin(sorted[n - 1]),
        k => 0.5 * (sorted[k - 1] + sorted[k]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    F1,
    #[serde(rename = "FPIR")]
    Fpir,
    #[serde(rename = "FNIR")]
    Fnir,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::F1, Metric::Fpir, Metric::Fnir];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::F1 => "F1",
            Metric::Fpir => "FPIR",
            Metric::Fnir => "FNIR",
        }
    }

    fn of(&self, m: &OsrMetrics) -> f64 {
        match self {
            Metric::F1 => m.f1,
            Metric::Fpir => m.fpir,
            Metric::Fnir => m.fnir,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A metric recomputed while the least confident probes are removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub metric: Metric,
    pub fractions: Vec<f64>,
    pub values: Vec<f64>,
}

impl RejectionCurve {
    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.fractions
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(f, v)| 0.5 * (f[1] - f[0]) * (v[0] + v[1]))
            .sum()
    }

    /// `fraction,value` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,value\n");
        for (f, v) in self.fractions.iter().zip(&self.values) {
            out.push_str(&format!("{f},{v}\n"));
        }
        out
    }
}

fn grid(max_fraction: f64, n_points: usize) -> Result<Vec<f64>> {
    if !(max_fraction > 0.0 && max_fraction <= 1.0) {
        return Err(param("max_fraction", format!("must lie in (0, 1], got {max_fraction}")));
    }
    if n_points < 2 {
        return Err(param("n_points", "need at least two grid points"));
    }
    Ok((0..n_points)
        .map(|i| max_fraction * i as f64 / (n_points - 1) as f64)
        .collect())
}

/// Metric values along the grid when probes are removed in `order`.
fn curve_for_order(
    outcomes: &[ProbeOutcome],
    order: &[usize],
    metric: Metric,
    fractions: &[f64],
) -> Result<Vec<f64>> {
    let n = outcomes.len();
    let mut retained = confusion_counts(outcomes);
    let mut removed = 0;
    fractions
        .iter()
        .map(|&r| {
            let k = ((r * n as f64 + 1e-9).floor() as usize).min(n);
            if k >= n {
                return Err(Error::CurveTruncation { fraction: r });
            }
            while removed < k {
                retained.add(outcomes[order[removed]].kind(), -1);
                removed += 1;
            }
            Ok(metric.of(&retained.metrics()))
        })
        .collect()
}

/// Removal order for a score: ascending score, ties by probe id.
pub fn score_order(outcomes: &[ProbeOutcome], method: Method) -> Result<Vec<usize>> {
    let scores = outcomes
        .iter()
        .map(|o| {
            o.scores
                .get(&method)
                .copied()
                .ok_or_else(|| Error::MissingInput(format!("{method} score for probe {}", o.probe_id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then_with(|| outcomes[a].probe_id.cmp(&outcomes[b].probe_id))
    });
    Ok(order)
}

/// Rejection curve for one method at a fixed operating point.
pub fn rejection_curve(
    outcomes: &[ProbeOutcome],
    method: Method,
    metric: Metric,
    max_fraction: f64,
    n_points: usize,
) -> Result<RejectionCurve> {
    let fractions = grid(max_fraction, n_points)?;
    let order = score_order(outcomes, method)?;
    let values = curve_for_order(outcomes, &order, metric, &fractions)?;
    Ok(RejectionCurve {
        metric,
        fractions,
        values,
    })
}

/// Oracle (errors first) and random (averaged seeded shuffles) reference curves.
pub fn reference_curves(
    outcomes: &[ProbeOutcome],
    metric: Metric,
    max_fraction: f64,
    n_points: usize,
    n_shuffles: usize,
    seed: u64,
) -> Result<(RejectionCurve, RejectionCurve)> {
    if n_shuffles == 0 {
        return Err(param("n_shuffles", "need at least one shuffle"));
    }
    let fractions = grid(max_fraction, n_points)?;
    let mut oracle_order: Vec<usize> = (0..outcomes.len()).collect();
    oracle_order.sort_by(|&a, &b| {
        let rank = |i: usize| if outcomes[i].is_error() { 0 } else { 1 };
        rank(a)
            .cmp(&rank(b))
            .then_with(|| outcomes[a].probe_id.cmp(&outcomes[b].probe_id))
    });
    let oracle = curve_for_order(outcomes, &oracle_order, metric, &fractions)?;

    // mean written as first + Σ(v − first)/n so that points where every
    // shuffle agrees (r = 0 in particular) are reproduced exactly
    let mut first: Option<Vec<f64>> = None;
    let mut deviations = vec![0.0; fractions.len()];
    for s in 0..n_shuffles {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
        let mut order: Vec<usize> = (0..outcomes.len()).collect();
        order.shuffle(&mut rng);
        let values = curve_for_order(outcomes, &order, metric, &fractions)?;
        let base = first.get_or_insert_with(|| values.clone());
        for ((dev, v), b) in deviations.iter_mut().zip(&values).zip(base.iter()) {
            *dev += v - b;
        }
    }
    let random = first
        .expect("at least one shuffle")
        .into_iter()
        .zip(deviations)
        .map(|(b, dev)| b + dev / n_shuffles as f64)
        .collect();
    Ok((
        RejectionCurve {
            metric,
            fractions: fractions.clone(),
            values: oracle,
        },
        RejectionCurve {
            metric,
            fractions,
            values: random,
        },
    ))
}

/// `(AUC_unc − AUC_random) / (AUC_oracle − AUC_random)`.
pub fn prr(unc: &RejectionCurve, random: &RejectionCurve, oracle: &RejectionCurve) -> Result<f64> {
    if unc.fractions != random.fractions || unc.fractions != oracle.fractions {
        return Err(Error::GridMismatch);
    }
    let (a_unc, a_rand, a_orc) = (unc.auc(), random.auc(), oracle.auc());
    let denom = a_orc - a_rand;
    if denom.abs() <= 1e-12 * a_orc.abs().max(a_rand.abs()).max(1e-300) || denom == 0.0 {
        return Err(Error::UndefinedPrr);
    }
    Ok((a_unc - a_rand) / denom)
}
