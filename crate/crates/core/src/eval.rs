//! End-to-end evaluation of one protocol at one operating point.
//!
//! The cosine threshold τ* is fitted on the test non-mated acceptance
//! scores, the gallery model's κ is obtained by inverting the threshold
//! map, and every requested confidence score is computed for the test
//! probes. Calibration statistics and the MLP head are fitted on the
//! validation split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, Method};
use crate::error::{param, Error, Result};
use crate::gallery::{self, GalleryModel, DEFAULT_BETA};
use crate::holue::{self, CalibrationStats, KlComponents, MlpCalibrator, TrainConfig, DEFAULT_TEMPERATURE};
use crate::metrics::{
    self, confusion_counts, Confusion, Metric, OsrMetrics, ProbeOutcome, RejectionCurve, Truth, DEFAULT_MAX_FRACTION,
    DEFAULT_N_POINTS, DEFAULT_N_SHUFFLES,
};
use crate::protocol::{OsrProtocol, Probe, Split};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which split the KL standardization moments come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsSource {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub target_fpir: f64,
    pub methods: Vec<Method>,
    pub temperature: f64,
    pub beta: f64,
    pub max_reject_fraction: f64,
    pub n_points: usize,
    pub n_shuffles: usize,
    /// Seeds the random reference curve and the MLP initialization.
    pub seed: u64,
    pub stats_source: StatsSource,
    pub train: TrainConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            target_fpir: 0.1,
            methods: Method::ALL.to_vec(),
            temperature: DEFAULT_TEMPERATURE,
            beta: DEFAULT_BETA,
            max_reject_fraction: DEFAULT_MAX_FRACTION,
            n_points: DEFAULT_N_POINTS,
            n_shuffles: DEFAULT_N_SHUFFLES,
            seed: 0,
            stats_source: StatsSource::Validation,
            train: TrainConfig::default(),
        }
    }
}

impl EvalConfig {
    fn needs_kl(&self) -> bool {
        self.methods.iter().any(|m| matches!(m, Method::HolUe | Method::HolUeSum))
    }

    fn validate(&self) -> Result<()> {
        if !(self.target_fpir > 0.0 && self.target_fpir < 1.0) {
            return Err(param("target_fpir", format!("must lie in (0, 1), got {}", self.target_fpir)));
        }
        if self.methods.is_empty() {
            return Err(param("methods", "at least one method is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub test_mated: usize,
    pub test_nonmated: usize,
    pub validation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    /// `None` when the oracle and random references coincide.
    pub prr: BTreeMap<Metric, Option<f64>>,
    pub auc: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub target_fpir: f64,
    pub tau: f64,
    pub kappa: f64,
    pub beta: f64,
    pub temperature: f64,
    pub max_reject_fraction: f64,
    pub n_points: usize,
    pub n_shuffles: usize,
    pub stats_source: StatsSource,
    pub counts: SplitCounts,
    pub confusion: Confusion,
    pub operating_point: OsrMetrics,
    /// Test probes where the posterior rule and the cosine rule at τ* differ.
    pub decision_disagreements: usize,
    pub calibration: Option<CalibrationStats>,
    pub methods: BTreeMap<Method, MethodReport>,
    pub oracle_auc: BTreeMap<Metric, f64>,
    pub random_auc: BTreeMap<Metric, f64>,
}

impl EvalReport {
    pub fn prr(&self, method: Method, metric: Metric) -> Option<f64> {
        self.methods.get(&method).and_then(|m| m.prr.get(&metric).copied().flatten())
    }

    /// True when some requested method has no defined F1 PRR.
    pub fn has_undefined_prr(&self) -> bool {
        self.methods.values().any(|m| m.prr.get(&Metric::F1).is_some_and(Option::is_none))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization") + "\n"
    }
}

/// Report plus the curves it summarizes.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub curves: Vec<(Method, RejectionCurve)>,
    pub oracle_curves: Vec<RejectionCurve>,
    pub random_curves: Vec<RejectionCurve>,
    pub outcomes: Vec<ProbeOutcome>,
    pub calibrator: Option<MlpCalibrator>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("validation split is empty but {0} needs calibration")]
    EmptyValidation(Method),
    #[error(transparent)]
    Core(#[from] Error),
}

struct Scored {
    outcome: ProbeOutcome,
    kl: Option<KlComponents>,
}

fn truth(model: &GalleryModel, probe: &Probe) -> Truth {
    match &probe.subject_id {
        Some(id) => Truth::Mated(model.gallery().index_of(id).expect("protocol validated")),
        None => Truth::NonMated,
    }
}

fn required<T: Clone>(value: &Option<T>, what: &str, probe: &Probe) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::MissingInput(format!("{what} for probe {}", probe.probe_id)))
}

fn score_probe(model: &GalleryModel, probe: &Probe, tau: f64, cfg: &EvalConfig) -> Result<Scored> {
    let post = gallery::posterior(model, &probe.vector)?;
    let decision = gallery::decide(&post);
    let mut scores = BTreeMap::new();
    let kl = if cfg.needs_kl() {
        Some(holue::kl_components(model, &probe.embedding()?, cfg.temperature)?)
    } else {
        None
    };
    for &m in &cfg.methods {
        let s = match m {
            Method::AccScr => baselines::q_accscr(baselines::acc_score(model.gallery(), &probe.vector)?, tau),
            Method::Scf => baselines::q_scf(&probe.embedding()?),
            Method::Pfe => baselines::q_pfe(&required(&probe.pfe_sigma2, "pfe_sigma2", probe)?)?,
            Method::Sf => baselines::q_sf(required(&probe.sf_scale, "sf_scale", probe)?),
            Method::GalUe => gallery::galue_score(&post),
            // filled in once calibration is fitted
            Method::HolUe | Method::HolUeSum => continue,
        };
        scores.insert(m, s);
    }
    Ok(Scored {
        outcome: ProbeOutcome {
            probe_id: probe.probe_id.clone(),
            truth: truth(model, probe),
            decision,
            scores,
        },
        kl,
    })
}

/// Runs the full evaluation for one operating point.
pub fn evaluate(protocol: &OsrProtocol, cfg: &EvalConfig) -> std::result::Result<Evaluation, EvalError> {
    cfg.validate()?;
    protocol.validate()?;
    let test: Vec<&Probe> = protocol.probes_in(Split::Test).collect();
    let validation: Vec<&Probe> = protocol.probes_in(Split::Validation).collect();

    let nonmated_scores = test
        .iter()
        .filter(|p| p.subject_id.is_none())
        .map(|p| baselines::acc_score(&protocol.gallery, &p.vector))
        .collect::<Result<Vec<f64>>>()?;
    if nonmated_scores.is_empty() {
        return Err(Error::MissingInput("no non-mated test probes to fit the operating point".into()).into());
    }
    let tau = metrics::threshold_for_fpir(&nonmated_scores, cfg.target_fpir)?;
    let k = protocol.gallery.len();
    let kappa = gallery::kappa_for_threshold(tau, cfg.beta, k, protocol.dim())?;
    let model = GalleryModel::new(protocol.gallery.clone(), kappa, cfg.beta)?;

    let mut scored = test
        .iter()
        .map(|p| score_probe(&model, p, tau, cfg))
        .collect::<Result<Vec<Scored>>>()?;
    let decision_disagreements = test
        .iter()
        .zip(&scored)
        .map(|(p, s)| Ok(baselines::cosine_decision(&protocol.gallery, &p.vector, tau)? != s.outcome.decision))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&d| d)
        .count();

    let (calibration, calibrator) = if cfg.needs_kl() {
        let requester = if cfg.methods.contains(&Method::HolUe) {
            Method::HolUe
        } else {
            Method::HolUeSum
        };
        let val_scored = validation
            .iter()
            .map(|p| score_probe(&model, p, tau, cfg))
            .collect::<Result<Vec<Scored>>>()?;
        let source = match cfg.stats_source {
            StatsSource::Validation => &val_scored,
            StatsSource::Test => &scored,
        };
        if source.is_empty() {
            return Err(EvalError::EmptyValidation(requester));
        }
        let kls: Vec<KlComponents> = source.iter().map(|s| s.kl.expect("kl computed")).collect();
        let stats = holue::fit_stats(&kls)?;
        let calibrator = if cfg.methods.contains(&Method::HolUe) {
            if val_scored.is_empty() {
                return Err(EvalError::EmptyValidation(Method::HolUe));
            }
            let features: Vec<[f64; 2]> = val_scored
                .iter()
                .map(|s| {
                    let (a, b) = holue::normalize(&s.kl.expect("kl computed"), &stats);
                    [a, b]
                })
                .collect();
            let correct: Vec<bool> = val_scored.iter().map(|s| !s.outcome.is_error()).collect();
            let mut net = holue::fit_mlp(&features, &correct, cfg.train, cfg.seed)?;
            net.stats = Some(stats);
            Some(net)
        } else {
            None
        };
        for s in &mut scored {
            let (a, b) = holue::normalize(&s.kl.expect("kl computed"), &stats);
            if cfg.methods.contains(&Method::HolUeSum) {
                s.outcome.scores.insert(Method::HolUeSum, holue::holue_sum(a, b));
            }
            if let Some(net) = &calibrator {
                s.outcome.scores.insert(Method::HolUe, holue::mlp_predict(net, a, b));
            }
        }
        (Some(stats), calibrator)
    } else {
        (None, None)
    };

    let outcomes: Vec<ProbeOutcome> = scored.into_iter().map(|s| s.outcome).collect();
    let confusion = confusion_counts(&outcomes);
    let mut oracle_curves = Vec::new();
    let mut random_curves = Vec::new();
    for metric in Metric::ALL {
        let (oracle, random) = metrics::reference_curves(
            &outcomes,
            metric,
            cfg.max_reject_fraction,
            cfg.n_points,
            cfg.n_shuffles,
            cfg.seed,
        )?;
        oracle_curves.push(oracle);
        random_curves.push(random);
    }

    let mut methods = BTreeMap::new();
    let mut curves = Vec::new();
    for &m in &cfg.methods {
        let mut report = MethodReport {
            prr: BTreeMap::new(),
            auc: BTreeMap::new(),
        };
        for (i, metric) in Metric::ALL.into_iter().enumerate() {
            let curve = metrics::rejection_curve(&outcomes, m, metric, cfg.max_reject_fraction, cfg.n_points)?;
            let prr = match metrics::prr(&curve, &random_curves[i], &oracle_curves[i]) {
                Ok(v) => Some(v),
                Err(Error::UndefinedPrr) => None,
                Err(e) => return Err(e.into()),
            };
            report.prr.insert(metric, prr);
            report.auc.insert(metric, curve.auc());
            curves.push((m, curve));
        }
        methods.insert(m, report);
    }

    let mut seeds = protocol.seeds.clone();
    seeds.insert("eval".to_string(), cfg.seed);
    let report = EvalReport {
        tool_version: TOOL_VERSION.to_string(),
        seeds,
        target_fpir: cfg.target_fpir,
        tau,
        kappa,
        beta: cfg.beta,
        temperature: cfg.temperature,
        max_reject_fraction: cfg.max_reject_fraction,
        n_points: cfg.n_points,
        n_shuffles: cfg.n_shuffles,
        stats_source: cfg.stats_source,
        counts: SplitCounts {
            test_mated: outcomes.iter().filter(|o| matches!(o.truth, Truth::Mated(_))).count(),
            test_nonmated: outcomes.iter().filter(|o| o.truth == Truth::NonMated).count(),
            validation: validation.len(),
        },
        confusion,
        operating_point: confusion.metrics(),
        decision_disagreements,
        calibration,
        methods,
        oracle_auc: Metric::ALL.into_iter().zip(oracle_curves.iter().map(|c| c.auc())).collect(),
        random_auc: Metric::ALL.into_iter().zip(random_curves.iter().map(|c| c.auc())).collect(),
    };
    Ok(Evaluation {
        report,
        curves,
        oracle_curves,
        random_curves,
        outcomes,
        calibrator,
    })
}
