//! Holistic uncertainty (HolUE).
//!
//! A probe is described by a vMF belief `p(z|x)` with mean μ_x and
//! concentration κ(x). The KL divergence between the resulting class
//! posterior and the prior is split into a gallery term (KL₁, over the K
//! enrolled classes) and an out-of-gallery term (KL₂). Both are evaluated
//! at the mean μ_x and after temperature scaling of the posterior. The
//! two terms are standardized on a calibration set and combined either by
//! summation or by a small MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::gallery::{GalleryModel, JointTerms, Posterior};
use crate::vmf::{self, UnitVector};

/// Default posterior temperature.
pub const DEFAULT_TEMPERATURE: f64 = 20.0;

/// vMF belief over a probe's embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilisticEmbedding {
    pub mean: UnitVector,
    pub kappa: f64,
}

impl ProbabilisticEmbedding {
    pub fn new(mean: UnitVector, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(param("kappa", format!("probe concentration must be finite and > 0, got {kappa}")));
        }
        Ok(Self { mean, kappa })
    }
}

/// The two summands of the temperature-scaled KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlComponents {
    pub kl1: f64,
    pub kl2: f64,
    pub temperature: f64,
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(param("temperature", format!("must be finite and > 0, got {t}")))
    }
}

fn scaled(terms: &JointTerms, t: f64) -> JointTerms {
    JointTerms {
        classes: terms.classes.iter().map(|x| x / t).collect(),
        oog: terms.oog / t,
    }
}

/// Temperature-T posterior evaluated at the probe mean μ_x.
pub fn scaled_gallery_posterior(
    model: &GalleryModel,
    pemb: &ProbabilisticEmbedding,
    temperature: f64,
) -> Result<Posterior> {
    check_temperature(temperature)?;
    Ok(scaled(&model.log_joint(&pemb.mean)?, temperature).normalize())
}

/// KL₁ and KL₂ of the temperature-scaled posterior against the prior.
///
/// `KL₂ = (β/S)^{1/T} / p(μ_x) · log[(β/S)^{1/T−1} p(μ_x|x) / p(μ_x)]`
/// where `p(μ_x|x) = C_d(κ(x)) e^{κ(x)}` is the probe's own density at its
/// mean and `p(μ_x)` the unscaled marginal.
pub fn kl_components(
    model: &GalleryModel,
    pemb: &ProbabilisticEmbedding,
    temperature: f64,
) -> Result<KlComponents> {
    check_temperature(temperature)?;
    let joint = model.log_joint(&pemb.mean)?;
    let log_marginal = joint.log_sum_exp();
    let tempered = scaled(&joint, temperature);
    let log_norm = tempered.log_sum_exp();
    let log_prior = model.log_class_prior();
    let kl1 = tempered
        .classes
        .iter()
        .map(|t| t - log_norm)
        .map(|lp| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - log_prior)
            }
        })
        .sum();

    let log_oog = model.log_oog_term();
    let log_self = vmf::log_c_d(model.dim(), pemb.kappa)? + pemb.kappa;
    let weight = (log_oog / temperature - log_marginal).exp();
    let log_ratio = (1.0 / temperature - 1.0) * log_oog + log_self - log_marginal;
    Ok(KlComponents {
        kl1,
        kl2: weight * log_ratio,
        temperature,
    })
}

/// Per-component moments used to standardize KL₁ and KL₂.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub mean1: f64,
    pub std1: f64,
    pub mean2: f64,
    pub std2: f64,
}

fn moments(values: &[f64], name: &str) -> Result<(f64, f64)> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !std.is_finite() || lo == hi || std <= 1e-12 * mean.abs().max(1e-300) {
        return Err(Error::Calibration(format!("{name} has zero variance")));
    }
    Ok((mean, std))
}

/// Sample mean and unbiased standard deviation of each component.
pub fn fit_stats(components: &[KlComponents]) -> Result<CalibrationStats> {
    if components.len() < 2 {
        return Err(Error::Calibration(format!(
            "need at least 2 calibration samples, got {}",
            components.len()
        )));
    }
    let kl1: Vec<f64> = components.iter().map(|c| c.kl1).collect();
    let kl2: Vec<f64> = components.iter().map(|c| c.kl2).collect();
    let (mean1, std1) = moments(&kl1, "KL1")?;
    let (mean2, std2) = moments(&kl2, "KL2")?;
    Ok(CalibrationStats {
        mean1,
        std1,
        mean2,
        std2,
    })
}

/// Standardized `(KL₁, KL₂)`.
pub fn normalize(c: &KlComponents, stats: &CalibrationStats) -> (f64, f64) {
    (
        (c.kl1 - stats.mean1) / stats.std1,
        (c.kl2 - stats.mean2) / stats.std2,
    )
}

/// Sum variant of the holistic score.
pub fn holue_sum(kl1n: f64, kl2n: f64) -> f64 {
    kl1n + kl2n
}

/// Optimizer settings for [`fit_mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 2000,
            hidden: 16,
        }
    }
}

/// Fully connected layer, `out = W x + b` with `W` stored row-major
/// (`outputs × inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.biases.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + vmf::dot(row, x)
        }));
    }
}

/// Calibration head `2 → h → h → 1` with tanh hidden units and a sigmoid
/// output giving the probability that a probe's decision is correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCalibrator {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Dense>,
    pub train: TrainConfig,
    pub seed: u64,
    /// Standardization applied to the inputs, when known.
    #[serde(default)]
    pub stats: Option<CalibrationStats>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct Activations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    logit: f64,
}

impl MlpCalibrator {
    /// Network with every weight and bias set to zero.
    pub fn zeros(train: TrainConfig, seed: u64) -> Self {
        let h = train.hidden;
        Self {
            layer_sizes: vec![2, h, h, 1],
            layers: vec![Dense::zeros(2, h), Dense::zeros(h, h), Dense::zeros(h, 1)],
            train,
            seed,
            stats: None,
        }
    }

    /// Weights uniform on (−0.5, 0.5) from `seed`, biases zero.
    pub fn random(train: TrainConfig, seed: u64) -> Self {
        let mut net = Self::zeros(train, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-0.5..0.5));
        }
        net
    }

    fn activations(&self, x: [f64; 2]) -> Activations {
        let (mut a1, mut a2, mut a3) = (Vec::new(), Vec::new(), Vec::new());
        self.layers[0].forward(&x, &mut a1);
        a1.iter_mut().for_each(|v| *v = v.tanh());
        self.layers[1].forward(&a1, &mut a2);
        a2.iter_mut().for_each(|v| *v = v.tanh());
        self.layers[2].forward(&a2, &mut a3);
        Activations {
            h1: a1,
            h2: a2,
            logit: a3[0],
        }
    }

    /// Probability that the decision is correct, in (0, 1).
    pub fn predict(&self, kl1n: f64, kl2n: f64) -> f64 {
        sigmoid(self.activations([kl1n, kl2n]).logit)
    }

    /// All parameters, flattened layer by layer (weights then biases).
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = it.next().expect("parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }

    /// Mean binary cross-entropy and its gradient (flattened like [`Self::params`]).
    pub fn loss_and_gradient(&self, features: &[[f64; 2]], correct: &[bool]) -> (f64, Vec<f64>) {
        let [l1, l2, l3] = &self.layers[..] else {
            unreachable!("three layers")
        };
        let mut g1 = Dense::zeros(l1.inputs, l1.outputs);
        let mut g2 = Dense::zeros(l2.inputs, l2.outputs);
        let mut g3 = Dense::zeros(l3.inputs, l3.outputs);
        let n = features.len() as f64;
        let mut loss = 0.0;
        let mut delta2 = vec![0.0; l2.outputs];
        let mut delta1 = vec![0.0; l1.outputs];
        for (x, &y) in features.iter().zip(correct) {
            let act = self.activations(*x);
            let target = if y { 1.0 } else { 0.0 };
            loss += softplus(act.logit) - target * act.logit;
            let d_logit = (sigmoid(act.logit) - target) / n;

            g3.biases[0] += d_logit;
            for (j, h) in act.h2.iter().enumerate() {
                g3.weights[j] += d_logit * h;
                delta2[j] = d_logit * l3.weights[j] * (1.0 - h * h);
            }
            for (o, d) in delta2.iter().enumerate() {
                g2.biases[o] += d;
                for (i, h) in act.h1.iter().enumerate() {
                    g2.weights[o * l2.inputs + i] += d * h;
                }
            }
            for (i, h) in act.h1.iter().enumerate() {
                let back: f64 = delta2
                    .iter()
                    .enumerate()
                    .map(|(o, d)| d * l2.weights[o * l2.inputs + i])
                    .sum();
                delta1[i] = back * (1.0 - h * h);
            }
            for (o, d) in delta1.iter().enumerate() {
                g1.biases[o] += d;
                g1.weights[o * 2] += d * x[0];
                g1.weights[o * 2 + 1] += d * x[1];
            }
        }
        let grad = [g1, g2, g3]
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect();
        (loss / n, grad)
    }
}

/// Trains the calibration head by full-batch gradient descent with momentum
/// on binary cross-entropy. `correct[i]` is true when probe i's decision
/// was right.
pub fn fit_mlp(
    features: &[[f64; 2]],
    correct: &[bool],
    train: TrainConfig,
    seed: u64,
) -> Result<MlpCalibrator> {
    if features.len() != correct.len() {
        return Err(Error::Training(format!(
            "{} feature rows for {} labels",
            features.len(),
            correct.len()
        )));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite feature".into()));
    }
    let positives = correct.iter().filter(|&&c| c).count();
    if positives == 0 || positives == correct.len() {
        return Err(Error::Training(
            "labels must contain both correct and erroneous examples".into(),
        ));
    }
    let mut net = MlpCalibrator::random(train, seed);
    let mut params = net.params();
    let mut velocity = vec![0.0; params.len()];
    for _ in 0..train.epochs {
        let (_, grad) = net.loss_and_gradient(features, correct);
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = train.momentum * *v - train.learning_rate * g;
            *p += *v;
        }
        net.set_params(&params);
    }
    Ok(net)
}

/// HolUE-MLP score for standardized components.
pub fn mlp_predict(cal: &MlpCalibrator, kl1n: f64, kl2n: f64) -> f64 {
    cal.predict(kl1n, kl2n)
}
