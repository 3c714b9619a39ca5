//! Independent numerical oracles used to cross-check the engine.
//!
//! Nothing here calls into the Bessel or log-domain machinery of
//! [`crate::vmf`] / [`crate::gallery`] except where the engine is the
//! object under test. Normalizing constants come from adaptive
//! Gauss–Kronrod quadrature over the polar angle, and probabilities are
//! computed in the linear domain, which is only safe inside a small
//! parameter envelope.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gallery::{self, GalleryModel, Posterior};
use crate::holue::ProbabilisticEmbedding;
use crate::vmf::{uniform_on_sphere, UnitVector, VmfParams, VmfSampler};

/// Largest dimension accepted by the linear-domain twins.
pub const ENVELOPE_MAX_DIM: usize = 8;
/// Largest concentration accepted by the linear-domain twins.
pub const ENVELOPE_MAX_KAPPA: f64 = 50.0;
/// Largest gallery accepted by the linear-domain twins.
pub const ENVELOPE_MAX_CLASSES: usize = 20;

// Gauss–Kronrod 7/15 abscissae and weights on [−1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, (kronrod - gauss).abs() * half)
}

/// Adaptive Gauss–Kronrod integration to relative tolerance `rel_tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    let (whole, _) = gk15(&f, a, b);
    let mut stack = vec![(a, b, 0_u32)];
    let mut total = 0.0;
    let scale = whole.abs().max(f64::MIN_POSITIVE);
    while let Some((lo, hi, depth)) = stack.pop() {
        let (value, err) = gk15(&f, lo, hi);
        let budget = rel_tol * scale * (hi - lo) / (b - a);
        if err <= budget || err <= 1e-300 {
            total += value;
        } else if depth >= 60 {
            return Err(Error::Oracle(format!(
                "quadrature did not converge on [{lo}, {hi}] (error {err:e})"
            )));
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, depth + 1));
            stack.push((mid, hi, depth + 1));
        }
    }
    Ok(total)
}

/// Γ(m/2) by exact recursion from Γ(1) = 1 and Γ(1/2) = √π.
fn gamma_half_integer(m: usize) -> f64 {
    let mut g = if m.is_multiple_of(2) { 1.0 } else { PI.sqrt() };
    let mut x = if m.is_multiple_of(2) { 1.0 } else { 0.5 };
    while x < m as f64 / 2.0 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Area of 𝕊^{m−1} in the linear domain; `S_0 = 2` (two points).
fn surface_area_linear(m: usize) -> f64 {
    2.0 * PI.powf(m as f64 / 2.0) / gamma_half_integer(m)
}

/// `−log ∫_{𝕊^{d−1}} exp(κ cos θ) dS`, by quadrature over the polar angle:
/// `∫ = S_{d−2} ∫₀^π exp(κ cos θ) sin^{d−2} θ dθ`.
pub fn quad_log_c_d(d: usize, kappa: f64) -> Result<f64> {
    if !(2..=64).contains(&d) {
        return Err(Error::Oracle(format!("quadrature oracle supports 2 <= d <= 64, got {d}")));
    }
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(Error::Oracle(format!("invalid concentration {kappa}")));
    }
    let power = (d - 2) as i32;
    // shifted by exp(−κ) so the integrand stays O(1)
    let integrand = |theta: f64| (kappa * (theta.cos() - 1.0)).exp() * theta.sin().powi(power);
    let integral = integrate(integrand, 0.0, PI, 1e-14)?;
    Ok(-(kappa + (surface_area_linear(d - 1) * integral).ln()))
}

fn check_envelope(model: &GalleryModel) -> Result<()> {
    if model.dim() > ENVELOPE_MAX_DIM
        || model.kappa() > ENVELOPE_MAX_KAPPA
        || model.gallery().len() > ENVELOPE_MAX_CLASSES
    {
        return Err(Error::Oracle(format!(
            "outside oracle envelope (d={}, κ={}, K={})",
            model.dim(),
            model.kappa(),
            model.gallery().len()
        )));
    }
    Ok(())
}

fn cosines_linear(model: &GalleryModel, z: &UnitVector) -> Result<Vec<f64>> {
    if z.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: z.dim(),
        });
    }
    Ok(model
        .gallery()
        .means()
        .iter()
        .map(|m| m.as_slice().iter().zip(z.as_slice()).map(|(a, b)| a * b).sum())
        .collect())
}

struct LinearModel {
    class_weights: Vec<f64>,
    oog_weight: f64,
}

impl LinearModel {
    fn new(model: &GalleryModel, z: &UnitVector) -> Result<Self> {
        check_envelope(model)?;
        let d = model.dim();
        let c = quad_log_c_d(d, model.kappa())?.exp();
        let prior = (1.0 - model.beta()) / model.gallery().len() as f64;
        let class_weights = cosines_linear(model, z)?
            .into_iter()
            .map(|cos| prior * c * (model.kappa() * cos).exp())
            .collect();
        Ok(Self {
            class_weights,
            oog_weight: model.beta() / surface_area_linear(d),
        })
    }

    fn marginal(&self) -> f64 {
        self.class_weights.iter().sum::<f64>() + self.oog_weight
    }
}

/// Linear-domain twin of [`gallery::posterior`], restricted to the envelope
/// d <= 8, κ <= 50, K <= 20.
pub fn independent_posterior(model: &GalleryModel, z: &UnitVector) -> Result<Posterior> {
    let lin = LinearModel::new(model, z)?;
    let total = lin.marginal();
    Ok(Posterior {
        gallery_probs: lin.class_weights.iter().map(|w| w / total).collect(),
        oog_prob: lin.oog_weight / total,
    })
}

/// Unscaled (T = 1) KL components evaluated directly in the linear domain:
/// `KL₁ = Σ_c P(c|x) log(P(c|x)/P(c))` and
/// `KL₂ = (β/S)/p(μ_x) · log(p(μ_x|x)/p(μ_x))`.
pub fn independent_kl(model: &GalleryModel, pemb: &ProbabilisticEmbedding) -> Result<(f64, f64)> {
    if pemb.kappa > ENVELOPE_MAX_KAPPA {
        return Err(Error::Oracle(format!("probe κ {} outside envelope", pemb.kappa)));
    }
    let lin = LinearModel::new(model, &pemb.mean)?;
    let marginal = lin.marginal();
    let prior = (1.0 - model.beta()) / model.gallery().len() as f64;
    let kl1 = lin
        .class_weights
        .iter()
        .map(|w| w / marginal)
        .filter(|&p| p > 0.0)
        .map(|p| p * (p / prior).ln())
        .sum();
    let self_density = quad_log_c_d(model.dim(), pemb.kappa)?.exp() * pemb.kappa.exp();
    let kl2 = lin.oog_weight / marginal * (self_density / marginal).ln();
    Ok((kl1, kl2))
}

/// Outcome of the Monte-Carlo normalization check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalCheck {
    /// Estimate of `∫ p(z) dz`.
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub passed: bool,
}

/// Monte-Carlo check that the engine's marginal integrates to one.
pub fn mc_marginal_check(model: &GalleryModel, n_samples: usize, seed: u64) -> Result<MarginalCheck> {
    mc_marginal_check_with(model, n_samples, seed, |z| gallery::log_marginal(model, z))
}

/// As [`mc_marginal_check`] with an arbitrary log-density under test.
///
/// Draws z from the generative process (a class from the prior, then z from
/// that class; out-of-gallery classes have uniformly distributed means, so
/// their draws are uniform on the sphere) and averages the importance weight
/// `(1/S_{d−1}) / p̂(z)`. Its expectation is `∫ (p/p̂) dz / S_{d−1}`, which is
/// 1 when `p̂` is the density the samples were drawn from.
pub fn mc_marginal_check_with<F>(
    model: &GalleryModel,
    n_samples: usize,
    seed: u64,
    log_density: F,
) -> Result<MarginalCheck>
where
    F: Fn(&UnitVector) -> Result<f64>,
{
    if n_samples < 10_000 {
        return Err(Error::Oracle(format!("need at least 10^4 samples, got {n_samples}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let samplers = model
        .gallery()
        .means()
        .iter()
        .map(|m| VmfParams::new(m.clone(), model.kappa()).map(|p| VmfSampler::new(&p)))
        .collect::<Result<Vec<_>>>()?;
    let uniform_density = surface_area_linear(d).recip();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let z = if rng.gen::<f64>() < model.beta() {
            uniform_on_sphere(d, &mut rng)
        } else {
            let c = rng.gen_range(0..samplers.len());
            samplers[c].sample(&mut rng)
        };
        let w = uniform_density / log_density(&z)?.exp();
        sum += w;
        sum_sq += w * w;
    }
    let n = n_samples as f64;
    let estimate = sum / n;
    let variance = ((sum_sq / n - estimate * estimate) * n / (n - 1.0)).max(0.0);
    let std_error = (variance / n).sqrt();
    Ok(MarginalCheck {
        estimate,
        std_error,
        n_samples,
        passed: (estimate - 1.0).abs() <= 3.0 * std_error + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::Gallery;
    use crate::vmf;

    fn single(kappa: f64, beta: f64) -> GalleryModel {
        let g = Gallery::new(vec!["a".into()], vec![UnitVector::basis(3, 0).unwrap()]).unwrap();
        GalleryModel::new(g, kappa, beta).unwrap()
    }

    #[test]
    fn quadrature_examples() {
        // series value −log(2π I₀(2)) and closed form log(1/(4π sinh 1))
        assert!((quad_log_c_d(2, 2.0).unwrap() + (2.0 * PI * 2.279_585_302_336_067_3).ln()).abs() < 1e-12);
        assert!((quad_log_c_d(3, 1.0).unwrap() - (1.0 / (4.0 * PI * 1f64.sinh())).ln()).abs() < 1e-12);
        assert!((quad_log_c_d(3, 0.0).unwrap() + (4.0 * PI).ln()).abs() < 1e-13);
        assert!(quad_log_c_d(1, 1.0).is_err());
    }

    #[test]
    fn quadrature_matches_engine_in_higher_dimensions() {
        for d in 2..=8 {
            for &k in &[0.1, 1.0, 10.0, 100.0] {
                let q = quad_log_c_d(d, k).unwrap();
                let e = vmf::log_c_d(d, k).unwrap();
                assert!(((q - e) / e).abs() < 1e-10, "d={d} κ={k}: {q} vs {e}");
            }
        }
    }

    #[test]
    fn half_integer_gamma() {
        assert!((gamma_half_integer(1) - PI.sqrt()).abs() < 1e-15);
        assert_eq!(gamma_half_integer(2), 1.0);
        assert!((gamma_half_integer(5) - 0.75 * PI.sqrt()).abs() < 1e-15);
        assert_eq!(gamma_half_integer(8), 6.0);
        assert_eq!(surface_area_linear(1), 2.0);
    }

    #[test]
    fn posterior_twin_examples() {
        let m = single(1.0, 0.5);
        let p = independent_posterior(&m, &UnitVector::basis(3, 0).unwrap()).unwrap();
        assert!((p.gallery_probs[0] - 0.698_161_983_249_362_6).abs() < 1e-12);
        let flat = single(1e-9, 0.5);
        let z = UnitVector::normalize(vec![0.3, 0.3, 0.3]).unwrap();
        let q = independent_posterior(&flat, &z).unwrap();
        assert!((q.gallery_probs[0] - 0.5).abs() < 1e-8);
        let big = single(60.0, 0.5);
        assert!(matches!(independent_posterior(&big, &z), Err(Error::Oracle(_))));
    }

    #[test]
    fn marginal_check_examples() {
        let m = single(1.0, 0.5);
        let ok = mc_marginal_check(&m, 100_000, 1).unwrap();
        assert!(ok.passed, "{ok:?}");
        let nearly_uniform = single(3.0, 1.0 - 1e-12);
        let u = mc_marginal_check(&nearly_uniform, 10_000, 2).unwrap();
        assert!(u.passed, "{u:?}");
        let corrupted = mc_marginal_check_with(&m, 100_000, 1, |z| {
            Ok(gallery::log_marginal(&m, z)? + 1.1f64.ln())
        })
        .unwrap();
        assert!(!corrupted.passed, "{corrupted:?}");
        assert!(mc_marginal_check(&m, 10, 1).is_err());
    }
}
