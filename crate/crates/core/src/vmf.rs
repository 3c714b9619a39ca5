//! Directional-statistics kernels on the unit sphere 𝕊^{d−1}.
//!
//! Everything is computed in the log domain. The modified Bessel function
//! of the first kind is evaluated by one of three routes:
//!
//! * the power series `Σ (x²/4)^m / (m! Γ(ν+m+1))` for `x <= 20`,
//! * the uniform (Debye) large-order expansion for `ν >= 15`,
//! * downward recurrence from order `ν + m >= 15` otherwise.
//!
//! The switchover points were validated against a 50-digit reference
//! on a grid covering `ν ∈ [0, 255]`, `x ∈ [1e-3, 1e5]`.

use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{param, Error, Result};

/// Tolerance on ‖z‖₂ − 1 accepted by [`UnitVector::new`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

const SERIES_X_MAX: f64 = 20.0;
const UNIFORM_ORDER_MIN: f64 = 15.0;
const DEBYE_TERMS: usize = 10;

/// A point on the unit sphere 𝕊^{d−1}, d >= 2.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps coordinates that are already unit-norm within [`UNIT_NORM_TOL`].
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_dim(coords.len())?;
        let norm = l2_norm(&coords);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { norm });
        }
        Ok(Self(coords))
    }

    /// Projects a nonzero vector onto the sphere.
    pub fn normalize(mut coords: Vec<f64>) -> Result<Self> {
        check_dim(coords.len())?;
        let norm = l2_norm(&coords);
        if !norm.is_finite() || norm < 1e-300 {
            return Err(Error::NotUnitNorm { norm });
        }
        coords.iter_mut().for_each(|c| *c /= norm);
        Ok(Self(coords))
    }

    /// The first standard basis vector e₁ in dimension `d`.
    pub fn basis(d: usize, axis: usize) -> Result<Self> {
        check_dim(d)?;
        if axis >= d {
            return Err(param("axis", format!("{axis} out of range for d={d}")));
        }
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Cosine similarity with another point on the same sphere.
    pub fn dot(&self, other: &UnitVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(dot(&self.0, &other.0))
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|c| -c).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    // scaled to avoid overflow on pathological inputs
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        Err(Error::InvalidDimension(d))
    } else {
        Ok(())
    }
}

/// Mean direction and concentration of a von Mises–Fisher distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    pub mean: UnitVector,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mean: UnitVector, kappa: f64) -> Result<Self> {
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(param("kappa", format!("must be finite and >= 0, got {kappa}")));
        }
        Ok(Self { mean, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }
}

/// `log S_{d−1}` where `S_{d−1} = 2π^{d/2} / Γ(d/2)` is the area of 𝕊^{d−1}.
pub fn log_surface_area(d: usize) -> Result<f64> {
    check_dim(d)?;
    let half = d as f64 / 2.0;
    Ok(LN_2 + half * PI.ln() - libm::lgamma(half))
}

/// `log I_ν(x)` for the modified Bessel function of the first kind.
pub fn log_bessel_i(order: f64, x: f64) -> Result<f64> {
    if !(order.is_finite() && order >= 0.0) {
        return Err(Error::Domain(format!("Bessel order must be finite and >= 0, got {order}")));
    }
    if !(x.is_finite() && x >= 0.0) {
        return Err(Error::Domain(format!("Bessel argument must be finite and >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(if order == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    Ok(if x <= SERIES_X_MAX {
        order * (x / 2.0).ln() - libm::lgamma(order + 1.0) + log_hyper0f1_series(order + 1.0, x * x / 4.0)
    } else if order >= UNIFORM_ORDER_MIN {
        log_bessel_i_debye(order, x)
    } else {
        log_bessel_i_recurrence(order, x)
    })
}

/// `log ₀F₁(;b;y)` by direct summation; all terms are positive.
fn log_hyper0f1_series(b: f64, y: f64) -> f64 {
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut m = 0.0;
    loop {
        m += 1.0;
        term *= y / (m * (b + m - 1.0));
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum.ln()
}

/// Coefficients (ascending powers of p) of the Debye polynomials u_k(p).
fn debye_polynomials() -> &'static [Vec<f64>] {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        // u_{k+1}(p) = ½p²(1−p²) u_k'(p) + ⅛ ∫₀ᵖ (1−5t²) u_k(t) dt
        let mut polys = vec![vec![1.0]];
        for k in 0..DEBYE_TERMS {
            let u = &polys[k];
            let mut next = vec![0.0; u.len() + 3];
            for (i, &c) in u.iter().enumerate().skip(1) {
                let du = i as f64 * c; // coefficient of p^{i-1}
                next[i + 1] += 0.5 * du;
                next[i + 3] -= 0.5 * du;
            }
            for (i, &c) in u.iter().enumerate() {
                next[i + 1] += c / (8.0 * (i as f64 + 1.0));
                next[i + 3] -= 5.0 * c / (8.0 * (i as f64 + 3.0));
            }
            polys.push(next);
        }
        polys
    })
}

fn log_bessel_i_debye(order: f64, x: f64) -> f64 {
    let r = order.hypot(x);
    let p = order / r;
    let eta = r + order * (x / (order + r)).ln();
    let mut series = 0.0;
    let mut inv_pow = 1.0;
    for poly in debye_polynomials() {
        let u = poly.iter().rev().fold(0.0, |acc, &c| acc * p + c);
        series += u * inv_pow;
        inv_pow /= order;
    }
    eta - 0.5 * (2.0 * PI).ln() - 0.5 * r.ln() + series.ln()
}

fn log_bessel_i_recurrence(order: f64, x: f64) -> f64 {
    let steps = (UNIFORM_ORDER_MIN - order).ceil() as usize;
    let top = order + steps as f64;
    let log_top = log_bessel_i_debye(top, x);
    // ratio I_{k+1}/I_k, walked down with I_{k−1} = I_{k+1} + (2k/x) I_k
    let mut ratio = (log_bessel_i_debye(top + 1.0, x) - log_top).exp();
    let mut acc = 0.0;
    let mut k = top;
    for _ in 0..steps {
        let down = ratio + 2.0 * k / x;
        acc += down.ln();
        ratio = down.recip();
        k -= 1.0;
    }
    log_top + acc
}

/// `log C_d(κ)`, the vMF normalizing constant
/// `C_d(κ) = κ^{d/2−1} / ((2π)^{d/2} I_{d/2−1}(κ))`.
pub fn log_c_d(d: usize, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    check_kappa(kappa)?;
    if kappa == 0.0 {
        return Ok(-log_surface_area(d)?);
    }
    let half = d as f64 / 2.0;
    let nu = half - 1.0;
    if kappa <= SERIES_X_MAX {
        // κ^ν / I_ν(κ) = 2^ν Γ(ν+1) / ₀F₁(;ν+1;κ²/4), which avoids 0·log 0 near κ = 0
        return Ok(nu * LN_2 + libm::lgamma(nu + 1.0)
            - half * (2.0 * PI).ln()
            - log_hyper0f1_series(nu + 1.0, kappa * kappa / 4.0));
    }
    Ok(nu * kappa.ln() - half * (2.0 * PI).ln() - log_bessel_i(nu, kappa)?)
}

/// `log α(κ)` with `α(κ) = ₀F₁(;d/2;κ²/4) = 1 / (S_{d−1} C_d(κ))`.
pub fn log_alpha(d: usize, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    check_kappa(kappa)?;
    let n = d as f64 / 2.0;
    if kappa <= SERIES_X_MAX {
        return Ok(if kappa == 0.0 {
            0.0
        } else {
            log_hyper0f1_series(n, kappa * kappa / 4.0)
        });
    }
    // ₀F₁(;n;κ²/4) = Γ(n) (κ/2)^{1−n} I_{n−1}(κ)
    Ok(libm::lgamma(n) + (1.0 - n) * (kappa / 2.0).ln() + log_bessel_i(n - 1.0, kappa)?)
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa.is_finite() && kappa >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("concentration must be finite and >= 0, got {kappa}")))
    }
}

/// `log p_vMF(z; μ, κ) = log C_d(κ) + κ μᵀz`.
pub fn vmf_log_pdf(params: &VmfParams, z: &UnitVector) -> Result<f64> {
    let cos = params.mean.dot(z)?;
    Ok(log_c_d(params.dim(), params.kappa)? + params.kappa * cos)
}

/// Draws `n` i.i.d. samples with the Ulrich–Wood rejection sampler.
pub fn sample_vmf(params: &VmfParams, seed: u64, n: usize) -> Vec<UnitVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = VmfSampler::new(params);
    (0..n).map(|_| sampler.sample(&mut rng)).collect()
}

/// Reusable sampler for one parameter set; draws from a caller-owned RNG.
#[derive(Debug, Clone)]
pub struct VmfSampler {
    mean: Vec<f64>,
    kappa: f64,
    b: f64,
    x0: f64,
    c: f64,
    beta: Option<Beta<f64>>,
}

impl VmfSampler {
    pub fn new(params: &VmfParams) -> Self {
        let d = params.dim() as f64;
        let kappa = params.kappa;
        let dm1 = d - 1.0;
        let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
        let beta = (kappa > 0.0).then(|| Beta::new(dm1 / 2.0, dm1 / 2.0).expect("d >= 2"));
        Self {
            mean: params.mean.as_slice().to_vec(),
            kappa,
            b,
            x0,
            c,
            beta,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> UnitVector {
        let d = self.mean.len();
        let Some(beta) = &self.beta else {
            return uniform_on_sphere(d, rng);
        };
        let dm1 = d as f64 - 1.0;
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + self.b) * z) / (1.0 - (1.0 - self.b) * z);
            let u: f64 = rng.gen();
            if self.kappa * w + dm1 * (1.0 - self.x0 * w).ln() - self.c >= u.ln() {
                break w;
            }
        };
        // tangent direction: Gaussian with the mean component removed
        let tangent = loop {
            let mut g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let along = dot(&g, &self.mean);
            g.iter_mut().zip(&self.mean).for_each(|(gi, mi)| *gi -= along * mi);
            let norm = l2_norm(&g);
            if norm > 1e-12 {
                g.iter_mut().for_each(|gi| *gi /= norm);
                break g;
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        let coords = self
            .mean
            .iter()
            .zip(&tangent)
            .map(|(m, t)| w * m + s * t)
            .collect();
        UnitVector::normalize(coords).expect("sample has unit norm")
    }
}

/// A uniformly distributed point on 𝕊^{d−1}.
pub fn uniform_on_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> UnitVector {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if l2_norm(&g) > 1e-12 {
            return UnitVector::normalize(g).expect("nonzero gaussian draw");
        }
    }
}

/// Mean resultant length `A_d(κ) = I_{d/2}(κ) / I_{d/2−1}(κ)`.
pub fn mean_resultant_length(d: usize, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let half = d as f64 / 2.0;
    Ok((log_bessel_i(half, kappa)? - log_bessel_i(half - 1.0, kappa)?).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values below were computed with 40-digit arithmetic.
    const LOG_I_HALF_1: f64 = -0.064_351_991_073_531_799;
    const LOG_I_1_2: f64 = 0.464_134_473_546_159_74;
    const LOG_C_3_1: f64 = -2.692_463_608_540_486_4;
    const LOG_C_2_2: f64 = -2.661_870_607_892_301_8;
    const LOG_ALPHA_3_1: f64 = 0.161_439_361_571_195_63;
    const LOG_ALPHA_2_2: f64 = 0.823_993_541_482_956_28;

    #[test]
    fn surface_areas() {
        assert!((log_surface_area(2).unwrap() - (2.0 * PI).ln()).abs() < 1e-14);
        assert!((log_surface_area(3).unwrap() - (4.0 * PI).ln()).abs() < 1e-14);
        assert!((log_surface_area(4).unwrap() - (2.0 * PI * PI).ln()).abs() < 1e-14);
        assert!((log_surface_area(3).unwrap() - 2.531024).abs() < 1e-6);
        assert!(matches!(log_surface_area(1), Err(Error::InvalidDimension(1))));
    }

    #[test]
    fn bessel_reference_points() {
        assert_eq!(log_bessel_i(0.0, 0.0).unwrap(), 0.0);
        assert!((log_bessel_i(0.5, 1.0).unwrap() - LOG_I_HALF_1).abs() < 1e-14);
        assert!((log_bessel_i(1.0, 2.0).unwrap() - LOG_I_1_2).abs() < 1e-14);
        // closed form √(2/π) sinh 1
        let closed = ((2.0 / PI).sqrt() * 1f64.sinh()).ln();
        assert!((log_bessel_i(0.5, 1.0).unwrap() - closed).abs() < 1e-14);
    }

    #[test]
    fn bessel_domain_errors() {
        assert!(matches!(log_bessel_i(-1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(log_bessel_i(1.0, -1.0), Err(Error::Domain(_))));
        assert!(matches!(log_bessel_i(f64::NAN, 1.0), Err(Error::Domain(_))));
        assert_eq!(log_bessel_i(2.0, 0.0).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn bessel_series_oracle_order_one() {
        // Σ_m (x/2)^{2m+1} / (m!(m+1)!) summed independently
        for &x in &[0.3, 2.0, 7.5, 19.0] {
            let mut sum = 0.0;
            let mut fact_m = 1.0;
            for m in 0..80 {
                if m > 0 {
                    fact_m *= m as f64;
                }
                let fact_m1 = fact_m * (m as f64 + 1.0);
                sum += (x / 2.0_f64).powi(2 * m + 1) / (fact_m * fact_m1);
            }
            assert!((log_bessel_i(1.0, x).unwrap() - sum.ln()).abs() < 1e-13, "x={x}");
        }
    }

    #[test]
    fn bessel_branches_agree_at_switchover() {
        for &nu in &[0.0, 0.5, 3.0, 14.5, 15.0, 40.0] {
            let below = log_bessel_i(nu, SERIES_X_MAX).unwrap();
            let above = if nu >= UNIFORM_ORDER_MIN {
                log_bessel_i_debye(nu, SERIES_X_MAX)
            } else {
                log_bessel_i_recurrence(nu, SERIES_X_MAX)
            };
            assert!((below - above).abs() < 1e-12, "nu={nu}: {below} vs {above}");
        }
    }

    #[test]
    fn bessel_large_arguments() {
        // 40-digit reference: log I_255(1e5)
        let v = log_bessel_i(255.0, 1e5).unwrap();
        assert!((v - 99_992.999_473_534_855_9).abs() < 1e-9);
        assert!(log_c_d(512, 1e5).unwrap().is_finite());
        assert!(log_c_d(512, 1e-8).unwrap().is_finite());
    }

    #[test]
    fn c_d_examples() {
        assert!((log_c_d(3, 0.0).unwrap() + (4.0 * PI).ln()).abs() < 1e-14);
        assert!((log_c_d(3, 1.0).unwrap() - LOG_C_3_1).abs() < 1e-13);
        let closed = (1.0 / (4.0 * PI * 1f64.sinh())).ln();
        assert!((log_c_d(3, 1.0).unwrap() - closed).abs() < 1e-13);
        assert!((log_c_d(2, 2.0).unwrap() - LOG_C_2_2).abs() < 1e-13);
        // tiny κ approaches the uniform limit
        assert!((log_c_d(3, 1e-12).unwrap() + (4.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn alpha_examples() {
        for d in [2, 3, 16, 512] {
            assert_eq!(log_alpha(d, 0.0).unwrap(), 0.0);
        }
        assert!((log_alpha(3, 1.0).unwrap() - LOG_ALPHA_3_1).abs() < 1e-13);
        assert!((log_alpha(2, 2.0).unwrap() - LOG_ALPHA_2_2).abs() < 1e-13);
        assert!((log_alpha(2, 2.0).unwrap() - log_bessel_i(0.0, 2.0).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn alpha_surface_c_d_identity() {
        for d in [2, 3, 4, 8, 16, 64, 128, 512] {
            for &k in &[1e-6, 0.1, 1.0, 10.0, 19.99, 20.01, 100.0, 1e3, 1e4, 1e5] {
                let sum = log_alpha(d, k).unwrap() + log_surface_area(d).unwrap() + log_c_d(d, k).unwrap();
                assert!(sum.abs() < 1e-10, "d={d} κ={k}: {sum}");
            }
        }
    }

    #[test]
    fn pdf_examples() {
        let mu = UnitVector::basis(3, 0).unwrap();
        let uniform = VmfParams::new(mu.clone(), 0.0).unwrap();
        let z = UnitVector::normalize(vec![0.3, -0.2, 0.9]).unwrap();
        assert!((vmf_log_pdf(&uniform, &z).unwrap() + (4.0 * PI).ln()).abs() < 1e-14);
        let p = VmfParams::new(mu.clone(), 1.0).unwrap();
        assert!((vmf_log_pdf(&p, &mu).unwrap() - (LOG_C_3_1 + 1.0)).abs() < 1e-13);
        let perp = UnitVector::basis(3, 1).unwrap();
        assert!((vmf_log_pdf(&p, &perp).unwrap() - LOG_C_3_1).abs() < 1e-13);
        let wrong = UnitVector::basis(4, 0).unwrap();
        assert!(matches!(vmf_log_pdf(&p, &wrong), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn unit_vector_validation() {
        assert!(UnitVector::new(vec![1.0]).is_err());
        assert!(UnitVector::new(vec![1.0, 1.0]).is_err());
        assert!(UnitVector::normalize(vec![0.0, 0.0]).is_err());
        let v = UnitVector::normalize(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.as_slice(), &[0.6, 0.8]);
        assert!(VmfParams::new(v, -1.0).is_err());
    }

    fn resultant_length(samples: &[UnitVector]) -> f64 {
        let d = samples[0].dim();
        let mut acc = vec![0.0; d];
        for s in samples {
            acc.iter_mut().zip(s.as_slice()).for_each(|(a, x)| *a += x);
        }
        l2_norm(&acc) / samples.len() as f64
    }

    #[test]
    fn sampler_uniform_limit() {
        let p = VmfParams::new(UnitVector::basis(3, 0).unwrap(), 0.0).unwrap();
        let s = sample_vmf(&p, 11, 10_000);
        assert!(resultant_length(&s) <= 3.0 / 100.0);
    }

    #[test]
    fn sampler_matches_bessel_ratio() {
        let p = VmfParams::new(UnitVector::basis(8, 2).unwrap(), 50.0).unwrap();
        let s = sample_vmf(&p, 5, 100_000);
        let expected = mean_resultant_length(8, 50.0).unwrap();
        // 40-digit reference for A_8(50)
        assert!((expected - 0.931_784_434_389_746_98).abs() < 1e-12);
        let mean_cos: f64 = s.iter().map(|z| z.as_slice()[2]).sum::<f64>() / s.len() as f64;
        assert!((mean_cos - expected).abs() < 0.01);
        assert!((resultant_length(&s) - expected).abs() < 0.01);
        for z in &s {
            assert!((l2_norm(z.as_slice()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let p = VmfParams::new(UnitVector::basis(5, 0).unwrap(), 7.0).unwrap();
        assert_eq!(sample_vmf(&p, 3, 50), sample_vmf(&p, 3, 50));
        assert_ne!(sample_vmf(&p, 3, 50), sample_vmf(&p, 4, 50));
    }

    #[test]
    fn sampler_circle() {
        let p = VmfParams::new(UnitVector::basis(2, 0).unwrap(), 4.0).unwrap();
        let s = sample_vmf(&p, 1, 20_000);
        let mean_cos: f64 = s.iter().map(|z| z.as_slice()[0]).sum::<f64>() / s.len() as f64;
        assert!((mean_cos - mean_resultant_length(2, 4.0).unwrap()).abs() < 0.01);
    }
}
