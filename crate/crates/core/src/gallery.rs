//! Gallery-aware posterior (GalUE).
//!
//! The generative model puts prior mass `(1−β)/K` on each enrolled class and
//! `β` on a continuum of out-of-gallery classes whose means are uniform on the
//! sphere. Class-conditional densities are vMF with a shared concentration
//! κ, so the out-of-gallery component integrates to the uniform density
//! `β / S_{d−1}` and the marginal is
//!
//! ```text
//! p(z) = (1−β)/K Σ_c C_d(κ) exp(κ μ_cᵀ z) + β / S_{d−1}
//! ```

use std::collections::HashSet;

use crate::error::{param, Error, Result};
use crate::vmf::{self, UnitVector};

/// Default out-of-gallery prior.
pub const DEFAULT_BETA: f64 = 0.5;

/// Enrolled class means, one aggregated template per identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    class_ids: Vec<String>,
    means: Vec<UnitVector>,
}

impl Gallery {
    pub fn new(class_ids: Vec<String>, means: Vec<UnitVector>) -> Result<Self> {
        if means.is_empty() {
            return Err(param("gallery", "needs at least one class"));
        }
        if class_ids.len() != means.len() {
            return Err(param(
                "gallery",
                format!("{} ids for {} means", class_ids.len(), means.len()),
            ));
        }
        let d = means[0].dim();
        if let Some(bad) = means.iter().find(|m| m.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.dim(),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = class_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(param("gallery", format!("duplicate class id {dup:?}")));
        }
        Ok(Self { class_ids, means })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].dim()
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn means(&self) -> &[UnitVector] {
        &self.means
    }

    pub fn index_of(&self, class_id: &str) -> Option<usize> {
        self.class_ids.iter().position(|c| c == class_id)
    }

    /// Cosine similarity of `z` with every class mean.
    pub fn cosines(&self, z: &UnitVector) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        Ok(self
            .means
            .iter()
            .map(|m| vmf::dot(m.as_slice(), z.as_slice()))
            .collect())
    }

    pub(crate) fn check_dim(&self, z: &UnitVector) -> Result<()> {
        if z.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: z.dim(),
            });
        }
        Ok(())
    }
}

/// Normalized arithmetic mean of a template's sample embeddings.
pub fn aggregate_template(samples: &[UnitVector]) -> Result<UnitVector> {
    let first = samples
        .first()
        .ok_or_else(|| param("samples", "template is empty"))?;
    let d = first.dim();
    let mut acc = vec![0.0; d];
    for s in samples {
        if s.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: s.dim(),
            });
        }
        acc.iter_mut().zip(s.as_slice()).for_each(|(a, x)| *a += x);
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let norm = vmf::l2_norm(&acc);
    if norm < 1e-12 {
        return Err(Error::DegenerateTemplate { norm });
    }
    UnitVector::normalize(acc)
}

/// Gallery plus the shared concentration κ and out-of-gallery prior β.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryModel {
    gallery: Gallery,
    kappa: f64,
    beta: f64,
    log_c: f64,
    log_area: f64,
}

impl GalleryModel {
    pub fn new(gallery: Gallery, kappa: f64, beta: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(param("kappa", format!("must be finite and > 0, got {kappa}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(param("beta", format!("must lie in (0, 1), got {beta}")));
        }
        let d = gallery.dim();
        Ok(Self {
            log_c: vmf::log_c_d(d, kappa)?,
            log_area: vmf::log_surface_area(d)?,
            gallery,
            kappa,
            beta,
        })
    }

    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.gallery.dim()
    }

    /// `log C_d(κ)` for the shared class concentration.
    pub fn log_c(&self) -> f64 {
        self.log_c
    }

    /// `log S_{d−1}`.
    pub fn log_area(&self) -> f64 {
        self.log_area
    }

    /// `log((1−β)/K)`, the prior of one enrolled class.
    pub fn log_class_prior(&self) -> f64 {
        ((1.0 - self.beta) / self.gallery.len() as f64).ln()
    }

    /// `log(β / S_{d−1})`, the out-of-gallery term of the marginal.
    pub fn log_oog_term(&self) -> f64 {
        self.beta.ln() - self.log_area
    }

    /// Log joint terms `log P(c) p(z|c)` for every enrolled class and the
    /// out-of-gallery term, in that order.
    pub fn log_joint(&self, z: &UnitVector) -> Result<JointTerms> {
        let prior = self.log_class_prior() + self.log_c;
        let classes = self
            .gallery
            .cosines(z)?
            .into_iter()
            .map(|cos| prior + self.kappa * cos)
            .collect();
        Ok(JointTerms {
            classes,
            oog: self.log_oog_term(),
        })
    }
}

/// Unnormalized log-posterior terms for one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTerms {
    pub classes: Vec<f64>,
    pub oog: f64,
}

impl JointTerms {
    pub fn log_sum_exp(&self) -> f64 {
        log_sum_exp(self.classes.iter().copied().chain(std::iter::once(self.oog)))
    }

    /// Normalizes the terms into a [`Posterior`].
    pub fn normalize(&self) -> Posterior {
        let lse = self.log_sum_exp();
        Posterior {
            gallery_probs: self.classes.iter().map(|t| (t - lse).exp()).collect(),
            oog_prob: (self.oog - lse).exp(),
        }
    }
}

/// Numerically stable `log Σ exp(x_i)`; −∞ for an empty input.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Categorical distribution over the K enrolled classes and the
/// out-of-gallery mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub gallery_probs: Vec<f64>,
    pub oog_prob: f64,
}

impl Posterior {
    /// Index and value of the most probable enrolled class (lowest index on ties).
    pub fn best_class(&self) -> (usize, f64) {
        argmax(&self.gallery_probs)
    }

    pub fn total(&self) -> f64 {
        self.gallery_probs.iter().sum::<f64>() + self.oog_prob
    }
}

/// First index of the maximum; ties resolve to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Open-set recognition outcome for one probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Reject,
    /// Accepted and assigned to the gallery class with this index.
    Accept(usize),
}

impl Decision {
    pub fn is_accept(&self) -> bool {
        matches!(self, Decision::Accept(_))
    }

    pub fn class_id<'g>(&self, gallery: &'g Gallery) -> Option<&'g str> {
        match self {
            Decision::Reject => None,
            Decision::Accept(i) => gallery.class_ids().get(*i).map(String::as_str),
        }
    }
}

/// `log p(z)`, the marginal density of an embedding under the model.
pub fn log_marginal(model: &GalleryModel, z: &UnitVector) -> Result<f64> {
    Ok(model.log_joint(z)?.log_sum_exp())
}

/// Exact posterior `P(c | z)` over enrolled classes and out-of-gallery mass.
pub fn posterior(model: &GalleryModel, z: &UnitVector) -> Result<Posterior> {
    Ok(model.log_joint(z)?.normalize())
}

/// Reject when the out-of-gallery mass strictly exceeds every class;
/// otherwise accept the most probable class.
pub fn decide(post: &Posterior) -> Decision {
    let (best, p) = post.best_class();
    if post.oog_prob > p {
        Decision::Reject
    } else {
        Decision::Accept(best)
    }
}

/// GalUE confidence: the largest entry of the posterior.
pub fn galue_score(post: &Posterior) -> f64 {
    post.best_class().1.max(post.oog_prob)
}

/// Cosine threshold τ at which the cosine rule `max_c μ_cᵀz >= τ` makes the
/// same decisions as [`decide`] under this model:
/// `τ = (1/κ) log(β/(1−β) · K · α(κ))`.
pub fn equivalent_threshold(model: &GalleryModel) -> f64 {
    threshold_for(model.kappa, model.beta, model.gallery.len(), model.dim())
        .expect("model parameters were validated at construction")
}

fn threshold_for(kappa: f64, beta: f64, k: usize, d: usize) -> Result<f64> {
    let log_alpha = vmf::log_alpha(d, kappa)?;
    Ok(((beta / (1.0 - beta)).ln() + (k as f64).ln() + log_alpha) / kappa)
}

/// Default search bracket for [`kappa_for_threshold`].
pub const KAPPA_BRACKET: (f64, f64) = (1e-2, 1e6);

/// Inverts [`equivalent_threshold`] for κ over [`KAPPA_BRACKET`].
pub fn kappa_for_threshold(target_tau: f64, beta: f64, k: usize, d: usize) -> Result<f64> {
    kappa_for_threshold_in(target_tau, beta, k, d, KAPPA_BRACKET)
}

/// Inverts the threshold map for κ within `bracket`.
///
/// τ(κ) is not monotone once `β K / (1−β) > 1`: it falls from +∞, reaches a
/// minimum, then rises towards 1. Decisions depend on τ alone, so any root
/// reproduces the operating point; the largest root is returned. Roots are
/// located on a log-spaced grid and refined by bisection in log κ.
pub fn kappa_for_threshold_in(
    target_tau: f64,
    beta: f64,
    k: usize,
    d: usize,
    bracket: (f64, f64),
) -> Result<f64> {
    if !(target_tau > -1.0 && target_tau < 1.0) {
        return Err(param("target_tau", format!("must lie in (-1, 1), got {target_tau}")));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(param("beta", format!("must lie in (0, 1), got {beta}")));
    }
    if k == 0 {
        return Err(param("K", "gallery must have at least one class"));
    }
    let (lo, hi) = bracket;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(param("bracket", format!("invalid κ bracket [{lo}, {hi}]")));
    }
    const GRID: usize = 400;
    let (log_lo, log_hi) = (lo.ln(), hi.ln());
    let tau_at = |log_k: f64| threshold_for(log_k.exp(), beta, k, d);
    let grid: Vec<f64> = (0..=GRID)
        .map(|i| log_lo + (log_hi - log_lo) * i as f64 / GRID as f64)
        .collect();
    let taus = grid.iter().map(|&g| tau_at(g)).collect::<Result<Vec<_>>>()?;
    let cell = (0..GRID)
        .rev()
        .find(|&i| (taus[i] - target_tau) * (taus[i + 1] - target_tau) <= 0.0);
    let Some(i) = cell else {
        let (min, max) = taus
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
        return Err(Error::UnreachableThreshold {
            target: target_tau,
            min,
            max,
        });
    };
    let (mut a, mut b) = (grid[i], grid[i + 1]);
    let mut fa = taus[i] - target_tau;
    if fa == 0.0 {
        return Ok(a.exp());
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let fm = tau_at(mid)? - target_tau;
        if fm == 0.0 {
            return Ok(mid.exp());
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
        if b - a < 1e-15 {
            break;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    // 40-digit reference values for K=1, d=3, β=0.5, κ=1
    const LOG_MARGINAL_AT_MEAN: f64 = -2.026_306_653_649_622;
    const P1_AT_MEAN: f64 = 0.698_161_983_249_362_58;
    const P1_AT_ANTIPODE: f64 = 0.238_405_844_044_235_11;
    const TAU_K1: f64 = 0.161_439_361_571_195_63;

    fn single(kappa: f64) -> GalleryModel {
        let g = Gallery::new(vec!["a".into()], vec![UnitVector::basis(3, 0).unwrap()]).unwrap();
        GalleryModel::new(g, kappa, 0.5).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let v = UnitVector::normalize(vec![0.2, -0.5, 0.3]).unwrap();
        assert_eq!(aggregate_template(std::slice::from_ref(&v)).unwrap(), v);
        let twice = aggregate_template(&[v.clone(), v.clone()]).unwrap();
        for (a, b) in twice.as_slice().iter().zip(v.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let e = aggregate_template(&[UnitVector::basis(2, 0).unwrap(), UnitVector::basis(2, 1).unwrap()])
            .unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.as_slice()[0] - h).abs() < 1e-15 && (e.as_slice()[1] - h).abs() < 1e-15);
        let opposite = aggregate_template(&[v.clone(), v.negated()]);
        assert!(matches!(opposite, Err(Error::DegenerateTemplate { .. })));
        assert!(aggregate_template(&[]).is_err());
    }

    #[test]
    fn gallery_validation() {
        let e = UnitVector::basis(3, 0).unwrap();
        assert!(Gallery::new(vec![], vec![]).is_err());
        assert!(Gallery::new(vec!["a".into(), "a".into()], vec![e.clone(), e.clone()]).is_err());
        assert!(Gallery::new(vec!["a".into(), "b".into()], vec![e.clone(), UnitVector::basis(4, 0).unwrap()]).is_err());
        let g = Gallery::new(vec!["a".into()], vec![e]).unwrap();
        assert!(GalleryModel::new(g.clone(), 0.0, 0.5).is_err());
        assert!(GalleryModel::new(g.clone(), 1.0, 1.0).is_err());
        assert!(GalleryModel::new(g, 1.0, 0.0).is_err());
    }

    #[test]
    fn marginal_examples() {
        let m = single(1.0);
        let mu = UnitVector::basis(3, 0).unwrap();
        assert!((log_marginal(&m, &mu).unwrap() - LOG_MARGINAL_AT_MEAN).abs() < 1e-13);
        let flat = single(1e-12);
        let z = UnitVector::normalize(vec![0.1, 0.7, -0.2]).unwrap();
        assert!((log_marginal(&flat, &z).unwrap() + (4.0 * std::f64::consts::PI).ln()).abs() < 1e-10);
        assert!(log_marginal(&m, &UnitVector::basis(2, 0).unwrap()).is_err());
    }

    #[test]
    fn posterior_examples() {
        let m = single(1.0);
        let mu = UnitVector::basis(3, 0).unwrap();
        let p = posterior(&m, &mu).unwrap();
        assert!((p.gallery_probs[0] - P1_AT_MEAN).abs() < 1e-13);
        assert!((p.oog_prob - (1.0 - P1_AT_MEAN)).abs() < 1e-13);
        assert!((p.gallery_probs[0] - 0.69817).abs() < 1e-5);
        let q = posterior(&m, &mu.negated()).unwrap();
        assert!((q.gallery_probs[0] - P1_AT_ANTIPODE).abs() < 1e-13);
        assert_eq!(decide(&p), Decision::Accept(0));
        assert_eq!(decide(&q), Decision::Reject);
        assert!((galue_score(&p) - P1_AT_MEAN).abs() < 1e-13);
        assert!((galue_score(&q) - (1.0 - P1_AT_ANTIPODE)).abs() < 1e-13);
    }

    #[test]
    fn flat_posterior_equals_prior() {
        let means = vec![UnitVector::basis(3, 0).unwrap(), UnitVector::basis(3, 1).unwrap()];
        let g = Gallery::new(vec!["a".into(), "b".into()], means).unwrap();
        let m = GalleryModel::new(g, 1e-12, 0.5).unwrap();
        let z = UnitVector::normalize(vec![0.4, 0.4, 0.2]).unwrap();
        let p = posterior(&m, &z).unwrap();
        for &pc in &p.gallery_probs {
            assert!((pc - 0.25).abs() < 1e-10);
        }
        assert!((p.oog_prob - 0.5).abs() < 1e-10);
        assert_eq!(decide(&p), Decision::Reject);

        let one = single(1e-12);
        let p1 = posterior(&one, &z).unwrap();
        assert!((galue_score(&p1) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let p = Posterior {
            gallery_probs: vec![0.2, 0.3, 0.3],
            oog_prob: 0.2,
        };
        assert_eq!(decide(&p), Decision::Accept(1));
        let tie_with_oog = Posterior {
            gallery_probs: vec![0.4, 0.2],
            oog_prob: 0.4,
        };
        assert_eq!(decide(&tie_with_oog), Decision::Accept(0));
    }

    #[test]
    fn threshold_examples() {
        let m = single(1.0);
        let tau = equivalent_threshold(&m);
        assert!((tau - TAU_K1).abs() < 1e-13);
        // at μᵀz = τ the class and out-of-gallery terms balance
        let s = (1.0 - tau * tau).sqrt();
        let z = UnitVector::normalize(vec![tau, s, 0.0]).unwrap();
        let p = posterior(&m, &z).unwrap();
        assert!((p.gallery_probs[0] - p.oog_prob).abs() < 1e-6);

        let g = m.gallery().clone();
        let near_one = GalleryModel::new(g, 1.0, 1.0 - 1e-12).unwrap();
        assert!(equivalent_threshold(&near_one) > 20.0);
    }

    #[test]
    fn kappa_inversion() {
        let k = kappa_for_threshold(TAU_K1, 0.5, 1, 3).unwrap();
        assert!((k - 1.0).abs() < 1e-6);

        let target = threshold_for(100.0, 0.5, 50, 16).unwrap();
        let k = kappa_for_threshold(target, 0.5, 50, 16).unwrap();
        assert!(((k - 100.0) / 100.0).abs() < 1e-4, "{k}");
        assert!((threshold_for(k, 0.5, 50, 16).unwrap() - target).abs() < 1e-8);

        // 1e3 and 1e4 sit exactly on the search grid
        for kappa in [1e3, 1e4] {
            let target = threshold_for(kappa, 0.5, 50, 16).unwrap();
            let k = kappa_for_threshold(target, 0.5, 50, 16).unwrap();
            assert!(((k - kappa) / kappa).abs() < 1e-9, "{kappa}: {k}");
        }

        let err = kappa_for_threshold_in(0.999, 0.5, 1, 3, (1e-2, 10.0)).unwrap_err();
        assert!(matches!(err, Error::UnreachableThreshold { .. }));
        assert!(kappa_for_threshold(1.5, 0.5, 1, 3).is_err());
    }
}
