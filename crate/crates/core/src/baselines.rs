//! Comparison confidence scores. Every score is oriented so that a higher
//! value means a more confident (keep-longer) probe.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::gallery::{argmax, Decision, Gallery};
use crate::holue::ProbabilisticEmbedding;
use crate::vmf::UnitVector;

/// Uncertainty estimation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "AccScr")]
    AccScr,
    #[serde(rename = "SCF")]
    Scf,
    #[serde(rename = "PFE")]
    Pfe,
    #[serde(rename = "SF")]
    Sf,
    #[serde(rename = "GalUE")]
    GalUe,
    #[serde(rename = "HolUE")]
    HolUe,
    #[serde(rename = "HolUE-sum")]
    HolUeSum,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::AccScr,
        Method::Scf,
        Method::Pfe,
        Method::Sf,
        Method::GalUe,
        Method::HolUe,
        Method::HolUeSum,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::AccScr => "AccScr",
            Method::Scf => "SCF",
            Method::Pfe => "PFE",
            Method::Sf => "SF",
            Method::GalUe => "GalUE",
            Method::HolUe => "HolUE",
            Method::HolUeSum => "HolUE-sum",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| param("method", format!("unknown method {s:?}")))
    }
}

/// One probe's confidence under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub probe_id: String,
    pub method: Method,
    pub score: f64,
}

impl QualityRecord {
    pub fn new(probe_id: impl Into<String>, method: Method, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(param("score", format!("{method} score is not finite")));
        }
        Ok(Self {
            probe_id: probe_id.into(),
            method,
            score,
        })
    }
}

/// Acceptance score `s(p) = max_c μ_cᵀ z`.
pub fn acc_score(gallery: &Gallery, z: &UnitVector) -> Result<f64> {
    Ok(argmax(&gallery.cosines(z)?).1)
}

/// Cosine-threshold rule: accept the nearest class iff `s(p) >= τ`.
pub fn cosine_decision(gallery: &Gallery, z: &UnitVector, tau: f64) -> Result<Decision> {
    let (best, s) = argmax(&gallery.cosines(z)?);
    Ok(if s >= tau {
        Decision::Accept(best)
    } else {
        Decision::Reject
    })
}

/// Distance of the acceptance score to the decision boundary.
pub fn q_accscr(s: f64, tau: f64) -> f64 {
    (s - tau).abs()
}

/// Predicted concentration used directly as quality.
pub fn q_scf(pemb: &ProbabilisticEmbedding) -> f64 {
    pemb.kappa
}

/// Negative harmonic mean of the per-dimension variances.
pub fn q_pfe(sigma2: &[f64]) -> Result<f64> {
    if sigma2.is_empty() {
        return Err(Error::Domain("empty variance vector".into()));
    }
    if let Some(bad) = sigma2.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Domain(format!("variances must be positive, got {bad}")));
    }
    let inv_sum: f64 = sigma2.iter().map(|v| v.recip()).sum();
    Ok(-(sigma2.len() as f64) / inv_sum)
}

/// Scale passthrough.
pub fn q_sf(scale: f64) -> f64 {
    scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gallery(means: Vec<Vec<f64>>) -> Gallery {
        let ids = (0..means.len()).map(|i| format!("c{i}")).collect();
        Gallery::new(ids, means.into_iter().map(|m| UnitVector::normalize(m).unwrap()).collect()).unwrap()
    }

    #[test]
    fn acc_score_examples() {
        let z = UnitVector::normalize(vec![0.0, 0.6, 0.8]).unwrap();
        let g = gallery(vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]]);
        assert!((acc_score(&g, &z).unwrap() - 1.0).abs() < 1e-15);
        let orth = gallery(vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.8, -0.6]]);
        assert!(acc_score(&orth, &z).unwrap().abs() < 1e-15);
        let e1 = UnitVector::basis(2, 0).unwrap();
        let g = gallery(vec![vec![0.6, 0.8], vec![0.8, 0.6]]);
        assert!((acc_score(&g, &e1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(cosine_decision(&g, &e1, 0.7).unwrap(), Decision::Accept(1));
        assert_eq!(cosine_decision(&g, &e1, 0.9).unwrap(), Decision::Reject);
        assert!(acc_score(&g, &UnitVector::basis(3, 0).unwrap()).is_err());
    }

    #[test]
    fn accscr_examples() {
        assert!((q_accscr(0.7, 0.5) - 0.2).abs() < 1e-15);
        assert_eq!(q_accscr(0.5, 0.5), 0.0);
        assert!((q_accscr(0.3, 0.5) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn scf_sf_passthrough() {
        let mean = UnitVector::basis(3, 0).unwrap();
        let hi = ProbabilisticEmbedding::new(mean.clone(), 100.0).unwrap();
        let lo = ProbabilisticEmbedding::new(mean.clone(), 1.0).unwrap();
        assert_eq!(q_scf(&hi), 100.0);
        assert_eq!(q_scf(&lo), 1.0);
        let (five, two) = (
            ProbabilisticEmbedding::new(mean.clone(), 5.0).unwrap(),
            ProbabilisticEmbedding::new(mean, 2.0).unwrap(),
        );
        assert!(q_scf(&five) > q_scf(&two));
        assert_eq!(q_sf(30.0), 30.0);
        assert_eq!(q_sf(12.5), 12.5);
        assert!(q_sf(3.0) > q_sf(2.0));
    }

    #[test]
    fn pfe_examples() {
        assert!((q_pfe(&[1.0, 1.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((q_pfe(&[1.0, 2.0]).unwrap() + 4.0 / 3.0).abs() < 1e-15);
        assert!((q_pfe(&[2.0, 2.0, 2.0]).unwrap() + 2.0).abs() < 1e-15);
        assert!(q_pfe(&[1.0, 0.0]).is_err());
        assert!(q_pfe(&[]).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("nope".parse::<Method>().is_err());
        assert!(QualityRecord::new("p", Method::Scf, f64::NAN).is_err());
    }
}
