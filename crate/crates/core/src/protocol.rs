//! Synthetic open-set recognition protocols.
//!
//! Identities get uniformly distributed mean directions, except for planted
//! pairs that are pushed to high mutual cosine to create gallery ambiguity.
//! Each sample has its own quality κ(x); its embedding is a vMF draw around
//! a per-sample "clean" direction, which is itself a vMF draw around the
//! identity mean with the identity-level concentration `class_kappa`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::gallery::{aggregate_template, Gallery};
use crate::holue::ProbabilisticEmbedding;
use crate::vmf::{self, uniform_on_sphere, UnitVector, VmfParams, VmfSampler};

/// Cosine range for planted ambiguous identity pairs.
pub const PLANTED_COSINE: (f64, f64) = (0.92, 0.97);

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_dim")]
    pub d: usize,
    pub n_identities: usize,
    pub oog_fraction: f64,
    /// Inclusive `[min, max]` number of samples per identity.
    pub samples_per_identity: [usize; 2],
    pub class_kappa: f64,
    /// Inclusive `[low, high]` range of per-sample quality κ(x), drawn log-uniformly.
    pub quality_kappa_range: [f64; 2],
    /// Fraction of identities that belong to a planted high-cosine pair.
    pub ambiguity: f64,
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_dim() -> usize {
    16
}

fn default_val_fraction() -> f64 {
    0.5
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidDimension(self.d));
        }
        if self.n_identities == 0 {
            return Err(param("n_identities", "must be >= 1"));
        }
        let [lo, hi] = self.samples_per_identity;
        if lo == 0 || lo > hi {
            return Err(param("samples_per_identity", format!("invalid range [{lo}, {hi}]")));
        }
        if !(0.0..1.0).contains(&self.oog_fraction) {
            return Err(param("oog_fraction", format!("must lie in [0, 1), got {}", self.oog_fraction)));
        }
        if !(self.class_kappa.is_finite() && self.class_kappa > 0.0) {
            return Err(param("class_kappa", format!("must be finite and > 0, got {}", self.class_kappa)));
        }
        let [qlo, qhi] = self.quality_kappa_range;
        if !(qlo > 0.0 && qlo <= qhi && qhi.is_finite()) {
            return Err(param("quality_kappa_range", format!("invalid range [{qlo}, {qhi}]")));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(param("ambiguity", format!("must lie in [0, 1], got {}", self.ambiguity)));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(param("val_fraction", format!("must lie in [0, 1], got {}", self.val_fraction)));
        }
        Ok(())
    }
}

/// Named scenario presets.
pub fn preset(name: &str) -> Option<SynthConfig> {
    let base = SynthConfig {
        d: 16,
        n_identities: 500,
        oog_fraction: 0.5,
        samples_per_identity: [2, 6],
        class_kappa: 400.0,
        quality_kappa_range: [300.0, 300.0],
        ambiguity: 0.0,
        seed: 7,
        val_fraction: 0.5,
    };
    match name {
        "ambiguous" => Some(SynthConfig {
            ambiguity: 0.3,
            ..base
        }),
        "degraded" => Some(SynthConfig {
            quality_kappa_range: [2.0, 500.0],
            ..base
        }),
        "mixed" => Some(SynthConfig {
            ambiguity: 0.3,
            quality_kappa_range: [2.0, 500.0],
            ..base
        }),
        _ => None,
    }
}

pub const PRESETS: [&str; 3] = ["ambiguous", "degraded", "mixed"];

/// One generated embedding with its quality surrogates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub vector: UnitVector,
    pub kappa: f64,
    pub pfe_sigma2: Vec<f64>,
    pub sf_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub id: String,
    pub mean: UnitVector,
    pub samples: Vec<Sample>,
}

/// Raw identities and samples before protocol construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore {
    pub d: usize,
    pub seed: u64,
    pub identities: Vec<Identity>,
    /// Planted ambiguous pairs, as identity indices.
    pub planted_pairs: Vec<(usize, usize)>,
}

impl SampleStore {
    pub fn n_samples(&self) -> usize {
        self.identities.iter().map(|i| i.samples.len()).sum()
    }
}

/// A point at cosine `c` from `anchor`, in a uniformly random direction.
fn at_cosine<R: Rng>(anchor: &UnitVector, c: f64, rng: &mut R) -> UnitVector {
    let d = anchor.dim();
    let a = anchor.as_slice();
    let tangent = loop {
        let mut u = uniform_on_sphere(d, rng).into_inner();
        let along = vmf::dot(&u, a);
        u.iter_mut().zip(a).for_each(|(ui, ai)| *ui -= along * ai);
        if let Ok(t) = UnitVector::normalize(u) {
            break t;
        }
    };
    let s = (1.0 - c * c).sqrt();
    let coords = a.iter().zip(tangent.as_slice()).map(|(x, t)| c * x + s * t).collect();
    UnitVector::normalize(coords).expect("unit combination")
}

/// Generates identities and samples; fully determined by `config.seed`.
pub fn gen_synthetic(config: &SynthConfig) -> Result<SampleStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d;
    let n = config.n_identities;
    let mut means: Vec<UnitVector> = (0..n).map(|_| uniform_on_sphere(d, &mut rng)).collect();

    let n_pairs = ((config.ambiguity * n as f64 + 1e-9).floor() as usize) / 2;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let planted_pairs: Vec<(usize, usize)> = order
        .chunks_exact(2)
        .take(n_pairs)
        .map(|p| (p[0], p[1]))
        .collect();
    for &(a, b) in &planted_pairs {
        let c = rng.gen_range(PLANTED_COSINE.0..=PLANTED_COSINE.1);
        means[b] = at_cosine(&means[a], c, &mut rng);
    }

    let [qlo, qhi] = config.quality_kappa_range;
    let (log_lo, log_hi) = (qlo.ln(), qhi.ln());
    let [smin, smax] = config.samples_per_identity;
    let mut identities = Vec::with_capacity(n);
    for (i, mean) in means.into_iter().enumerate() {
        let class = VmfSampler::new(&VmfParams::new(mean.clone(), config.class_kappa)?);
        let count = rng.gen_range(smin..=smax);
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let kappa = if qlo == qhi { qlo } else { rng.gen_range(log_lo..=log_hi).exp() };
            let clean = class.sample(&mut rng);
            let vector = VmfSampler::new(&VmfParams::new(clean, kappa)?).sample(&mut rng);
            let pfe_sigma2 = (0..d)
                .map(|_| (1.0 + rng.gen_range(-0.1..0.1)) / kappa)
                .collect();
            samples.push(Sample {
                vector,
                kappa,
                pfe_sigma2,
                sf_scale: kappa.ln(),
            });
        }
        identities.push(Identity {
            id: format!("id{i:05}"),
            mean,
            samples,
        });
    }
    Ok(SampleStore {
        d,
        seed: config.seed,
        identities,
        planted_pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

/// A probe with its observable quality surrogates.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub probe_id: String,
    /// Enrolled class id for mated probes.
    pub subject_id: Option<String>,
    pub vector: UnitVector,
    pub kappa: Option<f64>,
    pub pfe_sigma2: Option<Vec<f64>>,
    pub sf_scale: Option<f64>,
    pub split: Split,
}

impl Probe {
    pub fn embedding(&self) -> Result<ProbabilisticEmbedding> {
        let kappa = self
            .kappa
            .ok_or_else(|| Error::MissingInput(format!("kappa for probe {}", self.probe_id)))?;
        ProbabilisticEmbedding::new(self.vector.clone(), kappa)
    }
}

/// Gallery plus mated and non-mated probes, each list sorted by probe id.
#[derive(Debug, Clone, PartialEq)]
pub struct OsrProtocol {
    pub gallery: Gallery,
    pub mated_probes: Vec<Probe>,
    pub nonmated_probes: Vec<Probe>,
    /// Seeds that produced this protocol, by role.
    pub seeds: BTreeMap<String, u64>,
}

impl OsrProtocol {
    pub fn dim(&self) -> usize {
        self.gallery.dim()
    }

    /// All probes, mated first, each group in id order.
    pub fn probes(&self) -> impl Iterator<Item = &Probe> {
        self.mated_probes.iter().chain(&self.nonmated_probes)
    }

    pub fn probes_in(&self, split: Split) -> impl Iterator<Item = &Probe> {
        self.probes().filter(move |p| p.split == split)
    }

    /// Checks the structural invariants shared by every protocol.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for p in self.probes() {
            if p.vector.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: p.vector.dim(),
                });
            }
        }
        for p in &self.mated_probes {
            let subject = p
                .subject_id
                .as_deref()
                .ok_or_else(|| param("mated_probes", format!("{} has no subject", p.probe_id)))?;
            if self.gallery.index_of(subject).is_none() {
                return Err(param("mated_probes", format!("{} references unknown class {subject}", p.probe_id)));
            }
        }
        if let Some(p) = self.nonmated_probes.iter().find(|p| p.subject_id.is_some()) {
            return Err(param("nonmated_probes", format!("{} carries a subject", p.probe_id)));
        }
        Ok(())
    }
}

/// Splits identities into gallery and out-of-gallery sets, builds gallery
/// templates and assigns probes to validation/test.
pub fn build_protocol(
    store: &SampleStore,
    oog_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<OsrProtocol> {
    if store.identities.is_empty() {
        return Err(param("store", "no identities"));
    }
    if !(0.0..1.0).contains(&oog_fraction) {
        return Err(param("oog_fraction", format!("must lie in [0, 1), got {oog_fraction}")));
    }
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(param("val_fraction", format!("must lie in [0, 1], got {val_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = store.identities.len();
    let singletons = store.identities.iter().filter(|i| i.samples.len() < 2).count();
    let target_oog = (oog_fraction * n as f64).round() as usize;
    let mut extra_oog = target_oog.saturating_sub(singletons);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut out_of_gallery = vec![false; n];
    for &i in &order {
        if store.identities[i].samples.len() < 2 {
            out_of_gallery[i] = true;
        } else if extra_oog > 0 {
            out_of_gallery[i] = true;
            extra_oog -= 1;
        }
    }
    if out_of_gallery.iter().all(|&o| o) {
        return Err(param("store", "no identity has enough samples for the gallery"));
    }

    let mut class_ids = Vec::new();
    let mut class_means = Vec::new();
    let mut probes = Vec::new();
    for (i, identity) in store.identities.iter().enumerate() {
        let mut idx: Vec<usize> = (0..identity.samples.len()).collect();
        idx.shuffle(&mut rng);
        let n_gallery = if out_of_gallery[i] {
            0
        } else {
            (identity.samples.len() / 2).max(1)
        };
        if n_gallery > 0 {
            let template: Vec<UnitVector> = idx[..n_gallery]
                .iter()
                .map(|&s| identity.samples[s].vector.clone())
                .collect();
            class_ids.push(identity.id.clone());
            class_means.push(aggregate_template(&template)?);
        }
        let mut probe_idx = idx[n_gallery..].to_vec();
        probe_idx.sort_unstable();
        for s in probe_idx {
            let sample = &identity.samples[s];
            probes.push(Probe {
                probe_id: format!("{}-s{s:03}", identity.id),
                subject_id: (!out_of_gallery[i]).then(|| identity.id.clone()),
                vector: sample.vector.clone(),
                kappa: Some(sample.kappa),
                pfe_sigma2: Some(sample.pfe_sigma2.clone()),
                sf_scale: Some(sample.sf_scale),
                split: Split::Test,
            });
        }
    }

    let mut shuffled: Vec<usize> = (0..probes.len()).collect();
    shuffled.shuffle(&mut rng);
    let n_val = (val_fraction * probes.len() as f64).round() as usize;
    for &p in &shuffled[..n_val] {
        probes[p].split = Split::Validation;
    }

    let (mut mated, mut nonmated): (Vec<Probe>, Vec<Probe>) =
        probes.into_iter().partition(|p| p.subject_id.is_some());
    mated.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    nonmated.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    Ok(OsrProtocol {
        gallery: Gallery::new(class_ids, class_means)?,
        mated_probes: mated,
        nonmated_probes: nonmated,
        seeds: BTreeMap::from([
            ("generator".to_string(), store.seed),
            ("protocol".to_string(), seed),
        ]),
    })
}

/// Generates and splits a protocol from one configuration; the protocol
/// seed is derived from the generator seed.
pub fn generate(config: &SynthConfig) -> Result<OsrProtocol> {
    let store = gen_synthetic(config)?;
    build_protocol(&store, config.oog_fraction, config.val_fraction, config.seed.wrapping_add(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            d: 8,
            n_identities: 10,
            oog_fraction: 0.3,
            samples_per_identity: [5, 5],
            class_kappa: 200.0,
            quality_kappa_range: [20.0, 200.0],
            ambiguity: 0.0,
            seed,
            val_fraction: 0.5,
        }
    }

    #[test]
    fn sample_bookkeeping() {
        let store = gen_synthetic(&small(1)).unwrap();
        assert_eq!(store.n_samples(), 50);
        assert!(store.planted_pairs.is_empty());
        for s in store.identities.iter().flat_map(|i| &i.samples) {
            assert!((20.0..=200.0).contains(&s.kappa));
            assert_eq!(s.pfe_sigma2.len(), 8);
            assert!(s.pfe_sigma2.iter().all(|v| (v * s.kappa - 1.0).abs() <= 0.1 + 1e-12));
            assert_eq!(s.sf_scale, s.kappa.ln());
        }
    }

    #[test]
    fn high_quality_samples_hug_their_mean() {
        let cfg = SynthConfig {
            d: 16,
            n_identities: 200,
            class_kappa: 1e7,
            quality_kappa_range: [1e4, 1e4],
            ..small(2)
        };
        let store = gen_synthetic(&cfg).unwrap();
        let gaps: Vec<f64> = store
            .identities
            .iter()
            .flat_map(|i| i.samples.iter().map(|s| 1.0 - i.mean.dot(&s.vector).unwrap()))
            .collect();
        // 1 - cos is roughly chi2(15) / (2 kappa); 0.998 sits far in the tail.
        assert!(gaps.iter().all(|g| *g <= 2e-3));
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let expected = 1.0 - vmf::mean_resultant_length(16, 1e4).unwrap() * vmf::mean_resultant_length(16, 1e7).unwrap();
        assert!((mean - expected).abs() <= 4.0 * sd / n.sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn planted_pairs_are_close() {
        let cfg = SynthConfig {
            d: 16,
            n_identities: 2,
            oog_fraction: 0.0,
            samples_per_identity: [4, 4],
            class_kappa: 1e4,
            quality_kappa_range: [1e3, 1e3],
            ambiguity: 1.0,
            ..small(3)
        };
        let store = gen_synthetic(&cfg).unwrap();
        assert_eq!(store.planted_pairs.len(), 1);
        let (a, b) = store.planted_pairs[0];
        assert!(store.identities[a].mean.dot(&store.identities[b].mean).unwrap() >= PLANTED_COSINE.0 - 1e-12);
        let proto = build_protocol(&store, 0.0, 0.5, 9).unwrap();
        let m = proto.gallery.means();
        assert!(m[0].dot(&m[1]).unwrap() >= 0.9);
    }

    #[test]
    fn singletons_become_nonmated() {
        let cfg = SynthConfig {
            samples_per_identity: [1, 3],
            n_identities: 40,
            ..small(4)
        };
        let store = gen_synthetic(&cfg).unwrap();
        let proto = build_protocol(&store, 0.1, 0.5, 5).unwrap();
        proto.validate().unwrap();
        for identity in store.identities.iter().filter(|i| i.samples.len() == 1) {
            assert!(proto.gallery.index_of(&identity.id).is_none());
            let probe_id = format!("{}-s000", identity.id);
            assert!(proto.nonmated_probes.iter().any(|p| p.probe_id == probe_id));
            assert!(proto.mated_probes.iter().all(|p| p.probe_id != probe_id));
        }
    }

    #[test]
    fn no_out_of_gallery_without_fraction() {
        let store = gen_synthetic(&small(5)).unwrap();
        let proto = build_protocol(&store, 0.0, 0.5, 1).unwrap();
        assert!(proto.nonmated_probes.is_empty());
        assert_eq!(proto.gallery.len(), 10);
        let in_gallery = build_protocol(&store, 0.3, 0.5, 1).unwrap();
        assert_eq!(in_gallery.gallery.len(), 7);
    }

    #[test]
    fn gallery_templates_exclude_probes() {
        let store = gen_synthetic(&small(6)).unwrap();
        let proto = build_protocol(&store, 0.3, 0.4, 2).unwrap();
        for (c, id) in proto.gallery.class_ids().iter().enumerate() {
            let identity = store.identities.iter().find(|i| &i.id == id).unwrap();
            let probe_vectors: Vec<&UnitVector> = proto
                .mated_probes
                .iter()
                .filter(|p| p.subject_id.as_deref() == Some(id))
                .map(|p| &p.vector)
                .collect();
            assert!(!probe_vectors.is_empty());
            let template: Vec<UnitVector> = identity
                .samples
                .iter()
                .filter(|s| !probe_vectors.contains(&&s.vector))
                .map(|s| s.vector.clone())
                .collect();
            assert_eq!(template.len() + probe_vectors.len(), identity.samples.len());
            assert_eq!(aggregate_template(&template).unwrap(), proto.gallery.means()[c]);
        }
        let n_val = proto.probes_in(Split::Validation).count();
        let total = proto.probes().count();
        assert_eq!(n_val, (0.4 * total as f64).round() as usize);
    }

    #[test]
    fn regeneration_is_identical() {
        assert_eq!(generate(&small(8)).unwrap(), generate(&small(8)).unwrap());
        assert_ne!(generate(&small(8)).unwrap(), generate(&small(9)).unwrap());
    }

    #[test]
    fn config_validation_and_presets() {
        assert!(SynthConfig { quality_kappa_range: [5.0, 1.0], ..small(1) }.validate().is_err());
        assert!(SynthConfig { samples_per_identity: [0, 1], ..small(1) }.validate().is_err());
        assert!(SynthConfig { ambiguity: 1.5, ..small(1) }.validate().is_err());
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(preset("degraded").unwrap().quality_kappa_range, [2.0, 500.0]);
        assert!(preset("nope").is_none());
        let json = serde_json::to_string(&preset("ambiguous").unwrap()).unwrap();
        let back: SynthConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, preset("ambiguous").unwrap());
        assert!(serde_json::from_str::<SynthConfig>(r#"{"n_identities": 3}"#).is_err());
    }
}
