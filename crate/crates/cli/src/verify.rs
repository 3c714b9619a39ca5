//! Self-checks of the numerical engine against the independent oracles.

use std::f64::consts::PI;

use holue_core::baselines::cosine_decision;
use holue_core::gallery::{self, equivalent_threshold, Gallery, GalleryModel};
use holue_core::holue::{kl_components, ProbabilisticEmbedding};
use holue_core::oracle::{self, ENVELOPE_MAX_CLASSES, ENVELOPE_MAX_DIM, ENVELOPE_MAX_KAPPA};
use holue_core::vmf::{self, uniform_on_sphere, UnitVector};
use holue_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const SCOPES: [&str; 7] = ["all", "bessel", "quadrature", "posterior", "equivalence", "marginal", "kl"];

/// Offset added to every engine value before comparison; nonzero only in
/// the fault-injection build used to exercise the failure path.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fault(pub f64);

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub n_cases: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub tool_version: String,
    pub scope: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verify serialization") + "\n"
    }
}

fn check(name: &str, max_deviation: f64, tolerance: f64, n_cases: usize) -> Check {
    // NaN deviations fail
    let ok = max_deviation <= tolerance;
    Check {
        name: name.to_string(),
        status: if ok { Status::Pass } else { Status::Fail },
        max_deviation,
        tolerance,
        n_cases,
    }
}

/// Closed forms of I_ν for half-integer ν, on arguments where they are well conditioned.
fn half_integer_log_i(order: f64, x: f64) -> Option<f64> {
    let pre = 0.5 * (2.0 / (PI * x)).ln();
    let (sh, ch) = (x.sinh(), x.cosh());
    if x > 300.0 {
        // e^x factored out
        let e = (-2.0 * x).exp();
        let (s, c) = ((1.0 - e) / 2.0, (1.0 + e) / 2.0);
        let body = match order {
            0.5 => s,
            1.5 => c - s / x,
            2.5 => (1.0 + 3.0 / (x * x)) * s - 3.0 * c / x,
            _ => return None,
        };
        return Some(pre + x + body.ln());
    }
    let body = match order {
        0.5 => sh,
        _ if order == 1.5 && x >= 1.0 => ch - sh / x,
        _ if order == 2.5 && x >= 2.0 => (1.0 + 3.0 / (x * x)) * sh - 3.0 * ch / x,
        _ => return None,
    };
    Some(pre + body.ln())
}

fn bessel(fault: Fault) -> Result<Vec<Check>> {
    let xs = [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 100.0, 700.0, 1e3, 1e4, 1e5];
    let (mut worst, mut n) = (0.0f64, 0);
    for order in [0.5, 1.5, 2.5] {
        for &x in &xs {
            if let Some(reference) = half_integer_log_i(order, x) {
                let ours = vmf::log_bessel_i(order, x)? + fault.0;
                worst = worst.max((ours - reference).abs());
                n += 1;
            }
        }
    }
    let mut finite = 0usize;
    let mut cases = 0usize;
    for d in [2usize, 3, 16, 128, 512] {
        for kappa in [1e-3, 1.0, 1e2, 1e4, 1e5] {
            cases += 1;
            let ok = vmf::log_c_d(d, kappa)?.is_finite() && vmf::log_alpha(d, kappa)?.is_finite();
            finite += usize::from(ok);
        }
    }
    Ok(vec![
        check("log_bessel_i_half_integer", worst, 1e-10, n),
        check("log_normalizer_finite", (cases - finite) as f64, 0.0, cases),
    ])
}

fn quadrature(fault: Fault) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    let mut n = 0;
    for d in [2usize, 3] {
        for kappa in [0.1, 1.0, 10.0, 100.0] {
            let quad = oracle::quad_log_c_d(d, kappa)?;
            let ours = vmf::log_c_d(d, kappa)? + fault.0;
            worst = worst.max(((ours - quad) / quad).abs());
            n += 1;
        }
    }
    Ok(vec![check("quad_log_c_d", worst, 1e-8, n)])
}

/// Random gallery model plus a probe that lies near a class half the time.
pub fn fuzz_case(rng: &mut ChaCha8Rng, d: usize, k: usize, kappa: f64, beta: f64) -> Result<(GalleryModel, UnitVector)> {
    let means: Vec<UnitVector> = (0..k).map(|_| uniform_on_sphere(d, rng)).collect();
    let z = if rng.gen_bool(0.5) {
        let m = means[rng.gen_range(0..k)].as_slice();
        let noise = uniform_on_sphere(d, rng);
        let w: f64 = rng.gen_range(0.0..1.0);
        UnitVector::normalize(m.iter().zip(noise.as_slice()).map(|(a, b)| a + w * b).collect())?
    } else {
        uniform_on_sphere(d, rng)
    };
    let ids = (0..k).map(|i| format!("c{i}")).collect();
    Ok((GalleryModel::new(Gallery::new(ids, means)?, kappa, beta)?, z))
}

fn envelope_case(rng: &mut ChaCha8Rng) -> Result<(GalleryModel, UnitVector)> {
    let d = rng.gen_range(2..=ENVELOPE_MAX_DIM);
    let k = rng.gen_range(1..=ENVELOPE_MAX_CLASSES);
    let kappa = rng.gen_range(0.01..ENVELOPE_MAX_KAPPA);
    let beta = rng.gen_range(0.01..0.99);
    fuzz_case(rng, d, k, kappa, beta)
}

fn posterior(fault: Fault, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1000;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (model, z) = envelope_case(&mut rng)?;
        let ours = gallery::posterior(&model, &z)?;
        let twin = oracle::independent_posterior(&model, &z)?;
        let dev = ours
            .gallery_probs
            .iter()
            .chain([&ours.oog_prob])
            .zip(twin.gallery_probs.iter().chain([&twin.oog_prob]))
            .map(|(a, b)| (a + fault.0 - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev);
    }
    Ok(vec![check("posterior_vs_linear_twin", worst, 1e-9, n)])
}

fn kl(fault: Fault, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 100;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (model, z) = envelope_case(&mut rng)?;
        let pemb = ProbabilisticEmbedding::new(z, rng.gen_range(0.5..50.0))?;
        let ours = kl_components(&model, &pemb, 1.0)?;
        let (kl1, kl2) = oracle::independent_kl(&model, &pemb)?;
        let rel = |a: f64, b: f64| (a + fault.0 - b).abs() / b.abs().max(1.0);
        worst = worst.max(rel(ours.kl1, kl1)).max(rel(ours.kl2, kl2));
    }
    Ok(vec![check("kl_unscaled_vs_independent", worst, 1e-10, n)])
}

/// GalUE decisions against the cosine rule at the equivalent threshold.
pub fn decision_disagreements(n: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wrong, mut done) = (0, 0);
    while done < n {
        let d = [2, 16, 128][rng.gen_range(0..3)];
        let k = [1, 10, 100][rng.gen_range(0..3)];
        let kappa = 10f64.powf(rng.gen_range(-2.0..4.0));
        let beta = rng.gen_range(0.01..0.99);
        let (model, z) = fuzz_case(&mut rng, d, k, kappa, beta)?;
        let tau = equivalent_threshold(&model);
        let s = holue_core::baselines::acc_score(model.gallery(), &z)?;
        // ties at τ are resolved by rounding, not by the rule
        if (s - tau).abs() < 1e-9 {
            continue;
        }
        let ours = gallery::decide(&gallery::posterior(&model, &z)?);
        if ours != cosine_decision(model.gallery(), &z, tau)? {
            wrong += 1;
        }
        done += 1;
    }
    Ok((wrong, done))
}

fn equivalence(seed: u64) -> Result<Vec<Check>> {
    let (wrong, n) = decision_disagreements(10_000, seed)?;
    Ok(vec![check("decision_equivalence", wrong as f64, 0.0, n)])
}

fn marginal(seed: u64) -> Result<Vec<Check>> {
    let n = 100_000;
    let one = |d: usize, k: usize, kappa: f64, beta: f64, s: u64| -> Result<GalleryModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        Ok(fuzz_case(&mut rng, d, k, kappa, beta)?.0)
    };
    let mut out = Vec::new();
    for (name, model) in [
        ("marginal_k1_d3", one(3, 1, 1.0, 0.5, seed)?),
        ("marginal_k5_d8", one(8, 5, 20.0, 0.3, seed + 1)?),
        ("marginal_mostly_uniform", one(4, 3, 5.0, 0.99, seed + 2)?),
    ] {
        let r = oracle::mc_marginal_check(&model, n, seed)?;
        out.push(check(name, (r.estimate - 1.0).abs(), 3.0 * r.std_error, n));
    }
    // a density inflated by 10% must be caught
    let model = one(3, 1, 1.0, 0.5, seed)?;
    let bad = oracle::mc_marginal_check_with(&model, n, seed, |z| {
        Ok(gallery::log_marginal(&model, z)? + 1.1f64.ln())
    })?;
    out.push(check("marginal_negative_control", f64::from(u8::from(bad.passed)), 0.0, n));
    Ok(out)
}

/// Runs every check in `scope`; `None` for an unknown scope.
pub fn run(scope: &str, seed: u64, fault: Fault) -> Option<Result<VerifyReport>> {
    let wants = |s: &str| scope == "all" || scope == s;
    if !SCOPES.contains(&scope) {
        return None;
    }
    let result = (|| {
        let mut checks = Vec::new();
        if wants("bessel") {
            checks.extend(bessel(fault)?);
        }
        if wants("quadrature") {
            checks.extend(quadrature(fault)?);
        }
        if wants("posterior") {
            checks.extend(posterior(fault, seed)?);
        }
        if wants("equivalence") {
            checks.extend(equivalence(seed)?);
        }
        if wants("marginal") {
            checks.extend(marginal(seed)?);
        }
        if wants("kl") {
            checks.extend(kl(fault, seed)?);
        }
        Ok(VerifyReport {
            tool_version: holue_core::eval::TOOL_VERSION.to_string(),
            scope: scope.to_string(),
            passed: checks.iter().all(|c| c.status == Status::Pass),
            checks,
        })
    })();
    Some(result)
}
