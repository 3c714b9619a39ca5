//! On-disk bundle format: `manifest.json` plus one JSON record per line in
//! `records.jsonl`. Records are written with sorted keys and 17 significant
//! digits per float, so serialization is canonical and bit-exact.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gallery::Gallery;
use crate::holue::MlpCalibrator;
use crate::protocol::{OsrProtocol, Probe, Split};
use crate::vmf::{l2_norm, UnitVector};

pub const SCHEMA_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";

/// Norm deviation accepted without comment.
pub const NORM_EXACT_TOL: f64 = 1e-6;
/// Norm deviation repaired with a warning; anything larger is rejected.
pub const NORM_REPAIR_TOL: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation in {file} line {line}: {reason}")]
    Schema { file: String, line: usize, reason: String },
    #[error("record {template_id}: vector norm {norm} is not unit")]
    NonUnitVector { template_id: String, norm: f64 },
    #[error("duplicate {role} template_id {template_id}")]
    DuplicateId { role: Role, template_id: String },
    #[error("record {template_id}: dimension {found}, expected {expected}")]
    Dimension {
        template_id: String,
        expected: usize,
        found: usize,
    },
    #[error("probe {template_id} references unknown subject {subject_id}")]
    UnknownSubject { template_id: String, subject_id: String },
    #[error("manifest disagrees with records: {0}")]
    ManifestMismatch(String),
    #[error(transparent)]
    Invalid(#[from] crate::Error),
}

impl IoError {
    /// Stable machine-readable code per error class.
    pub fn code(&self) -> &'static str {
        match self {
            IoError::Io { .. } => "io",
            IoError::Schema { .. } => "schema",
            IoError::NonUnitVector { .. } => "non_unit_vector",
            IoError::DuplicateId { .. } => "duplicate_id",
            IoError::Dimension { .. } => "dimension",
            IoError::UnknownSubject { .. } => "unknown_subject",
            IoError::ManifestMismatch(_) => "manifest_mismatch",
            IoError::Invalid(_) => "invalid",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Gallery,
    Probe,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Gallery => "gallery",
            Role::Probe => "probe",
        })
    }
}

/// One line of `records.jsonl`. Gallery records carry no split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub template_id: String,
    pub subject_id: Option<String>,
    pub role: Role,
    pub split: Option<Split>,
    pub vector: Vec<f64>,
    pub kappa: Option<f64>,
    pub pfe_sigma2: Option<Vec<f64>>,
    pub sf_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub gallery: usize,
    pub mated_probes: usize,
    pub nonmated_probes: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: String,
    pub d: usize,
    pub counts: Counts,
    pub seeds: BTreeMap<String, u64>,
}

impl Manifest {
    pub fn describe(protocol: &OsrProtocol) -> Self {
        let count = |s| protocol.probes_in(s).count();
        Manifest {
            schema_version: SCHEMA_VERSION.to_string(),
            d: protocol.dim(),
            counts: Counts {
                gallery: protocol.gallery.len(),
                mated_probes: protocol.mated_probes.len(),
                nonmated_probes: protocol.nonmated_probes.len(),
                validation: count(Split::Validation),
                test: count(Split::Test),
            },
            seeds: protocol.seeds.clone(),
        }
    }
}

/// A parsed bundle plus any non-fatal repairs made while loading.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub protocol: OsrProtocol,
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

fn push_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").unwrap();
}

fn push_opt_f64(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => push_f64(out, v),
        None => out.push_str("null"),
    }
}

fn push_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_f64(out, *v);
    }
    out.push(']');
}

fn push_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialization"));
}

fn push_opt_str(out: &mut String, s: Option<&str>) {
    match s {
        Some(s) => push_str(out, s),
        None => out.push_str("null"),
    }
}

/// Canonical single-line JSON for one record, keys in lexicographic order.
pub fn record_line(rec: &EmbeddingRecord) -> String {
    let mut out = String::with_capacity(32 * rec.vector.len() + 128);
    out.push_str("{\"kappa\":");
    push_opt_f64(&mut out, rec.kappa);
    out.push_str(",\"pfe_sigma2\":");
    match &rec.pfe_sigma2 {
        Some(v) => push_array(&mut out, v),
        None => out.push_str("null"),
    }
    out.push_str(",\"role\":");
    push_str(&mut out, &rec.role.to_string());
    out.push_str(",\"sf_scale\":");
    push_opt_f64(&mut out, rec.sf_scale);
    out.push_str(",\"split\":");
    push_opt_str(
        &mut out,
        rec.split.map(|s| match s {
            Split::Validation => "validation",
            Split::Test => "test",
        }),
    );
    out.push_str(",\"subject_id\":");
    push_opt_str(&mut out, rec.subject_id.as_deref());
    out.push_str(",\"template_id\":");
    push_str(&mut out, &rec.template_id);
    out.push_str(",\"vector\":");
    push_array(&mut out, &rec.vector);
    out.push('}');
    out
}

fn probe_record(p: &Probe) -> EmbeddingRecord {
    EmbeddingRecord {
        template_id: p.probe_id.clone(),
        subject_id: p.subject_id.clone(),
        role: Role::Probe,
        split: Some(p.split),
        vector: p.vector.as_slice().to_vec(),
        kappa: p.kappa,
        pfe_sigma2: p.pfe_sigma2.clone(),
        sf_scale: p.sf_scale,
    }
}

/// Records in canonical order: by role, then template id.
pub fn to_records(protocol: &OsrProtocol) -> Vec<EmbeddingRecord> {
    let g = &protocol.gallery;
    let mut records: Vec<EmbeddingRecord> = g
        .class_ids()
        .iter()
        .zip(g.means())
        .map(|(id, mean)| EmbeddingRecord {
            template_id: id.clone(),
            subject_id: Some(id.clone()),
            role: Role::Gallery,
            split: None,
            vector: mean.as_slice().to_vec(),
            kappa: None,
            pfe_sigma2: None,
            sf_scale: None,
        })
        .chain(protocol.probes().map(probe_record))
        .collect();
    records.sort_by(|a, b| (a.role, &a.template_id).cmp(&(b.role, &b.template_id)));
    records
}

pub fn records_jsonl(protocol: &OsrProtocol) -> String {
    to_records(protocol)
        .iter()
        .map(|r| record_line(r) + "\n")
        .collect()
}

/// Writes `manifest.json` and `records.jsonl` into `dir`, creating it if needed.
pub fn write_bundle(protocol: &OsrProtocol, dir: &Path) -> Result<(), IoError> {
    protocol.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = serde_json::to_string_pretty(&Manifest::describe(protocol)).expect("manifest serialization") + "\n";
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    let records_path = dir.join(RECORDS_FILE);
    fs::write(&records_path, records_jsonl(protocol)).map_err(io_err(&records_path))?;
    Ok(())
}

fn schema(file: &str, line: usize, reason: impl Into<String>) -> IoError {
    IoError::Schema {
        file: file.to_string(),
        line,
        reason: reason.into(),
    }
}

fn checked_vector(rec: &EmbeddingRecord, warnings: &mut Vec<String>) -> Result<UnitVector, IoError> {
    let norm = l2_norm(&rec.vector);
    let gap = (norm - 1.0).abs();
    if gap.is_nan() || gap > NORM_REPAIR_TOL {
        return Err(IoError::NonUnitVector {
            template_id: rec.template_id.clone(),
            norm,
        });
    }
    if gap > NORM_EXACT_TOL {
        let msg = format!("{}: vector norm {norm} renormalized", rec.template_id);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(UnitVector::new(rec.vector.clone()).or_else(|_| UnitVector::normalize(rec.vector.clone()))?)
}

/// Parses records into a protocol; `warnings` collects repaired vectors.
pub fn from_records(
    records: Vec<EmbeddingRecord>,
    seeds: BTreeMap<String, u64>,
    warnings: &mut Vec<String>,
) -> Result<OsrProtocol, IoError> {
    let mut records = records;
    records.sort_by(|a, b| (a.role, &a.template_id).cmp(&(b.role, &b.template_id)));
    let d = records.first().map(|r| r.vector.len()).unwrap_or(0);
    let mut seen: HashSet<(Role, &str)> = HashSet::new();
    for r in &records {
        if !seen.insert((r.role, &r.template_id)) {
            return Err(IoError::DuplicateId {
                role: r.role,
                template_id: r.template_id.clone(),
            });
        }
        if r.vector.len() != d {
            return Err(IoError::Dimension {
                template_id: r.template_id.clone(),
                expected: d,
                found: r.vector.len(),
            });
        }
    }

    let mut class_ids = Vec::new();
    let mut means = Vec::new();
    let mut mated = Vec::new();
    let mut nonmated = Vec::new();
    for r in &records {
        let vector = checked_vector(r, warnings)?;
        match r.role {
            Role::Gallery => {
                class_ids.push(r.template_id.clone());
                means.push(vector);
            }
            Role::Probe => {
                let split = r.split.ok_or_else(|| schema(RECORDS_FILE, 0, format!("probe {} has no split", r.template_id)))?;
                let probe = Probe {
                    probe_id: r.template_id.clone(),
                    subject_id: r.subject_id.clone(),
                    vector,
                    kappa: r.kappa,
                    pfe_sigma2: r.pfe_sigma2.clone(),
                    sf_scale: r.sf_scale,
                    split,
                };
                if probe.subject_id.is_some() {
                    mated.push(probe);
                } else {
                    nonmated.push(probe);
                }
            }
        }
    }
    let known: HashSet<&str> = class_ids.iter().map(String::as_str).collect();
    if let Some(p) = mated
        .iter()
        .find(|p| !known.contains(p.subject_id.as_deref().unwrap_or_default()))
    {
        return Err(IoError::UnknownSubject {
            template_id: p.probe_id.clone(),
            subject_id: p.subject_id.clone().unwrap_or_default(),
        });
    }
    let protocol = OsrProtocol {
        gallery: Gallery::new(class_ids, means)?,
        mated_probes: mated,
        nonmated_probes: nonmated,
        seeds,
    };
    protocol.validate()?;
    Ok(protocol)
}

/// Loads and fully validates a bundle directory.
pub fn read_bundle(dir: &Path) -> Result<Bundle, IoError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| schema(MANIFEST_FILE, e.line(), e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(schema(
            MANIFEST_FILE,
            0,
            format!("unsupported schema_version {:?}", manifest.schema_version),
        ));
    }

    let records_path = dir.join(RECORDS_FILE);
    let text = fs::read_to_string(&records_path).map_err(io_err(&records_path))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(line).map_err(|e| schema(RECORDS_FILE, i + 1, e.to_string()))?;
        if rec.role == Role::Probe && rec.split.is_none() {
            return Err(schema(RECORDS_FILE, i + 1, "probe record without split"));
        }
        records.push(rec);
    }
    if let Some(r) = records.iter().find(|r| r.vector.len() != manifest.d) {
        return Err(IoError::Dimension {
            template_id: r.template_id.clone(),
            expected: manifest.d,
            found: r.vector.len(),
        });
    }

    let mut warnings = Vec::new();
    let protocol = from_records(records, manifest.seeds.clone(), &mut warnings)?;
    let found = Manifest::describe(&protocol);
    if found.counts != manifest.counts {
        return Err(IoError::ManifestMismatch(format!(
            "manifest counts {:?}, records give {:?}",
            manifest.counts, found.counts
        )));
    }
    Ok(Bundle {
        protocol,
        manifest,
        warnings,
    })
}

pub fn write_calibrator(cal: &MlpCalibrator, path: &Path) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(cal).expect("calibrator serialization") + "\n";
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_calibrator(path: &Path) -> Result<MlpCalibrator, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| schema(&path.display().to_string(), e.line(), e.to_string()))
}
