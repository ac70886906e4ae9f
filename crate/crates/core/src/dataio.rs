//! On-disk formats: ECG1 signal files, JSON dataset manifests, and model
//! checkpoints.
//!
//! ECG1 layout: magic `"ECG1"`, then little-endian u32 `format_version = 1`,
//! `n_leads`, `n_samples`, `fs`; then `n_leads · n_samples` little-endian
//! f32 samples, lead-major. Binary round-trips are bit-exact.
//!
//! Checkpoint layout: magic `"HBAI"`, u32 version, u32 config-blob length,
//! config blob (JSON: model config + training metadata), u32 parameter
//! count, then f32 LE parameters in the model's registration order
//! (documented in the model module).

use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ECG1_MAGIC: &[u8; 4] = b"ECG1";
pub const ECG1_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HBAI";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const N_LEADS: usize = 12;

/// Standard 12-lead order used throughout.
pub const LEAD_NAMES: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },
    #[error("version mismatch in {path}: file has {got}, reader supports {supported}")]
    VersionMismatch {
        path: PathBuf,
        got: u32,
        supported: u32,
    },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("truncated parameters in {path}: declared {declared}, payload holds {found}")]
    TruncatedParams {
        path: PathBuf,
        declared: usize,
        found: usize,
    },
    #[error("record '{id}': lead count mismatch, manifest says {expected}, file has {got}")]
    LeadCountMismatch { id: String, expected: usize, got: usize },
    #[error("record '{id}': sample count mismatch, manifest says {expected}, file has {got}")]
    SampleCountMismatch { id: String, expected: usize, got: usize },
    #[error("record '{id}': unknown label string '{label}'")]
    UnknownLabel { id: String, label: String },
    #[error("duplicate record id '{0}' in manifest")]
    DuplicateId(String),
    #[error("record '{id}': referenced file missing: {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("record '{id}': non-finite sample value")]
    NonFiniteSample { id: String },
    #[error("non-numeric CSV cell at row {row}, column {col} in {path}")]
    BadCsvCell { path: PathBuf, row: usize, col: usize },
    #[error("parameter count mismatch: config implies {expected}, checkpoint has {got}")]
    ParamCountMismatch { expected: usize, got: usize },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The seven arrhythmia classes with a frozen ordinal mapping; serialization
/// and the confusion-matrix axes depend on this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArrhythmiaClass {
    N = 0,
    AF = 1,
    PAC = 2,
    PVC = 3,
    LBBB = 4,
    RBBB = 5,
    IAVB = 6,
}

pub const ALL_CLASSES: [ArrhythmiaClass; 7] = [
    ArrhythmiaClass::N,
    ArrhythmiaClass::AF,
    ArrhythmiaClass::PAC,
    ArrhythmiaClass::PVC,
    ArrhythmiaClass::LBBB,
    ArrhythmiaClass::RBBB,
    ArrhythmiaClass::IAVB,
];

impl ArrhythmiaClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        ALL_CLASSES.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ArrhythmiaClass::N => "N",
            ArrhythmiaClass::AF => "AF",
            ArrhythmiaClass::PAC => "PAC",
            ArrhythmiaClass::PVC => "PVC",
            ArrhythmiaClass::LBBB => "LBBB",
            ArrhythmiaClass::RBBB => "RBBB",
            ArrhythmiaClass::IAVB => "IAVB",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "N" => Some(ArrhythmiaClass::N),
            "AF" => Some(ArrhythmiaClass::AF),
            "PAC" => Some(ArrhythmiaClass::PAC),
            "PVC" => Some(ArrhythmiaClass::PVC),
            "LBBB" => Some(ArrhythmiaClass::LBBB),
            "RBBB" => Some(ArrhythmiaClass::RBBB),
            // accepted alias seen in clinical exports
            "IAVB" | "I-AVB" => Some(ArrhythmiaClass::IAVB),
            _ => None,
        }
    }
}

impl fmt::Display for ArrhythmiaClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One 12-lead recording: the unit flowing through preprocessing,
/// training, and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    /// Dataset/hospital tag, the domain-generalization unit.
    pub domain: String,
    pub fs: f64,
    /// `[n_leads][n_samples]` voltages in millivolts.
    pub leads: Vec<Vec<f32>>,
    pub label: ArrhythmiaClass,
}

impl EcgRecord {
    pub fn n_samples(&self) -> usize {
        self.leads.first().map_or(0, Vec::len)
    }

    /// Checks the ingestion invariants: 12 leads, fs > 0, finite samples,
    /// equal-length leads.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.leads.len() != N_LEADS {
            return Err(DataError::LeadCountMismatch {
                id: self.id.clone(),
                expected: N_LEADS,
                got: self.leads.len(),
            });
        }
        if !(self.fs > 0.0) {
            return Err(DataError::Manifest(format!(
                "record '{}': fs must be > 0, got {}",
                self.id, self.fs
            )));
        }
        let n = self.n_samples();
        for lead in &self.leads {
            if lead.len() != n {
                return Err(DataError::SampleCountMismatch {
                    id: self.id.clone(),
                    expected: n,
                    got: lead.len(),
                });
            }
            if lead.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteSample { id: self.id.clone() });
            }
        }
        Ok(())
    }
}

/// Manifest entry describing one signal file relative to the manifest dir.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub domain: String,
    pub label: String,
    pub fs: f64,
    pub n_leads: usize,
    pub n_samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            records,
        }
    }

    pub fn domains(&self) -> Vec<String> {
        let mut ds: Vec<String> = self.records.iter().map(|r| r.domain.clone()).collect();
        ds.sort();
        ds.dedup();
        ds
    }

    pub fn label_of(&self, rec: &ManifestRecord) -> Result<ArrhythmiaClass, DataError> {
        ArrhythmiaClass::parse(&rec.label).ok_or_else(|| DataError::UnknownLabel {
            id: rec.id.clone(),
            label: rec.label.clone(),
        })
    }

    /// Structural validation: unique ids, known labels, sane shape fields.
    pub fn validate_structure(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::DuplicateId(r.id.clone()));
            }
            self.label_of(r)?;
            if r.n_leads != N_LEADS {
                return Err(DataError::LeadCountMismatch {
                    id: r.id.clone(),
                    expected: N_LEADS,
                    got: r.n_leads,
                });
            }
        }
        Ok(())
    }

    /// Eager file validation: every referenced file exists and matches its
    /// declared shape.
    pub fn validate_files(&self, base_dir: &Path) -> Result<(), DataError> {
        for r in &self.records {
            let p = base_dir.join(&r.path);
            if !p.exists() {
                return Err(DataError::MissingFile {
                    id: r.id.clone(),
                    path: p,
                });
            }
            let leads = read_signal(&p, Some((r.n_leads, r.n_samples)))?;
            if leads.len() != r.n_leads {
                return Err(DataError::LeadCountMismatch {
                    id: r.id.clone(),
                    expected: r.n_leads,
                    got: leads.len(),
                });
            }
        }
        Ok(())
    }

    /// Loads the full record for a manifest entry.
    pub fn load_record(&self, base_dir: &Path, rec: &ManifestRecord) -> Result<EcgRecord, DataError> {
        let p = base_dir.join(&rec.path);
        if !p.exists() {
            return Err(DataError::MissingFile {
                id: rec.id.clone(),
                path: p,
            });
        }
        let leads = read_signal(&p, Some((rec.n_leads, rec.n_samples)))?;
        let record = EcgRecord {
            id: rec.id.clone(),
            domain: rec.domain.clone(),
            fs: rec.fs,
            leads,
            label: self.label_of(rec)?,
        };
        record.validate()?;
        Ok(record)
    }
}

/// Parses a manifest JSON file and validates its structure. File shapes are
/// checked separately via [`DatasetManifest::validate_files`] (eager) or at
/// load time (on demand).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(DataError::VersionMismatch {
            path: path.to_path_buf(),
            got: manifest.format_version,
            supported: MANIFEST_VERSION,
        });
    }
    manifest.validate_structure()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text).map_err(io_err(path))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn get_u32(bytes: &[u8], off: &mut usize, path: &Path) -> Result<u32, DataError> {
    if bytes.len() < *off + 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: *off + 4,
            found: bytes.len(),
        });
    }
    let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
    *off += 4;
    Ok(v)
}

/// Writes a lead-major signal matrix in the ECG1 binary format.
pub fn write_signal(path: &Path, leads: &[Vec<f32>], fs: u32) -> Result<(), DataError> {
    let n_leads = leads.len();
    let n_samples = leads.first().map_or(0, Vec::len);
    assert!(
        leads.iter().all(|l| l.len() == n_samples),
        "all leads must have equal length"
    );
    let mut buf = Vec::with_capacity(20 + 4 * n_leads * n_samples);
    buf.extend_from_slice(ECG1_MAGIC);
    put_u32(&mut buf, ECG1_VERSION);
    put_u32(&mut buf, n_leads as u32);
    put_u32(&mut buf, n_samples as u32);
    put_u32(&mut buf, fs);
    for lead in leads {
        for &v in lead {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

/// Reads a signal matrix from an ECG1 file, or from a CSV file
/// (columns = leads, rows = samples) when the extension is `.csv`.
///
/// `expected_shape`, when given, is checked against the decoded
/// `(n_leads, n_samples)`.
pub fn read_signal(
    path: &Path,
    expected_shape: Option<(usize, usize)>,
) -> Result<Vec<Vec<f32>>, DataError> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let leads = if is_csv {
        read_signal_csv(path)?
    } else {
        read_signal_ecg1(path)?
    };
    if let Some((el, es)) = expected_shape {
        let id = path.display().to_string();
        if leads.len() != el {
            return Err(DataError::LeadCountMismatch {
                id,
                expected: el,
                got: leads.len(),
            });
        }
        let n = leads.first().map_or(0, Vec::len);
        if n != es {
            return Err(DataError::SampleCountMismatch {
                id,
                expected: es,
                got: n,
            });
        }
    }
    Ok(leads)
}

fn read_signal_ecg1(path: &Path) -> Result<Vec<Vec<f32>>, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < 4 || &bytes[..4] != ECG1_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: "ECG1".into(),
        });
    }
    let mut off = 4;
    let version = get_u32(&bytes, &mut off, path)?;
    if version != ECG1_VERSION {
        return Err(DataError::VersionMismatch {
            path: path.to_path_buf(),
            got: version,
            supported: ECG1_VERSION,
        });
    }
    let n_leads = get_u32(&bytes, &mut off, path)? as usize;
    let n_samples = get_u32(&bytes, &mut off, path)? as usize;
    let _fs = get_u32(&bytes, &mut off, path)?;
    let expected = off + 4 * n_leads * n_samples;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let mut leads = Vec::with_capacity(n_leads);
    for _ in 0..n_leads {
        let mut lead = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            lead.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        leads.push(lead);
    }
    Ok(leads)
}

fn read_signal_csv(path: &Path) -> Result<Vec<Vec<f32>>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (ri, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (ci, cell) in line.split(',').enumerate() {
            let v: f32 = cell.trim().parse().map_err(|_| DataError::BadCsvCell {
                path: path.to_path_buf(),
                row: ri,
                col: ci,
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    // transpose: CSV rows are samples, columns are leads
    let n_leads = rows.first().map_or(0, Vec::len);
    let mut leads = vec![Vec::with_capacity(rows.len()); n_leads];
    for (ri, row) in rows.iter().enumerate() {
        if row.len() != n_leads {
            return Err(DataError::BadCsvCell {
                path: path.to_path_buf(),
                row: ri,
                col: row.len().min(n_leads),
            });
        }
        for (ci, &v) in row.iter().enumerate() {
            leads[ci].push(v);
        }
    }
    Ok(leads)
}

/// Training metadata embedded in a checkpoint, enough for provenance checks
/// and the leave-one-domain-out leakage guard.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub best_val_macro_f1: f64,
    pub best_epoch: usize,
    pub seed: u64,
    pub source_domains: Vec<String>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// A self-describing model snapshot: full config plus the flat state vector
/// in registration order (trainable parameters and running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<f32>,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct CheckpointBlob {
    config: ModelConfig,
    meta: TrainMeta,
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<(), DataError> {
    let expected = cp.config.state_len();
    if cp.params.len() != expected {
        return Err(DataError::ParamCountMismatch {
            expected,
            got: cp.params.len(),
        });
    }
    let blob = serde_json::to_vec(&CheckpointBlob {
        config: cp.config.clone(),
        meta: cp.meta.clone(),
    })
    .expect("checkpoint blob serializes");
    let mut buf = Vec::with_capacity(16 + blob.len() + 4 * cp.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, blob.len() as u32);
    buf.extend_from_slice(&blob);
    put_u32(&mut buf, cp.params.len() as u32);
    for &p in &cp.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: "HBAI".into(),
        });
    }
    let mut off = 4;
    let version = get_u32(&bytes, &mut off, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::VersionMismatch {
            path: path.to_path_buf(),
            got: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let blob_len = get_u32(&bytes, &mut off, path)? as usize;
    if bytes.len() < off + blob_len {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: off + blob_len,
            found: bytes.len(),
        });
    }
    let blob: CheckpointBlob =
        serde_json::from_slice(&bytes[off..off + blob_len]).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    off += blob_len;
    let count = get_u32(&bytes, &mut off, path)? as usize;
    let found = (bytes.len() - off) / 4;
    if found < count {
        return Err(DataError::TruncatedParams {
            path: path.to_path_buf(),
            declared: count,
            found,
        });
    }
    let expected = blob.config.state_len();
    if count != expected {
        return Err(DataError::ParamCountMismatch {
            expected,
            got: count,
        });
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    Ok(Checkpoint {
        config: blob.config,
        params,
        meta: blob.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use tempfile::tempdir;

    #[test]
    fn class_ordinals_are_frozen() {
        let names: Vec<&str> = ALL_CLASSES.iter().map(|c| c.name()).collect();
        assert_eq!(names, ["N", "AF", "PAC", "PVC", "LBBB", "RBBB", "IAVB"]);
        for (i, c) in ALL_CLASSES.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ArrhythmiaClass::from_index(i), Some(*c));
            assert_eq!(ArrhythmiaClass::parse(c.name()), Some(*c));
        }
        assert_eq!(ArrhythmiaClass::parse("I-AVB"), Some(ArrhythmiaClass::IAVB));
        assert_eq!(ArrhythmiaClass::parse("???"), None);
    }

    #[test]
    fn ecg1_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("sig.ecg1");
        let leads = vec![vec![1.0f32, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        write_signal(&p, &leads, 500).unwrap();
        let back = read_signal(&p, Some((2, 3))).unwrap();
        assert_eq!(back, leads);
        // byte-level layout check: header is 20 bytes, payload 6 f32
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(&bytes[..4], b"ECG1");
    }

    #[test]
    fn ecg1_layout_payload_order_is_lead_major() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("sig.ecg1");
        write_signal(&p, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]], 500).unwrap();
        let bytes = fs::read(&p).unwrap();
        let payload: Vec<f32> = bytes[20..]
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(payload, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn csv_columns_are_leads() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("sig.csv");
        fs::write(&p, "1,4\n2,5\n3,6\n").unwrap();
        let leads = read_signal(&p, None).unwrap();
        assert_eq!(leads, vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
    }

    #[test]
    fn csv_bad_cell_is_reported() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("sig.csv");
        fs::write(&p, "1,4\n2,x\n").unwrap();
        match read_signal(&p, None) {
            Err(DataError::BadCsvCell { row: 1, col: 1, .. }) => {}
            other => panic!("expected BadCsvCell, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("sig.ecg1");
        fs::write(&p, b"XXXX\x01\x00\x00\x00").unwrap();
        match read_signal(&p, None) {
            Err(DataError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("sig.ecg1");
        let leads = vec![vec![1.0f32; 10]; 2];
        write_signal(&p, &leads, 500).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, bytes).unwrap();
        match read_signal(&p, None) {
            Err(DataError::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    fn small_manifest(dir: &Path) -> DatasetManifest {
        let mut records = Vec::new();
        for (i, domain) in [(0, "A"), (1, "A"), (2, "B"), (3, "B")] {
            let rel = format!("r{i}.ecg1");
            write_signal(&dir.join(&rel), &vec![vec![0.1f32; 8]; 12], 500).unwrap();
            records.push(ManifestRecord {
                id: format!("r{i}"),
                path: rel,
                domain: domain.into(),
                label: "N".into(),
                fs: 500.0,
                n_leads: 12,
                n_samples: 8,
            });
        }
        DatasetManifest::new(records)
    }

    #[test]
    fn manifest_roundtrip_and_domains() {
        let dir = tempdir().unwrap();
        let manifest = small_manifest(dir.path());
        let mp = dir.path().join("manifest.json");
        save_manifest(&manifest, &mp).unwrap();
        let back = load_manifest(&mp).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.domains(), ["A", "B"]);
        back.validate_files(dir.path()).unwrap();
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempdir().unwrap();
        let mp = dir.path().join("manifest.json");
        save_manifest(&DatasetManifest::new(vec![]), &mp).unwrap();
        let back = load_manifest(&mp).unwrap();
        assert!(back.records.is_empty());
    }

    #[test]
    fn manifest_rejects_duplicate_ids_and_unknown_labels() {
        let dir = tempdir().unwrap();
        let mut manifest = small_manifest(dir.path());
        manifest.records[1].id = "r0".into();
        match manifest.validate_structure() {
            Err(DataError::DuplicateId(id)) => assert_eq!(id, "r0"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
        let mut manifest2 = small_manifest(dir.path());
        manifest2.records[0].label = "VFIB".into();
        match manifest2.validate_structure() {
            Err(DataError::UnknownLabel { label, .. }) => assert_eq!(label, "VFIB"),
            other => panic!("expected UnknownLabel, got {other:?}"),
        }
    }

    #[test]
    fn manifest_lead_count_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let mut manifest = small_manifest(dir.path());
        // declare 12 leads but write an 11-lead file
        write_signal(&dir.path().join("r0.ecg1"), &vec![vec![0.0f32; 8]; 11], 500).unwrap();
        manifest.records[0].n_leads = 12;
        match manifest.validate_files(dir.path()) {
            Err(DataError::LeadCountMismatch { .. }) => {}
            other => panic!("expected LeadCountMismatch, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.hbai");
        let config = ModelConfig::desk_scale(Variant::Full);
        let params: Vec<f32> = (0..config.state_len())
            .map(|i| (i as f32 * 0.37).sin())
            .collect();
        let cp = Checkpoint {
            config,
            params,
            meta: TrainMeta {
                epochs_run: 3,
                best_val_macro_f1: 0.875,
                best_epoch: 2,
                seed: 42,
                source_domains: vec!["A".into(), "B".into()],
                train_ids: vec!["r0".into()],
                val_ids: vec!["r1".into()],
            },
        };
        save_checkpoint(&cp, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, cp);
        // saving again produces identical bytes
        let p2 = dir.path().join("model2.hbai");
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_byte_layout() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.hbai");
        let config = ModelConfig::desk_scale(Variant::Full);
        let n = config.state_len();
        let cp = Checkpoint {
            params: vec![0.5; n],
            config: config.clone(),
            meta: TrainMeta::default(),
        };
        save_checkpoint(&cp, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"HBAI");
        let blob_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        // magic + version + blob_len field + blob + count field + 4 bytes per param
        assert_eq!(bytes.len(), 12 + blob_len + 4 + 4 * n);
        let count = u32::from_le_bytes(bytes[12 + blob_len..16 + blob_len].try_into().unwrap());
        assert_eq!(count as usize, n);
    }

    #[test]
    fn checkpoint_truncated_params_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.hbai");
        let config = ModelConfig::desk_scale(Variant::Full);
        let cp = Checkpoint {
            params: vec![0.0; config.state_len()],
            config,
            meta: TrainMeta::default(),
        };
        save_checkpoint(&cp, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, bytes).unwrap();
        match load_checkpoint(&p) {
            Err(DataError::TruncatedParams { .. }) => {}
            other => panic!("expected TruncatedParams, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_count_must_match_config() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.hbai");
        let config = ModelConfig::desk_scale(Variant::Full);
        let cp = Checkpoint {
            params: vec![0.0; config.state_len() + 1],
            config,
            meta: TrainMeta::default(),
        };
        match save_checkpoint(&cp, &p) {
            Err(DataError::ParamCountMismatch { .. }) => {}
            other => panic!("expected ParamCountMismatch, got {other:?}"),
        }
    }
}
