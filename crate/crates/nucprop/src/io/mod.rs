//! Dataset layout, manifest and bit-exact serialization.
//!
//! A dataset directory looks like:
//!
//! ```text
//! dataset/
//!   manifest.json            dimensions, frame count, config echoes
//!   images/frame_0000.pgm    16-bit binary PGM, one per frame
//!   gt/cells/frame_0000.pgm  ground-truth cell label maps
//!   gt/nuclei/frame_0000.pgm ground-truth nucleus label maps
//!   flow/fwd_0000.f32        flow (i, i+1), interleaved (u, v) f32 LE
//!   flow/bwd_0000.f32        flow (i+1, i)
//!   pred/cells/...           predicted labels (after `degrade`)
//!   pred/nuclei/...
//!   unc/frame_0000.f32       uncertainty maps, f32 LE + JSON sidecar
//!   scores/frame_0000.json   instance id -> detector score
//!   tracks.json              written by `track`
//!   prop/<name>/nuclei/...   repaired nuclei (after `propagate`)
//!   prop/<name>/updates.json update log + configuration echo
//! ```
//!
//! All files are written canonically (write to a temp file, then atomic
//! rename), so identical inputs and seeds give byte-identical datasets.

pub mod pgm;
pub mod raw;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FlowField, GridError, LabelMap, ScalarField};
use crate::propagate::{FlowSet, PropagationConfig, UpdateLog};
use crate::sim::{DegradeConfig, Predictions, SimConfig, SimDataset};
use crate::tracker::{LinkConfig, Track};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: invalid PGM: {reason}")]
    BadPgm { path: PathBuf, reason: String },
    #[error("{path}: expected {expected} data bytes, found {found}")]
    BadSize { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: file is {fw}x{fh} but the manifest declares {mw}x{mh}")]
    DimensionMismatch { path: PathBuf, fw: usize, fh: usize, mw: usize, mh: usize },
    #[error("label id {id} does not fit a 16-bit PGM sample")]
    IdTooLarge { id: u32 },
    #[error("unrecognized manifest version {0}")]
    BadVersion(u32),
    #[error("flow for frame pair ({from}, {to}) is missing: {path}")]
    MissingFlow { from: usize, to: usize, path: PathBuf },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

/// Write through a temp file and atomic rename so a partially written
/// file is never observed under its final name.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let err = |source| IoError::File { path: path.to_path_buf(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

fn ensure_dir(path: &Path) -> Result<(), IoError> {
    fs::create_dir_all(path).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Relative locations of the per-kind subdirectories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub images: String,
    pub gt_cells: String,
    pub gt_nuclei: String,
    pub flow: String,
    pub pred_cells: String,
    pub pred_nuclei: String,
    pub unc: String,
    pub scores: String,
}

impl Default for ManifestPaths {
    fn default() -> Self {
        Self {
            images: "images".into(),
            gt_cells: "gt/cells".into(),
            gt_nuclei: "gt/nuclei".into(),
            flow: "flow".into(),
            pred_cells: "pred/cells".into(),
            pred_nuclei: "pred/nuclei".into(),
            unc: "unc".into(),
            scores: "scores".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub paths: ManifestPaths,
    #[serde(default)]
    pub contrast: Vec<f64>,
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub degrade: Option<DegradeConfig>,
    #[serde(default)]
    pub has_flows: bool,
    #[serde(default)]
    pub has_predictions: bool,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, IoError> {
    let manifest: Manifest = read_json(&manifest_path(dir))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(IoError::BadVersion(manifest.version));
    }
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), IoError> {
    write_json(&manifest_path(dir), manifest)
}

fn frame_file(dir: &Path, sub: &str, frame: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("frame_{frame:04}.{ext}"))
}

fn flow_file(dir: &Path, sub: &str, prefix: &str, pair: usize) -> PathBuf {
    dir.join(sub).join(format!("{prefix}_{pair:04}.f32"))
}

// ---------------------------------------------------------------------------
// Grid <-> file conversions
// ---------------------------------------------------------------------------

fn write_labels(path: &Path, labels: &LabelMap) -> Result<(), IoError> {
    let mut samples = Vec::with_capacity(labels.data().len());
    for &id in labels.data() {
        if id > u16::MAX as u32 {
            return Err(IoError::IdTooLarge { id });
        }
        samples.push(id as u16);
    }
    atomic_write(path, &pgm::encode_pgm16(labels.width(), labels.height(), &samples))
}

fn read_labels(path: &Path, manifest: &Manifest) -> Result<LabelMap, IoError> {
    let (w, h, samples) = pgm::read_pgm16(path)?;
    check_manifest_dims(path, w, h, manifest)?;
    Ok(LabelMap::from_vec(w, h, samples.into_iter().map(u32::from).collect())?)
}

/// Images are stored as 16-bit PGM; values are rounded and clamped into
/// the sample range on write.
fn write_image(path: &Path, image: &ScalarField) -> Result<(), IoError> {
    let samples: Vec<u16> = image
        .data()
        .iter()
        .map(|&v| v.round().clamp(0.0, 65535.0) as u16)
        .collect();
    atomic_write(path, &pgm::encode_pgm16(image.width(), image.height(), &samples))
}

fn read_image(path: &Path, manifest: &Manifest) -> Result<ScalarField, IoError> {
    let (w, h, samples) = pgm::read_pgm16(path)?;
    check_manifest_dims(path, w, h, manifest)?;
    Ok(ScalarField::from_vec(w, h, samples.into_iter().map(f64::from).collect())?)
}

fn check_manifest_dims(path: &Path, w: usize, h: usize, manifest: &Manifest) -> Result<(), IoError> {
    if w != manifest.width || h != manifest.height {
        return Err(IoError::DimensionMismatch {
            path: path.to_path_buf(),
            fw: w,
            fh: h,
            mw: manifest.width,
            mh: manifest.height,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset read/write
// ---------------------------------------------------------------------------

/// Predicted labels with uncertainty maps and scores.
#[derive(Debug, Clone)]
pub struct PredData {
    pub cells: Vec<LabelMap>,
    pub nuclei: Vec<LabelMap>,
    pub uncertainty: Vec<ScalarField>,
    pub scores: Vec<BTreeMap<u32, f64>>,
}

/// A dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<ScalarField>,
    pub gt_cells: Vec<LabelMap>,
    pub gt_nuclei: Vec<LabelMap>,
    pub flows: Option<FlowSet>,
    pub pred: Option<PredData>,
}

/// Write a freshly simulated dataset (images, ground truth, flows).
pub fn write_sim_dataset(dir: &Path, data: &SimDataset) -> Result<(), IoError> {
    let paths = ManifestPaths::default();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        width: data.config.width,
        height: data.config.height,
        frames: data.config.frames,
        paths: paths.clone(),
        contrast: data.contrast.clone(),
        sim: Some(data.config.clone()),
        degrade: None,
        has_flows: true,
        has_predictions: false,
    };
    for sub in [&paths.images, &paths.gt_cells, &paths.gt_nuclei, &paths.flow] {
        ensure_dir(&dir.join(sub))?;
    }
    for f in 0..data.config.frames {
        write_image(&frame_file(dir, &paths.images, f, "pgm"), &data.images[f])?;
        write_labels(&frame_file(dir, &paths.gt_cells, f, "pgm"), &data.cell_labels[f])?;
        write_labels(&frame_file(dir, &paths.gt_nuclei, f, "pgm"), &data.nucleus_labels[f])?;
    }
    for (i, flow) in data.flows.forward.iter().enumerate() {
        raw::write_flow(&flow_file(dir, &paths.flow, "fwd", i), flow)?;
    }
    for (i, flow) in data.flows.backward.iter().enumerate() {
        raw::write_flow(&flow_file(dir, &paths.flow, "bwd", i), flow)?;
    }
    write_manifest(dir, &manifest)
}

/// Add degraded predictions to an existing dataset directory.
pub fn write_predictions(
    dir: &Path,
    pred: &Predictions,
    cfg: &DegradeConfig,
) -> Result<(), IoError> {
    let mut manifest = read_manifest(dir)?;
    let paths = manifest.paths.clone();
    for sub in [&paths.pred_cells, &paths.pred_nuclei, &paths.unc, &paths.scores] {
        ensure_dir(&dir.join(sub))?;
    }
    for f in 0..manifest.frames {
        write_labels(&frame_file(dir, &paths.pred_cells, f, "pgm"), &pred.cell_labels[f])?;
        write_labels(&frame_file(dir, &paths.pred_nuclei, f, "pgm"), &pred.nucleus_labels[f])?;
        raw::write_scalar(&frame_file(dir, &paths.unc, f, "f32"), &pred.uncertainty[f])?;
        write_json(&frame_file(dir, &paths.scores, f, "json"), &pred.scores[f])?;
    }
    manifest.degrade = Some(cfg.clone());
    manifest.has_predictions = true;
    write_manifest(dir, &manifest)
}

/// Load a dataset directory, validating dimensions against the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let manifest = read_manifest(dir)?;
    let paths = manifest.paths.clone();
    let mut images = Vec::with_capacity(manifest.frames);
    let mut gt_cells = Vec::with_capacity(manifest.frames);
    let mut gt_nuclei = Vec::with_capacity(manifest.frames);
    for f in 0..manifest.frames {
        images.push(read_image(&frame_file(dir, &paths.images, f, "pgm"), &manifest)?);
        gt_cells.push(read_labels(&frame_file(dir, &paths.gt_cells, f, "pgm"), &manifest)?);
        gt_nuclei.push(read_labels(&frame_file(dir, &paths.gt_nuclei, f, "pgm"), &manifest)?);
    }
    let flows = if manifest.has_flows {
        let mut forward = Vec::with_capacity(manifest.frames - 1);
        let mut backward = Vec::with_capacity(manifest.frames - 1);
        for i in 0..manifest.frames - 1 {
            forward.push(read_pair_flow(dir, &manifest, "fwd", i, (i, i + 1))?);
            backward.push(read_pair_flow(dir, &manifest, "bwd", i, (i + 1, i))?);
        }
        Some(FlowSet { forward, backward })
    } else {
        None
    };
    let pred = if manifest.has_predictions {
        let mut cells = Vec::with_capacity(manifest.frames);
        let mut nuclei = Vec::with_capacity(manifest.frames);
        let mut uncertainty = Vec::with_capacity(manifest.frames);
        let mut scores = Vec::with_capacity(manifest.frames);
        for f in 0..manifest.frames {
            cells.push(read_labels(&frame_file(dir, &paths.pred_cells, f, "pgm"), &manifest)?);
            nuclei.push(read_labels(&frame_file(dir, &paths.pred_nuclei, f, "pgm"), &manifest)?);
            let unc = raw::read_scalar(&frame_file(dir, &paths.unc, f, "f32"))?;
            check_manifest_dims(
                &frame_file(dir, &paths.unc, f, "f32"),
                unc.width(),
                unc.height(),
                &manifest,
            )?;
            uncertainty.push(unc);
            scores.push(read_json(&frame_file(dir, &paths.scores, f, "json"))?);
        }
        Some(PredData { cells, nuclei, uncertainty, scores })
    } else {
        None
    };
    Ok(Dataset { manifest, images, gt_cells, gt_nuclei, flows, pred })
}

fn read_pair_flow(
    dir: &Path,
    manifest: &Manifest,
    prefix: &str,
    pair: usize,
    direction: (usize, usize),
) -> Result<FlowField, IoError> {
    let path = flow_file(dir, &manifest.paths.flow, prefix, pair);
    if !path.exists() {
        return Err(IoError::MissingFlow { from: direction.0.min(direction.1), to: direction.0.max(direction.1), path });
    }
    let flow = read_flow_checked(&path, direction, manifest)?;
    Ok(flow)
}

fn read_flow_checked(
    path: &Path,
    direction: (usize, usize),
    manifest: &Manifest,
) -> Result<FlowField, IoError> {
    let flow = raw::read_flow(path, direction)?;
    check_manifest_dims(path, flow.width(), flow.height(), manifest)?;
    Ok(flow)
}

// ---------------------------------------------------------------------------
// Tracks, update logs, reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackEntry {
    pub id: usize,
    pub start: usize,
    /// Instance id per frame from `start`; 0 marks an absent frame.
    pub cells: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracksFile {
    pub version: u32,
    pub link: LinkConfig,
    pub tracks: Vec<TrackEntry>,
}

pub fn write_tracks(dir: &Path, tracks: &[Track], link: &LinkConfig) -> Result<(), IoError> {
    let file = TracksFile {
        version: MANIFEST_VERSION,
        link: *link,
        tracks: tracks
            .iter()
            .map(|t| TrackEntry {
                id: t.track_id,
                start: t.start_frame,
                cells: t.entries.iter().map(|e| e.unwrap_or(0)).collect(),
            })
            .collect(),
    };
    write_json(&dir.join("tracks.json"), &file)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdatesFile {
    pub version: u32,
    pub config: PropagationConfig,
    pub link: LinkConfig,
    pub log: UpdateLog,
}

/// Write a propagation result under `prop/<name>/`.
pub fn write_propagation(
    dir: &Path,
    name: &str,
    nuclei: &[LabelMap],
    log: &UpdateLog,
    config: &PropagationConfig,
    link: &LinkConfig,
) -> Result<(), IoError> {
    let base = dir.join("prop").join(name);
    ensure_dir(&base.join("nuclei"))?;
    for (f, labels) in nuclei.iter().enumerate() {
        write_labels(&base.join("nuclei").join(format!("frame_{f:04}.pgm")), labels)?;
    }
    let file = UpdatesFile {
        version: MANIFEST_VERSION,
        config: *config,
        link: *link,
        log: log.clone(),
    };
    write_json(&base.join("updates.json"), &file)
}

/// Load a propagation result written by [`write_propagation`].
pub fn read_propagation(
    dir: &Path,
    name: &str,
) -> Result<(Vec<LabelMap>, UpdatesFile), IoError> {
    let manifest = read_manifest(dir)?;
    let base = dir.join("prop").join(name);
    let mut nuclei = Vec::with_capacity(manifest.frames);
    for f in 0..manifest.frames {
        nuclei.push(read_labels(&base.join("nuclei").join(format!("frame_{f:04}.pgm")), &manifest)?);
    }
    let updates: UpdatesFile = read_json(&base.join("updates.json"))?;
    Ok((nuclei, updates))
}

/// Per-category nucleus counts in an evaluation report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub all: usize,
    pub updated: usize,
    pub interpolated: usize,
    pub non_updated: usize,
}

/// Evaluation report with fixed field names; fields not produced by a
/// given command are null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_sm: Option<f64>,
    pub map_ent: Option<f64>,
    pub iou_all: Option<f64>,
    pub iou_updated: Option<f64>,
    pub iou_interpolated: Option<f64>,
    pub iou_non_updated: Option<f64>,
    pub counts: Option<CategoryCounts>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), IoError> {
    atomic_write(path, report.to_json().as_bytes())
}
