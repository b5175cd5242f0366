//! Synthetic oscillating-nucleus videos with ground truth, and a
//! contrast-driven degrader that emulates per-frame segmentation failures.
//!
//! Cells are non-overlapping ellipses with an interior nucleus ellipse.
//! The nucleus intensity oscillates over time; geometry is advected frame
//! to frame by smooth elastic flows, and the flows themselves are emitted
//! as ground truth in both directions. The degrader then damages nucleus
//! predictions exactly on the frames where the nucleus contrast is low,
//! producing the misses, boundary perturbations and splits a frame-by-frame
//! segmenter shows on such data, together with uncertainty maps that flag
//! every damaged region.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FlowField, LabelMap, Mask, ScalarField};
use crate::motion::{generate_elastic_flow, invert_flow, DeformationSpec, MotionError};
use crate::propagate::FlowSet;
use crate::rng::{derive_seed, stream_rng};
use crate::warp::warp_mask_backward;

/// Flow taper width at the image border, in pixels. Displacements fade to
/// zero at the boundary so advected cells never leave the canvas.
const BORDER_TAPER_PX: f64 = 12.0;

/// Placement attempts per cell before giving up.
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place cell {cell} after {attempts} attempts; image too crowded")]
    PlacementFailed { cell: usize, attempts: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// Nucleus intensity oscillation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waveform {
    Square,
    Sine,
}

/// Simulation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub cells: usize,
    pub seed: u64,
    /// Intensity inside cells (16-bit scale).
    pub cytosol_intensity: f64,
    /// Peak extra intensity inside nuclei.
    pub nucleus_contrast_amplitude: f64,
    pub oscillation_period: usize,
    pub oscillation_waveform: Waveform,
    pub noise_sigma: f64,
    /// Elastic motion per frame pair; the seed is re-derived per pair.
    pub motion: DeformationSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 30,
            cells: 8,
            seed: 7,
            cytosol_intensity: 18000.0,
            nucleus_contrast_amplitude: 14000.0,
            oscillation_period: 6,
            oscillation_waveform: Waveform::Square,
            noise_sigma: 800.0,
            motion: DeformationSpec { control_points: 3, magnitude: 8.0, seed: 7 },
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<(), SimError> {
        if self.cells < 1 {
            return Err(SimError::InvalidConfig("cells must be >= 1".into()));
        }
        if self.frames < 2 {
            return Err(SimError::InvalidConfig("frames must be >= 2".into()));
        }
        if self.oscillation_period < 2 {
            return Err(SimError::InvalidConfig("oscillation period must be >= 2".into()));
        }
        if self.cytosol_intensity < 0.0
            || self.nucleus_contrast_amplitude < 0.0
            || self.noise_sigma < 0.0
        {
            return Err(SimError::InvalidConfig("intensities must be nonnegative".into()));
        }
        Ok(())
    }

    /// Nucleus contrast in [0, 1] at a frame index.
    pub fn contrast(&self, frame: usize) -> f64 {
        let phase = frame % self.oscillation_period;
        match self.oscillation_waveform {
            Waveform::Square => {
                if phase < self.oscillation_period / 2 {
                    1.0
                } else {
                    0.0
                }
            }
            Waveform::Sine => {
                let angle =
                    2.0 * std::f64::consts::PI * frame as f64 / self.oscillation_period as f64;
                0.5 * (1.0 + angle.cos())
            }
        }
    }
}

/// A generated video with full ground truth.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub config: SimConfig,
    /// Rendered intensities, quantized to the 16-bit grid they are stored on.
    pub images: Vec<ScalarField>,
    pub cell_labels: Vec<LabelMap>,
    pub nucleus_labels: Vec<LabelMap>,
    pub flows: FlowSet,
    /// Nucleus contrast per frame.
    pub contrast: Vec<f64>,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

fn rasterize(e: &Ellipse, width: usize, height: usize) -> Mask {
    let mut m = Mask::new(width, height);
    let x0 = (e.cx - e.rx).floor().max(0.0) as usize;
    let x1 = (e.cx + e.rx).ceil().min(width as f64 - 1.0) as usize;
    let y0 = (e.cy - e.ry).floor().max(0.0) as usize;
    let y1 = (e.cy + e.ry).ceil().min(height as f64 - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 - e.cx) / e.rx;
            let dy = (y as f64 - e.cy) / e.ry;
            if dx * dx + dy * dy <= 1.0 {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn place_cells(cfg: &SimConfig) -> Result<Vec<(Ellipse, Ellipse)>, SimError> {
    let mut rng = stream_rng(cfg.seed, 0x1);
    let span = cfg.width.min(cfg.height) as f64;
    let r_lo = (0.055 * span).max(4.5);
    let r_hi = (0.085 * span).max(6.5);
    let mut cells: Vec<(Ellipse, Ellipse)> = Vec::with_capacity(cfg.cells);
    for cell in 0..cfg.cells {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let rx = rng.random_range(r_lo..=r_hi);
            let ry = rng.random_range(r_lo..=r_hi);
            let margin = rx.max(ry) + 4.0;
            if 2.0 * margin >= cfg.width as f64 || 2.0 * margin >= cfg.height as f64 {
                continue;
            }
            let cx = rng.random_range(margin..=(cfg.width as f64 - margin));
            let cy = rng.random_range(margin..=(cfg.height as f64 - margin));
            let reach = rx.max(ry);
            let clear = cells.iter().all(|(c, _)| {
                let d = ((c.cx - cx).powi(2) + (c.cy - cy).powi(2)).sqrt();
                d > reach + c.rx.max(c.ry) + 3.0
            });
            if !clear {
                continue;
            }
            let body = Ellipse { cx, cy, rx, ry };
            let nucleus = Ellipse { cx, cy, rx: (0.5 * rx).max(2.0), ry: (0.5 * ry).max(2.0) };
            cells.push((body, nucleus));
            placed = true;
            break;
        }
        if !placed {
            return Err(SimError::PlacementFailed { cell, attempts: MAX_PLACEMENT_ATTEMPTS });
        }
    }
    Ok(cells)
}

/// Elastic flow for one frame pair, displacement tapered to zero at the
/// image border.
fn pair_flow(cfg: &SimConfig, pair: usize) -> Result<FlowField, SimError> {
    let spec = DeformationSpec {
        seed: derive_seed(cfg.motion.seed, 0x100 + pair as u64),
        ..cfg.motion
    };
    let raw = generate_elastic_flow(&spec, cfg.width, cfg.height)?;
    let (w, h) = (cfg.width, cfg.height);
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let border = (x.min(w - 1 - x).min(y).min(h - 1 - y)) as f64;
            let taper = (border / BORDER_TAPER_PX).min(1.0) as f32;
            let (fu, fv) = raw.at(x, y);
            u.push(fu * taper);
            v.push(fv * taper);
        }
    }
    Ok(FlowField::from_components(
        w,
        h,
        u,
        v,
        (pair, pair + 1),
        raw.max_magnitude(),
    )?)
}

/// Advect a label map one frame forward using the flow of direction
/// `(t+1, t)`, closing each instance and (for nuclei) clamping to the new
/// cell footprint.
fn advect_labels(
    labels: &LabelMap,
    backward: &FlowField,
    clamp_to: Option<&LabelMap>,
) -> Result<LabelMap, SimError> {
    let mut out = LabelMap::new(labels.width(), labels.height());
    for id in labels.ids() {
        let moved = warp_mask_backward(&labels.mask_of(id), backward)?.close(1);
        let moved = match clamp_to {
            Some(cells) => {
                let inside = moved.intersection(&cells.mask_of(id))?;
                if inside.is_empty() {
                    // advection pinched the nucleus off; re-seed it from
                    // the cell interior
                    cells.mask_of(id).erode(2).largest_component()
                } else {
                    inside
                }
            }
            None => moved,
        };
        for (x, y) in moved.pixels() {
            if out.get(x, y) == 0 {
                out.set(x, y, id);
            }
        }
    }
    Ok(out)
}

fn render_frame(
    cfg: &SimConfig,
    cells: &LabelMap,
    nuclei: &LabelMap,
    contrast: f64,
    frame: usize,
) -> ScalarField {
    let mut rng = stream_rng(cfg.seed, 0x2000 + frame as u64);
    let mut out = ScalarField::new(cfg.width, cfg.height, 0.0);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let mut value = 0.0f64;
            if cells.get(x, y) != 0 {
                value += cfg.cytosol_intensity;
            }
            if nuclei.get(x, y) != 0 {
                value += contrast * cfg.nucleus_contrast_amplitude;
            }
            if cfg.noise_sigma > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                value += cfg.noise_sigma * n;
            }
            out.set(x, y, value.round().clamp(0.0, 65535.0));
        }
    }
    out
}

/// Generate a full synthetic video with ground truth labels and flows.
pub fn generate_video(cfg: &SimConfig) -> Result<SimDataset, SimError> {
    cfg.validate()?;
    let geometry = place_cells(cfg)?;

    let mut cell_frame = LabelMap::new(cfg.width, cfg.height);
    let mut nucleus_frame = LabelMap::new(cfg.width, cfg.height);
    for (i, (body, nucleus)) in geometry.iter().enumerate() {
        let id = i as u32 + 1;
        for (x, y) in rasterize(body, cfg.width, cfg.height).pixels() {
            cell_frame.set(x, y, id);
        }
        for (x, y) in rasterize(nucleus, cfg.width, cfg.height).pixels() {
            nucleus_frame.set(x, y, id);
        }
    }

    let mut cell_labels = vec![cell_frame];
    let mut nucleus_labels = vec![nucleus_frame];
    let mut forward = Vec::with_capacity(cfg.frames - 1);
    let mut backward = Vec::with_capacity(cfg.frames - 1);
    for t in 0..cfg.frames - 1 {
        let fwd = pair_flow(cfg, t)?;
        let bwd = invert_flow(&fwd, 5);
        let next_cells = advect_labels(&cell_labels[t], &bwd, None)?;
        let next_nuclei = advect_labels(&nucleus_labels[t], &bwd, Some(&next_cells))?;
        cell_labels.push(next_cells);
        nucleus_labels.push(next_nuclei);
        forward.push(fwd);
        backward.push(bwd);
    }

    let contrast: Vec<f64> = (0..cfg.frames).map(|t| cfg.contrast(t)).collect();
    let images = (0..cfg.frames)
        .map(|t| render_frame(cfg, &cell_labels[t], &nucleus_labels[t], contrast[t], t))
        .collect();

    Ok(SimDataset {
        config: cfg.clone(),
        images,
        cell_labels,
        nucleus_labels,
        flows: FlowSet { forward, backward },
        contrast,
    })
}

// ---------------------------------------------------------------------------
// Degrader
// ---------------------------------------------------------------------------

/// Parameters of the segmentation degrader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub seed: u64,
    /// Nucleus contrast below which predictions become unreliable.
    pub visibility_threshold: f64,
    /// Probability that an unreliable nucleus is dropped entirely.
    pub miss_probability: f64,
    /// Maximum morphological perturbation radius.
    pub erode_dilate_px: usize,
    /// Probability that an unreliable nucleus is cut into two components.
    pub split_probability: f64,
    pub base_uncertainty: f64,
    pub error_uncertainty: f64,
    /// Optional per-pixel Gaussian jitter on the uncertainty maps.
    pub pixel_jitter: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            visibility_threshold: 0.5,
            miss_probability: 0.4,
            erode_dilate_px: 2,
            split_probability: 0.3,
            base_uncertainty: 0.1,
            error_uncertainty: 0.9,
            pixel_jitter: 0.0,
        }
    }
}

impl DegradeConfig {
    fn validate(&self) -> Result<(), SimError> {
        for (name, p) in
            [("miss_probability", self.miss_probability), ("split_probability", self.split_probability)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidConfig(format!("{name} = {p} not in [0, 1]")));
            }
        }
        if !(self.error_uncertainty > self.base_uncertainty && self.base_uncertainty >= 0.0) {
            return Err(SimError::InvalidConfig(
                "need error_uncertainty > base_uncertainty >= 0".into(),
            ));
        }
        if self.pixel_jitter < 0.0 {
            return Err(SimError::InvalidConfig("pixel_jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Degraded per-frame predictions with uncertainty maps and scores.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub cell_labels: Vec<LabelMap>,
    pub nucleus_labels: Vec<LabelMap>,
    pub uncertainty: Vec<ScalarField>,
    /// Per-frame instance id -> detector-style score.
    pub scores: Vec<BTreeMap<u32, f64>>,
}

fn cut_in_two(mask: &Mask, vertical: bool) -> Mask {
    let Some((cx, cy)) = mask.centroid() else {
        return mask.clone();
    };
    let mut out = mask.clone();
    for (x, y) in mask.pixels() {
        let on_cut = if vertical { x == cx.round() as usize } else { y == cy.round() as usize };
        if on_cut {
            out.set(x, y, false);
        }
    }
    // only keep the cut if it actually produced two nonempty components
    if out.is_empty() || out.connected_components().len() < 2 {
        mask.clone()
    } else {
        out
    }
}

/// Emulate an unreliable per-frame segmenter on a ground-truth dataset.
///
/// Frames with nucleus contrast at or above the visibility threshold are
/// predicted perfectly with base uncertainty. Below the threshold each
/// nucleus is either dropped or perturbed (erode/dilate, optional split),
/// and every modified or missing region is flagged with the error
/// uncertainty. Cell predictions always equal the ground truth.
pub fn degrade_predictions(gt: &SimDataset, cfg: &DegradeConfig) -> Result<Predictions, SimError> {
    cfg.validate()?;
    let frames = gt.cell_labels.len();
    let mut nucleus_labels = Vec::with_capacity(frames);
    let mut uncertainty = Vec::with_capacity(frames);
    let mut scores = Vec::with_capacity(frames);

    for f in 0..frames {
        let mut rng = stream_rng(cfg.seed, f as u64);
        let visible = gt.contrast[f] >= cfg.visibility_threshold;
        let gt_nuclei = &gt.nucleus_labels[f];
        let (w, h) = (gt_nuclei.width(), gt_nuclei.height());
        let mut pred = LabelMap::new(w, h);
        // uncertainty maps live in f32 files; keep the in-memory values
        // identical to what a round trip through disk would give
        let base = cfg.base_uncertainty as f32 as f64;
        let error = cfg.error_uncertainty as f32 as f64;
        let mut unc = vec![base; w * h];
        let mut error_region = Mask::new(w, h);

        for id in gt_nuclei.ids() {
            let gt_mask = gt_nuclei.mask_of(id);
            let pred_mask = if visible {
                gt_mask.clone()
            } else if cfg.miss_probability > 0.0 && rng.random_bool(cfg.miss_probability) {
                Mask::new(w, h)
            } else {
                let dilate = rng.random_bool(0.5);
                let radius = if cfg.erode_dilate_px > 0 {
                    rng.random_range(1..=cfg.erode_dilate_px)
                } else {
                    0
                };
                let mut m = if dilate { gt_mask.dilate(radius) } else { gt_mask.erode(radius) };
                if cfg.split_probability > 0.0 && rng.random_bool(cfg.split_probability) {
                    m = cut_in_two(&m, rng.random_bool(0.5));
                }
                m
            };
            if pred_mask != gt_mask {
                error_region = error_region.union(&gt_mask)?.union(&pred_mask)?;
            }
            for (x, y) in pred_mask.pixels() {
                if pred.get(x, y) == 0 {
                    pred.set(x, y, id);
                }
            }
        }
        for (x, y) in error_region.pixels() {
            unc[y * w + x] = error;
        }
        if cfg.pixel_jitter > 0.0 {
            for value in unc.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *value = ((*value + cfg.pixel_jitter * n).max(0.0) as f32) as f64;
            }
        }
        let unc = ScalarField::from_vec(w, h, unc)?;
        let mut frame_scores = BTreeMap::new();
        for id in pred.ids() {
            let mean = crate::grid::mean_over_instance(&unc, &pred, id)?
                .finite()
                .expect("present instance has pixels");
            let score = (1.0 - mean / cfg.error_uncertainty).clamp(0.0, 1.0);
            frame_scores.insert(id, score);
        }
        nucleus_labels.push(pred);
        uncertainty.push(unc);
        scores.push(frame_scores);
    }

    Ok(Predictions {
        cell_labels: gt.cell_labels.clone(),
        nucleus_labels,
        uncertainty,
        scores,
    })
}
