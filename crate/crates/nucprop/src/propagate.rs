//! Uncertainty-ranked propagation of nucleus masks along cell tracks.
//!
//! Each track's frames are visited in ascending mean-nucleus-uncertainty
//! order. A frame whose mean uncertainty clears the hard threshold is
//! repaired from its track neighbours: from both sides when both are
//! sufficiently more certain (relative threshold `beta`), else from one
//! side (relative threshold `alpha`). A frame with no nucleus at all has
//! infinite uncertainty and accepts any finite-uncertainty neighbour.
//! Source masks are motion-corrected into the target frame before being
//! written. After an update the frame's uncertainty becomes the minimum
//! of its sources', letting repairs chain across multi-frame signal loss
//! in a single pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FlowField, LabelMap, Mask, MeanValue, ScalarField};
use crate::motion::{apply_shift_scale, estimate_shift_scale, mean_flow_translation};
use crate::tracker::{build_tracks, LinkConfig, Track};
use crate::warp::warp_mask_backward;

#[derive(Debug, Error)]
pub enum PropagateError {
    #[error("neighbor nucleus mask is empty")]
    EmptySourceNucleus,
    #[error("flow for frame pair ({from}, {to}) is missing")]
    MissingFlow { from: usize, to: usize },
    #[error("no fusion candidates")]
    NoCandidates,
    #[error("fusion weight for uncertainty {0} is not finite")]
    NonFiniteWeight(f64),
    #[error("input arrays disagree on frame count")]
    LengthMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Motion(#[from] crate::motion::MotionError),
    #[error(transparent)]
    Track(#[from] crate::tracker::TrackError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Motion model used to carry a neighbour mask into the target frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    /// Shift and scale estimated between the neighbour and current cell masks.
    ShiftScale,
    /// Constant translation: mean dense flow over the current cell region.
    MeanFlow,
    /// Dense per-pixel flow warp.
    PixelFlow,
}

/// Which frames are eligible for updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// Only frames whose mean uncertainty clears the thresholds.
    UncertainOnly,
    /// Every frame with a finite-uncertainty neighbour, ignoring thresholds.
    All,
}

/// Propagation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    /// Hard uncertainty threshold.
    pub theta: f64,
    /// One-sided relative threshold.
    pub alpha: f64,
    /// Two-sided relative threshold.
    pub beta: f64,
    pub warp_mode: WarpMode,
    /// Replace the two-sided union by certainty-weighted fusion.
    pub fuse: bool,
    pub update_scope: UpdateScope,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            alpha: 0.7,
            beta: 0.85,
            warp_mode: WarpMode::MeanFlow,
            fuse: false,
            update_scope: UpdateScope::UncertainOnly,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<(), PropagateError> {
        if self.theta.is_nan() || self.theta < 0.0 {
            return Err(PropagateError::InvalidConfig(format!("theta = {}", self.theta)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(PropagateError::InvalidConfig(format!("alpha = {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(PropagateError::InvalidConfig(format!("beta = {}", self.beta)));
        }
        Ok(())
    }
}

/// Dense flows for every consecutive frame pair of a video.
#[derive(Debug, Clone)]
pub struct FlowSet {
    /// `forward[i]` has direction `(i, i+1)`.
    pub forward: Vec<FlowField>,
    /// `backward[i]` has direction `(i+1, i)`.
    pub backward: Vec<FlowField>,
}

impl FlowSet {
    /// Flow with direction `(frame, frame - 1)`.
    pub fn to_prev(&self, frame: usize) -> Option<&FlowField> {
        frame.checked_sub(1).and_then(|i| self.backward.get(i))
    }

    /// Flow with direction `(frame, frame + 1)`.
    pub fn to_next(&self, frame: usize) -> Option<&FlowField> {
        self.forward.get(frame)
    }
}

// ---------------------------------------------------------------------------
// Uncertainty summary
// ---------------------------------------------------------------------------

/// Mean nucleus uncertainty per (track, frame).
#[derive(Debug, Clone)]
pub struct UncertaintySummary {
    /// Aligned with each track's entries.
    per_track: Vec<Vec<MeanValue>>,
}

impl UncertaintySummary {
    /// The summary value for a track index and absolute frame;
    /// `Infinite` outside the track span.
    pub fn ubar(&self, track_index: usize, track: &Track, frame: usize) -> MeanValue {
        if frame < track.start_frame || frame > track.last_frame() {
            return MeanValue::Infinite;
        }
        self.per_track[track_index][frame - track.start_frame]
    }

    pub fn track_values(&self, track_index: usize) -> &[MeanValue] {
        &self.per_track[track_index]
    }
}

/// Compute the mean uncertainty of every track's nucleus in every frame.
///
/// Nucleus instances share the id of their cell, so a track's nucleus at
/// frame `f` is the instance of `nucleus_labels[f]` carrying the track's
/// cell id. Frames where the track is absent or the nucleus has no pixels
/// summarize to `Infinite`.
pub fn summarize_uncertainty(
    tracks: &[Track],
    nucleus_labels: &[LabelMap],
    uncertainty: &[ScalarField],
) -> Result<UncertaintySummary, PropagateError> {
    if nucleus_labels.len() != uncertainty.len() {
        return Err(PropagateError::LengthMismatch);
    }
    let mut per_track = Vec::with_capacity(tracks.len());
    for track in tracks {
        let mut values = Vec::with_capacity(track.entries.len());
        for frame in track.frames() {
            let value = match track.cell_at(frame) {
                Some(id) => {
                    crate::grid::mean_over_instance(&uncertainty[frame], &nucleus_labels[frame], id)?
                }
                None => MeanValue::Infinite,
            };
            values.push(value);
        }
        per_track.push(values);
    }
    Ok(UncertaintySummary { per_track })
}

// ---------------------------------------------------------------------------
// Update log
// ---------------------------------------------------------------------------

/// What happened to one (track, frame) during propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateAction {
    /// Left untouched.
    None,
    /// Replaced by the warped previous-frame nucleus.
    OneSidedPrev,
    /// Replaced by the warped next-frame nucleus.
    OneSidedNext,
    /// Replaced by the combination of both warped neighbours.
    TwoSided,
    /// Created from neighbours where no nucleus existed at all.
    Interpolated,
}

impl UpdateAction {
    pub fn is_update(self) -> bool {
        !matches!(self, UpdateAction::None)
    }
}

mod serde_maybe_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// One propagation decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub track_id: usize,
    pub frame: usize,
    /// The track's cell/nucleus instance id at this frame (absent frames
    /// have none and are never updated).
    pub instance_id: Option<u32>,
    pub action: UpdateAction,
    /// Source frames, in the order they were combined.
    pub sources: Vec<usize>,
    /// Source mean uncertainties at decision time.
    pub source_ubar: Vec<f64>,
    /// Target mean uncertainty at decision time; serialized as null when
    /// the nucleus was missing (infinite).
    #[serde(with = "serde_maybe_infinite")]
    pub target_ubar: f64,
    /// True when the pre-update nucleus had no pixels.
    pub nucleus_was_empty: bool,
}

/// The full decision record of a propagation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub records: Vec<UpdateRecord>,
}

impl UpdateLog {
    /// Action for an instance in a frame; `None` when unknown to the log.
    pub fn action_for(&self, frame: usize, id: u32) -> Option<UpdateAction> {
        self.records
            .iter()
            .find(|r| r.frame == frame && r.instance_id == Some(id))
            .map(|r| r.action)
    }
}

// ---------------------------------------------------------------------------
// Neighbour warping and fusion
// ---------------------------------------------------------------------------

/// Motion-correct a neighbour's nucleus mask into the current frame.
///
/// The flow, when required by the mode, must have direction
/// `(current frame, neighbour frame)`. The result is reduced to its
/// largest connected component.
pub fn warp_neighbor_mask(
    current_cell: &Mask,
    neighbor_cell: &Mask,
    neighbor_nucleus: &Mask,
    flow_to_neighbor: Option<&FlowField>,
    mode: WarpMode,
) -> Result<Mask, PropagateError> {
    if neighbor_nucleus.is_empty() {
        return Err(PropagateError::EmptySourceNucleus);
    }
    let warped = match mode {
        WarpMode::ShiftScale => {
            if current_cell.is_empty() || neighbor_cell.is_empty() {
                // no geometry to estimate from: identity placement
                neighbor_nucleus.clone()
            } else {
                let t = estimate_shift_scale(neighbor_cell, current_cell)?;
                apply_shift_scale(neighbor_nucleus, &t)
            }
        }
        WarpMode::MeanFlow => {
            let flow = flow_to_neighbor.ok_or(PropagateError::MissingFlow { from: 0, to: 0 })?;
            let (mu, mv) = mean_flow_translation(flow, current_cell)?;
            let constant = FlowField::constant(
                flow.width(),
                flow.height(),
                mu as f32,
                mv as f32,
                flow.direction(),
            );
            warp_mask_backward(neighbor_nucleus, &constant)?
        }
        WarpMode::PixelFlow => {
            let flow = flow_to_neighbor.ok_or(PropagateError::MissingFlow { from: 0, to: 0 })?;
            warp_mask_backward(neighbor_nucleus, flow)?
        }
    };
    Ok(warped.largest_component())
}

/// Combine candidate masks with certainty weights `exp(-ubar)`,
/// normalized to sum 1; a pixel is kept when the weighted average of the
/// indicators reaches 0.5.
pub fn fuse_masks(candidates: &[(Mask, f64)]) -> Result<Mask, PropagateError> {
    let (first, rest) = candidates.split_first().ok_or(PropagateError::NoCandidates)?;
    let mut weights = Vec::with_capacity(candidates.len());
    for (_, ubar) in candidates {
        if !ubar.is_finite() {
            return Err(PropagateError::NonFiniteWeight(*ubar));
        }
        weights.push((-ubar).exp());
    }
    let total: f64 = weights.iter().sum();
    let (w, h) = (first.0.width(), first.0.height());
    for (m, _) in rest {
        crate::grid::check_dims(w, h, m.width(), m.height())?;
    }
    let mut out = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for ((m, _), wgt) in candidates.iter().zip(&weights) {
                if m.get(x, y) {
                    acc += wgt;
                }
            }
            if acc / total >= 0.5 {
                out.set(x, y, true);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Per-track propagation
// ---------------------------------------------------------------------------

/// Visit order: ascending mean uncertainty, finite ties by frame index.
/// Frames with infinite uncertainty sort last, ordered by their distance
/// to the nearest finite-uncertainty frame so that gap runs fill inward
/// from their certain flank in a single pass, then by frame index.
fn visit_order(ubars: &[MeanValue]) -> Vec<usize> {
    let finite: Vec<usize> =
        (0..ubars.len()).filter(|&i| ubars[i].is_finite()).collect();
    let gap_rank = |i: usize| -> usize {
        finite.iter().map(|&j| i.abs_diff(j)).min().unwrap_or(usize::MAX)
    };
    let mut order: Vec<usize> = (0..ubars.len()).collect();
    order.sort_by(|&a, &b| {
        ubars[a]
            .as_f64()
            .total_cmp(&ubars[b].as_f64())
            .then_with(|| {
                if ubars[a].is_finite() {
                    a.cmp(&b)
                } else {
                    gap_rank(a).cmp(&gap_rank(b)).then(a.cmp(&b))
                }
            })
    });
    order
}

/// Propagate one track. `ubars` must align with the track's entries and
/// is updated in place as frames are repaired; `nucleus_labels` spans the
/// whole video and only this track's instance ids are modified.
pub fn propagate_track(
    track: &Track,
    ubars: &mut [MeanValue],
    nucleus_labels: &mut [LabelMap],
    cell_labels: &[LabelMap],
    flows: Option<&FlowSet>,
    cfg: &PropagationConfig,
) -> Result<Vec<UpdateRecord>, PropagateError> {
    cfg.validate()?;
    if ubars.len() != track.entries.len() {
        return Err(PropagateError::LengthMismatch);
    }
    let start = track.start_frame;
    let n = track.entries.len();
    let mut records = Vec::with_capacity(n);
    let order = visit_order(ubars);

    for local in order {
        let frame = start + local;
        let mut record = UpdateRecord {
            track_id: track.track_id,
            frame,
            instance_id: track.entries[local],
            action: UpdateAction::None,
            sources: Vec::new(),
            source_ubar: Vec::new(),
            target_ubar: ubars[local].as_f64(),
            nucleus_was_empty: !ubars[local].is_finite(),
        };
        let Some(target_id) = track.entries[local] else {
            records.push(record);
            continue;
        };
        let u_f = ubars[local];

        // hard threshold: a finite value below theta is left alone,
        // a missing nucleus always qualifies
        if cfg.update_scope == UpdateScope::UncertainOnly {
            if let MeanValue::Finite(v) = u_f {
                if v < cfg.theta {
                    records.push(record);
                    continue;
                }
            }
        }

        let neighbor = |local_n: Option<usize>| -> (Option<usize>, MeanValue) {
            match local_n {
                Some(i) if i < n => (Some(i), ubars[i]),
                _ => (None, MeanValue::Infinite),
            }
        };
        let (prev_local, u_prev) = neighbor(local.checked_sub(1));
        let (next_local, u_next) = neighbor(Some(local + 1));
        let prev_ok = u_prev.is_finite() && prev_local.is_some();
        let next_ok = u_next.is_finite() && next_local.is_some();

        // a relative test passes outright when the target has no nucleus
        let rel = |factor: f64, source: MeanValue| match u_f {
            MeanValue::Infinite => true,
            MeanValue::Finite(v) => factor * v >= source.as_f64(),
        };

        enum Branch {
            Two,
            Prev,
            Next,
        }
        let branch = match cfg.update_scope {
            UpdateScope::UncertainOnly => {
                if prev_ok && next_ok && rel(cfg.beta, u_prev) && rel(cfg.beta, u_next) {
                    Some(Branch::Two)
                } else if prev_ok && rel(cfg.alpha, u_prev) {
                    Some(Branch::Prev)
                } else if next_ok && rel(cfg.alpha, u_next) {
                    Some(Branch::Next)
                } else {
                    None
                }
            }
            UpdateScope::All => {
                if prev_ok && next_ok {
                    Some(Branch::Two)
                } else if prev_ok {
                    Some(Branch::Prev)
                } else if next_ok {
                    Some(Branch::Next)
                } else {
                    None
                }
            }
        };
        let Some(branch) = branch else {
            records.push(record);
            continue;
        };

        let current_cell = cell_labels[frame].mask_of(target_id);
        let warp_from = |source_local: usize| -> Result<Mask, PropagateError> {
            let source_frame = start + source_local;
            let source_id =
                track.entries[source_local].expect("finite uncertainty implies a present instance");
            let flow = match cfg.warp_mode {
                WarpMode::ShiftScale => None,
                _ => {
                    let f = if source_frame < frame {
                        flows.and_then(|s| s.to_prev(frame))
                    } else {
                        flows.and_then(|s| s.to_next(frame))
                    };
                    Some(f.ok_or(PropagateError::MissingFlow {
                        from: frame.min(source_frame),
                        to: frame.max(source_frame),
                    })?)
                }
            };
            warp_neighbor_mask(
                &current_cell,
                &cell_labels[source_frame].mask_of(source_id),
                &nucleus_labels[source_frame].mask_of(source_id),
                flow,
                cfg.warp_mode,
            )
        };

        let (new_mask, sources) = match branch {
            Branch::Two => {
                let prev_local = prev_local.unwrap();
                let next_local = next_local.unwrap();
                let wp = warp_from(prev_local)?;
                let wn = warp_from(next_local)?;
                let combined = if cfg.fuse {
                    fuse_masks(&[(wp, u_prev.as_f64()), (wn, u_next.as_f64())])?
                } else {
                    wp.union(&wn)?
                };
                (combined, vec![(prev_local, u_prev), (next_local, u_next)])
            }
            Branch::Prev => {
                let prev_local = prev_local.unwrap();
                (warp_from(prev_local)?, vec![(prev_local, u_prev)])
            }
            Branch::Next => {
                let next_local = next_local.unwrap();
                (warp_from(next_local)?, vec![(next_local, u_next)])
            }
        };
        // one nucleus per cell
        let new_mask = new_mask.largest_component();
        if new_mask.is_empty() {
            // the warp carried the source out of frame; nothing usable
            records.push(record);
            continue;
        }

        nucleus_labels[frame].replace_instance(target_id, &new_mask)?;
        let min_source = sources
            .iter()
            .map(|&(_, u)| u.as_f64())
            .fold(f64::INFINITY, f64::min);
        record.action = if record.nucleus_was_empty {
            UpdateAction::Interpolated
        } else {
            match branch {
                Branch::Two => UpdateAction::TwoSided,
                Branch::Prev => UpdateAction::OneSidedPrev,
                Branch::Next => UpdateAction::OneSidedNext,
            }
        };
        record.sources = sources.iter().map(|&(l, _)| start + l).collect();
        record.source_ubar = sources.iter().map(|&(_, u)| u.as_f64()).collect();
        ubars[local] = MeanValue::Finite(min_source);
        records.push(record);
    }

    records.sort_by_key(|r| r.frame);
    Ok(records)
}

// ---------------------------------------------------------------------------
// Whole-video driver
// ---------------------------------------------------------------------------

/// Everything a propagation run consumes.
pub struct PropagationInput<'a> {
    pub cell_labels: &'a [LabelMap],
    pub nucleus_labels: &'a [LabelMap],
    pub uncertainty: &'a [ScalarField],
    pub flows: Option<&'a FlowSet>,
}

/// Track, summarize and propagate a whole video.
///
/// Returns repaired nucleus label maps and the update log; cell labels
/// and everything outside this function's copies are untouched.
pub fn run_propagation(
    input: &PropagationInput<'_>,
    link_cfg: &LinkConfig,
    cfg: &PropagationConfig,
) -> Result<(Vec<LabelMap>, UpdateLog), PropagateError> {
    cfg.validate()?;
    let frames = input.cell_labels.len();
    if input.nucleus_labels.len() != frames || input.uncertainty.len() != frames {
        return Err(PropagateError::LengthMismatch);
    }
    if cfg.warp_mode != WarpMode::ShiftScale {
        match input.flows {
            None => return Err(PropagateError::MissingFlow { from: 0, to: 1 }),
            Some(set) => {
                if set.forward.len() + 1 < frames || set.backward.len() + 1 < frames {
                    let i = set.forward.len().min(set.backward.len());
                    return Err(PropagateError::MissingFlow { from: i, to: i + 1 });
                }
            }
        }
    }

    let tracks = build_tracks(input.cell_labels, link_cfg)?;
    let summary = summarize_uncertainty(&tracks, input.nucleus_labels, input.uncertainty)?;
    let mut nuclei = input.nucleus_labels.to_vec();
    let mut records = Vec::new();
    for (i, track) in tracks.iter().enumerate() {
        let mut ubars = summary.track_values(i).to_vec();
        records.extend(propagate_track(
            track,
            &mut ubars,
            &mut nuclei,
            input.cell_labels,
            input.flows,
            cfg,
        )?);
    }
    records.sort_by_key(|r| (r.track_id, r.frame));
    Ok((nuclei, UpdateLog { records }))
}
