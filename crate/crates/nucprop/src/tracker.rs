//! Overlap-based cell tracking.
//!
//! Consecutive frames are linked by a maximum-weight bipartite matching on
//! pairwise instance IoU, with edges below a minimum IoU discarded. Matches
//! are chained into [`Track`]s; a track survives short detection dropouts
//! (up to the configured gap tolerance) by re-matching its last seen mask
//! against still-unclaimed instances of later frames.

use std::collections::HashMap;

use thiserror::Error;

use crate::grid::{check_dims, GridError, LabelMap, Mask};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("no frames to track")]
    NoFrames,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Linking parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkConfig {
    /// Minimum IoU for a link between consecutive frames.
    pub min_link_iou: f64,
    /// Consecutive absences a track survives before terminating.
    pub gap_tolerance: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { min_link_iou: 0.2, gap_tolerance: 2 }
    }
}

/// One cell's instance id per frame across the video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Track {
    pub track_id: usize,
    pub start_frame: usize,
    /// Instance id per frame from `start_frame`; `None` marks a frame where
    /// the cell went undetected (gap). First and last entries are present.
    pub entries: Vec<Option<u32>>,
}

impl Track {
    pub fn last_frame(&self) -> usize {
        self.start_frame + self.entries.len() - 1
    }

    /// Instance id at an absolute frame index, if within span and present.
    pub fn cell_at(&self, frame: usize) -> Option<u32> {
        if frame < self.start_frame || frame > self.last_frame() {
            return None;
        }
        self.entries[frame - self.start_frame]
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.start_frame..=self.last_frame()
    }
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

/// Square assignment problem, minimizing total cost; returns the column
/// assigned to each row. Hungarian algorithm with potentials, O(n^3).
fn solve_min_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based with a virtual column 0; p[j] = row matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Maximum-weight matching between two indexed sets given a dense weight
/// matrix (nonnegative weights; zero means no edge). Returns (i, j) pairs
/// with strictly positive weight.
fn max_weight_matching(na: usize, nb: usize, weight: &[f64]) -> Vec<(usize, usize)> {
    if na == 0 || nb == 0 {
        return Vec::new();
    }
    let n = na.max(nb);
    let top = weight.iter().cloned().fold(0.0f64, f64::max);
    // pad to square; cost = top - w so minimizing cost maximizes weight
    let mut cost = vec![top; n * n];
    for i in 0..na {
        for j in 0..nb {
            cost[i * n + j] = top - weight[i * nb + j];
        }
    }
    let assign = solve_min_assignment(n, &cost);
    let mut pairs = Vec::new();
    for (i, &j) in assign.iter().enumerate() {
        if i < na && j < nb && weight[i * nb + j] > 0.0 {
            pairs.push((i, j));
        }
    }
    pairs
}

// ---------------------------------------------------------------------------
// Frame linking
// ---------------------------------------------------------------------------

/// Per-pair IoU between the instances of two label maps, as a dense
/// matrix over (ids_a, ids_b).
fn overlap_matrix(a: &LabelMap, b: &LabelMap) -> (Vec<u32>, Vec<u32>, Vec<f64>) {
    let ids_a = a.ids();
    let ids_b = b.ids();
    let index_a: HashMap<u32, usize> = ids_a.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let index_b: HashMap<u32, usize> = ids_b.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut area_a = vec![0usize; ids_a.len()];
    let mut area_b = vec![0usize; ids_b.len()];
    let mut inter = vec![0usize; ids_a.len() * ids_b.len()];
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        if la != 0 {
            area_a[index_a[&la]] += 1;
        }
        if lb != 0 {
            area_b[index_b[&lb]] += 1;
        }
        if la != 0 && lb != 0 {
            inter[index_a[&la] * ids_b.len() + index_b[&lb]] += 1;
        }
    }
    let mut iou = vec![0.0f64; ids_a.len() * ids_b.len()];
    for i in 0..ids_a.len() {
        for j in 0..ids_b.len() {
            let x = inter[i * ids_b.len() + j];
            if x > 0 {
                let union = area_a[i] + area_b[j] - x;
                iou[i * ids_b.len() + j] = x as f64 / union as f64;
            }
        }
    }
    (ids_a, ids_b, iou)
}

/// Link the instances of two frames by maximum-weight IoU matching.
///
/// Edges with IoU below `cfg.min_link_iou` are removed before matching;
/// each instance appears in at most one returned pair. Pairs are sorted
/// by the first id.
pub fn link_frames(
    labels_a: &LabelMap,
    labels_b: &LabelMap,
    cfg: &LinkConfig,
) -> Result<Vec<(u32, u32)>, TrackError> {
    check_dims(labels_a.width(), labels_a.height(), labels_b.width(), labels_b.height())?;
    let (ids_a, ids_b, mut iou) = overlap_matrix(labels_a, labels_b);
    for w in iou.iter_mut() {
        if *w < cfg.min_link_iou {
            *w = 0.0;
        }
    }
    let mut pairs: Vec<(u32, u32)> = max_weight_matching(ids_a.len(), ids_b.len(), &iou)
        .into_iter()
        .map(|(i, j)| (ids_a[i], ids_b[j]))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Track building
// ---------------------------------------------------------------------------

struct ActiveTrack {
    track: usize,
    misses: usize,
    last_mask: Mask,
    last_id: u32,
}

/// Chain pairwise matches into tracks over the whole frame sequence.
///
/// Unmatched instances start new tracks; a track missing from a frame
/// records a gap and is matched against unclaimed instances of following
/// frames until the gap tolerance runs out. Deterministic in its inputs.
pub fn build_tracks(cell_labels: &[LabelMap], cfg: &LinkConfig) -> Result<Vec<Track>, TrackError> {
    let first = cell_labels.first().ok_or(TrackError::NoFrames)?;
    for frame in cell_labels {
        check_dims(first.width(), first.height(), frame.width(), frame.height())?;
    }

    let mut tracks: Vec<Track> = Vec::new();
    let mut active: Vec<ActiveTrack> = Vec::new();

    for id in first.ids() {
        active.push(ActiveTrack {
            track: tracks.len(),
            misses: 0,
            last_mask: first.mask_of(id),
            last_id: id,
        });
        tracks.push(Track { track_id: tracks.len(), start_frame: 0, entries: vec![Some(id)] });
    }

    for f in 1..cell_labels.len() {
        let frame = &cell_labels[f];
        let ids_new = frame.ids();
        let mut claimed: HashMap<u32, usize> = HashMap::new(); // new id -> active index

        // direct links from the previous frame
        let direct = link_frames(&cell_labels[f - 1], frame, cfg)?;
        let by_prev: HashMap<u32, u32> = direct.into_iter().collect();
        for (ai, act) in active.iter().enumerate() {
            if act.misses == 0 {
                if let Some(&new_id) = by_prev.get(&act.last_id) {
                    claimed.insert(new_id, ai);
                }
            }
        }

        // gap recovery: match stored masks of lapsed tracks against
        // instances nobody claimed
        let lapsed: Vec<usize> =
            (0..active.len()).filter(|&i| active[i].misses > 0).collect();
        let free: Vec<u32> =
            ids_new.iter().copied().filter(|id| !claimed.contains_key(id)).collect();
        if !lapsed.is_empty() && !free.is_empty() {
            let mut weight = vec![0.0f64; lapsed.len() * free.len()];
            for (r, &ai) in lapsed.iter().enumerate() {
                for (c, &id) in free.iter().enumerate() {
                    let v = crate::grid::iou(&active[ai].last_mask, &frame.mask_of(id))?;
                    if v >= cfg.min_link_iou {
                        weight[r * free.len() + c] = v;
                    }
                }
            }
            for (r, c) in max_weight_matching(lapsed.len(), free.len(), &weight) {
                claimed.insert(free[c], lapsed[r]);
            }
        }

        // extend claimed tracks
        let mut extended = vec![false; active.len()];
        for &id in &ids_new {
            if let Some(&ai) = claimed.get(&id) {
                let act = &mut active[ai];
                let t = &mut tracks[act.track];
                // fill the gap with explicit absences
                while t.start_frame + t.entries.len() < f {
                    t.entries.push(None);
                }
                t.entries.push(Some(id));
                act.misses = 0;
                act.last_mask = frame.mask_of(id);
                act.last_id = id;
                extended[ai] = true;
            }
        }

        // age out the rest
        let mut keep = Vec::with_capacity(active.len());
        for (ai, mut act) in active.drain(..).enumerate() {
            if extended[ai] {
                keep.push(act);
                continue;
            }
            act.misses += 1;
            if act.misses <= cfg.gap_tolerance {
                keep.push(act);
            }
        }
        active = keep;

        // unclaimed instances start new tracks
        for &id in &ids_new {
            if !claimed.contains_key(&id) {
                active.push(ActiveTrack {
                    track: tracks.len(),
                    misses: 0,
                    last_mask: frame.mask_of(id),
                    last_id: id,
                });
                tracks.push(Track {
                    track_id: tracks.len(),
                    start_frame: f,
                    entries: vec![Some(id)],
                });
            }
        }
    }

    Ok(tracks)
}
