//! Motion models for mask propagation and the elastic-deformation flow
//! synthesizer.
//!
//! Three motion models are supported downstream: a similarity transform
//! estimated between two pixel sets (shift + anisotropic scale), the mean
//! translation of a dense flow over a region, and the dense flow itself.
//! [`generate_elastic_flow`] produces the smooth random deformations used
//! both to animate the simulator and to synthesize flow training pairs.

use rand::Rng;
use thiserror::Error;

use crate::grid::{FlowField, GridError, Mask, ScalarField};
use crate::rng::stream_rng;
use crate::warp::warp_image_backward;

/// Bicubic interpolation can overshoot the control values; the declared
/// magnitude bound of a generated flow is `magnitude * BICUBIC_OVERSHOOT`.
pub const BICUBIC_OVERSHOOT: f64 = 1.5;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("pixel set is empty")]
    EmptySet,
    #[error("region is empty")]
    EmptyRegion,
    #[error("grid {width}x{height} is smaller than the {points}-point control grid")]
    GridTooSmall { width: usize, height: usize, points: usize },
    #[error("control grid needs at least 2 points per axis, got {0}")]
    TooFewControlPoints(usize),
    #[error("deformation magnitude must be nonnegative, got {0}")]
    NegativeMagnitude(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
}

// ---------------------------------------------------------------------------
// Shift + scale
// ---------------------------------------------------------------------------

/// Translation plus anisotropic scaling about a pivot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub tx: f64,
    pub ty: f64,
    pub sx: f64,
    pub sy: f64,
    /// Scaling pivot (the source centroid when estimated).
    pub center: (f64, f64),
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { tx: 0.0, ty: 0.0, sx: 1.0, sy: 1.0, center: (0.0, 0.0) }
    }
}

fn central_moments(mask: &Mask) -> Option<((f64, f64), (f64, f64))> {
    let (cx, cy) = mask.centroid()?;
    let mut vx = 0.0f64;
    let mut vy = 0.0f64;
    let mut n = 0usize;
    for (x, y) in mask.pixels() {
        vx += (x as f64 - cx) * (x as f64 - cx);
        vy += (y as f64 - cy) * (y as f64 - cy);
        n += 1;
    }
    Some(((cx, cy), (vx / n as f64, vy / n as f64)))
}

/// Estimate the shift and scaling between two pixel sets.
///
/// The shift is the centroid difference; per-axis scales are the ratios of
/// the coordinate standard deviations (second central moments). Degenerate
/// axes (zero variance in either set) fall back to scale 1.
pub fn estimate_shift_scale(src: &Mask, dst: &Mask) -> Result<SimilarityTransform, MotionError> {
    let ((scx, scy), (svx, svy)) = central_moments(src).ok_or(MotionError::EmptySet)?;
    let ((dcx, dcy), (dvx, dvy)) = central_moments(dst).ok_or(MotionError::EmptySet)?;
    let scale = |sv: f64, dv: f64| {
        if sv < 1e-12 || dv < 1e-12 {
            1.0
        } else {
            (dv / sv).sqrt()
        }
    };
    Ok(SimilarityTransform {
        tx: dcx - scx,
        ty: dcy - scy,
        sx: scale(svx, dvx),
        sy: scale(svy, dvy),
        center: (scx, scy),
    })
}

/// Apply a similarity transform to a pixel set by inverse mapping with
/// nearest-neighbor sampling; pixels mapping out of bounds are dropped.
pub fn apply_shift_scale(mask: &Mask, t: &SimilarityTransform) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Mask::new(w, h);
    let (cx, cy) = t.center;
    for y in 0..h {
        for x in 0..w {
            let px = cx + (x as f64 - t.tx - cx) / t.sx;
            let py = cy + (y as f64 - t.ty - cy) / t.sy;
            let sx = px.round();
            let sy = py.round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            if mask.get(sx as usize, sy as usize) {
                out.set(x, y, true);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Mean flow
// ---------------------------------------------------------------------------

/// Arithmetic mean of the flow vectors over a region.
pub fn mean_flow_translation(flow: &FlowField, region: &Mask) -> Result<(f64, f64), MotionError> {
    crate::grid::check_dims(flow.width(), flow.height(), region.width(), region.height())
        .map_err(MotionError::Grid)?;
    let mut su = 0.0f64;
    let mut sv = 0.0f64;
    let mut n = 0usize;
    for (x, y) in region.pixels() {
        let (u, v) = flow.at(x, y);
        su += u as f64;
        sv += v as f64;
        n += 1;
    }
    if n == 0 {
        return Err(MotionError::EmptyRegion);
    }
    Ok((su / n as f64, sv / n as f64))
}

// ---------------------------------------------------------------------------
// Elastic deformation
// ---------------------------------------------------------------------------

/// Parameters of a random smooth deformation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeformationSpec {
    /// Control points per axis (k >= 2).
    pub control_points: usize,
    /// Maximum control displacement in pixels.
    pub magnitude: f64,
    pub seed: u64,
}

impl DeformationSpec {
    pub fn validate(&self) -> Result<(), MotionError> {
        if self.control_points < 2 {
            return Err(MotionError::TooFewControlPoints(self.control_points));
        }
        if self.magnitude < 0.0 {
            return Err(MotionError::NegativeMagnitude(self.magnitude));
        }
        Ok(())
    }
}

/// Catmull-Rom weights for fractional position `t` in [0, 1].
fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Bicubic evaluation of a k x k control grid at grid coordinates
/// (gx, gy) in [0, k-1], replicating edge control points.
fn bicubic(control: &[f64], k: usize, gx: f64, gy: f64) -> f64 {
    let ix = (gx.floor() as isize).clamp(0, k as isize - 2);
    let iy = (gy.floor() as isize).clamp(0, k as isize - 2);
    let wx = catmull_rom(gx - ix as f64);
    let wy = catmull_rom(gy - iy as f64);
    let clamp = |i: isize| i.clamp(0, k as isize - 1) as usize;
    let mut acc = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        let row = clamp(iy - 1 + j as isize);
        let mut racc = 0.0;
        for (i, wxi) in wx.iter().enumerate() {
            let col = clamp(ix - 1 + i as isize);
            racc += wxi * control[row * k + col];
        }
        acc += wyj * racc;
    }
    acc
}

/// Fraction of the control-point spacing a displacement may reach.
/// Keeping displacements below this budget bounds the field gradient
/// well under 1, so the deformation cannot fold and the fixed-point
/// inverse converges in a handful of iterations at any grid size.
const SPACING_BUDGET: f64 = 0.2;

/// Generate a smooth random deformation field.
///
/// Draws a `k x k` grid of control displacements i.i.d. uniform in
/// `[-magnitude, magnitude]` per axis from the seed in `spec` and upsamples
/// to full resolution with bicubic interpolation. Displacements are
/// rescaled when the magnitude exceeds the invertibility budget of the
/// control spacing. Deterministic per `(spec, width, height)`. The field
/// direction is `(0, 1)`.
pub fn generate_elastic_flow(
    spec: &DeformationSpec,
    width: usize,
    height: usize,
) -> Result<FlowField, MotionError> {
    spec.validate()?;
    let k = spec.control_points;
    if width < k || height < k {
        return Err(MotionError::GridTooSmall { width, height, points: k });
    }
    let m = spec.magnitude;
    let spacing = (width.min(height) - 1) as f64 / (k - 1) as f64;
    let scale = if m > 0.0 { (SPACING_BUDGET * spacing / m).min(1.0) } else { 0.0 };
    let mut rng = stream_rng(spec.seed, 0);
    let mut cu = vec![0.0f64; k * k];
    let mut cv = vec![0.0f64; k * k];
    for i in 0..k * k {
        if m > 0.0 {
            cu[i] = rng.random_range(-m..=m) * scale;
            cv[i] = rng.random_range(-m..=m) * scale;
        }
    }
    let gx_scale = (k - 1) as f64 / (width - 1) as f64;
    let gy_scale = (k - 1) as f64 / (height - 1) as f64;
    let mut u = Vec::with_capacity(width * height);
    let mut v = Vec::with_capacity(width * height);
    for y in 0..height {
        let gy = y as f64 * gy_scale;
        for x in 0..width {
            let gx = x as f64 * gx_scale;
            u.push(bicubic(&cu, k, gx, gy) as f32);
            v.push(bicubic(&cv, k, gx, gy) as f32);
        }
    }
    FlowField::from_components(width, height, u, v, (0, 1), (m * BICUBIC_OVERSHOOT) as f32)
        .map_err(MotionError::Grid)
}

// ---------------------------------------------------------------------------
// Flow inversion
// ---------------------------------------------------------------------------

/// Approximate the inverse of a flow field by fixed-point iteration
/// `g_{n+1}(p) = -f(p + g_n(p))`, starting from zero. The returned field
/// has the reversed direction.
pub fn invert_flow(flow: &FlowField, iterations: usize) -> FlowField {
    let (w, h) = (flow.width(), flow.height());
    let mut gu = vec![0.0f64; w * h];
    let mut gv = vec![0.0f64; w * h];
    for _ in 0..iterations {
        let mut nu = vec![0.0f64; w * h];
        let mut nv = vec![0.0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (fu, fv) =
                    flow.sample_bilinear_clamped(x as f64 + gu[i], y as f64 + gv[i]);
                nu[i] = -fu;
                nv[i] = -fv;
            }
        }
        gu = nu;
        gv = nv;
    }
    let (a, b) = flow.direction();
    FlowField::from_components_auto_bound(
        w,
        h,
        gu.iter().map(|&x| x as f32).collect(),
        gv.iter().map(|&x| x as f32).collect(),
        (b, a),
    )
    .expect("inverse flow is finite")
}

// ---------------------------------------------------------------------------
// Flow pair synthesis
// ---------------------------------------------------------------------------

/// Create a training pair for flow estimation: a random smooth flow and
/// the image warped backward by it. By construction
/// `warp_image_backward(img, flow)` reproduces `prev` exactly.
pub fn synthesize_flow_pair(
    img: &ScalarField,
    spec: &DeformationSpec,
) -> Result<(ScalarField, FlowField), MotionError> {
    let flow = generate_elastic_flow(spec, img.width(), img.height())?;
    let prev = warp_image_backward(img, &flow).map_err(MotionError::Grid)?;
    Ok((prev, flow))
}
