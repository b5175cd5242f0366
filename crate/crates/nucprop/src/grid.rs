//! Grid primitives: label maps, scalar/flow fields, pixel sets and the
//! per-instance statistics everything downstream is built from.
//!
//! Conventions used throughout the crate:
//!
//! * grids are row-major, `width * height` elements, pixel centers at
//!   integer coordinates `(x, y)` with `x` along the row;
//! * instance id `0` is background, nonzero ids name instances;
//! * stored field values are always finite — a missing instance is
//!   reported through [`MeanValue::Infinite`], never as a stored float.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by grid-level operations.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("data length {len} does not match {width}x{height}")]
    BadLength { len: usize, width: usize, height: usize },
    #[error("non-finite value at pixel index {0}")]
    NonFinite(usize),
    #[error("probability vector at pixel {pixel} sums to {sum}, expected 1")]
    NotNormalized { pixel: usize, sum: f64 },
    #[error("flow magnitude {found} exceeds declared bound {declared}")]
    FlowExceedsBound { found: f32, declared: f32 },
    #[error("probability map needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
}

pub(crate) fn check_dims(
    aw: usize,
    ah: usize,
    bw: usize,
    bh: usize,
) -> Result<(), GridError> {
    if aw != bw || ah != bh {
        return Err(GridError::DimensionMismatch(aw, ah, bw, bh));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// LabelMap
// ---------------------------------------------------------------------------

/// Per-frame grid of instance ids; `0` is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u32>,
}

impl LabelMap {
    /// All-background map.
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u32>) -> Result<Self, GridError> {
        if data.len() != width * height {
            return Err(GridError::BadLength { len: data.len(), width, height });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, id: u32) {
        self.data[y * self.width + x] = id;
    }

    /// Distinct nonzero ids in ascending order.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Pixel set of one instance.
    pub fn mask_of(&self, id: u32) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v != 0 && v == id).collect(),
        }
    }

    /// Clear every pixel carrying `id`, then stamp `id` over `mask`
    /// wherever the pixel is background or already `id`. Pixels owned by
    /// other instances are left alone.
    pub fn replace_instance(&mut self, id: u32, mask: &Mask) -> Result<(), GridError> {
        check_dims(self.width, self.height, mask.width, mask.height)?;
        for v in self.data.iter_mut() {
            if *v == id {
                *v = 0;
            }
        }
        for (v, &m) in self.data.iter_mut().zip(&mask.data) {
            if m && *v == 0 {
                *v = id;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ScalarField
// ---------------------------------------------------------------------------

/// Per-pixel grid of finite reals (images, uncertainty maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != width * height {
            return Err(GridError::BadLength { len: data.len(), width, height });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        debug_assert!(v.is_finite());
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at a real-valued position, clamping out-of-bounds
    /// coordinates to the nearest edge pixel.
    pub fn sample_bilinear_clamped(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.get(x0, y0);
        let v10 = self.get(x1, y0);
        let v01 = self.get(x0, y1);
        let v11 = self.get(x1, y1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }
}

// ---------------------------------------------------------------------------
// ProbMap
// ---------------------------------------------------------------------------

/// Per-pixel class pseudo-probability vectors (pixel-major layout).
#[derive(Debug, Clone)]
pub struct ProbMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Validates pixel-major `data` of length `width * height * classes`:
    /// entries nonnegative, each pixel summing to 1 within 1e-6.
    pub fn from_vec(
        width: usize,
        height: usize,
        classes: usize,
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        if classes < 2 {
            return Err(GridError::TooFewClasses(classes));
        }
        if data.len() != width * height * classes {
            return Err(GridError::BadLength { len: data.len(), width, height });
        }
        for (pixel, chunk) in data.chunks_exact(classes).enumerate() {
            let mut sum = 0.0f64;
            for &p in chunk {
                if !p.is_finite() || p < 0.0 {
                    return Err(GridError::NonFinite(pixel));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(GridError::NotNormalized { pixel, sum });
            }
        }
        Ok(Self { width, height, classes, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }
}

// ---------------------------------------------------------------------------
// FlowField
// ---------------------------------------------------------------------------

/// Dense motion field between two frames.
///
/// For a field with `direction = (a, b)`, the content at pixel `p` of
/// frame `a` sits at `p + (u(p), v(p))` in frame `b`; warping a grid that
/// lives on frame `b` with this field therefore produces frame `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
    direction: (usize, usize),
    max_magnitude: f32,
}

impl FlowField {
    pub fn zero(width: usize, height: usize, direction: (usize, usize)) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
            direction,
            max_magnitude: 0.0,
        }
    }

    /// Builds a field, checking finiteness and the declared magnitude bound.
    pub fn from_components(
        width: usize,
        height: usize,
        u: Vec<f32>,
        v: Vec<f32>,
        direction: (usize, usize),
        max_magnitude: f32,
    ) -> Result<Self, GridError> {
        if u.len() != width * height || v.len() != width * height {
            return Err(GridError::BadLength { len: u.len().max(v.len()), width, height });
        }
        let mut found = 0.0f32;
        for (i, (&du, &dv)) in u.iter().zip(&v).enumerate() {
            if !du.is_finite() || !dv.is_finite() {
                return Err(GridError::NonFinite(i));
            }
            found = found.max(du.abs()).max(dv.abs());
        }
        if found > max_magnitude {
            return Err(GridError::FlowExceedsBound { found, declared: max_magnitude });
        }
        Ok(Self { width, height, u, v, direction, max_magnitude })
    }

    /// Builds a field whose declared bound is the observed maximum component.
    pub fn from_components_auto_bound(
        width: usize,
        height: usize,
        u: Vec<f32>,
        v: Vec<f32>,
        direction: (usize, usize),
    ) -> Result<Self, GridError> {
        let bound = u
            .iter()
            .chain(&v)
            .fold(0.0f32, |acc, c| acc.max(c.abs()));
        Self::from_components(width, height, u, v, direction, bound)
    }

    /// Constant displacement everywhere.
    pub fn constant(
        width: usize,
        height: usize,
        du: f32,
        dv: f32,
        direction: (usize, usize),
    ) -> Self {
        Self {
            width,
            height,
            u: vec![du; width * height],
            v: vec![dv; width * height],
            direction,
            max_magnitude: du.abs().max(dv.abs()),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn direction(&self) -> (usize, usize) {
        self.direction
    }

    /// Same field retagged with a new frame-pair direction.
    pub fn with_direction(mut self, direction: (usize, usize)) -> Self {
        self.direction = direction;
        self
    }

    pub fn max_magnitude(&self) -> f32 {
        self.max_magnitude
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Bilinear sample of (u, v) at a real position, edge-clamped.
    pub fn sample_bilinear_clamped(&self, x: f64, y: f64) -> (f64, f64) {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let lerp2 = |g: &[f32]| {
            let v00 = g[y0 * self.width + x0] as f64;
            let v10 = g[y0 * self.width + x1] as f64;
            let v01 = g[y1 * self.width + x0] as f64;
            let v11 = g[y1 * self.width + x1] as f64;
            (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
        };
        (lerp2(&self.u), lerp2(&self.v))
    }
}

// ---------------------------------------------------------------------------
// Mask (pixel set)
// ---------------------------------------------------------------------------

/// A set of pixels on a fixed grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self, GridError> {
        if data.len() != width * height {
            return Err(GridError::BadLength { len: data.len(), width, height });
        }
        Ok(Self { width, height, data })
    }

    /// Mask from explicit pixel coordinates (out-of-range pixels are ignored).
    pub fn from_pixels(width: usize, height: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Self::new(width, height);
        for &(x, y) in pixels {
            if x < width && y < height {
                m.data[y * width + x] = true;
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn union(&self, other: &Mask) -> Result<Mask, GridError> {
        check_dims(self.width, self.height, other.width, other.height)?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask, GridError> {
        check_dims(self.width, self.height, other.width, other.height)?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }

    /// Mean pixel position; `None` for the empty set.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0f64, 0.0f64);
        for (x, y) in self.pixels() {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
        if n == 0 {
            None
        } else {
            Some((sx / n as f64, sy / n as f64))
        }
    }

    /// Morphological dilation with a square structuring element of the
    /// given radius (Chebyshev ball).
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let mut out = Mask::new(self.width, self.height);
        for (x, y) in self.pixels() {
            let (x, y) = (x as isize, y as isize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height
                    {
                        out.data[ny as usize * self.width + nx as usize] = true;
                    }
                }
            }
        }
        out
    }

    /// Morphological erosion with a square structuring element.
    pub fn erode(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let mut out = Mask::new(self.width, self.height);
        'pixel: for (x, y) in self.pixels() {
            let (x, y) = (x as isize, y as isize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0
                        || ny < 0
                        || nx as usize >= self.width
                        || ny as usize >= self.height
                        || !self.data[ny as usize * self.width + nx as usize]
                    {
                        continue 'pixel;
                    }
                }
            }
            out.data[y as usize * self.width + x as usize] = true;
        }
        out
    }

    /// Dilation followed by erosion (fills small holes and cracks).
    pub fn close(&self, radius: usize) -> Mask {
        self.dilate(radius).erode(radius)
    }

    /// 4-connected components, each a sorted list of row-major pixel indices.
    /// Components are ordered by their smallest pixel index.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.data.len()];
        let mut components = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || seen[start] {
                continue;
            }
            let mut stack = vec![start];
            let mut comp = Vec::new();
            seen[start] = true;
            while let Some(i) = stack.pop() {
                comp.push(i);
                let (x, y) = (i % self.width, i / self.width);
                let mut push = |j: usize| {
                    if self.data[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < self.width {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - self.width);
                }
                if y + 1 < self.height {
                    push(i + self.width);
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }
        components
    }

    /// Keep only the largest 4-connected component; ties go to the
    /// component containing the smallest row-major pixel index. Empty
    /// masks are returned unchanged.
    pub fn largest_component(&self) -> Mask {
        let comps = self.connected_components();
        if comps.len() <= 1 {
            return self.clone();
        }
        // components are ordered by first pixel, so max_by_key on size
        // keeps the earliest among ties
        let best = comps
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(_, c)| c)
            .unwrap();
        let mut out = Mask::new(self.width, self.height);
        for &i in best {
            out.data[i] = true;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Instance statistics
// ---------------------------------------------------------------------------

/// Area, centroid and tight bounding box of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub id: u32,
    pub area: usize,
    pub centroid: (f64, f64),
    /// Inclusive pixel bounds `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
}

/// Statistics for every distinct nonzero id, ascending by id.
pub fn instance_stats(labels: &LabelMap) -> Vec<InstanceStats> {
    use std::collections::BTreeMap;
    struct Acc {
        area: usize,
        sx: f64,
        sy: f64,
        bbox: (usize, usize, usize, usize),
    }
    let mut accs: BTreeMap<u32, Acc> = BTreeMap::new();
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            let id = labels.get(x, y);
            if id == 0 {
                continue;
            }
            let acc = accs.entry(id).or_insert(Acc {
                area: 0,
                sx: 0.0,
                sy: 0.0,
                bbox: (x, y, x, y),
            });
            acc.area += 1;
            acc.sx += x as f64;
            acc.sy += y as f64;
            acc.bbox.0 = acc.bbox.0.min(x);
            acc.bbox.1 = acc.bbox.1.min(y);
            acc.bbox.2 = acc.bbox.2.max(x);
            acc.bbox.3 = acc.bbox.3.max(y);
        }
    }
    accs.into_iter()
        .map(|(id, a)| InstanceStats {
            id,
            area: a.area,
            centroid: (a.sx / a.area as f64, a.sy / a.area as f64),
            bbox: a.bbox,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// IoU
// ---------------------------------------------------------------------------

/// Intersection over union of two pixel sets; 0 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64, GridError> {
    check_dims(a.width, a.height, b.width, b.height)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&pa, &pb) in a.data.iter().zip(&b.data) {
        if pa && pb {
            inter += 1;
        }
        if pa || pb {
            union += 1;
        }
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

// ---------------------------------------------------------------------------
// Entropy
// ---------------------------------------------------------------------------

/// Per-pixel entropy of class pseudo-probabilities, natural log,
/// with `0 * ln 0 = 0`.
pub fn entropy_map(p: &ProbMap) -> ScalarField {
    let mut out = Vec::with_capacity(p.width() * p.height());
    for pixel in 0..p.width() * p.height() {
        let mut h = 0.0f64;
        for &prob in p.pixel(pixel) {
            if prob > 0.0 {
                h -= prob * prob.ln();
            }
        }
        out.push(h.max(0.0));
    }
    ScalarField { width: p.width(), height: p.height(), data: out }
}

// ---------------------------------------------------------------------------
// Mean over instance
// ---------------------------------------------------------------------------

/// A summary value that is either finite or the missing-instance sentinel.
///
/// Orders as a real number with `Infinite` greater than every finite value;
/// this is the ordering nucleus propagation sorts by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanValue {
    Finite(f64),
    Infinite,
}

impl MeanValue {
    pub fn is_finite(self) -> bool {
        matches!(self, MeanValue::Finite(_))
    }

    /// The value as an `f64`, with `Infinite` mapping to `f64::INFINITY`.
    pub fn as_f64(self) -> f64 {
        match self {
            MeanValue::Finite(v) => v,
            MeanValue::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            MeanValue::Finite(v) => Some(v),
            MeanValue::Infinite => None,
        }
    }
}

impl PartialOrd for MeanValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.as_f64().total_cmp(&other.as_f64()))
    }
}

/// Mean of `field` over the pixels labelled `id`; `Infinite` when the
/// instance has no pixels.
pub fn mean_over_instance(
    field: &ScalarField,
    labels: &LabelMap,
    id: u32,
) -> Result<MeanValue, GridError> {
    check_dims(field.width, field.height, labels.width, labels.height)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (&v, &l) in field.data.iter().zip(&labels.data) {
        if l == id && id != 0 {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        Ok(MeanValue::Infinite)
    } else {
        Ok(MeanValue::Finite(sum / n as f64))
    }
}
