//! Backward warping of masks and images by dense flow fields.
//!
//! Both warps read through the flow: output pixel `p` samples the input
//! at `p + (u(p), v(p))`. With the flow convention of
//! [`FlowField`](crate::grid::FlowField) this means the input grid lives
//! on the flow's *target* frame and the output is produced on its
//! *source* frame. Masks use nearest-neighbor sampling so label content
//! stays valid; out-of-bounds samples are unset. Images use bilinear
//! sampling with edge clamping.

use crate::grid::{check_dims, FlowField, GridError, Mask, ScalarField};

/// Nearest-neighbor backward warp of a pixel set.
pub fn warp_mask_backward(mask: &Mask, flow: &FlowField) -> Result<Mask, GridError> {
    check_dims(mask.width(), mask.height(), flow.width(), flow.height())?;
    let (w, h) = (mask.width(), mask.height());
    let mut out = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            let sx = (x as f64 + u as f64).round();
            let sy = (y as f64 + v as f64).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            if mask.get(sx as usize, sy as usize) {
                out.set(x, y, true);
            }
        }
    }
    Ok(out)
}

/// Bilinear backward warp of a scalar image.
pub fn warp_image_backward(img: &ScalarField, flow: &FlowField) -> Result<ScalarField, GridError> {
    check_dims(img.width(), img.height(), flow.width(), flow.height())?;
    let (w, h) = (img.width(), img.height());
    let mut out = ScalarField::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            let value = img.sample_bilinear_clamped(x as f64 + u as f64, y as f64 + v as f64);
            out.set(x, y, value);
        }
    }
    Ok(out)
}
