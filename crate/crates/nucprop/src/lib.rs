//! Repair of unreliable per-frame nucleus segmentations in time-lapse
//! videos.
//!
//! Frame-by-frame segmenters fail when the structure they look for is
//! only intermittently visible — here, nuclei whose fluorescent signal
//! oscillates in and out over time. This crate scores every tracked
//! nucleus with its mean per-pixel uncertainty and propagates
//! motion-corrected masks from confident frames into uncertain ones:
//!
//! * [`grid`] — label maps, scalar/flow fields, pixel sets, IoU, entropy;
//! * [`warp`] — backward warping of masks and images;
//! * [`motion`] — shift+scale estimation, mean-flow translation, elastic
//!   deformation synthesis and flow inversion;
//! * [`tracker`] — overlap-based cell tracking;
//! * [`propagate`] — the uncertainty-ranked propagation algorithm;
//! * [`loss`] — the heteroscedastic cross-entropy training kernel;
//! * [`sim`] — a synthetic oscillating-cell video generator and
//!   segmentation degrader;
//! * [`metrics`] — category-wise IoU and average-precision evaluation;
//! * [`io`] — the on-disk dataset layout;
//! * [`cli`] — the `nucprop` command-line driver.
//!
//! The guide under `book/` walks through all of it chapter by chapter;
//! its code snippets compile and run as doc-tests of this crate.

pub mod cli;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod motion;
pub mod propagate;
pub mod rng;
pub mod sim;
pub mod tracker;
pub mod warp;

pub use grid::{FlowField, LabelMap, Mask, MeanValue, ProbMap, ScalarField};
pub use propagate::{PropagationConfig, UpdateAction, UpdateLog, UpdateScope, WarpMode};
pub use tracker::{LinkConfig, Track};

// Run every code block in the book as a doc-test so the guide can never
// drift from the API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(grids, "../../../book/src/grids.md");
    chapter!(motion, "../../../book/src/motion.md");
    chapter!(tracking, "../../../book/src/tracking.md");
    chapter!(propagation, "../../../book/src/propagation.md");
    chapter!(uncertainty, "../../../book/src/uncertainty.md");
    chapter!(simulation, "../../../book/src/simulation.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
}
