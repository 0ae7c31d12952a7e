//! Pseudo-label generation and EM-objective tooling for object detection with
//! a small fully-annotated set and a large set of images that only carry
//! image-level labels.
//!
//! The crate covers:
//!
//! * [`geometry`] and [`suppression`]: boxes, IoU, greedy NMS and
//!   [`nms_group`](suppression::nms_group), which keeps suppressed boxes as
//!   ordered groups.
//! * [`pseudolabel`]: Random Pseudo-label Sampling and the deterministic
//!   threshold and one-per-label baselines.
//! * [`wsl`]: image-level label probabilities from proposal scores, their
//!   cross-entropy, and label attention with analytic gradients.
//! * [`em`]: brute-force evaluation of the hidden-assignment EM objective and
//!   its Monte-Carlo, max and threshold approximations.
//! * [`synth`]: synthetic scenes, a simulated detector and pseudo-label
//!   quality metrics.
//! * [`io`]: COCO-style annotation, detection and pseudo-label files.
//!
//! The `book/` directory of the repository has a narrative guide; its code
//! snippets are compiled as doctests of this crate.

pub mod em;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod pseudolabel;
pub mod seeding;
pub mod suppression;
pub mod synth;
pub mod wsl;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use model::{Category, Dataset, Detection, ImageRecord, Instance, WeakLabels};
pub use pseudolabel::{PseudoLabel, PseudoLabelSet, PseudoLabeler, RpsConfig, Strategy};

// `cargo test --doc` compiles and runs every snippet of the guide.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/rps.md")]
    mod rps {}
    #[doc = include_str!("../../../book/src/wsl.md")]
    mod wsl {}
    #[doc = include_str!("../../../book/src/em.md")]
    mod em {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
