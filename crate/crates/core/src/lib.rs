//! Template-guided human Gaussian splatting from a few calibrated views.
//!
//! A coarse human template is densified into prior points whose Gaussians
//! render any target view (stage 1). Depth rendered from those Gaussians is
//! then refined, unprojected into pixel-wise points, nudged by learned
//! offsets and turned into fine Gaussians (stage 2).
//!
//! Modules: [`geometry`] (cameras, depth, visibility), [`rasterizer`]
//! (differentiable splatting), [`networks`], [`prior`], [`refine`],
//! [`objective`] (losses and metrics), [`pipeline`] (training, checkpoints,
//! evaluation), [`dataio`] (synthetic scenes and their on-disk format) and
//! [`selftest`].

// NaN-rejecting `!(x > 0.0)` guards and index loops over small windows are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity, clippy::too_many_arguments)]

pub mod error;
pub mod geometry;
pub mod imagebuf;
pub mod rasterizer;
pub mod objective;
pub mod networks;
pub mod dataio;
pub mod prior;
pub mod refine;
pub mod pipeline;
pub mod selftest;
