//! Gaussian-splat rendering with plane-based depth, synthetic view
//! generation, dense correspondence labelling and alignment losses.

pub mod align;
pub mod augment;
pub mod error;
pub mod image;
pub mod io;
pub mod labeler;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod selfcheck;
pub mod sh;
pub mod synthetic;
pub mod types;
pub mod view_synth;

pub use error::{Error, Result};
pub use image::{DepthMap, GaussianMap, Image, RgbImage};
pub use render::{render_buffers, render_view, DepthMode, RenderSettings, RenderedView};
pub use types::{ActivatedPrimitive, CameraModel, GaussianPrimitive, GaussianScene};
