//! Image containers, file formats, exposure simulation, masks and degradation.

mod buffer;
pub mod degrade;
mod exposure;
mod io;
mod mask;

pub use buffer::{ColorSpace, ImageBuffer, ValueRange};
pub use degrade::{generate_degradation, DegradationSpec};
pub use exposure::{apply_exposure, ExposureSpec};
pub use io::{load_image, save_image};
pub use mask::{detect_unknown_mask, project_mask_to_latent, LatentMask, RegionMask, SaturationMode};
