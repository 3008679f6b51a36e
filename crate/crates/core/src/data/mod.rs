//! Image I/O, bicubic degradation, datasets and fidelity metrics.

mod bicubic;
mod dataset;
mod metrics;
mod png_io;

pub use bicubic::{bicubic_downsample, bicubic_upsample, cubic, resize_weights};
pub use dataset::{make_synthetic_dataset, write_dataset, Dataset, DatasetManifest, ImagePair, BICUBIC};
pub use metrics::{lr_psnr, psnr, PSNR_CAP_DB};
pub use png_io::{load_png, save_png, save_png_with_text};
