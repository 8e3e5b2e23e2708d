//! Domain-adaptive semantic segmentation with a frozen transformer core,
//! trainable adapters and three jointly optimized objectives: supervised
//! cross-entropy, normalized target entropy and source-to-target masked
//! reconstruction.

pub mod error;
pub mod evalmetrics;
pub mod insight;
pub mod mat;
pub mod net;
pub mod objectives;
pub mod par;
pub mod patchseq;
pub mod raster;
pub mod synthgeo;
pub mod tensorstore;
pub mod trainer;

pub use error::{Error, Result};
pub use mat::{Mat, Scalar};
pub use raster::{ImageTensor, LabelMask, IGNORE};
