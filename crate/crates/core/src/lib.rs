//! Joint cloud removal and land-cover segmentation from cloudy multispectral and SAR
//! imagery, with prompt-guided fusion of the two modalities.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod layers;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pgf;
pub mod probe;
pub mod prompt;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
