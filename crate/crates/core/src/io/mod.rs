//! File formats: JSON configuration, binary weights, and binary PPM/PGM.

pub mod config;
pub mod pnm;
pub mod weights;

pub use config::{parse_config, ConfigFile};
pub use pnm::{read_ppm, write_pgm, GrayImage};
pub use weights::{load_weights, save_weights};
