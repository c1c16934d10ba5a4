#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod histogram;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod sensor;
pub mod superres;

pub use error::{Error, Result};
