//! Core of the in-silico bias trial engine: procedural phantoms, stationary
//! velocity field effect models, counterfactual dataset generation and the
//! subgroup disparity metrics used to score trained models.

pub mod deform;
pub mod error;
pub mod fairmetrics;
pub mod grid;
pub mod io;
pub mod phantom;
pub mod seeds;
pub mod simba_gen;

pub use error::{Error, Result};
pub use grid::{Dims, Grid};
pub use phantom::{build_phantom, region_mask, PhantomConfig, Region, RegionAtlas, RegionRole, TemplateVolume};
