//! Bundled example data.

use crate::data::{load_dataset, Dataset, LoadOptions, ModelSpec};
use crate::error::Result;

/// Reaction times (ms) of 18 subjects over 10 days of sleep restriction
/// (Belenky et al., 2003), as distributed with the R package lme4.
/// Columns: `Reaction`, `Days`, `Subject`.
pub const SLEEPSTUDY_CSV: &str = include_str!("../data/sleepstudy.csv");

/// `Reaction ~ Days + (Days | Subject)`.
pub fn sleepstudy_spec() -> ModelSpec {
    ModelSpec::new("Reaction", "Subject").fixed(["Days"]).random(["Days"])
}

pub fn sleepstudy(spec: &ModelSpec) -> Result<Dataset> {
    load_dataset(SLEEPSTUDY_CSV.as_bytes(), spec, &LoadOptions::default())
}
