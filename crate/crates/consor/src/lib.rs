//! Social relationship recognition over frozen dual-encoder features.
//!
//! The pipeline: a lightweight side adapter ingests per-layer frozen
//! encoder features through sigmoid-gated fusion; person-pair features
//! are refined by interpersonal self-attention and contextual
//! cross-attention over the patch grid; classification contrasts the
//! pair feature against assembled descriptive social prompts by cosine
//! similarity.
//!
//! All numeric code is generic over the scalar type ([`Scalar`]): train
//! in `f32`, verify gradients in `f64`. Concrete aliases for the common
//! instantiations live at the crate root.

pub mod cir;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod featurepack;
pub mod head;
pub mod model;
pub mod msat;
pub mod nn;
pub mod prompts;
pub mod scalar;
pub mod tape;
pub mod taxonomy;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision model, the training default.
pub type Model32 = model::Model<f32>;
/// Double-precision model, used by gradient verification.
pub type Model64 = model::Model<f64>;
pub type SyntheticProvider32 = encoder::SyntheticProvider<f32>;
pub type SyntheticProvider64 = encoder::SyntheticProvider<f64>;
pub type FixtureProvider32 = encoder::FixtureProvider<f32>;
pub type FixtureProvider64 = encoder::FixtureProvider<f64>;
pub type Trainer32<'a> = train::Trainer<'a, f32>;
pub type Trainer64<'a> = train::Trainer<'a, f64>;
