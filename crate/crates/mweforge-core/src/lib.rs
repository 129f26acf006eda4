//! Desk-scale laboratory for multilingual verbal multiword-expression (VMWE)
//! identification.
//!
//! The crate is organised around the training pipeline:
//!
//! - [`cupt`] parses and writes PARSEME `.cupt` corpora (CoNLL-U Plus with a
//!   trailing MWE column) and computes corpus statistics.
//! - [`tagging`] converts between span annotations and per-token label
//!   sequences (IOB with per-category suffixes plus a gap label).
//! - [`tensor`] and [`tape`] provide dense tensors and tape-based
//!   reverse-mode automatic differentiation, including custom-gradient nodes.
//! - [`layers`] implements the neural pieces: a lateral-inhibition gate with
//!   a surrogate backward pass, a gradient-reversal layer, linear token
//!   heads, a language discriminator, and a small trainable encoder.
//! - [`train`] runs monolingual and multilingual training with optional
//!   lateral inhibition and language-adversarial updates, using Adam.
//! - [`eval`] scores predictions with strict MWE matching, globally and on
//!   the unseen partition, and computes improvement deltas.
//! - [`synth`] generates seeded synthetic corpora with controllable
//!   seen/unseen structure for end-to-end experiments.
//! - [`verify`] bundles the gradient and invariant checks exposed by the
//!   `gradcheck` command.
//!
//! Numeric code is generic over the scalar type (see [`Scalar`]); the
//! aliases below fix the default double-precision instantiation used by the
//! training and evaluation front ends.

pub mod cupt;
pub mod diag;
pub mod eval;
pub mod layers;
pub mod synth;
pub mod tagging;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

mod scalar;

pub use diag::Diagnostic;
pub use scalar::Scalar;

/// Default scalar type for training, evaluation, and the CLI.
pub type Real = f64;

/// Dense tensor over the default scalar.
pub type Tensor = tensor::Tensor<Real>;

/// Autodiff tape over the default scalar.
pub type Tape = tape::Tape<Real>;

/// Full model (encoder + lateral inhibition + head + discriminator) over the
/// default scalar.
pub type Model = layers::Model<Real>;
