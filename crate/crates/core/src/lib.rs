//! Matrix language models and the rank limits of their output head.
//!
//! A language model over `C` distinct contexts and `V` tokens is reduced to
//! context representations `H` (`C×D`) and a head `W` (`V×D`), trained on
//! next-token counts. The crate measures how much of the logit gradient the
//! head can pass back and verifies the related bounds numerically.

pub mod corpus;
pub mod diagnostics;
pub mod linalg;
pub mod matrix_lm;
pub mod theory;

pub use corpus::{Corpus, ContextTable, CorpusError, CountMatrix, TokenId};
pub use diagnostics::{CoefficientProfile, CompressionReport, DiagnosticsError, EfficiencyCurve, RankCurve};
pub use linalg::{LinalgError, Matrix, OrthonormalBasis};
pub use matrix_lm::{HeadWeights, ModelError, ModelParams, TrainConfig, Trajectory};
pub use theory::{TheoryError, VerificationResult};
