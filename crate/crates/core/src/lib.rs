//! Cross-scale vision transformer components on a small `f64` autodiff
//! engine: cross-scale embeddings, short/long distance grouped attention,
//! dynamic position bias, amplitude cooling layers and progressive group
//! sizes, plus parameter/FLOP accounting and activation diagnostics.

pub mod autograd;
pub mod cel;
pub mod diagnostics;
pub mod dpb;
pub mod error;
pub mod gradcheck;
pub mod lsda;
pub mod model;
pub mod params;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{ParamStore, SeededRng};
pub use tensor::Tensor;
