//! Speculative decoding with target-guided retrieval of the draft model's
//! KV cache, tree drafting, and hybrid (chunked prefix + masked tree)
//! attention, on tiny deterministic transformers.

pub mod attention;
pub mod drafting;
pub mod error;
pub mod harness;
pub mod kvcache;
pub mod model;
pub mod retrieval;
pub mod tensor;
pub mod verification;

pub use error::{Error, Result};
pub use kvcache::{CachePolicy, LayerKVCache};
pub use model::{Model, ModelSpec, Token, Weights};
pub use tensor::{Rng, Tensor};
