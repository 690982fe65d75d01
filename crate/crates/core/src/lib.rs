pub mod analysis;
pub mod autodiff;
pub mod block;
pub mod checkpoint;
pub mod error;
pub mod flops;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod patch_embed;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{Binder, GradMode, ParamId, ParamStore};
pub use tensor::Tensor;
