//! Minimal differentiable substrate: dense/conv/deconv nets with hand-written
//! backward passes, batchnorm, Adam, seeded sampling and a checkpoint format.

mod checkpoint;
mod error;
mod net;
mod params;
mod rng;
mod spec;
mod tensor;

pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_VERSION};
pub use error::{NnError, Result};
pub use net::{sigmoid, softmax_rows, softplus, Mode, Net, NetCache};
pub use params::{AdamConfig, Param, ParamId, ParamStore};
pub use rng::{reparameterize, sample_gaussian, SeededRng};
pub use spec::{LayerSpec, NetSpec, Shape};
pub use tensor::{gemm, Matrix, Scalar, Trans};
