//! Dense tensors, reverse-mode differentiation, and the optimizer shared by
//! every training loop.

pub mod autograd;
pub mod gradcheck;
pub mod optim;
pub mod tensor;

pub use autograd::{sigmoid, Grads, Graph, Unary, Var};
pub use gradcheck::grad_check;
pub use optim::{adamw_step, AdamW, OptimizerState};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The single generator type threaded through every stochastic routine.
pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}
