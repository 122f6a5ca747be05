//! Dense f64 substrate: vectors and row-major matrices, a two-layer
//! perceptron with hand-written backward pass, Adam, a seeded random source
//! and a central-difference gradient checker.

mod adam;
mod gradcheck;
mod mlp;
mod params;
pub(crate) use params::join;
mod rng;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use mlp::{Activation, Mlp, MlpCache};
pub use params::Parameters;
pub use rng::{gumbel_from_uniform, RngCursor, SeededRng};
pub use tensor::{
    all_finite, axpy, cosine, dot, log_sigmoid, log_softmax, norm, sigmoid, softmax, Matrix,
};
