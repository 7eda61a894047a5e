//! Dense tensors, reverse-mode autodiff, a fixed-step RK4 integrator, a
//! finite-difference gradient checker and the checkpoint container.

mod checkpoint;
mod gemm;
mod gradcheck;
mod graph;
mod params;
mod rk4;
mod tensor;

pub use checkpoint::{
    decode_tensors, encode_tensors, load_tensors, save_tensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{BoundParams, ParamStore};
pub use rk4::rk4_integrate;
pub use tensor::Tensor;

/// Sinusoidal embedding of a scalar: `[cos(v·f_0..f_{h-1}), sin(v·f_0..f_{h-1})]`
/// with `f_i = max_period^(−i/h)` and `h = dim/2`.
pub fn sinusoidal_embedding(value: f64, dim: usize, max_period: f64) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (value * freq).cos();
        out[half + i] = (value * freq).sin();
    }
    Tensor::from_parts(vec![dim], out)
}
