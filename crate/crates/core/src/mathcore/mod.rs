//! Dense tensors, reverse-mode differentiation, Adam and random streams.

mod adam;
mod rng;
mod store;
mod tape;
mod tensor;

pub use adam::Adam;
pub use rng::RngStream;
pub use store::{fmt_f64, to_json_pretty, ParamStore};
pub use tape::{dropout_mask, Gradients, Graph, Var};
pub use tensor::{add_row, affine, matmul, relu, sigmoid, sigmoid_scalar, Tensor};

/// Glorot-normal initialised `[fan_in × fan_out]` weight and zero bias.
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut RngStream,
) -> crate::Result<()> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.normal() * std).collect();
    store.insert(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], w)?)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}
