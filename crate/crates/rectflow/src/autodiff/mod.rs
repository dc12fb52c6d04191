//! Minimal automatic differentiation engine.
//!
//! Built around three entry points over [`DifferentiableMap`]s:
//!
//! * [`jvp`]: forward mode. Implemented by co-propagating one tangent per
//!   activation as a dual number, never by nesting reverse sweeps, so a
//!   Jacobian-vector product costs one forward pass and retains nothing.
//! * [`vjp`]: reverse mode over a throwaway tape.
//! * [`param_grad`]: reverse mode over a caller-owned tape, returning
//!   gradients for every registered parameter (zero where the loss does not
//!   reach a parameter).
//!
//! `stop_gradient` is available both as a tape op ([`Tape::stop_gradient`])
//! and as a layer ([`MapLayer::StopGradient`]); it passes values through and
//! blocks derivatives in both modes.

pub mod maps;
pub mod params;
pub mod tape;
pub mod tensor;

pub use maps::{indices, Binding, DifferentiableMap, DualValue, DualVar, MapLayer, Mlp};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Evaluates the map on a batch, with input validation and the non-finite
/// check the map performs per layer.
pub fn evaluate(
    map: &dyn DifferentiableMap,
    params: &ParamStore,
    input: &Tensor,
) -> Result<Tensor> {
    input.expect_batch(map.input_dim(), "evaluate input")?;
    map.forward(params, input)
}

/// Jacobian-vector product: returns f(x) and J[f](x) tangent in one
/// dual-number pass.
pub fn jvp(
    map: &dyn DifferentiableMap,
    params: &ParamStore,
    input: &Tensor,
    tangent: &Tensor,
) -> Result<DualValue> {
    input.expect_batch(map.input_dim(), "jvp input")?;
    if tangent.shape() != input.shape() {
        return Err(Error::ShapeMismatch {
            context: "jvp tangent",
            expected: input.shape().to_vec(),
            got: tangent.shape().to_vec(),
        });
    }
    map.forward_dual(
        params,
        &DualValue {
            primal: input.clone(),
            tangent: tangent.clone(),
        },
    )
}

/// Vector-Jacobian product: cotangent^T J[f](x), computed by one reverse
/// sweep over a scratch tape. Parameters enter as constants, so the sweep
/// touches only the input path.
pub fn vjp(
    map: &dyn DifferentiableMap,
    params: &ParamStore,
    input: &Tensor,
    cotangent: &Tensor,
) -> Result<Tensor> {
    input.expect_batch(map.input_dim(), "vjp input")?;
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, params, false);
    let x = tape.leaf(input.clone(), true);
    let y = map.forward_taped(&mut tape, &binding, x)?;
    if cotangent.shape() != tape.value(y).shape() {
        return Err(Error::ShapeMismatch {
            context: "vjp cotangent",
            expected: tape.value(y).shape().to_vec(),
            got: cotangent.shape().to_vec(),
        });
    }
    let sweep = tape.backward_with_stops(y, cotangent.clone(), &[x]);
    Ok(match sweep.get(x) {
        Some(g) => tape.value(g).clone(),
        // Output does not depend on the input (e.g. behind stop_gradient).
        None => Tensor::zeros(input.shape().to_vec()),
    })
}

/// Gradients of a recorded scalar loss with respect to every parameter in
/// the store. Parameters the loss never touches get zero tensors of the
/// right shape.
pub fn param_grad(
    tape: &mut Tape,
    loss: Var,
    binding: &Binding,
    store: &ParamStore,
) -> Result<ParamStore> {
    if tape.value(loss).numel() != 1 {
        return Err(Error::invalid(format!(
            "param_grad expects a scalar loss, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let seed = Tensor::new(tape.value(loss).shape().to_vec(), vec![1.0]);
    let sweep = tape.backward(loss, seed);
    let mut grads = store.zeros_like();
    for id in store.ids() {
        if let Some(g) = sweep.get(binding.var(id)) {
            *grads.get_mut(id) = tape.value(g).clone();
        }
    }
    Ok(grads)
}
