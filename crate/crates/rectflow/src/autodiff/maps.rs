//! Differentiable maps: the layer vocabulary and the MLP built from it.
//!
//! A `DifferentiableMap` is a batched function R^in -> R^out that can run in
//! four modes: plain evaluation, dual-number evaluation (forward-mode, one
//! tangent co-propagated per activation), and the taped versions of both.
//! The raw modes never allocate a tape; the taped modes record every step so
//! reverse sweeps can differentiate through them.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Forward-mode pair: value and directional derivative, both batched.
#[derive(Debug, Clone)]
pub struct DualValue {
    pub primal: Tensor,
    pub tangent: Tensor,
}

/// Taped forward-mode pair.
#[derive(Debug, Clone, Copy)]
pub struct DualVar {
    pub primal: Var,
    pub tangent: Var,
}

/// Tape handles for every parameter in a store, in registration order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Registers every parameter tensor on the tape. With
    /// `requires_grad = false` the parameters act as constants, which keeps
    /// reverse sweeps out of frozen subgraphs.
    pub fn bind(tape: &mut Tape, store: &ParamStore, requires_grad: bool) -> Binding {
        let vars = store
            .iter()
            .map(|(_, _, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

pub trait DifferentiableMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Batched evaluation, [n, in] -> [n, out].
    fn forward(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor>;

    /// Dual-number evaluation. Tangents ride along with primals layer by
    /// layer; nothing is retained behind the pair itself, so memory does not
    /// grow with depth.
    fn forward_dual(&self, params: &ParamStore, x: &DualValue) -> Result<DualValue>;

    /// Taped evaluation for reverse-mode differentiation.
    fn forward_taped(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var>;

    /// Taped dual evaluation: both the value and the tangent become tape
    /// nodes, so a reverse sweep can differentiate the tangent with respect
    /// to parameters.
    fn forward_dual_taped(&self, tape: &mut Tape, binding: &Binding, x: DualVar)
        -> Result<DualVar>;
}

/// One step of an MLP.
#[derive(Debug, Clone)]
pub enum MapLayer {
    /// y = x W^T + b.
    Affine { w: ParamId, b: ParamId },
    Tanh,
    Exp,
    /// Identity on values; kills gradients in both modes (reverse flow stops,
    /// forward tangent becomes zero).
    StopGradient,
}

/// A feed-forward stack over the layer vocabulary.
#[derive(Debug, Clone)]
pub struct Mlp {
    input_dim: usize,
    output_dim: usize,
    layers: Vec<MapLayer>,
}

impl Mlp {
    pub fn from_layers(input_dim: usize, output_dim: usize, layers: Vec<MapLayer>) -> Self {
        Mlp {
            input_dim,
            output_dim,
            layers,
        }
    }

    /// Builds affine/tanh/.../affine with the given hidden widths. Hidden
    /// affines are initialized uniform in +-1/sqrt(fan_in); when
    /// `zero_init_output` is set, the final affine starts at exactly zero so
    /// the whole map starts as the zero function.
    pub fn tanh_net(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        zero_init_output: bool,
    ) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(MapLayer::Affine {
                w: store.register(format!("{prefix}.w{i}"), uniform_init(rng, h, fan_in)),
                b: store.register(format!("{prefix}.b{i}"), uniform_init_vec(rng, h, fan_in)),
            });
            layers.push(MapLayer::Tanh);
            fan_in = h;
        }
        let k = hidden.len();
        let (w, b) = if zero_init_output {
            (
                Tensor::zeros(vec![output_dim, fan_in]),
                Tensor::zeros(vec![output_dim]),
            )
        } else {
            (
                uniform_init(rng, output_dim, fan_in),
                uniform_init_vec(rng, output_dim, fan_in),
            )
        };
        layers.push(MapLayer::Affine {
            w: store.register(format!("{prefix}.w{k}"), w),
            b: store.register(format!("{prefix}.b{k}"), b),
        });
        Mlp {
            input_dim,
            output_dim,
            layers,
        }
    }

    pub fn layers(&self) -> &[MapLayer] {
        &self.layers
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layers {
            if let MapLayer::Affine { w, b } = layer {
                ids.push(*w);
                ids.push(*b);
            }
        }
        ids
    }
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    )
}

fn uniform_init_vec(rng: &mut impl Rng, rows: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::vector((0..rows).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn affine_raw(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, i) = (x.rows(), x.cols());
    let o = w.rows();
    debug_assert_eq!(w.cols(), i);
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        let xrow = x.row(r);
        let orow = &mut out[r * o..(r + 1) * o];
        for (j, slot) in orow.iter_mut().enumerate() {
            let wrow = w.row(j);
            let mut acc = b.data()[j];
            for k in 0..i {
                acc += xrow[k] * wrow[k];
            }
            *slot = acc;
        }
    }
    Tensor::new(vec![n, o], out)
}

fn matvec_t_raw(t: &Tensor, w: &Tensor) -> Tensor {
    // t W^T, the bias-free tangent of an affine layer.
    let (n, i) = (t.rows(), t.cols());
    let o = w.rows();
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        let trow = t.row(r);
        let orow = &mut out[r * o..(r + 1) * o];
        for (j, slot) in orow.iter_mut().enumerate() {
            let wrow = w.row(j);
            let mut acc = 0.0;
            for k in 0..i {
                acc += trow[k] * wrow[k];
            }
            *slot = acc;
        }
    }
    Tensor::new(vec![n, o], out)
}

fn map_elems(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn finite_or(layer: usize, context: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { context, layer })
    }
}

impl DifferentiableMap for Mlp {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn forward(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.expect_batch(self.input_dim, "mlp forward")?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                MapLayer::Affine { w, b } => affine_raw(&cur, params.get(*w), params.get(*b)),
                MapLayer::Tanh => map_elems(&cur, f64::tanh),
                MapLayer::Exp => map_elems(&cur, f64::exp),
                MapLayer::StopGradient => cur,
            };
            finite_or(i, "mlp forward", &cur)?;
        }
        Ok(cur)
    }

    fn forward_dual(&self, params: &ParamStore, x: &DualValue) -> Result<DualValue> {
        x.primal.expect_batch(self.input_dim, "mlp dual forward")?;
        if x.primal.shape() != x.tangent.shape() {
            return Err(Error::ShapeMismatch {
                context: "mlp dual forward tangent",
                expected: x.primal.shape().to_vec(),
                got: x.tangent.shape().to_vec(),
            });
        }
        let mut p = x.primal.clone();
        let mut t = x.tangent.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                MapLayer::Affine { w, b } => {
                    let wt = params.get(*w);
                    t = matvec_t_raw(&t, wt);
                    p = affine_raw(&p, wt, params.get(*b));
                }
                MapLayer::Tanh => {
                    p = map_elems(&p, f64::tanh);
                    // dtanh = 1 - tanh^2, from the already-updated primal.
                    t = Tensor::new(
                        t.shape().to_vec(),
                        t.data()
                            .iter()
                            .zip(p.data())
                            .map(|(&tv, &pv)| tv * (1.0 - pv * pv))
                            .collect(),
                    );
                }
                MapLayer::Exp => {
                    p = map_elems(&p, f64::exp);
                    t = Tensor::new(
                        t.shape().to_vec(),
                        t.data()
                            .iter()
                            .zip(p.data())
                            .map(|(&tv, &pv)| tv * pv)
                            .collect(),
                    );
                }
                MapLayer::StopGradient => {
                    t = Tensor::zeros(t.shape().to_vec());
                }
            }
            finite_or(i, "mlp dual forward", &p)?;
        }
        Ok(DualValue {
            primal: p,
            tangent: t,
        })
    }

    fn forward_taped(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                MapLayer::Affine { w, b } => tape.linear(cur, binding.var(*w), binding.var(*b)),
                MapLayer::Tanh => tape.tanh(cur),
                MapLayer::Exp => tape.exp(cur),
                MapLayer::StopGradient => tape.stop_gradient(cur),
            };
            finite_or(i, "mlp taped forward", tape.value(cur))?;
        }
        Ok(cur)
    }

    fn forward_dual_taped(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: DualVar,
    ) -> Result<DualVar> {
        let mut p = x.primal;
        let mut t = x.tangent;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                MapLayer::Affine { w, b } => {
                    let wv = binding.var(*w);
                    t = tape.matmul_nt(t, wv);
                    p = tape.linear(p, wv, binding.var(*b));
                }
                MapLayer::Tanh => {
                    p = tape.tanh(p);
                    let p2 = tape.mul(p, p);
                    let dp = tape.affine_const(p2, -1.0, 1.0);
                    t = tape.mul(t, dp);
                }
                MapLayer::Exp => {
                    p = tape.exp(p);
                    t = tape.mul(t, p);
                }
                MapLayer::StopGradient => {
                    let zeros = Tensor::zeros(tape.value(t).shape().to_vec());
                    t = tape.constant(zeros);
                    p = tape.stop_gradient(p);
                }
            }
            finite_or(i, "mlp taped dual forward", tape.value(p))?;
        }
        Ok(DualVar {
            primal: p,
            tangent: t,
        })
    }
}

/// Column-selection helper shared by flows; exposed here so masked split and
/// merge stay part of the layer vocabulary.
pub fn indices(cols: impl IntoIterator<Item = usize>) -> Rc<[usize]> {
    Rc::from(cols.into_iter().collect::<Vec<usize>>())
}
