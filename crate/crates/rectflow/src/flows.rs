//! Bijective (square) normalizing flows.
//!
//! RealNVP-style affine coupling layers with alternating half masks, fixed
//! permutation layers, and elementwise affine layers, composed into a
//! [`SquareFlow`]. Every layer carries an analytic inverse and an analytic
//! per-sample log-determinant, evaluated in whichever direction is being
//! run. Couplers are plain tanh MLPs; no normalization layers appear
//! anywhere, so each sample's Jacobian depends on that sample alone and the
//! log-determinant sums cleanly per example.
//!
//! Initialization: the final affine of every coupler starts at zero, so a
//! freshly built flow is exactly the identity with log-determinant zero.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{
    indices, Binding, DifferentiableMap, DualValue, DualVar, Mlp, ParamId, ParamStore,
    Tape, Tensor, Var,
};
use crate::error::{Error, Result};

/// Isotropic unit Gaussian base distribution in `dim` dimensions.
#[derive(Debug, Clone)]
pub struct StandardGaussian {
    dim: usize,
}

const LN_2PI: f64 = 1.8378770664093453;

impl StandardGaussian {
    pub fn new(dim: usize) -> Self {
        StandardGaussian { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-sample log density, [n, d] -> [n].
    pub fn log_prob(&self, z: &Tensor) -> Result<Tensor> {
        z.expect_batch(self.dim, "gaussian log_prob")?;
        let n = z.rows();
        let c = -0.5 * self.dim as f64 * LN_2PI;
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let sq: f64 = z.row(r).iter().map(|v| v * v).sum();
            out.push(c - 0.5 * sq);
        }
        Ok(Tensor::vector(out))
    }

    pub fn log_prob_taped(&self, tape: &mut Tape, z: Var) -> Var {
        let sq = tape.row_dot(z, z);
        tape.affine_const(sq, -0.5, -0.5 * self.dim as f64 * LN_2PI)
    }

    /// n independent draws, one batch row each. Sampling order is row-major,
    /// so a fixed seed gives a bit-identical tensor.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Tensor {
        let data = (0..n * self.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![n, self.dim], data)
    }
}

/// Affine coupling: coordinates `in_idx` pass through unchanged and drive a
/// coupler MLP that emits a shift and an unconstrained log-scale for the
/// `out_idx` coordinates. Scale is exp(log-scale), so it is positive by
/// construction and the log-determinant is the sum of log-scales.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    in_idx: Rc<[usize]>,
    out_idx: Rc<[usize]>,
    coupler: Mlp,
}

impl CouplingLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        in_idx: Vec<usize>,
        out_idx: Vec<usize>,
        hidden: &[usize],
    ) -> Self {
        assert!(!in_idx.is_empty() && !out_idx.is_empty(), "coupling needs both mask halves");
        let coupler = Mlp::tanh_net(
            store,
            rng,
            prefix,
            in_idx.len(),
            hidden,
            2 * out_idx.len(),
            true, // zero-init output: identity at start
        );
        CouplingLayer {
            in_idx: indices(in_idx),
            out_idx: indices(out_idx),
            coupler,
        }
    }

    pub fn in_indices(&self) -> &[usize] {
        &self.in_idx
    }

    pub fn out_indices(&self) -> &[usize] {
        &self.out_idx
    }

    pub fn coupler(&self) -> &Mlp {
        &self.coupler
    }

    /// Shift and log-scale rows for the conditioning coordinates.
    fn shift_logscale(&self, params: &ParamStore, xin: &Tensor) -> Result<(Tensor, Tensor)> {
        let k = self.out_idx.len();
        let st = self.coupler.forward(params, xin)?;
        let n = st.rows();
        let mut shift = Vec::with_capacity(n * k);
        let mut ls = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = st.row(r);
            shift.extend_from_slice(&row[..k]);
            ls.extend_from_slice(&row[k..]);
        }
        Ok((
            Tensor::new(vec![n, k], shift),
            Tensor::new(vec![n, k], ls),
        ))
    }
}

/// One step of a square flow.
#[derive(Debug, Clone)]
pub enum FlowLayer {
    Coupling(CouplingLayer),
    /// y[j] = x[perm[j]]; a fixed relabeling with log-determinant zero.
    Permutation { perm: Rc<[usize]> },
    /// y = x * exp(log_scale) + shift, elementwise over coordinates.
    DiagAffine { log_scale: ParamId, shift: ParamId },
}

/// A bijection on R^dim given as a stack of layers.
#[derive(Debug, Clone)]
pub struct SquareFlow {
    dim: usize,
    layers: Vec<FlowLayer>,
}

fn gather_raw(x: &Tensor, idx: &[usize]) -> Tensor {
    let n = x.rows();
    let mut out = Vec::with_capacity(n * idx.len());
    for r in 0..n {
        let row = x.row(r);
        out.extend(idx.iter().map(|&c| row[c]));
    }
    Tensor::new(vec![n, idx.len()], out)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

impl SquareFlow {
    /// The empty stack: an exact identity with log-determinant zero.
    pub fn identity(dim: usize) -> Self {
        SquareFlow { dim, layers: vec![] }
    }

    pub fn from_layers(dim: usize, layers: Vec<FlowLayer>) -> Self {
        SquareFlow { dim, layers }
    }

    /// Standard RealNVP stack: `num_couplings` affine couplings whose masks
    /// alternate between the first ceil(dim/2) coordinates and their
    /// complement. With `permute` set, a seeded random permutation is
    /// inserted between consecutive couplings for extra mixing (useful past
    /// a few dimensions; it makes the initial flow a fixed permutation
    /// rather than the identity).
    pub fn realnvp(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
        num_couplings: usize,
        hidden: &[usize],
        permute: bool,
    ) -> Self {
        assert!(dim >= 2, "coupling flows need at least two coordinates");
        let half = dim.div_ceil(2);
        let first: Vec<usize> = (0..half).collect();
        let second: Vec<usize> = (half..dim).collect();
        let mut layers = Vec::new();
        for l in 0..num_couplings {
            if permute && l > 0 {
                let mut perm: Vec<usize> = (0..dim).collect();
                perm.shuffle(rng);
                layers.push(FlowLayer::Permutation { perm: indices(perm) });
            }
            let (a, b) = if l % 2 == 0 {
                (first.clone(), second.clone())
            } else {
                (second.clone(), first.clone())
            };
            layers.push(FlowLayer::Coupling(CouplingLayer::new(
                store,
                rng,
                &format!("{prefix}.c{l}"),
                a,
                b,
                hidden,
            )));
        }
        SquareFlow { dim, layers }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layers {
            match layer {
                FlowLayer::Coupling(c) => ids.extend(c.coupler.param_ids()),
                FlowLayer::Permutation { .. } => {}
                FlowLayer::DiagAffine { log_scale, shift } => {
                    ids.push(*log_scale);
                    ids.push(*shift);
                }
            }
        }
        ids
    }

    /// x -> (f(x), log |det J[f]|(x)), batched.
    pub fn forward(&self, params: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        x.expect_batch(self.dim, "flow forward")?;
        let n = x.rows();
        let mut cur = x.clone();
        let mut logdet = vec![0.0; n];
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                FlowLayer::Coupling(c) => {
                    let xin = gather_raw(&cur, &c.in_idx);
                    let (shift, ls) = c.shift_logscale(params, &xin)?;
                    let mut next = cur.clone();
                    for r in 0..n {
                        let sr = shift.row(r);
                        let lr = ls.row(r);
                        let row = next.data_mut();
                        for (j, &col) in c.out_idx.iter().enumerate() {
                            let v = row[r * self.dim + col];
                            row[r * self.dim + col] = v * lr[j].exp() + sr[j];
                            logdet[r] += lr[j];
                        }
                    }
                    cur = next;
                }
                FlowLayer::Permutation { perm } => {
                    cur = gather_raw(&cur, perm);
                }
                FlowLayer::DiagAffine { log_scale, shift } => {
                    let c = params.get(*log_scale);
                    let t = params.get(*shift);
                    let csum: f64 = c.data().iter().sum();
                    let mut next = cur.clone();
                    for r in 0..n {
                        let row = &mut next.data_mut()[r * self.dim..(r + 1) * self.dim];
                        for j in 0..self.dim {
                            row[j] = row[j] * c.data()[j].exp() + t.data()[j];
                        }
                        logdet[r] += csum;
                    }
                    cur = next;
                }
            }
            if !cur.is_finite() {
                return Err(Error::NonFinite {
                    context: "flow forward",
                    layer: li,
                });
            }
        }
        Ok((cur, Tensor::vector(logdet)))
    }

    /// y -> (f^{-1}(y), log |det J[f^{-1}]|(y)), batched. The returned
    /// log-determinant is the inverse direction's own volume change, i.e. the
    /// negative of the forward log-determinant at the preimage.
    pub fn inverse(&self, params: &ParamStore, y: &Tensor) -> Result<(Tensor, Tensor)> {
        y.expect_batch(self.dim, "flow inverse")?;
        let n = y.rows();
        let mut cur = y.clone();
        let mut logdet = vec![0.0; n];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                FlowLayer::Coupling(c) => {
                    // The conditioning coordinates are untouched by the
                    // forward pass, so the same coupler outputs invert it.
                    let yin = gather_raw(&cur, &c.in_idx);
                    let (shift, ls) = c.shift_logscale(params, &yin)?;
                    let mut next = cur.clone();
                    for r in 0..n {
                        let sr = shift.row(r);
                        let lr = ls.row(r);
                        let row = next.data_mut();
                        for (j, &col) in c.out_idx.iter().enumerate() {
                            let v = row[r * self.dim + col];
                            row[r * self.dim + col] = (v - sr[j]) * (-lr[j]).exp();
                            logdet[r] -= lr[j];
                        }
                    }
                    cur = next;
                }
                FlowLayer::Permutation { perm } => {
                    cur = gather_raw(&cur, &invert_perm(perm));
                }
                FlowLayer::DiagAffine { log_scale, shift } => {
                    let c = params.get(*log_scale);
                    let t = params.get(*shift);
                    let csum: f64 = c.data().iter().sum();
                    let mut next = cur.clone();
                    for r in 0..n {
                        let row = &mut next.data_mut()[r * self.dim..(r + 1) * self.dim];
                        for j in 0..self.dim {
                            row[j] = (row[j] - t.data()[j]) * (-c.data()[j]).exp();
                        }
                        logdet[r] -= csum;
                    }
                    cur = next;
                }
            }
            if !cur.is_finite() {
                return Err(Error::NonFinite {
                    context: "flow inverse",
                    layer: li,
                });
            }
        }
        Ok((cur, Tensor::vector(logdet)))
    }

    fn coupling_taped_parts(
        &self,
        c: &CouplingLayer,
        tape: &mut Tape,
        binding: &Binding,
        xin: Var,
    ) -> Result<(Var, Var)> {
        let k = c.out_idx.len();
        let st = c.coupler.forward_taped(tape, binding, xin)?;
        let shift = tape.gather_cols(st, indices(0..k));
        let ls = tape.gather_cols(st, indices(k..2 * k));
        Ok((shift, ls))
    }

    /// Taped forward; logdet accumulates as a [n] var.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: Var,
    ) -> Result<(Var, Var)> {
        let n = tape.value(x).rows();
        let mut cur = x;
        let mut logdet = tape.constant(Tensor::zeros(vec![n]));
        for layer in &self.layers {
            match layer {
                FlowLayer::Coupling(c) => {
                    let xin = tape.gather_cols(cur, c.in_idx.clone());
                    let (shift, ls) = self.coupling_taped_parts(c, tape, binding, xin)?;
                    let scale = tape.exp(ls);
                    let xout = tape.gather_cols(cur, c.out_idx.clone());
                    let scaled = tape.mul(xout, scale);
                    let yout = tape.add(scaled, shift);
                    let keep = tape.scatter_cols(xin, c.in_idx.clone(), self.dim);
                    let upd = tape.scatter_cols(yout, c.out_idx.clone(), self.dim);
                    cur = tape.add(keep, upd);
                    let ones = tape.constant(Tensor::new(
                        vec![n, c.out_idx.len()],
                        vec![1.0; n * c.out_idx.len()],
                    ));
                    let ld = tape.row_dot(ls, ones);
                    logdet = tape.add(logdet, ld);
                }
                FlowLayer::Permutation { perm } => {
                    cur = tape.gather_cols(cur, perm.clone());
                }
                FlowLayer::DiagAffine { log_scale, shift } => {
                    let c = binding.var(*log_scale);
                    let t = binding.var(*shift);
                    let ec = tape.exp(c);
                    let ecb = tape.broadcast_rows(ec, n);
                    let tb = tape.broadcast_rows(t, n);
                    let scaled = tape.mul(cur, ecb);
                    cur = tape.add(scaled, tb);
                    let csum = tape.sum_all(c);
                    let csb = tape.broadcast_scalar(csum, vec![n]);
                    logdet = tape.add(logdet, csb);
                }
            }
        }
        Ok((cur, logdet))
    }

    /// Taped inverse; logdet is the inverse direction's volume change.
    pub fn inverse_taped(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        y: Var,
    ) -> Result<(Var, Var)> {
        let n = tape.value(y).rows();
        let mut cur = y;
        let mut logdet = tape.constant(Tensor::zeros(vec![n]));
        for layer in self.layers.iter().rev() {
            match layer {
                FlowLayer::Coupling(c) => {
                    let yin = tape.gather_cols(cur, c.in_idx.clone());
                    let (shift, ls) = self.coupling_taped_parts(c, tape, binding, yin)?;
                    let yout = tape.gather_cols(cur, c.out_idx.clone());
                    let centered = tape.sub(yout, shift);
                    let nls = tape.neg(ls);
                    let inv_scale = tape.exp(nls);
                    let xout = tape.mul(centered, inv_scale);
                    let keep = tape.scatter_cols(yin, c.in_idx.clone(), self.dim);
                    let upd = tape.scatter_cols(xout, c.out_idx.clone(), self.dim);
                    cur = tape.add(keep, upd);
                    let ones = tape.constant(Tensor::new(
                        vec![n, c.out_idx.len()],
                        vec![1.0; n * c.out_idx.len()],
                    ));
                    let ld = tape.row_dot(nls, ones);
                    logdet = tape.add(logdet, ld);
                }
                FlowLayer::Permutation { perm } => {
                    cur = tape.gather_cols(cur, indices(invert_perm(perm)));
                }
                FlowLayer::DiagAffine { log_scale, shift } => {
                    let c = binding.var(*log_scale);
                    let t = binding.var(*shift);
                    let tb = tape.broadcast_rows(t, n);
                    let centered = tape.sub(cur, tb);
                    let nc = tape.neg(c);
                    let enc = tape.exp(nc);
                    let encb = tape.broadcast_rows(enc, n);
                    cur = tape.mul(centered, encb);
                    let csum = tape.sum_all(nc);
                    let csb = tape.broadcast_scalar(csum, vec![n]);
                    logdet = tape.add(logdet, csb);
                }
            }
        }
        Ok((cur, logdet))
    }

    /// Raw dual-number forward (value and tangent, no log-determinant).
    pub fn forward_dual(&self, params: &ParamStore, x: &DualValue) -> Result<DualValue> {
        let n = x.primal.rows();
        let mut p = x.primal.clone();
        let mut t = x.tangent.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                FlowLayer::Coupling(c) => {
                    let pin = gather_raw(&p, &c.in_idx);
                    let tin = gather_raw(&t, &c.in_idx);
                    let st = c.coupler.forward_dual(
                        params,
                        &DualValue {
                            primal: pin,
                            tangent: tin,
                        },
                    )?;
                    let k = c.out_idx.len();
                    let mut pnew = p.clone();
                    let mut tnew = t.clone();
                    for r in 0..n {
                        let strow = st.primal.row(r);
                        let sttan = st.tangent.row(r);
                        for (j, &col) in c.out_idx.iter().enumerate() {
                            let shift = strow[j];
                            let ls = strow[k + j];
                            let tshift = sttan[j];
                            let tls = sttan[k + j];
                            let scale = ls.exp();
                            let pv = p.at(r, col);
                            let tv = t.at(r, col);
                            pnew.data_mut()[r * self.dim + col] = pv * scale + shift;
                            // Product rule: d(x*e^s + t) = dx*e^s + x*e^s*ds + dt.
                            tnew.data_mut()[r * self.dim + col] =
                                tv * scale + pv * scale * tls + tshift;
                        }
                    }
                    p = pnew;
                    t = tnew;
                }
                FlowLayer::Permutation { perm } => {
                    p = gather_raw(&p, perm);
                    t = gather_raw(&t, perm);
                }
                FlowLayer::DiagAffine { log_scale, shift } => {
                    let c = params.get(*log_scale);
                    let sh = params.get(*shift);
                    let mut pnew = p.clone();
                    let mut tnew = t.clone();
                    for r in 0..n {
                        for j in 0..self.dim {
                            let e = c.data()[j].exp();
                            pnew.data_mut()[r * self.dim + j] =
                                p.at(r, j) * e + sh.data()[j];
                            tnew.data_mut()[r * self.dim + j] = t.at(r, j) * e;
                        }
                    }
                    p = pnew;
                    t = tnew;
                }
            }
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    context: "flow dual forward",
                    layer: li,
                });
            }
        }
        Ok(DualValue {
            primal: p,
            tangent: t,
        })
    }

    /// Taped dual-number forward.
    pub fn forward_dual_taped(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: DualVar,
    ) -> Result<DualVar> {
        let mut p = x.primal;
        let mut t = x.tangent;
        for layer in &self.layers {
            match layer {
                FlowLayer::Coupling(c) => {
                    let pin = tape.gather_cols(p, c.in_idx.clone());
                    let tin = tape.gather_cols(t, c.in_idx.clone());
                    let st = c.coupler.forward_dual_taped(
                        tape,
                        binding,
                        DualVar {
                            primal: pin,
                            tangent: tin,
                        },
                    )?;
                    let k = c.out_idx.len();
                    let shift = tape.gather_cols(st.primal, indices(0..k));
                    let ls = tape.gather_cols(st.primal, indices(k..2 * k));
                    let tshift = tape.gather_cols(st.tangent, indices(0..k));
                    let tls = tape.gather_cols(st.tangent, indices(k..2 * k));
                    let scale = tape.exp(ls);
                    let pout = tape.gather_cols(p, c.out_idx.clone());
                    let tout = tape.gather_cols(t, c.out_idx.clone());
                    let pscaled = tape.mul(pout, scale);
                    let pnew_out = tape.add(pscaled, shift);
                    // tangent: tout*scale + pout*scale*tls + tshift
                    let t1 = tape.mul(tout, scale);
                    let t2a = tape.mul(pscaled, tls);
                    let t12 = tape.add(t1, t2a);
                    let tnew_out = tape.add(t12, tshift);
                    let keep_p = tape.scatter_cols(pin, c.in_idx.clone(), self.dim);
                    let upd_p = tape.scatter_cols(pnew_out, c.out_idx.clone(), self.dim);
                    p = tape.add(keep_p, upd_p);
                    let keep_t = tape.scatter_cols(tin, c.in_idx.clone(), self.dim);
                    let upd_t = tape.scatter_cols(tnew_out, c.out_idx.clone(), self.dim);
                    t = tape.add(keep_t, upd_t);
                }
                FlowLayer::Permutation { perm } => {
                    p = tape.gather_cols(p, perm.clone());
                    t = tape.gather_cols(t, perm.clone());
                }
                FlowLayer::DiagAffine { log_scale, shift } => {
                    let n = tape.value(p).rows();
                    let c = binding.var(*log_scale);
                    let sh = binding.var(*shift);
                    let ec = tape.exp(c);
                    let ecb = tape.broadcast_rows(ec, n);
                    let shb = tape.broadcast_rows(sh, n);
                    let pscaled = tape.mul(p, ecb);
                    p = tape.add(pscaled, shb);
                    t = tape.mul(t, ecb);
                }
            }
        }
        Ok(DualVar {
            primal: p,
            tangent: t,
        })
    }
}

/// Log density of x under the push-forward of the base through the flow:
/// log p(x) = log p_base(f^{-1}(x)) + log |det J[f^{-1}]|(x).
pub fn square_log_prob(
    flow: &SquareFlow,
    base: &StandardGaussian,
    params: &ParamStore,
    x: &Tensor,
) -> Result<Tensor> {
    assert_eq!(flow.dim(), base.dim(), "flow and base dimensions differ");
    let (z, logdet_inv) = flow.inverse(params, x)?;
    let logp = base.log_prob(&z)?;
    let n = x.rows();
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        out.push(logp.data()[r] + logdet_inv.data()[r]);
    }
    Ok(Tensor::vector(out))
}

/// Draws n samples by pushing base noise through the flow.
pub fn flow_sample(
    flow: &SquareFlow,
    base: &StandardGaussian,
    params: &ParamStore,
    rng: &mut impl Rng,
    n: usize,
) -> Result<Tensor> {
    let z = base.sample(rng, n);
    let (x, _) = flow.forward(params, &z)?;
    Ok(x)
}

/// The flow's forward map as a plain differentiable function (log-dets
/// dropped); this is what Jacobian-vector products are taken against.
impl DifferentiableMap for SquareFlow {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(SquareFlow::forward(self, params, x)?.0)
    }

    fn forward_dual(&self, params: &ParamStore, x: &DualValue) -> Result<DualValue> {
        SquareFlow::forward_dual(self, params, x)
    }

    fn forward_taped(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        Ok(SquareFlow::forward_taped(self, tape, binding, x)?.0)
    }

    fn forward_dual_taped(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: DualVar,
    ) -> Result<DualVar> {
        SquareFlow::forward_dual_taped(self, tape, binding, x)
    }
}
