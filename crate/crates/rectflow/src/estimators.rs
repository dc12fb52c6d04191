//! Matrix-free estimation of the injective volume-change term.
//!
//! Everything here works against the Gram operator A = JᵀJ of the injective
//! half f ∘ pad, without ever materializing J in the ambient dimension:
//!
//! * [`mvp_jtj`] applies A to a vector with one Jacobian-vector product
//!   followed by one vector-Jacobian product (the forward-backward trick).
//! * [`cg_solve`] / [`cg_solve_batched`] solve A u = ε by conjugate
//!   gradients, given nothing but such a product routine.
//! * [`build_jacobian`] + [`logdet_jtj_exact`] form the exact path: d
//!   forward-mode passes assemble J column by column (never D reverse
//!   passes), and the log-determinant comes from a Cholesky factorization of
//!   the small d×d Gram matrix. [`logdet_jtj_taped`] is the recorded variant
//!   whose reverse sweep yields exact parameter gradients.
//! * [`logdet_surrogate_stochastic`] is the stochastic path: a scalar whose
//!   value is meaningless but whose parameter gradient is an unbiased
//!   estimate of ∇ log det A when CG is run to convergence. It costs
//!   K(τ+1) jvps and K(τ+1) vjps per evaluation with only K of each
//!   retained on the tape — the CG solves happen outside the tape behind a
//!   stop-gradient.
//!
//! Every operation threads a [`CostCounters`] so the jvp/vjp budget is
//! observable rather than asserted.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{
    jvp, param_grad, vjp, Binding, DifferentiableMap, DualVar, ParamStore, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, logdet_from_cholesky};

/// Tallies of differentiation passes. "Calls" count every evaluation,
/// including the ones conjugate gradients burns through outside the tape;
/// "retained" counts only passes recorded for a later reverse sweep, which
/// is what determines memory. One call covers a whole batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounters {
    pub jvp_calls: usize,
    pub vjp_calls: usize,
    pub jvp_retained: usize,
    pub vjp_retained: usize,
}

impl CostCounters {
    pub fn new() -> Self {
        CostCounters::default()
    }

    fn jvp(&mut self, retained: bool) {
        self.jvp_calls += 1;
        if retained {
            self.jvp_retained += 1;
        }
    }

    fn vjp(&mut self, retained: bool) {
        self.vjp_calls += 1;
        if retained {
            self.vjp_retained += 1;
        }
    }
}

/// Hutchinson probe law: zero mean, identity covariance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ProbeDistribution {
    #[default]
    Gaussian,
    Rademacher,
}

impl ProbeDistribution {
    pub fn sample(&self, rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        let data = match self {
            ProbeDistribution::Gaussian => (0..rows * cols)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
            ProbeDistribution::Rademacher => (0..rows * cols)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect(),
        };
        Tensor::new(vec![rows, cols], data)
    }
}

/// Knobs of the stochastic estimator: probe count K, normalized CG
/// tolerance δ (stop once ‖r‖ ≤ δ‖ε‖; 0 runs CG to convergence), and the
/// probe law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochasticSettings {
    pub probes: usize,
    pub tolerance: f64,
    pub distribution: ProbeDistribution,
}

impl Default for StochasticSettings {
    fn default() -> Self {
        StochasticSettings {
            probes: 1,
            tolerance: 0.0,
            distribution: ProbeDistribution::Gaussian,
        }
    }
}

/// Which gradient path training uses for the volume-change term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradEstimator {
    Exact,
    Stochastic(StochasticSettings),
}

/// A = JᵀJ bound to one (map, parameters, evaluation point) triple.
pub struct MvpRoutine<'a> {
    map: &'a dyn DifferentiableMap,
    params: &'a ParamStore,
    at: &'a Tensor,
}

impl<'a> MvpRoutine<'a> {
    pub fn new(map: &'a dyn DifferentiableMap, params: &'a ParamStore, at: &'a Tensor) -> Self {
        MvpRoutine { map, params, at }
    }

    pub fn dim(&self) -> usize {
        self.map.input_dim()
    }

    pub fn apply(&self, w: &Tensor, counters: &mut CostCounters) -> Result<Tensor> {
        mvp_jtj(self.map, self.params, self.at, w, counters)
    }
}

/// JᵀJ·w in one forward and one reverse pass, batched over the rows of `at`
/// and `w`. Nothing is retained.
pub fn mvp_jtj(
    map: &dyn DifferentiableMap,
    params: &ParamStore,
    at: &Tensor,
    w: &Tensor,
    counters: &mut CostCounters,
) -> Result<Tensor> {
    let dual = jvp(map, params, at, w)?;
    counters.jvp(false);
    let out = vjp(map, params, at, &dual.tangent)?;
    counters.vjp(false);
    Ok(out)
}

/// Recorded JᵀJ·w: the forward-mode pass and the reverse sweep both land on
/// the tape, so the result participates in later differentiation — both
/// through the map's parameters and through `w` when `w` is itself taped.
/// `at` must be grad-enabled (a `leaf(_, true)` or downstream of one).
pub fn mvp_jtj_taped(
    tape: &mut Tape,
    binding: &Binding,
    map: &dyn DifferentiableMap,
    at: Var,
    w: Var,
    counters: &mut CostCounters,
) -> Result<Var> {
    let dual = map.forward_dual_taped(tape, binding, DualVar { primal: at, tangent: w })?;
    counters.jvp(true);
    let sweep = tape.backward_seeded(dual.primal, dual.tangent, &[at]);
    counters.vjp(true);
    sweep.get(at).ok_or_else(|| {
        Error::invalid(
            "recorded matrix-vector product needs a grad-enabled evaluation point",
        )
    })
}

/// The full Jacobian of the map at a single point, assembled column by
/// column from d forward-mode passes. Accepts the point as a length-d vector
/// or a single-row batch; returns [output_dim, d].
pub fn build_jacobian(
    map: &dyn DifferentiableMap,
    params: &ParamStore,
    at: &Tensor,
    counters: &mut CostCounters,
) -> Result<Tensor> {
    let d = map.input_dim();
    let point = match at.shape() {
        [n, _] if *n == 1 => at.clone(),
        [len] if *len == d => at.reshaped(vec![1, d]),
        other => {
            return Err(Error::invalid(format!(
                "jacobian wants a single point of dimension {d}, got shape {other:?}"
            )))
        }
    };
    let dd = map.output_dim();
    let mut out = vec![0.0; dd * d];
    for j in 0..d {
        let mut e = Tensor::zeros(vec![1, d]);
        e.data_mut()[j] = 1.0;
        let col = jvp(map, params, &point, &e)?.tangent;
        counters.jvp(false);
        for i in 0..dd {
            out[i * d + j] = col.data()[i];
        }
    }
    Ok(Tensor::new(vec![dd, d], out))
}

/// log det(JᵀJ) from an explicit [D, d] Jacobian, via Cholesky of the d×d
/// Gram matrix (twice the log-diagonal sum of the factor).
pub fn logdet_jtj_exact(j: &Tensor) -> Result<f64> {
    if j.shape().len() != 2 {
        return Err(Error::invalid("jacobian must be a matrix"));
    }
    let (dd, d) = (j.rows(), j.cols());
    let mut a = vec![0.0; d * d];
    for p in 0..d {
        for q in p..d {
            let mut dot = 0.0;
            for r in 0..dd {
                dot += j.at(r, p) * j.at(r, q);
            }
            a[p * d + q] = dot;
            a[q * d + p] = dot;
        }
    }
    let l = cholesky_lower(&a, d, "gram log-determinant")?;
    Ok(logdet_from_cholesky(&l, d))
}

/// Recorded per-sample log det(JᵀJ + jitter·I) at the rows of `at` ([n, d]
/// var), built from d recorded forward-mode passes and a symmetric-matrix
/// log-determinant node. This is the exact path training differentiates:
/// d jvps, all retained, no vjps.
pub fn logdet_jtj_taped(
    tape: &mut Tape,
    binding: &Binding,
    map: &dyn DifferentiableMap,
    at: Var,
    jitter: f64,
    counters: &mut CostCounters,
) -> Result<Var> {
    let d = map.input_dim();
    let n = tape.value(at).rows();
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let mut e = Tensor::zeros(vec![n, d]);
        for r in 0..n {
            e.data_mut()[r * d + j] = 1.0;
        }
        let ev = tape.constant(e);
        let dual = map.forward_dual_taped(tape, binding, DualVar { primal: at, tangent: ev })?;
        counters.jvp(true);
        cols.push(dual.tangent);
    }
    let mut entries = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            entries.push(tape.row_dot(cols[i], cols[j]));
        }
    }
    let mut a = tape.sym_from_entries(Rc::from(entries), d);
    if jitter > 0.0 {
        let mut eye = vec![0.0; n * d * d];
        for r in 0..n {
            for i in 0..d {
                eye[r * d * d + i * d + i] = jitter;
            }
        }
        let eyev = tape.constant(Tensor::new(vec![n, d * d], eye));
        a = tape.add(a, eyev);
    }
    tape.logdet_spd(a, d, "gram log-determinant")
}

/// Exact log det(JᵀJ) at a single point together with its gradient with
/// respect to every parameter in the store (zeros where the Jacobian never
/// looks, e.g. parameters of the low-space flow).
pub fn grad_logdet_exact(
    map: &dyn DifferentiableMap,
    store: &ParamStore,
    at: &Tensor,
    counters: &mut CostCounters,
) -> Result<(f64, ParamStore)> {
    let d = map.input_dim();
    let point = match at.shape() {
        [n, _] if *n == 1 => at.clone(),
        [len] if *len == d => at.reshaped(vec![1, d]),
        other => {
            return Err(Error::invalid(format!(
                "gradient wants a single point of dimension {d}, got shape {other:?}"
            )))
        }
    };
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, store, true);
    let atv = tape.constant(point);
    let ld = logdet_jtj_taped(&mut tape, &binding, map, atv, 0.0, counters)?;
    let scalar = tape.sum_all(ld);
    let value = tape.value(ld).data()[0];
    let grads = param_grad(&mut tape, scalar, &binding, store)?;
    Ok((value, grads))
}

/// One conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients on A u = rhs for a symmetric positive definite
/// operator given only as a product routine. Stops once ‖r‖ ≤ δ‖rhs‖ or
/// after d iterations, whichever comes first; the iterate at the cap is
/// still returned, flagged unconverged.
pub fn cg_solve(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    rhs: &[f64],
    tolerance: f64,
    counters: Option<&mut CostCounters>,
) -> Result<CgResult> {
    let _ = counters; // single-system solves are used with plain matrices
    let d = rhs.len();
    let bnorm = dot(rhs, rhs).sqrt();
    if bnorm == 0.0 {
        return Err(Error::invalid(
            "conjugate gradient needs a nonzero right-hand side",
        ));
    }
    if tolerance < 0.0 {
        return Err(Error::invalid("conjugate gradient tolerance must be >= 0"));
    }
    let tol = tolerance * bnorm;
    let mut u = vec![0.0; d];
    let mut r = rhs.to_vec();
    let mut q = r.clone();
    let mut rs = dot(&r, &r);
    let mut iterations = 0;
    while iterations < d && rs.sqrt() > tol {
        let v = apply(&q)?;
        iterations += 1;
        let qv = dot(&q, &v);
        if !qv.is_finite() {
            return Err(Error::CgNumeric { iteration: iterations });
        }
        if qv <= 0.0 {
            return Err(Error::CgIndefinite {
                curvature: qv,
                iteration: iterations,
            });
        }
        let alpha = rs / qv;
        for i in 0..d {
            u[i] += alpha * q[i];
            r[i] -= alpha * v[i];
        }
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() {
            return Err(Error::CgNumeric { iteration: iterations });
        }
        let beta = rs_new / rs;
        for i in 0..d {
            q[i] = r[i] + beta * q[i];
        }
        rs = rs_new;
    }
    let residual_norm = rs.sqrt();
    Ok(CgResult {
        solution: u,
        iterations,
        residual_norm,
        converged: residual_norm <= tol,
    })
}

/// A batch of independent CG solves sharing one product routine (one call
/// handles all rows). Rows that meet their tolerance stop updating; the
/// iteration count is the number of batched product applications.
pub struct BatchedCg {
    pub solution: Tensor,
    pub iterations: usize,
    pub all_converged: bool,
}

pub fn cg_solve_batched(
    mut apply: impl FnMut(&Tensor) -> Result<Tensor>,
    rhs: &Tensor,
    tolerance: f64,
) -> Result<BatchedCg> {
    let n = rhs.rows();
    let d = rhs.cols();
    let mut u = vec![0.0; n * d];
    let mut r = rhs.data().to_vec();
    let mut q = r.clone();
    let mut rs: Vec<f64> = (0..n).map(|i| dot(&r[i * d..(i + 1) * d], &r[i * d..(i + 1) * d])).collect();
    let tol: Vec<f64> = rs.iter().map(|&v| tolerance * v.sqrt()).collect();
    let mut active: Vec<bool> = rs
        .iter()
        .zip(&tol)
        .map(|(&v, &t)| v.sqrt() > t && v > 0.0)
        .collect();
    let mut iterations = 0;
    while iterations < d && active.iter().any(|&a| a) {
        // Frozen rows are zeroed before the product so stale directions
        // cannot feed non-finite values back into the live ones.
        let mut qm = vec![0.0; n * d];
        for row in 0..n {
            if active[row] {
                qm[row * d..(row + 1) * d].copy_from_slice(&q[row * d..(row + 1) * d]);
            }
        }
        let v = apply(&Tensor::new(vec![n, d], qm))?;
        iterations += 1;
        for row in 0..n {
            if !active[row] {
                continue;
            }
            let qrow = &q[row * d..(row + 1) * d];
            let vrow = v.row(row);
            let qv = dot(qrow, vrow);
            if !qv.is_finite() {
                return Err(Error::CgNumeric { iteration: iterations });
            }
            if qv <= 0.0 {
                return Err(Error::CgIndefinite {
                    curvature: qv,
                    iteration: iterations,
                });
            }
            let alpha = rs[row] / qv;
            for i in 0..d {
                u[row * d + i] += alpha * q[row * d + i];
                r[row * d + i] -= alpha * vrow[i];
            }
            let rrow = &r[row * d..(row + 1) * d];
            let rs_new = dot(rrow, rrow);
            if !rs_new.is_finite() {
                return Err(Error::CgNumeric { iteration: iterations });
            }
            if rs_new.sqrt() <= tol[row] {
                active[row] = false;
                rs[row] = rs_new;
                continue;
            }
            let beta = rs_new / rs[row];
            for i in 0..d {
                q[row * d + i] = r[row * d + i] + beta * q[row * d + i];
            }
            rs[row] = rs_new;
        }
    }
    Ok(BatchedCg {
        solution: Tensor::new(vec![n, d], u),
        iterations,
        all_converged: !active.iter().any(|&a| a),
    })
}

/// The recorded stochastic surrogate, as a per-sample [n] var ready to enter
/// a loss. Each probe contributes stop_gradient(u_k)ᵀ·(JᵀJ ε_k) where u_k is
/// the off-tape CG solution; the CG solves never touch the tape, so per
/// probe only the one recorded product (one jvp + one vjp) is retained.
pub struct SurrogateTerm {
    pub term: Var,
    /// Batched CG iteration count per probe.
    pub cg_iterations: Vec<usize>,
    /// Whether every row of the probe's CG solve met tolerance before the
    /// d-iteration cap. An unconverged solve is reported, not fatal.
    pub cg_converged: Vec<bool>,
}

pub fn logdet_surrogate_taped(
    tape: &mut Tape,
    binding: &Binding,
    map: &dyn DifferentiableMap,
    params: &ParamStore,
    at: Var,
    settings: StochasticSettings,
    rng: &mut impl Rng,
    counters: &mut CostCounters,
) -> Result<SurrogateTerm> {
    if settings.probes == 0 {
        return Err(Error::invalid("the stochastic estimator needs K >= 1 probes"));
    }
    if settings.tolerance < 0.0 {
        return Err(Error::invalid("CG tolerance must be >= 0"));
    }
    let at_value = tape.value(at).clone();
    let n = at_value.rows();
    let d = map.input_dim();
    let mut acc: Option<Var> = None;
    let mut cg_iterations = Vec::with_capacity(settings.probes);
    let mut cg_converged = Vec::with_capacity(settings.probes);
    for _ in 0..settings.probes {
        let eps = settings.distribution.sample(rng, n, d);
        let solve = cg_solve_batched(
            |w| mvp_jtj(map, params, &at_value, w, counters),
            &eps,
            settings.tolerance,
        )?;
        cg_iterations.push(solve.iterations);
        cg_converged.push(solve.all_converged);
        let u = tape.constant(solve.solution);
        let epsv = tape.constant(eps);
        let m = mvp_jtj_taped(tape, binding, map, at, epsv, counters)?;
        let term = tape.row_dot(u, m);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term),
            None => term,
        });
    }
    let total = acc.expect("probes >= 1");
    let term = tape.affine_const(total, 1.0 / settings.probes as f64, 0.0);
    Ok(SurrogateTerm {
        term,
        cg_iterations,
        cg_converged,
    })
}

/// One standalone evaluation of the stochastic surrogate at a single point:
/// the (meaningless) scalar value, the parameter gradients it exists to
/// produce, and the CG diagnostics.
#[derive(Debug)]
pub struct SurrogateReport {
    pub value: f64,
    pub gradients: ParamStore,
    pub cg_iterations: Vec<usize>,
    pub cg_converged: Vec<bool>,
}

pub fn logdet_surrogate_stochastic(
    map: &dyn DifferentiableMap,
    store: &ParamStore,
    at: &Tensor,
    settings: StochasticSettings,
    rng: &mut impl Rng,
    counters: &mut CostCounters,
) -> Result<SurrogateReport> {
    let d = map.input_dim();
    let point = match at.shape() {
        [n, _] if *n == 1 => at.clone(),
        [len] if *len == d => at.reshaped(vec![1, d]),
        other => {
            return Err(Error::invalid(format!(
                "surrogate wants a single point of dimension {d}, got shape {other:?}"
            )))
        }
    };
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, store, true);
    let atv = tape.leaf(point, true);
    let sur = logdet_surrogate_taped(&mut tape, &binding, map, store, atv, settings, rng, counters)?;
    let scalar = tape.sum_all(sur.term);
    let value = tape.value(scalar).item();
    let gradients = param_grad(&mut tape, scalar, &binding, store)?;
    Ok(SurrogateReport {
        value,
        gradients,
        cg_iterations: sur.cg_iterations,
        cg_converged: sur.cg_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate, DualValue, Mlp, ParamId};
    use crate::flows::SquareFlow;
    use crate::linalg::sym_eigen;
    use crate::rectangular::{PadSpec, PaddedFlow};
    use crate::testkit;
    use rand::Rng;

    fn matvec(a: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
        (0..d).map(|i| dot(&a[i * d..(i + 1) * d], x)).collect()
    }

    fn random_spd(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let m: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = if i == j { 1.0 } else { 0.0 };
                for k in 0..d {
                    acc += m[k * d + i] * m[k * d + j];
                }
                a[i * d + j] = acc;
            }
        }
        a
    }

    fn randomized_padded(seed: u64, d: usize, dd: usize) -> (PaddedFlow, ParamStore) {
        let mut rng = testkit::rng(seed);
        let mut store = ParamStore::new();
        let flow = SquareFlow::realnvp(&mut store, &mut rng, "f", dd, 3, &[6], false);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.4..0.4);
            }
        }
        let pad = PadSpec::seeded(d, dd, seed ^ 0x5bd1).unwrap();
        (PaddedFlow::new(flow, pad).unwrap(), store)
    }

    /// Fixture: x = e^c · pad(z) with one scalar log-scale parameter, the
    /// smallest model whose Gram operator is e^{2c}·I.
    struct ScalarScalePad {
        c: ParamId,
        pad: PadSpec,
    }

    impl DifferentiableMap for ScalarScalePad {
        fn input_dim(&self) -> usize {
            self.pad.low_dim()
        }
        fn output_dim(&self) -> usize {
            self.pad.high_dim()
        }
        fn forward(&self, params: &ParamStore, z: &Tensor) -> crate::Result<Tensor> {
            let s = params.get(self.c).data()[0].exp();
            let p = self.pad.pad(z)?;
            Ok(Tensor::new(
                p.shape().to_vec(),
                p.data().iter().map(|v| v * s).collect(),
            ))
        }
        fn forward_dual(&self, params: &ParamStore, z: &DualValue) -> crate::Result<DualValue> {
            Ok(DualValue {
                primal: self.forward(params, &z.primal)?,
                tangent: self.forward(params, &z.tangent)?,
            })
        }
        fn forward_taped(
            &self,
            tape: &mut Tape,
            binding: &Binding,
            z: Var,
        ) -> crate::Result<Var> {
            let p = self.pad.pad_taped(tape, z);
            let shape = tape.value(p).shape().to_vec();
            let cv = binding.var(self.c);
            let e = tape.exp(cv);
            let s = tape.sum_all(e);
            let b = tape.broadcast_scalar(s, shape);
            Ok(tape.mul(p, b))
        }
        fn forward_dual_taped(
            &self,
            tape: &mut Tape,
            binding: &Binding,
            z: DualVar,
        ) -> crate::Result<DualVar> {
            Ok(DualVar {
                primal: self.forward_taped(tape, binding, z.primal)?,
                tangent: self.forward_taped(tape, binding, z.tangent)?,
            })
        }
    }

    fn scalar_scale_model(c0: f64, d: usize, dd: usize) -> (ScalarScalePad, ParamStore) {
        let mut store = ParamStore::new();
        let c = store.register("c", Tensor::vector(vec![c0]));
        let pad = PadSpec::seeded(d, dd, 99).unwrap();
        (ScalarScalePad { c, pad }, store)
    }

    #[test]
    fn cg_identity_converges_in_one_iteration() {
        let rhs = vec![3.0, -1.0, 2.0];
        let out = cg_solve(|q| Ok(q.to_vec()), &rhs, 0.0, None).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.solution, rhs);
        assert!(out.converged);
        assert_eq!(out.residual_norm, 0.0);
    }

    #[test]
    fn cg_inverts_diagonal_operators() {
        let a = [2.0, 0.5, 8.0, 1.0];
        let rhs = vec![1.0, 1.0, 1.0, 1.0];
        let out = cg_solve(
            |q| Ok(q.iter().zip(a.iter()).map(|(x, s)| x * s).collect()),
            &rhs,
            1e-12,
            None,
        )
        .unwrap();
        for (u, s) in out.solution.iter().zip(a.iter()) {
            assert!((u - 1.0 / s).abs() < 1e-10, "{u} vs {}", 1.0 / s);
        }
        assert!(out.iterations <= 4);
    }

    #[test]
    fn cg_matches_dense_factorization_on_random_spd_systems() {
        for seed in 0..10u64 {
            let mut rng = testkit::rng(seed);
            let d = 16;
            let a = random_spd(&mut rng, d);
            let rhs: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = cg_solve(|q| Ok(matvec(&a, d, q)), &rhs, 1e-12, None).unwrap();
            assert!(out.iterations <= d);
            let l = cholesky_lower(&a, d, "test").unwrap();
            let direct = crate::linalg::cholesky_solve(&l, d, &rhs);
            for (x, y) in out.solution.iter().zip(direct.iter()) {
                assert!((x - y).abs() < 1e-8, "seed {seed}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn cg_rejects_zero_rhs_and_flags_indefinite_operators() {
        let err = cg_solve(|q| Ok(q.to_vec()), &[0.0, 0.0], 0.0, None).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));

        // diag(1, -1) has q0ᵀA q0 = 0 for rhs (1, 1).
        let err = cg_solve(
            |q| Ok(vec![q[0], -q[1]]),
            &[1.0, 1.0],
            0.0,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::CgIndefinite { .. }));
    }

    #[test]
    fn cg_reports_nan_iterates_with_their_iteration() {
        let err = cg_solve(|_| Ok(vec![f64::NAN, 0.0]), &[1.0, 1.0], 0.0, None).unwrap_err();
        match err {
            Error::CgNumeric { iteration } => assert_eq!(iteration, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cg_returns_capped_iterate_unconverged_rather_than_failing() {
        let mut rng = testkit::rng(41);
        let d = 12;
        let a = random_spd(&mut rng, d);
        let rhs: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // A tolerance stricter than float precision cannot be met: the solve
        // must still return its best iterate with the flag down.
        let out = cg_solve(|q| Ok(matvec(&a, d, q)), &rhs, 1e-17, None).unwrap();
        assert_eq!(out.iterations, d);
        assert!(!out.converged);
        let l = cholesky_lower(&a, d, "test").unwrap();
        let direct = crate::linalg::cholesky_solve(&l, d, &rhs);
        for (x, y) in out.solution.iter().zip(direct.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn batched_cg_agrees_with_single_system_solves() {
        let mut rng = testkit::rng(17);
        let d = 6;
        let a = random_spd(&mut rng, d);
        let n = 4;
        let rhs = Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let batched = cg_solve_batched(
            |w| {
                let mut out = vec![0.0; n * d];
                for row in 0..n {
                    out[row * d..(row + 1) * d].copy_from_slice(&matvec(&a, d, w.row(row)));
                }
                Ok(Tensor::new(vec![n, d], out))
            },
            &rhs,
            1e-12,
        )
        .unwrap();
        assert!(batched.all_converged);
        assert!(batched.iterations <= d);
        for row in 0..n {
            let single = cg_solve(|q| Ok(matvec(&a, d, q)), rhs.row(row), 1e-12, None).unwrap();
            for (x, y) in batched.solution.row(row).iter().zip(single.solution.iter()) {
                assert!((x - y).abs() < 1e-9, "row {row}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn mvp_on_identity_initialized_model_returns_the_probe() {
        let mut rng = testkit::rng(2);
        let mut store = ParamStore::new();
        let flow = SquareFlow::realnvp(&mut store, &mut rng, "f", 4, 2, &[6], false);
        let pad = PadSpec::seeded(2, 4, 7).unwrap();
        let map = PaddedFlow::new(flow, pad).unwrap();
        let at = Tensor::from_rows(&[vec![0.3, -0.8]]);
        let w = Tensor::from_rows(&[vec![1.5, 2.5]]);
        let mut counters = CostCounters::new();
        let out = mvp_jtj(&map, &store, &at, &w, &mut counters).unwrap();
        assert_eq!(out.data(), w.data());
        assert_eq!(
            counters,
            CostCounters {
                jvp_calls: 1,
                vjp_calls: 1,
                jvp_retained: 0,
                vjp_retained: 0
            }
        );
    }

    #[test]
    fn mvp_on_pure_scaling_returns_squared_scale_times_probe() {
        let (map, store) = scalar_scale_model(0.4, 2, 5);
        let at = Tensor::from_rows(&[vec![0.7, -0.1]]);
        let w = Tensor::from_rows(&[vec![2.0, -3.0]]);
        let mut counters = CostCounters::new();
        let out = mvp_jtj(&map, &store, &at, &w, &mut counters).unwrap();
        let s2 = (2.0f64 * 0.4).exp();
        for (o, ww) in out.data().iter().zip(w.data()) {
            assert!((o - s2 * ww).abs() < 1e-12, "{o} vs {}", s2 * ww);
        }
    }

    #[test]
    fn mvp_matches_finite_difference_jacobian_oracle() {
        let (map, store) = randomized_padded(5, 2, 5);
        let at = Tensor::from_rows(&[vec![0.4, -0.6]]);
        let w = Tensor::from_rows(&[vec![0.9, 1.3]]);
        let mut counters = CostCounters::new();
        let got = mvp_jtj(&map, &store, &at, &w, &mut counters).unwrap();

        // Oracle: J from central differences column by column, then two
        // explicit mat-vecs.
        let (d, dd) = (2, 5);
        let mut jfd = vec![0.0; dd * d];
        for j in 0..d {
            let mut e = Tensor::zeros(vec![1, d]);
            e.data_mut()[j] = 1.0;
            let col = testkit::fd_directional(
                |p| evaluate(&map, &store, p).unwrap().into_data(),
                &at,
                &e,
                1e-6,
            );
            for i in 0..dd {
                jfd[i * d + j] = col[i];
            }
        }
        let jw: Vec<f64> = (0..dd).map(|i| dot(&jfd[i * d..(i + 1) * d], w.data())).collect();
        for j in 0..d {
            let jtjw: f64 = (0..dd).map(|i| jfd[i * d + j] * jw[i]).sum();
            assert!(
                (got.data()[j] - jtjw).abs() < 1e-6,
                "coord {j}: {} vs {jtjw}",
                got.data()[j]
            );
        }
    }

    #[test]
    fn mvp_operator_is_symmetric() {
        for seed in 0..8u64 {
            let (map, store) = randomized_padded(seed, 3, 6);
            let mut rng = testkit::rng(seed ^ 0xfeed);
            let at = Tensor::from_rows(&[(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()]);
            let e1 = Tensor::from_rows(&[(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()]);
            let e2 = Tensor::from_rows(&[(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()]);
            let mut counters = CostCounters::new();
            let m2 = mvp_jtj(&map, &store, &at, &e2, &mut counters).unwrap();
            let m1 = mvp_jtj(&map, &store, &at, &e1, &mut counters).unwrap();
            let lhs = dot(e1.data(), m2.data());
            let rhs = dot(e2.data(), m1.data());
            assert!((lhs - rhs).abs() < 1e-9, "seed {seed}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn taped_mvp_matches_raw_values() {
        let (map, store) = randomized_padded(13, 2, 4);
        let at = Tensor::from_rows(&[vec![0.2, 0.9]]);
        let w = Tensor::from_rows(&[vec![-1.0, 0.5]]);
        let mut counters = CostCounters::new();
        let raw = mvp_jtj(&map, &store, &at, &w, &mut counters).unwrap();

        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &store, true);
        let atv = tape.leaf(at, true);
        let wv = tape.constant(w);
        let taped = mvp_jtj_taped(&mut tape, &binding, &map, atv, wv, &mut counters).unwrap();
        for (a, b) in tape.value(taped).data().iter().zip(raw.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(counters.jvp_retained, 1);
        assert_eq!(counters.vjp_retained, 1);
    }

    #[test]
    fn jacobian_of_identity_initialized_model_is_the_pad_matrix() {
        let mut rng = testkit::rng(6);
        let mut store = ParamStore::new();
        let flow = SquareFlow::realnvp(&mut store, &mut rng, "f", 4, 2, &[6], false);
        let pad = PadSpec::with_columns(2, 4, vec![3, 1]).unwrap();
        let map = PaddedFlow::new(flow, pad).unwrap();
        let mut counters = CostCounters::new();
        let j = build_jacobian(
            &map,
            &store,
            &Tensor::vector(vec![0.5, -0.5]),
            &mut counters,
        )
        .unwrap();
        assert_eq!(j.shape(), &[4, 2]);
        // Column 0 targets ambient row 3, column 1 targets ambient row 1.
        let mut expect = vec![0.0; 8];
        expect[3 * 2] = 1.0;
        expect[1 * 2 + 1] = 1.0;
        assert_eq!(j.data(), &expect[..]);
        assert_eq!(counters.jvp_calls, 2);
        assert_eq!(counters.vjp_calls, 0);
        // Orthonormal columns: log det of the Gram matrix is exactly zero.
        assert_eq!(logdet_jtj_exact(&j).unwrap(), 0.0);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let (map, store) = randomized_padded(9, 2, 5);
        let at = Tensor::from_rows(&[vec![0.1, 0.7]]);
        let mut counters = CostCounters::new();
        let j = build_jacobian(&map, &store, &at, &mut counters).unwrap();
        for col in 0..2 {
            let mut e = Tensor::zeros(vec![1, 2]);
            e.data_mut()[col] = 1.0;
            let fd = testkit::fd_directional(
                |p| evaluate(&map, &store, p).unwrap().into_data(),
                &at,
                &e,
                1e-6,
            );
            for row in 0..5 {
                assert!(
                    (j.at(row, col) - fd[row]).abs() < 1e-5,
                    "({row},{col}): {} vs {}",
                    j.at(row, col),
                    fd[row]
                );
            }
        }
    }

    #[test]
    fn logdet_of_scaled_pad_matrix_is_analytic() {
        // J = s · pad matrix has Gram s²·I, so log det = 2d·log s.
        let s = 1.7;
        let mut j = Tensor::zeros(vec![5, 2]);
        j.data_mut()[4 * 2] = s; // ambient row 4 <- low col 0
        j.data_mut()[1 * 2 + 1] = s; // ambient row 1 <- low col 1
        let got = logdet_jtj_exact(&j).unwrap();
        assert!((got - 4.0 * s.ln()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn logdet_matches_eigenvalue_oracle() {
        let mut rng = testkit::rng(14);
        let (dd, d) = (7, 4);
        let j = Tensor::new(
            vec![dd, d],
            (0..dd * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let got = logdet_jtj_exact(&j).unwrap();
        let mut gram = vec![0.0; d * d];
        for p in 0..d {
            for q in 0..d {
                gram[p * d + q] = (0..dd).map(|r| j.at(r, p) * j.at(r, q)).sum();
            }
        }
        let (eigs, _) = sym_eigen(&gram, d);
        let oracle: f64 = eigs.iter().map(|&e| e.ln()).sum();
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    }

    #[test]
    fn taped_logdet_matches_raw_and_counts_d_retained_jvps() {
        let (map, store) = randomized_padded(21, 2, 5);
        let at = Tensor::from_rows(&[vec![0.3, -0.4], vec![1.0, 0.2]]);
        let mut counters = CostCounters::new();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &store, true);
        let atv = tape.constant(at.clone());
        let ld = logdet_jtj_taped(&mut tape, &binding, &map, atv, 0.0, &mut counters).unwrap();
        assert_eq!(
            counters,
            CostCounters {
                jvp_calls: 2,
                vjp_calls: 0,
                jvp_retained: 2,
                vjp_retained: 0
            }
        );
        for r in 0..2 {
            let point = Tensor::from_rows(&[at.row(r).to_vec()]);
            let mut c2 = CostCounters::new();
            let j = build_jacobian(&map, &store, &point, &mut c2).unwrap();
            let expect = logdet_jtj_exact(&j).unwrap();
            let got = tape.value(ld).data()[r];
            assert!((got - expect).abs() < 1e-10, "row {r}: {got} vs {expect}");
        }
    }

    #[test]
    fn exact_gradient_matches_central_differences() {
        let (map, store) = randomized_padded(30, 2, 4);
        let at = Tensor::from_rows(&[vec![0.25, -0.55]]);
        let mut counters = CostCounters::new();
        let (value, grads) = grad_logdet_exact(&map, &store, &at, &mut counters).unwrap();

        let fd = testkit::fd_param_grad(
            |s| {
                let mut c = CostCounters::new();
                let j = build_jacobian(&map, s, &at, &mut c).unwrap();
                logdet_jtj_exact(&j).unwrap()
            },
            &store,
            1e-5,
        );
        let mut checked = 0;
        for (id, name, g) in grads.iter() {
            for (a, b) in g.data().iter().zip(fd.get(id).data()) {
                let rel = (a - b).abs() / (1.0 + b.abs());
                assert!(rel < 1e-5, "{name}: {a} vs fd {b}");
                checked += 1;
            }
        }
        assert!(checked > 50, "only {checked} coordinates covered");
        assert!(value.is_finite());
    }

    #[test]
    fn exact_gradient_is_zero_for_parameters_outside_the_map() {
        let (map, mut store) = randomized_padded(31, 2, 4);
        let mut rng = testkit::rng(31);
        let _low = Mlp::tanh_net(&mut store, &mut rng, "h", 2, &[4], 2, false);
        let at = Tensor::from_rows(&[vec![0.4, 0.1]]);
        let mut counters = CostCounters::new();
        let (_, grads) = grad_logdet_exact(&map, &store, &at, &mut counters).unwrap();
        let hw = store.lookup("h.w0").unwrap();
        assert!(grads.get(hw).data().iter().all(|&v| v == 0.0));
        let fw = store.lookup("f.c0.w0").unwrap();
        assert!(grads.get(fw).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pure_scaling_gradient_is_exactly_two_d_per_rademacher_probe() {
        let d = 3;
        let (map, store) = scalar_scale_model(0.35, d, 6);
        let at = Tensor::from_rows(&[vec![0.2, -0.7, 1.1]]);
        for seed in 0..5u64 {
            let mut rng = testkit::rng(seed);
            let mut counters = CostCounters::new();
            let report = logdet_surrogate_stochastic(
                &map,
                &store,
                &at,
                StochasticSettings {
                    probes: 1,
                    tolerance: 0.0,
                    distribution: ProbeDistribution::Rademacher,
                },
                &mut rng,
                &mut counters,
            )
            .unwrap();
            let c = store.lookup("c").unwrap();
            let g = report.gradients.get(c).data()[0];
            assert!(
                (g - 2.0 * d as f64).abs() < 1e-10,
                "seed {seed}: gradient {g}"
            );
        }
    }

    #[test]
    fn surrogate_on_identity_model_has_probe_norm_value_and_zero_gradient() {
        // The map is the bare embedding: no parameter can reach it, so every
        // gradient must vanish while the value is the mean squared probe norm.
        let mut rng = testkit::rng(8);
        let mut store = ParamStore::new();
        let _unused = Mlp::tanh_net(&mut store, &mut rng, "f", 4, &[5], 4, false);
        let flow = SquareFlow::identity(4);
        let pad = PadSpec::seeded(2, 4, 3).unwrap();
        let map = PaddedFlow::new(flow, pad).unwrap();
        let at = Tensor::from_rows(&[vec![0.6, -0.2]]);
        let mut counters = CostCounters::new();
        let mut prng = testkit::rng(123);
        let report = logdet_surrogate_stochastic(
            &map,
            &store,
            &at,
            StochasticSettings {
                probes: 4,
                tolerance: 0.0,
                distribution: ProbeDistribution::Gaussian,
            },
            &mut prng,
            &mut counters,
        )
        .unwrap();
        // Same probe stream: the value must be the mean squared probe norm.
        let mut vrng = testkit::rng(123);
        let mut expect = 0.0;
        for _ in 0..4 {
            let eps = ProbeDistribution::Gaussian.sample(&mut vrng, 1, 2);
            expect += dot(eps.data(), eps.data());
        }
        expect /= 4.0;
        assert!((report.value - expect).abs() < 1e-10, "{} vs {expect}", report.value);
        for (_, name, g) in report.gradients.iter() {
            assert!(
                g.data().iter().all(|&v| v == 0.0),
                "{name} should have zero gradient"
            );
        }
        // Identity operator: every CG solve converges in one iteration.
        assert_eq!(report.cg_iterations, vec![1, 1, 1, 1]);
        assert!(report.cg_converged.iter().all(|&c| c));
    }

    #[test]
    fn surrogate_counters_follow_probe_and_iteration_budget() {
        let (map, store) = randomized_padded(40, 2, 5);
        let at = Tensor::from_rows(&[vec![0.5, 0.3]]);
        let settings = StochasticSettings {
            probes: 3,
            tolerance: 0.0,
            distribution: ProbeDistribution::Gaussian,
        };
        let mut rng = testkit::rng(77);
        let mut counters = CostCounters::new();
        let report =
            logdet_surrogate_stochastic(&map, &store, &at, settings, &mut rng, &mut counters)
                .unwrap();
        let total: usize = report.cg_iterations.iter().map(|t| t + 1).sum();
        assert_eq!(counters.jvp_calls, total);
        assert_eq!(counters.vjp_calls, total);
        assert_eq!(counters.jvp_retained, 3);
        assert_eq!(counters.vjp_retained, 3);
        for &t in &report.cg_iterations {
            assert!(t <= 2, "CG on a 2x2 SPD system takes at most 2 iterations");
        }
    }

    #[test]
    fn surrogate_gradient_mean_approaches_exact_gradient() {
        let (map, store) = randomized_padded(50, 2, 4);
        let at = Tensor::from_rows(&[vec![0.3, -0.2]]);
        let mut counters = CostCounters::new();
        let (_, exact) = grad_logdet_exact(&map, &store, &at, &mut counters).unwrap();

        // Watch a handful of coordinates across parameters.
        let ids: Vec<ParamId> = store.ids().collect();
        let picks: Vec<(ParamId, usize)> = ids
            .iter()
            .flat_map(|&id| (0..store.get(id).numel().min(2)).map(move |k| (id, k)))
            .collect();
        let reps = 4000;
        let mut sums = vec![0.0; picks.len()];
        let mut sq_sums = vec![0.0; picks.len()];
        let mut rng = testkit::rng(505);
        let settings = StochasticSettings {
            probes: 1,
            tolerance: 0.0,
            distribution: ProbeDistribution::Gaussian,
        };
        for _ in 0..reps {
            let report =
                logdet_surrogate_stochastic(&map, &store, &at, settings, &mut rng, &mut counters)
                    .unwrap();
            for (slot, &(id, k)) in picks.iter().enumerate() {
                let g = report.gradients.get(id).data()[k];
                sums[slot] += g;
                sq_sums[slot] += g * g;
            }
        }
        for (slot, &(id, k)) in picks.iter().enumerate() {
            let mean = sums[slot] / reps as f64;
            let var = (sq_sums[slot] / reps as f64 - mean * mean).max(0.0);
            let se = (var / reps as f64).sqrt();
            let target = exact.get(id).data()[k];
            assert!(
                (mean - target).abs() <= 5.0 * se + 1e-12,
                "coordinate {slot}: mean {mean}, exact {target}, se {se}"
            );
        }
    }

    #[test]
    fn hutchinson_trace_identity_holds_for_both_probe_laws() {
        let mut rng = testkit::rng(64);
        let d = 8;
        let mut m: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..d {
            // Keep the trace well away from zero so relative error is meaningful.
            m[i * d + i] += 1.5;
        }
        let trace: f64 = (0..d).map(|i| m[i * d + i]).sum();
        for dist in [ProbeDistribution::Gaussian, ProbeDistribution::Rademacher] {
            let mut prng = testkit::rng(65);
            let probes = 50_000;
            let mut acc = 0.0;
            for _ in 0..probes {
                let eps = dist.sample(&mut prng, 1, d);
                let me = matvec(&m, d, eps.data());
                acc += dot(eps.data(), &me);
            }
            let est = acc / probes as f64;
            let rel = (est - trace).abs() / trace.abs();
            assert!(rel < 1e-2, "{dist:?}: estimate {est} vs trace {trace}");
        }
    }

    #[test]
    fn probe_sampling_is_seeded_and_lawful() {
        let a = ProbeDistribution::Gaussian.sample(&mut testkit::rng(4), 3, 5);
        let b = ProbeDistribution::Gaussian.sample(&mut testkit::rng(4), 3, 5);
        assert_eq!(a.data(), b.data());
        let r = ProbeDistribution::Rademacher.sample(&mut testkit::rng(4), 10, 10);
        assert!(r.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn mvp_routine_carries_its_dimension() {
        let (map, store) = randomized_padded(3, 2, 4);
        let at = Tensor::from_rows(&[vec![0.1, 0.2]]);
        let routine = MvpRoutine::new(&map, &store, &at);
        assert_eq!(routine.dim(), 2);
        let mut counters = CostCounters::new();
        let w = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let direct = mvp_jtj(&map, &store, &at, &w, &mut counters).unwrap();
        let via = routine.apply(&w, &mut counters).unwrap();
        assert_eq!(via.data(), direct.data());
    }

    #[test]
    fn surrogate_validates_its_settings() {
        let (map, store) = randomized_padded(3, 2, 4);
        let at = Tensor::from_rows(&[vec![0.1, 0.2]]);
        let mut counters = CostCounters::new();
        let bad = StochasticSettings {
            probes: 0,
            tolerance: 0.0,
            distribution: ProbeDistribution::Gaussian,
        };
        let err = logdet_surrogate_stochastic(
            &map,
            &store,
            &at,
            bad,
            &mut testkit::rng(1),
            &mut counters,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
