//! Rectangular (injective) flows.
//!
//! A rectangular flow factors as g = f ∘ pad ∘ h: a square flow h on the
//! low-dimensional space, a fixed zero-padding embedding into the ambient
//! space, and a square flow f on the ambient space. The image of g is a
//! d-dimensional manifold in R^D, and the density it carries involves the
//! Gram matrix of the injective part's Jacobian rather than a square
//! determinant:
//!
//! log p(x) = log p_Z(z) + log |det J[h^{-1}]|(v) − ½ log det(JᵀJ)(v),
//!
//! where v is the low-dimensional representation pad†(f^{-1}(x)), z = h^{-1}(v),
//! and J is the Jacobian of f ∘ pad at v. Points off the manifold are
//! projected through the left inverse g† = h^{-1} ∘ pad† ∘ f^{-1} before the
//! density is read off, and a reconstruction error ‖x − g(g†(x))‖² measures
//! how far off they were.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    indices, jvp, Binding, DifferentiableMap, DualValue, DualVar, ParamId, ParamStore, Tape,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::flows::{SquareFlow, StandardGaussian};
use crate::linalg::{cholesky_lower, logdet_from_cholesky};

/// Fixed embedding of R^d into R^D: coordinate j of the low space lands at
/// ambient column `cols[j]` and every other ambient coordinate is zero. The
/// columns are drawn once from a seeded permutation and then frozen; they
/// are part of the model and travel with checkpoints.
#[derive(Debug, Clone)]
pub struct PadSpec {
    low_dim: usize,
    high_dim: usize,
    cols: Rc<[usize]>,
}

impl PadSpec {
    /// Embedding columns sampled as the prefix of a seeded permutation of
    /// 0..D. Requires 1 <= d <= D; d = D degenerates to a permutation.
    pub fn seeded(low_dim: usize, high_dim: usize, seed: u64) -> Result<Self> {
        let mut perm: Vec<usize> = (0..high_dim).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        perm.truncate(low_dim);
        PadSpec::with_columns(low_dim, high_dim, perm)
    }

    /// The plain prefix embedding: low coordinate j lands at ambient column j.
    pub fn identity(low_dim: usize, high_dim: usize) -> Result<Self> {
        PadSpec::with_columns(low_dim, high_dim, (0..low_dim).collect())
    }

    pub fn with_columns(low_dim: usize, high_dim: usize, cols: Vec<usize>) -> Result<Self> {
        if low_dim == 0 {
            return Err(Error::invalid("padding needs at least one low coordinate"));
        }
        if low_dim > high_dim {
            return Err(Error::invalid(format!(
                "low dimension {low_dim} exceeds ambient dimension {high_dim}"
            )));
        }
        if cols.len() != low_dim {
            return Err(Error::invalid(format!(
                "expected {low_dim} embedding columns, got {}",
                cols.len()
            )));
        }
        let mut seen = vec![false; high_dim];
        for &c in &cols {
            if c >= high_dim {
                return Err(Error::invalid(format!(
                    "embedding column {c} out of range for ambient dimension {high_dim}"
                )));
            }
            if seen[c] {
                return Err(Error::invalid(format!("duplicate embedding column {c}")));
            }
            seen[c] = true;
        }
        Ok(PadSpec {
            low_dim,
            high_dim,
            cols: indices(cols),
        })
    }

    pub fn low_dim(&self) -> usize {
        self.low_dim
    }

    pub fn high_dim(&self) -> usize {
        self.high_dim
    }

    pub fn columns(&self) -> &[usize] {
        &self.cols
    }

    /// [n, d] -> [n, D], zeros everywhere except the embedding columns.
    pub fn pad(&self, z: &Tensor) -> Result<Tensor> {
        z.expect_batch(self.low_dim, "pad")?;
        let n = z.rows();
        let mut out = vec![0.0; n * self.high_dim];
        for r in 0..n {
            let row = z.row(r);
            for (j, &c) in self.cols.iter().enumerate() {
                out[r * self.high_dim + c] = row[j];
            }
        }
        Ok(Tensor::new(vec![n, self.high_dim], out))
    }

    /// [n, D] -> [n, d]; the transpose of padding, which drops the
    /// complement coordinates. Exact inverse of `pad` on the image.
    pub fn left_inverse(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_batch(self.high_dim, "pad left inverse")?;
        let n = x.rows();
        let mut out = Vec::with_capacity(n * self.low_dim);
        for r in 0..n {
            let row = x.row(r);
            out.extend(self.cols.iter().map(|&c| row[c]));
        }
        Ok(Tensor::new(vec![n, self.low_dim], out))
    }

    pub fn pad_taped(&self, tape: &mut Tape, z: Var) -> Var {
        tape.scatter_cols(z, self.cols.clone(), self.high_dim)
    }

    pub fn left_inverse_taped(&self, tape: &mut Tape, x: Var) -> Var {
        tape.gather_cols(x, self.cols.clone())
    }
}

/// The injective half f ∘ pad as a plain differentiable map from R^d to R^D;
/// Jacobian products of the volume-change term are taken against this.
#[derive(Debug, Clone)]
pub struct PaddedFlow {
    flow: SquareFlow,
    pad: PadSpec,
}

impl PaddedFlow {
    pub fn new(flow: SquareFlow, pad: PadSpec) -> Result<Self> {
        if flow.dim() != pad.high_dim() {
            return Err(Error::invalid(format!(
                "ambient flow dimension {} does not match padding target {}",
                flow.dim(),
                pad.high_dim()
            )));
        }
        Ok(PaddedFlow { flow, pad })
    }

    pub fn pad(&self) -> &PadSpec {
        &self.pad
    }

    pub fn flow(&self) -> &SquareFlow {
        &self.flow
    }
}

impl DifferentiableMap for PaddedFlow {
    fn input_dim(&self) -> usize {
        self.pad.low_dim()
    }

    fn output_dim(&self) -> usize {
        self.pad.high_dim()
    }

    fn forward(&self, params: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let padded = self.pad.pad(z)?;
        Ok(self.flow.forward(params, &padded)?.0)
    }

    fn forward_dual(&self, params: &ParamStore, z: &DualValue) -> Result<DualValue> {
        let padded = DualValue {
            primal: self.pad.pad(&z.primal)?,
            tangent: self.pad.pad(&z.tangent)?,
        };
        self.flow.forward_dual(params, &padded)
    }

    fn forward_taped(&self, tape: &mut Tape, binding: &Binding, z: Var) -> Result<Var> {
        let padded = self.pad.pad_taped(tape, z);
        Ok(self.flow.forward_taped(tape, binding, padded)?.0)
    }

    fn forward_dual_taped(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        z: DualVar,
    ) -> Result<DualVar> {
        let padded = DualVar {
            primal: self.pad.pad_taped(tape, z.primal),
            tangent: self.pad.pad_taped(tape, z.tangent),
        };
        self.flow.forward_dual_taped(tape, binding, padded)
    }
}

/// g = f ∘ pad ∘ h with a unit Gaussian base on the low space.
#[derive(Debug, Clone)]
pub struct RectangularFlow {
    f_big: SquareFlow,
    pad: PadSpec,
    h_low: SquareFlow,
    base: StandardGaussian,
}

impl RectangularFlow {
    pub fn new(f_big: SquareFlow, pad: PadSpec, h_low: SquareFlow) -> Result<Self> {
        if f_big.dim() != pad.high_dim() {
            return Err(Error::invalid(format!(
                "ambient flow dimension {} does not match padding target {}",
                f_big.dim(),
                pad.high_dim()
            )));
        }
        if h_low.dim() != pad.low_dim() {
            return Err(Error::invalid(format!(
                "low flow dimension {} does not match padding source {}",
                h_low.dim(),
                pad.low_dim()
            )));
        }
        let base = StandardGaussian::new(pad.low_dim());
        Ok(RectangularFlow {
            f_big,
            pad,
            h_low,
            base,
        })
    }

    pub fn low_dim(&self) -> usize {
        self.pad.low_dim()
    }

    pub fn high_dim(&self) -> usize {
        self.pad.high_dim()
    }

    pub fn ambient_flow(&self) -> &SquareFlow {
        &self.f_big
    }

    pub fn low_flow(&self) -> &SquareFlow {
        &self.h_low
    }

    pub fn pad_spec(&self) -> &PadSpec {
        &self.pad
    }

    pub fn base(&self) -> &StandardGaussian {
        &self.base
    }

    /// Parameters of the injective part f ∘ pad.
    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.f_big.param_ids()
    }

    /// Parameters of the low-space flow h.
    pub fn eta_ids(&self) -> Vec<ParamId> {
        self.h_low.param_ids()
    }

    /// The injective half as a standalone map (shares parameter ids).
    pub fn padded(&self) -> PaddedFlow {
        PaddedFlow {
            flow: self.f_big.clone(),
            pad: self.pad.clone(),
        }
    }

    /// z -> x = f(pad(h(z))), batched [n, d] -> [n, D].
    pub fn forward(&self, params: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let (w, _) = self.h_low.forward(params, z)?;
        let padded = self.pad.pad(&w)?;
        Ok(self.f_big.forward(params, &padded)?.0)
    }

    /// x -> z = h^{-1}(pad†(f^{-1}(x))), batched [n, D] -> [n, d]. Defined for
    /// every x; off-manifold points are projected.
    pub fn left_inverse(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (u, _) = self.f_big.inverse(params, x)?;
        let v = self.pad.left_inverse(&u)?;
        Ok(self.h_low.inverse(params, &v)?.0)
    }

    /// The low-dimensional representation v = pad†(f^{-1}(x)), where the
    /// volume-change term is evaluated.
    pub fn low_representation(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (u, _) = self.f_big.inverse(params, x)?;
        self.pad.left_inverse(&u)
    }

    /// Per-sample squared reconstruction error ‖x − g(g†(x))‖², [n, D] -> [n].
    /// Zero (to round-off) exactly on the manifold.
    pub fn reconstruction_errors(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let z = self.left_inverse(params, x)?;
        let xhat = self.forward(params, &z)?;
        let n = x.rows();
        let dd = self.high_dim();
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let mut s = 0.0;
            for j in 0..dd {
                let diff = x.at(r, j) - xhat.at(r, j);
                s += diff * diff;
            }
            out.push(s);
        }
        Ok(Tensor::vector(out))
    }

    /// n draws from the model: base noise pushed through g.
    pub fn sample(&self, params: &ParamStore, rng: &mut impl Rng, n: usize) -> Result<Tensor> {
        let z = self.base.sample(rng, n);
        self.forward(params, &z)
    }
}

/// Options for the exact volume-change computation. `jitter` is added to the
/// Gram diagonal before factorization; zero (the default) means the raw
/// matrix is factored and near-singular Jacobians surface as errors.
#[derive(Debug, Clone, Copy)]
pub struct ExactLogDet {
    pub jitter: f64,
}

impl Default for ExactLogDet {
    fn default() -> Self {
        ExactLogDet { jitter: 0.0 }
    }
}

/// Per-sample log det(JᵀJ + jitter·I) at the rows of `v`, where J is the
/// Jacobian of f ∘ pad. The d Jacobian columns are produced by d batched
/// tangent sweeps; each sample's d×d Gram matrix is then factored on its
/// own, so a single ill-conditioned point fails alone.
pub fn gram_logdets(
    rf: &RectangularFlow,
    params: &ParamStore,
    v: &Tensor,
    opts: ExactLogDet,
) -> Result<Vec<Result<f64>>> {
    v.expect_batch(rf.low_dim(), "gram log-determinant")?;
    let padded = rf.padded();
    let n = v.rows();
    let d = rf.low_dim();
    let dd = rf.high_dim();
    let mut jcols: Vec<Tensor> = Vec::with_capacity(d);
    for j in 0..d {
        let mut t = Tensor::zeros(vec![n, d]);
        for r in 0..n {
            t.data_mut()[r * d + j] = 1.0;
        }
        jcols.push(jvp(&padded, params, v, &t)?.tangent);
    }
    let mut out = Vec::with_capacity(n);
    let mut a = vec![0.0; d * d];
    for r in 0..n {
        for i in 0..d {
            for j in i..d {
                let dot: f64 = (0..dd)
                    .map(|k| jcols[i].at(r, k) * jcols[j].at(r, k))
                    .sum();
                a[i * d + j] = dot;
                a[j * d + i] = dot;
            }
        }
        if opts.jitter > 0.0 {
            for i in 0..d {
                a[i * d + i] += opts.jitter;
            }
        }
        out.push(
            cholesky_lower(&a, d, "gram log-determinant").map(|l| logdet_from_cholesky(&l, d)),
        );
    }
    Ok(out)
}

/// Exact log density under the rectangular flow, [n, D] -> [n]. Fails on the
/// first ill-conditioned Gram matrix; use [`rect_log_density_partial`] when
/// individual points should be excluded instead.
pub fn rect_log_density(
    rf: &RectangularFlow,
    params: &ParamStore,
    x: &Tensor,
    opts: ExactLogDet,
) -> Result<Tensor> {
    let (vals, _) = density_core(rf, params, x, opts)?;
    let mut out = Vec::with_capacity(vals.len());
    for item in vals {
        out.push(item?);
    }
    Ok(Tensor::vector(out))
}

/// Exact log density with per-point failure reporting: ill-conditioned points
/// come back as None and are tallied, finite points carry their density.
pub fn rect_log_density_partial(
    rf: &RectangularFlow,
    params: &ParamStore,
    x: &Tensor,
    opts: ExactLogDet,
) -> Result<(Vec<Option<f64>>, usize)> {
    let (vals, _) = density_core(rf, params, x, opts)?;
    let mut excluded = 0;
    let out = vals
        .into_iter()
        .map(|item| match item {
            Ok(v) => Some(v),
            Err(_) => {
                excluded += 1;
                None
            }
        })
        .collect();
    Ok((out, excluded))
}

fn density_core(
    rf: &RectangularFlow,
    params: &ParamStore,
    x: &Tensor,
    opts: ExactLogDet,
) -> Result<(Vec<Result<f64>>, Tensor)> {
    x.expect_batch(rf.high_dim(), "log density")?;
    let (u, _) = rf.f_big.inverse(params, x)?;
    let v = rf.pad.left_inverse(&u)?;
    let (z, ld_h_inv) = rf.h_low.inverse(params, &v)?;
    let logp = rf.base.log_prob(&z)?;
    let grams = gram_logdets(rf, params, &v, opts)?;
    let n = x.rows();
    let mut out = Vec::with_capacity(n);
    for (r, gram) in grams.into_iter().enumerate() {
        out.push(gram.map(|g| logp.data()[r] + ld_h_inv.data()[r] - 0.5 * g));
    }
    Ok((out, v))
}

/// Arc lengths of consecutive image points as a single latent coordinate
/// sweeps a uniform grid from `lo` to `hi`. Only defined for one-dimensional
/// latents; the max/min ratio of the result measures how evenly the latent
/// parameterizes the curve.
pub fn speed_profile(
    rf: &RectangularFlow,
    params: &ParamStore,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if rf.low_dim() != 1 {
        return Err(Error::invalid(
            "speed profile needs a one-dimensional latent space",
        ));
    }
    if steps < 2 || !(hi > lo) {
        return Err(Error::invalid("speed profile needs an increasing grid"));
    }
    let h = (hi - lo) / (steps - 1) as f64;
    let grid = Tensor::new(
        vec![steps, 1],
        (0..steps).map(|i| lo + i as f64 * h).collect(),
    );
    let x = rf.forward(params, &grid)?;
    let dd = rf.high_dim();
    let mut out = Vec::with_capacity(steps - 1);
    for r in 0..steps - 1 {
        let mut s = 0.0;
        for j in 0..dd {
            let diff = x.at(r + 1, j) - x.at(r, j);
            s += diff * diff;
        }
        out.push(s.sqrt());
    }
    Ok(out)
}

/// Max/min ratio of a speed profile; 1 is a perfectly even parameterization.
pub fn speed_ratio(profile: &[f64]) -> f64 {
    let mut min = f64::INFINITY;
    let mut max = 0.0f64;
    for &v in profile {
        min = min.min(v);
        max = max.max(v);
    }
    max / min
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{square_log_prob, FlowLayer};
    use crate::testkit;

    fn randomized_square(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        couplings: usize,
        scale: f64,
    ) -> SquareFlow {
        let before: Vec<ParamId> = store.ids().collect();
        let flow = SquareFlow::realnvp(store, rng, prefix, dim, couplings, &[8], false);
        let after: Vec<ParamId> = store.ids().collect();
        for id in after {
            if before.contains(&id) {
                continue;
            }
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
        flow
    }

    fn randomized_rect(seed: u64, d: usize, dd: usize) -> (RectangularFlow, ParamStore) {
        let mut rng = testkit::rng(seed);
        let mut store = ParamStore::new();
        let f_big = randomized_square(&mut store, &mut rng, "f", dd, 3, 0.3);
        let h_low = if d >= 2 {
            randomized_square(&mut store, &mut rng, "h", d, 2, 0.3)
        } else {
            SquareFlow::identity(d)
        };
        let pad = PadSpec::seeded(d, dd, seed ^ 0x9e37).unwrap();
        let rf = RectangularFlow::new(f_big, pad, h_low).unwrap();
        (rf, store)
    }

    #[test]
    fn pad_and_left_inverse_hand_values() {
        let pad = PadSpec::with_columns(2, 4, vec![3, 1]).unwrap();
        let z = Tensor::from_rows(&[vec![5.0, 7.0]]);
        let x = pad.pad(&z).unwrap();
        assert_eq!(x.data(), &[0.0, 7.0, 0.0, 5.0]);
        let back = pad.left_inverse(&x).unwrap();
        assert_eq!(back.data(), z.data());
    }

    #[test]
    fn pad_spec_rejects_bad_dimensions() {
        assert!(PadSpec::identity(0, 3).is_err());
        assert!(PadSpec::identity(4, 3).is_err());
        assert!(PadSpec::identity(3, 3).is_ok());
        assert!(PadSpec::with_columns(2, 4, vec![1, 1]).is_err());
        assert!(PadSpec::with_columns(2, 4, vec![1, 4]).is_err());
    }

    #[test]
    fn seeded_padding_is_reproducible() {
        let a = PadSpec::seeded(3, 8, 42).unwrap();
        let b = PadSpec::seeded(3, 8, 42).unwrap();
        assert_eq!(a.columns(), b.columns());
        let c = PadSpec::seeded(3, 8, 43).unwrap();
        assert_ne!(a.columns(), c.columns());
    }

    #[test]
    fn taped_padding_matches_raw() {
        let pad = PadSpec::seeded(3, 6, 7).unwrap();
        let z = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        let raw = pad.pad(&z).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let xv = pad.pad_taped(&mut tape, zv);
        assert_eq!(tape.value(xv).data(), raw.data());
        let backv = pad.left_inverse_taped(&mut tape, xv);
        assert_eq!(tape.value(backv).data(), tape.value(zv).data());
    }

    #[test]
    fn identity_initialized_model_embeds_by_padding() {
        let mut rng = testkit::rng(3);
        let mut store = ParamStore::new();
        let f_big = SquareFlow::realnvp(&mut store, &mut rng, "f", 4, 2, &[6], false);
        let pad = PadSpec::identity(2, 4).unwrap();
        let h_low = SquareFlow::identity(2);
        let rf = RectangularFlow::new(f_big, pad, h_low).unwrap();
        let z = Tensor::from_rows(&[vec![0.4, -1.1]]);
        let x = rf.forward(&store, &z).unwrap();
        assert_eq!(x.data(), &[0.4, -1.1, 0.0, 0.0]);
        let back = rf.left_inverse(&store, &x).unwrap();
        assert_eq!(back.data(), z.data());
    }

    #[test]
    fn left_inverse_inverts_forward_off_identity() {
        let (rf, store) = randomized_rect(11, 2, 5);
        let mut rng = testkit::rng(50);
        let z = Tensor::new(
            vec![4, 2],
            (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        );
        let x = rf.forward(&store, &z).unwrap();
        let back = rf.left_inverse(&store, &x).unwrap();
        for (a, b) in back.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let recon = rf.reconstruction_errors(&store, &x).unwrap();
        for &e in recon.data() {
            assert!(e < 1e-18, "on-manifold reconstruction {e}");
        }
    }

    #[test]
    fn reconstruction_error_measures_off_manifold_component() {
        // Identity flows: g(z) = pad(z), so g(g†(x)) zeroes the complement
        // coordinates and the error is exactly their squared norm.
        let pad = PadSpec::identity(1, 3).unwrap();
        let rf = RectangularFlow::new(SquareFlow::identity(3), pad, SquareFlow::identity(1))
            .unwrap();
        let store = ParamStore::new();
        let x = Tensor::from_rows(&[vec![2.0, 3.0, -4.0]]);
        let recon = rf.reconstruction_errors(&store, &x).unwrap();
        assert!((recon.data()[0] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn pure_padding_density_is_base_density() {
        // f and h identity: J = padding matrix, JᵀJ = I, so on the manifold
        // the density is exactly the base log prob of the low coordinates.
        let pad = PadSpec::with_columns(2, 4, vec![2, 0]).unwrap();
        let rf = RectangularFlow::new(SquareFlow::identity(4), pad, SquareFlow::identity(2))
            .unwrap();
        let store = ParamStore::new();
        let z = Tensor::from_rows(&[vec![0.7, -0.2], vec![1.5, 0.9]]);
        let x = rf.forward(&store, &z).unwrap();
        let lp = rect_log_density(&rf, &store, &x, ExactLogDet::default()).unwrap();
        let base = StandardGaussian::new(2);
        let expect = base.log_prob(&z).unwrap();
        for (a, b) in lp.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn diag_scaling_density_hand_value() {
        // f scales ambient coordinate j by s_j: the Jacobian of f ∘ pad has
        // columns s_{c_j} e_{c_j}, so ½ log det(JᵀJ) = Σ_j log s_{c_j}.
        let mut store = ParamStore::new();
        let ls = store.register(
            "c",
            Tensor::vector(vec![0.3, -0.7, 1.1]),
        );
        let sh = store.register("t", Tensor::vector(vec![0.0, 0.0, 0.0]));
        let f_big = SquareFlow::from_layers(
            3,
            vec![FlowLayer::DiagAffine {
                log_scale: ls,
                shift: sh,
            }],
        );
        let pad = PadSpec::with_columns(2, 3, vec![2, 0]).unwrap();
        let rf = RectangularFlow::new(f_big, pad, SquareFlow::identity(2)).unwrap();
        let z = Tensor::from_rows(&[vec![0.4, -0.9]]);
        let x = rf.forward(&store, &z).unwrap();
        let lp = rect_log_density(&rf, &store, &x, ExactLogDet::default()).unwrap();
        let base = StandardGaussian::new(2);
        let expect = base.log_prob(&z).unwrap().data()[0] - (1.1 + 0.3);
        assert!((lp.data()[0] - expect).abs() < 1e-12, "{} vs {expect}", lp.data()[0]);
    }

    #[test]
    fn jitter_shifts_gram_logdet_by_known_amount() {
        // Identity maps give JᵀJ = I, so jitter λ turns each logdet into
        // d ln(1 + λ).
        let pad = PadSpec::identity(3, 5).unwrap();
        let rf = RectangularFlow::new(SquareFlow::identity(5), pad, SquareFlow::identity(3))
            .unwrap();
        let store = ParamStore::new();
        let v = Tensor::zeros(vec![2, 3]);
        let plain = gram_logdets(&rf, &store, &v, ExactLogDet::default()).unwrap();
        for g in &plain {
            assert!(g.as_ref().unwrap().abs() < 1e-14);
        }
        let jit = gram_logdets(&rf, &store, &v, ExactLogDet { jitter: 1e-4 }).unwrap();
        let expect = 3.0 * (1.0 + 1e-4f64).ln();
        for g in &jit {
            assert!((g.as_ref().unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_full_dimension_matches_square_density() {
        // With d = D the padding is a permutation and the model is an
        // ordinary square flow; the Gram term must collapse to the usual
        // log |det| so both densities agree.
        let (rf, store) = randomized_rect(21, 4, 4);
        let mut composed_layers = Vec::new();
        composed_layers.extend(rf.low_flow().layers().iter().cloned());
        // pad: ambient[cols[j]] = low[j]  <=>  gather perm with
        // perm[cols[j]] = j.
        let mut perm = vec![0usize; 4];
        for (j, &c) in rf.pad_spec().columns().iter().enumerate() {
            perm[c] = j;
        }
        composed_layers.push(FlowLayer::Permutation {
            perm: indices(perm),
        });
        composed_layers.extend(rf.ambient_flow().layers().iter().cloned());
        let composed = SquareFlow::from_layers(4, composed_layers);
        let base = StandardGaussian::new(4);

        let mut rng = testkit::rng(60);
        let z = Tensor::new(
            vec![6, 4],
            (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let x = rf.forward(&store, &z).unwrap();
        let rect = rect_log_density(&rf, &store, &x, ExactLogDet::default()).unwrap();
        let square = square_log_prob(&composed, &base, &store, &x).unwrap();
        for (a, b) in rect.data().iter().zip(square.data()) {
            assert!((a - b).abs() < 1e-8, "rect {a} vs square {b}");
        }
    }

    #[test]
    fn density_decomposes_into_its_three_terms() {
        let (rf, store) = randomized_rect(33, 2, 5);
        let mut rng = testkit::rng(70);
        let z = Tensor::new(
            vec![3, 2],
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let x = rf.forward(&store, &z).unwrap();
        let lp = rect_log_density(&rf, &store, &x, ExactLogDet::default()).unwrap();
        let v = rf.low_representation(&store, &x).unwrap();
        let (z2, ld_h_inv) = rf.low_flow().inverse(&store, &v).unwrap();
        let logp = rf.base().log_prob(&z2).unwrap();
        let grams = gram_logdets(&rf, &store, &v, ExactLogDet::default()).unwrap();
        for r in 0..3 {
            let expect =
                logp.data()[r] + ld_h_inv.data()[r] - 0.5 * grams[r].as_ref().unwrap();
            assert!((lp.data()[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_density_counts_no_exclusions_on_healthy_models() {
        let (rf, store) = randomized_rect(44, 2, 4);
        let mut rng = testkit::rng(80);
        let z = Tensor::new(
            vec![5, 2],
            (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let x = rf.forward(&store, &z).unwrap();
        let (vals, excluded) =
            rect_log_density_partial(&rf, &store, &x, ExactLogDet::default()).unwrap();
        assert_eq!(excluded, 0);
        assert!(vals.iter().all(|v| v.is_some()));
    }

    #[test]
    fn speed_profile_is_uniform_for_linear_embeddings() {
        let pad = PadSpec::identity(1, 2).unwrap();
        let rf = RectangularFlow::new(SquareFlow::identity(2), pad, SquareFlow::identity(1))
            .unwrap();
        let store = ParamStore::new();
        let profile = speed_profile(&rf, &store, -3.0, 3.0, 61).unwrap();
        assert_eq!(profile.len(), 60);
        for &v in &profile {
            assert!((v - 0.1).abs() < 1e-12, "segment {v}");
        }
        assert!((speed_ratio(&profile) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn speed_profile_detects_uneven_parameterization() {
        let (rf, store) = randomized_rect(55, 1, 2);
        let profile = speed_profile(&rf, &store, -2.0, 2.0, 101).unwrap();
        assert!(speed_ratio(&profile) > 1.0 + 1e-6);
        let err = speed_profile(&rf, &store, -2.0, 2.0, 1);
        assert!(err.is_err());
        let (rf2, store2) = randomized_rect(56, 2, 4);
        assert!(speed_profile(&rf2, &store2, -2.0, 2.0, 10).is_err());
    }

    #[test]
    fn theta_and_eta_partition_the_parameters() {
        let (rf, store) = randomized_rect(66, 2, 4);
        let theta = rf.theta_ids();
        let eta = rf.eta_ids();
        for t in &theta {
            assert!(!eta.contains(t), "theta and eta overlap");
        }
        let all: Vec<ParamId> = store.ids().collect();
        assert_eq!(theta.len() + eta.len(), all.len());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (rf, store) = randomized_rect(77, 2, 5);
        let a = rf.sample(&store, &mut testkit::rng(5), 12).unwrap();
        let b = rf.sample(&store, &mut testkit::rng(5), 12).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
