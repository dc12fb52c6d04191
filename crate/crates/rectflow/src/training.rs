//! Training loops for rectangular flows: the joint maximum-likelihood
//! objective with annealed likelihood weight, the alternating two-step
//! baseline, Adam, and validation-driven early stopping.
//!
//! The joint loss minimized per batch is
//!
//! ```text
//! β · mean ‖x − f(f†(x))‖²  −  λ(epoch) · mean [ log p_Z(z) + log|det J[h⁻¹]| − ½ log det(JᵀJ) ]
//! ```
//!
//! where f is the injective half (ambient flow ∘ padding), z the latent
//! code, and λ ramps linearly from 0 to 1 across the annealing window. The
//! Gram log-determinant enters either exactly (recorded forward-mode passes)
//! or through the stochastic surrogate whose gradient is unbiased.
//!
//! The two-step baseline never touches the Gram term: its likelihood pass
//! updates only the low flow (the injective half's Jacobian does not depend
//! on those parameters), and its reconstruction pass updates only the
//! injective half.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{param_grad, Binding, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::estimators::{
    logdet_jtj_taped, logdet_surrogate_taped, CostCounters, GradEstimator,
};
use crate::metrics::fid_like;
use crate::rectangular::{rect_log_density_partial, ExactLogDet, RectangularFlow};

/// How the model is optimized: jointly by maximum likelihood, or by the
/// alternating likelihood/reconstruction baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ml,
    TwoStep,
}

/// Loss shape shared by both methods.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveConfig {
    pub method: Method,
    /// Reconstruction weight β > 0.
    pub beta: f64,
    /// Epoch at which the likelihood weight λ starts rising from 0.
    pub anneal_start: usize,
    /// Epoch at which λ reaches 1 and stays there.
    pub anneal_full: usize,
    pub estimator: GradEstimator,
    /// Optional diagonal regularizer added to the Gram matrix on the exact
    /// path.
    pub jitter: f64,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!(
                "reconstruction weight must be positive, got {}",
                self.beta
            )));
        }
        if self.anneal_start > self.anneal_full {
            return Err(Error::invalid(format!(
                "annealing window is reversed: start {} > full {}",
                self.anneal_start, self.anneal_full
            )));
        }
        if self.jitter < 0.0 {
            return Err(Error::invalid("jitter must be >= 0"));
        }
        Ok(())
    }
}

/// Likelihood weight λ: zero before `t0`, one from `t1` on, linear between.
pub fn annealing_weight(epoch: f64, t0: f64, t1: f64) -> f64 {
    assert!(t0 <= t1, "annealing window is reversed");
    if epoch < t0 {
        0.0
    } else if epoch >= t1 {
        1.0
    } else {
        (epoch - t0) / (t1 - t0)
    }
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e−8), no weight
/// decay, no gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        for id in store.ids() {
            let n = store.get(id).numel();
            m.insert(id, vec![0.0; n]);
            v.insert(id, vec![0.0; n]);
        }
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over the listed parameters; the rest are untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamStore,
        ids: &[ParamId],
    ) -> Result<()> {
        for &id in ids {
            let g = grads.get(id);
            if !g.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite gradient for parameter '{}' at optimizer step {}",
                    store.name(id),
                    self.step + 1
                )));
            }
            if g.numel() != store.get(id).numel() {
                return Err(Error::invalid(format!(
                    "gradient shape mismatch for parameter '{}'",
                    store.name(id)
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &id in ids {
            let g = grads.get(id).data().to_vec();
            let m = self.m.get_mut(&id).expect("optimizer knows this parameter");
            let v = self.v.get_mut(&id).expect("optimizer knows this parameter");
            let p = store.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One evaluated batch of the joint objective: scalar loss, gradients for
/// every parameter in the store, and bookkeeping.
#[derive(Debug)]
pub struct LossEval {
    pub loss: f64,
    pub gradients: ParamStore,
    /// Mean squared reconstruction error of the batch.
    pub recon: f64,
    /// Stochastic path only: probes whose CG solve hit the iteration cap.
    pub cg_unconverged: usize,
}

/// The joint maximum-likelihood loss on one batch, with gradients. Below the
/// annealing window this is exactly β times the mean reconstruction error
/// and the log-determinant machinery never runs.
pub fn ml_loss(
    rf: &RectangularFlow,
    store: &ParamStore,
    batch: &Tensor,
    cfg: &ObjectiveConfig,
    epoch: usize,
    rng: &mut impl Rng,
    counters: &mut CostCounters,
) -> Result<LossEval> {
    batch.expect_batch(rf.high_dim(), "training batch")?;
    cfg.validate()?;
    let n = batch.rows();
    let lambda = annealing_weight(
        epoch as f64,
        cfg.anneal_start as f64,
        cfg.anneal_full as f64,
    );

    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, store, true);
    let xv = tape.constant(batch.clone());
    let (u, _) = rf.ambient_flow().inverse_taped(&mut tape, &binding, xv)?;
    let v = rf.pad_spec().left_inverse_taped(&mut tape, u);
    let w = rf.pad_spec().pad_taped(&mut tape, v);
    let (xhat, _) = rf.ambient_flow().forward_taped(&mut tape, &binding, w)?;
    let neg_x = tape.affine_const(xv, -1.0, 0.0);
    let diff = tape.add(xhat, neg_x);
    let recon_per = tape.row_dot(diff, diff);
    let recon_sum = tape.sum_all(recon_per);
    let recon = tape.value(recon_sum).item() / n as f64;

    let mut cg_unconverged = 0;
    let loss_var = if lambda > 0.0 {
        let (z, ld_h_inv) = rf.low_flow().inverse_taped(&mut tape, &binding, v)?;
        let logp = rf.base().log_prob_taped(&mut tape, z);
        let padded = rf.padded();
        let gram_ld = match cfg.estimator {
            GradEstimator::Exact => {
                logdet_jtj_taped(&mut tape, &binding, &padded, v, cfg.jitter, counters)?
            }
            GradEstimator::Stochastic(settings) => {
                let sur = logdet_surrogate_taped(
                    &mut tape, &binding, &padded, store, v, settings, rng, counters,
                )?;
                cg_unconverged += sur.cg_converged.iter().filter(|&&ok| !ok).count();
                sur.term
            }
        };
        let s = tape.add(logp, ld_h_inv);
        let neg_half = tape.affine_const(gram_ld, -0.5, 0.0);
        let like_per = tape.add(s, neg_half);
        let like_sum = tape.sum_all(like_per);
        let r = tape.affine_const(recon_sum, cfg.beta / n as f64, 0.0);
        let l = tape.affine_const(like_sum, -lambda / n as f64, 0.0);
        tape.add(r, l)
    } else {
        tape.affine_const(recon_sum, cfg.beta / n as f64, 0.0)
    };

    let loss = tape.value(loss_var).item();
    if !loss.is_finite() {
        return Err(Error::invalid(format!("loss became non-finite ({loss})")));
    }
    let gradients = param_grad(&mut tape, loss_var, &binding, store)?;
    Ok(LossEval {
        loss,
        gradients,
        recon,
        cg_unconverged,
    })
}

/// Two-step likelihood pass: one Adam step per batch on the λ-weighted
/// low-space likelihood, updating only the listed (low-flow) parameters.
/// The injective half is applied outside the tape, so its parameters cannot
/// move — and the Gram term, which they alone control, drops out entirely.
/// Returns the mean objective. A pass with λ = 0 is skipped outright.
pub fn likelihood_pass(
    rf: &RectangularFlow,
    store: &mut ParamStore,
    batches: &[Tensor],
    lambda: f64,
    opt: &mut AdamState,
    ids: &[ParamId],
) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for batch in batches {
        let n = batch.rows();
        let (u, _) = rf.ambient_flow().inverse(store, batch)?;
        let v = rf.pad_spec().left_inverse(&u)?;
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, store, true);
        let vv = tape.constant(v);
        let (z, ld_h_inv) = rf.low_flow().inverse_taped(&mut tape, &binding, vv)?;
        let logp = rf.base().log_prob_taped(&mut tape, z);
        let per = tape.add(logp, ld_h_inv);
        let sum = tape.sum_all(per);
        let obj = tape.affine_const(sum, -lambda / n as f64, 0.0);
        let value = tape.value(obj).item();
        if !value.is_finite() {
            return Err(Error::invalid(format!(
                "likelihood objective became non-finite ({value})"
            )));
        }
        let grads = param_grad(&mut tape, obj, &binding, store)?;
        opt.step(store, &grads, ids)?;
        total += value;
    }
    Ok(total / batches.len() as f64)
}

/// Two-step reconstruction pass: one Adam step per batch on the β-weighted
/// reconstruction error, updating only the listed (injective-half)
/// parameters. Returns the mean objective.
pub fn reconstruction_pass(
    rf: &RectangularFlow,
    store: &mut ParamStore,
    batches: &[Tensor],
    beta: f64,
    opt: &mut AdamState,
    ids: &[ParamId],
) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches {
        let n = batch.rows();
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, store, true);
        let xv = tape.constant(batch.clone());
        let (u, _) = rf.ambient_flow().inverse_taped(&mut tape, &binding, xv)?;
        let v = rf.pad_spec().left_inverse_taped(&mut tape, u);
        let w = rf.pad_spec().pad_taped(&mut tape, v);
        let (xhat, _) = rf.ambient_flow().forward_taped(&mut tape, &binding, w)?;
        let neg_x = tape.affine_const(xv, -1.0, 0.0);
        let diff = tape.add(xhat, neg_x);
        let recon_per = tape.row_dot(diff, diff);
        let sum = tape.sum_all(recon_per);
        let obj = tape.affine_const(sum, beta / n as f64, 0.0);
        let value = tape.value(obj).item();
        if !value.is_finite() {
            return Err(Error::invalid(format!(
                "reconstruction objective became non-finite ({value})"
            )));
        }
        let grads = param_grad(&mut tape, obj, &binding, store)?;
        opt.step(store, &grads, ids)?;
        total += value;
    }
    Ok(total / batches.len() as f64)
}

/// One epoch of the alternating baseline: a full likelihood pass over the
/// batches (low-flow parameters only), then a full reconstruction pass
/// (injective-half parameters only). Returns the two pass objectives.
pub fn two_step_epoch(
    rf: &RectangularFlow,
    store: &mut ParamStore,
    batches: &[Tensor],
    lambda: f64,
    beta: f64,
    opt_eta: &mut AdamState,
    opt_theta: &mut AdamState,
) -> Result<(f64, f64)> {
    let eta = rf.eta_ids();
    let theta = rf.theta_ids();
    let like = likelihood_pass(rf, store, batches, lambda, opt_eta, &eta)?;
    let recon = reconstruction_pass(rf, store, batches, beta, opt_theta, &theta)?;
    Ok((like, recon))
}

/// Validation value of the full objective, computed exactly and off the
/// tape: β·mean recon − λ·mean exact log-likelihood. Points excluded for
/// conditioning are dropped from the likelihood mean and counted.
pub fn full_objective(
    rf: &RectangularFlow,
    store: &ParamStore,
    data: &Tensor,
    beta: f64,
    lambda: f64,
) -> Result<(f64, f64, usize)> {
    let recon = rf.reconstruction_errors(store, data)?;
    let recon_mean = recon.data().iter().sum::<f64>() / recon.numel() as f64;
    if lambda == 0.0 {
        return Ok((beta * recon_mean, recon_mean, 0));
    }
    let (lls, excluded) = rect_log_density_partial(rf, store, data, ExactLogDet::default())?;
    let kept: Vec<f64> = lls.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::invalid(
            "every validation point failed the exact likelihood evaluation",
        ));
    }
    let ll_mean = kept.iter().sum::<f64>() / kept.len() as f64;
    Ok((beta * recon_mean - lambda * ll_mean, recon_mean, excluded))
}

/// What validation quantity early stopping watches. Both are minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCriterion {
    /// The full objective evaluated exactly on the validation set.
    FullObjective,
    /// Moment-matching distance between validation data and model samples.
    FidLike,
}

/// Minimum-tracking early stopping: halts after `patience` consecutive
/// epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub criterion: StopCriterion,
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(criterion: StopCriterion, patience: usize) -> Self {
        EarlyStopping {
            criterion,
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    /// Feeds one validation value; returns (improved, halt).
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        match self.best {
            Some((_, best)) if !(value < best) => {
                self.stale += 1;
                (false, self.stale >= self.patience)
            }
            _ => {
                self.best = Some((epoch, value));
                self.stale = 0;
                (true, false)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub criterion: StopCriterion,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.lr < 0.0 {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("training needs at least one epoch"));
        }
        Ok(())
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda: f64,
    pub train_loss: f64,
    pub train_recon: f64,
    pub val_value: f64,
    pub val_recon: f64,
    pub val_excluded: usize,
    pub cg_unconverged: usize,
    pub jvp_calls: usize,
    pub vjp_calls: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Snapshot of the parameters at the best validation value (or the last
    /// completed epoch while the annealing window is still open).
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best_value: f64,
    pub stopped_early: bool,
    /// Populated when training broke off on a non-finite loss or gradient;
    /// `best_params` then holds the last good checkpoint.
    pub aborted: Option<String>,
    pub counters: CostCounters,
}

/// Full training driver: shuffled mini-batches, per-epoch validation,
/// early stopping armed once the annealing window has closed, and abort
/// with the last good checkpoint on numerical failure. Deterministic for a
/// fixed config and seed.
pub fn fit(
    rf: &RectangularFlow,
    store: &mut ParamStore,
    train: &Tensor,
    val: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    train.expect_batch(rf.high_dim(), "training data")?;
    val.expect_batch(rf.high_dim(), "validation data")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut counters = CostCounters::new();
    let theta = rf.theta_ids();
    let eta = rf.eta_ids();
    let all_ids: Vec<ParamId> = theta.iter().chain(eta.iter()).copied().collect();
    let mut opt_all = AdamState::new(store, cfg.lr);
    let mut opt_eta = AdamState::new(store, cfg.lr);
    let mut opt_theta = AdamState::new(store, cfg.lr);
    // While λ is still ramping the objective itself moves, so "no
    // improvement" is not comparable; patience starts counting at full λ.
    let arm_epoch = cfg.objective.anneal_full;
    let mut stopper = EarlyStopping::new(cfg.criterion, cfg.patience);
    let mut best_params = store.clone();
    let mut best_epoch = 0;
    let mut best_value = f64::INFINITY;
    let mut epochs: Vec<EpochMetrics> = Vec::new();
    let mut aborted = None;
    let mut stopped_early = false;
    let n = train.rows();

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lambda = annealing_weight(
            epoch as f64,
            cfg.objective.anneal_start as f64,
            cfg.objective.anneal_full as f64,
        );
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let batches: Vec<Tensor> = order
            .chunks(cfg.batch_size)
            .map(|c| train.select_rows(c))
            .collect();
        let before = counters;

        let mut cg_unconverged = 0;
        let step_result: Result<(f64, f64)> = match cfg.objective.method {
            Method::Ml => {
                let mut loss_sum = 0.0;
                let mut recon_sum = 0.0;
                let mut outcome = Ok(());
                for batch in &batches {
                    match ml_loss(rf, store, batch, &cfg.objective, epoch, &mut rng, &mut counters)
                        .and_then(|eval| {
                            opt_all.step(store, &eval.gradients, &all_ids)?;
                            Ok(eval)
                        }) {
                        Ok(eval) => {
                            loss_sum += eval.loss;
                            recon_sum += eval.recon;
                            cg_unconverged += eval.cg_unconverged;
                        }
                        Err(e) => {
                            outcome = Err(e);
                            break;
                        }
                    }
                }
                outcome.map(|_| {
                    let b = batches.len() as f64;
                    (loss_sum / b, recon_sum / b)
                })
            }
            Method::TwoStep => two_step_epoch(
                rf,
                store,
                &batches,
                lambda,
                cfg.objective.beta,
                &mut opt_eta,
                &mut opt_theta,
            )
            .and_then(|(like, recon)| {
                let recon_mean = recon / cfg.objective.beta;
                Ok((like + recon, recon_mean))
            }),
        };
        let (train_loss, train_recon) = match step_result {
            Ok(pair) => pair,
            Err(e) => {
                aborted = Some(format!("epoch {epoch}: {e}"));
                break;
            }
        };

        let val_result: Result<(f64, f64, usize)> = match cfg.criterion {
            StopCriterion::FullObjective => {
                full_objective(rf, store, val, cfg.objective.beta, lambda)
            }
            StopCriterion::FidLike => rf.sample(store, &mut rng, val.rows()).and_then(|samples| {
                let score = fid_like(val, &samples)?;
                let recon = rf.reconstruction_errors(store, val)?;
                let recon_mean = recon.data().iter().sum::<f64>() / recon.numel() as f64;
                Ok((score, recon_mean, 0))
            }),
        };
        let (val_value, val_recon, val_excluded) = match val_result {
            Ok(triple) => triple,
            Err(e) => {
                aborted = Some(format!("epoch {epoch} validation: {e}"));
                break;
            }
        };
        if !val_value.is_finite() {
            // A diverged model can still evaluate to inf without erroring;
            // never let such an epoch into the log or the best checkpoint.
            aborted = Some(format!(
                "epoch {epoch}: validation value became non-finite ({val_value})"
            ));
            break;
        }

        epochs.push(EpochMetrics {
            epoch,
            lambda,
            train_loss,
            train_recon,
            val_value,
            val_recon,
            val_excluded,
            cg_unconverged,
            jvp_calls: counters.jvp_calls - before.jvp_calls,
            vjp_calls: counters.vjp_calls - before.vjp_calls,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if epoch >= arm_epoch {
            let (improved, halt) = stopper.observe(epoch, val_value);
            if improved {
                best_params = store.clone();
                best_epoch = epoch;
                best_value = val_value;
            }
            if halt {
                stopped_early = true;
                break;
            }
        } else {
            // Still annealing: keep the freshest checkpoint as provisional
            // best so an abort always has something recent to fall back on.
            best_params = store.clone();
            best_epoch = epoch;
            best_value = val_value;
        }
    }

    Ok(TrainReport {
        epochs,
        best_params,
        best_epoch,
        best_value,
        stopped_early,
        aborted,
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ProbeDistribution, StochasticSettings};
    use crate::flows::{square_log_prob, SquareFlow};
    use crate::rectangular::PadSpec;
    use crate::testkit;
    use rand::Rng;

    #[test]
    fn annealing_weight_follows_the_window() {
        assert_eq!(annealing_weight(0.0, 25.0, 50.0), 0.0);
        assert_eq!(annealing_weight(24.9, 25.0, 50.0), 0.0);
        assert_eq!(annealing_weight(50.0, 25.0, 50.0), 1.0);
        assert_eq!(annealing_weight(80.0, 25.0, 50.0), 1.0);
        assert_eq!(annealing_weight(37.5, 25.0, 50.0), 0.5);
        // Degenerate window: a step function.
        assert_eq!(annealing_weight(4.0, 5.0, 5.0), 0.0);
        assert_eq!(annealing_weight(5.0, 5.0, 5.0), 1.0);
    }

    #[test]
    fn annealing_weight_is_monotone() {
        let mut last = -1.0;
        for e in 0..200 {
            let w = annealing_weight(e as f64, 40.0, 130.0);
            assert!(w >= last, "λ decreased at epoch {e}");
            assert!((0.0..=1.0).contains(&w));
            last = w;
        }
    }

    fn scalar_store(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::vector(vec![value]));
        (store, id)
    }

    #[test]
    fn adam_leaves_parameters_alone_on_zero_gradient() {
        let (mut store, id) = scalar_store(0.7);
        let (grads, _) = scalar_store(0.0);
        let mut opt = AdamState::new(&store, 0.1);
        opt.step(&mut store, &grads, &[id]).unwrap();
        assert_eq!(store.get(id).data(), &[0.7]);
    }

    #[test]
    fn adam_first_step_matches_the_hand_computed_update() {
        let (mut store, id) = scalar_store(0.5);
        let (grads, _) = scalar_store(1.0);
        let mut opt = AdamState::new(&store, 0.1);
        opt.step(&mut store, &grads, &[id]).unwrap();
        // Bias-corrected first step: m̂ = v̂ = 1, so Δ = −lr/(1 + ε).
        let got = store.get(id).data()[0];
        assert!((got - 0.4).abs() < 1e-8, "{got}");
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let (mut store, id) = scalar_store(0.3);
            let mut opt = AdamState::new(&store, 0.05);
            for g in [1.0, -0.5, 0.25] {
                let (grads, _) = scalar_store(g);
                opt.step(&mut store, &grads, &[id]).unwrap();
            }
            store.get(id).data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn adam_rejects_non_finite_gradients_with_a_diagnostic() {
        let (mut store, id) = scalar_store(0.5);
        let (grads, _) = scalar_store(f64::NAN);
        let mut opt = AdamState::new(&store, 0.1);
        let err = opt.step(&mut store, &grads, &[id]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite gradient"), "{msg}");
        assert!(msg.contains('p'), "diagnostic should name the parameter: {msg}");
        // The parameter must be untouched by the failed step.
        assert_eq!(store.get(id).data(), &[0.5]);
    }

    /// D=3, d=1 model with perturbed parameters and an identity low flow.
    fn tiny_model(seed: u64) -> (RectangularFlow, ParamStore) {
        let mut rng = testkit::rng(seed);
        let mut store = ParamStore::new();
        let f_big = SquareFlow::realnvp(&mut store, &mut rng, "f", 3, 1, &[2], false);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let pad = PadSpec::seeded(1, 3, seed).unwrap();
        let h = SquareFlow::identity(1);
        (RectangularFlow::new(f_big, pad, h).unwrap(), store)
    }

    fn toy_batch(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
        Tensor::from_rows(
            &(0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
    }

    fn exact_objective(beta: f64, t0: usize, t1: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            method: Method::Ml,
            beta,
            anneal_start: t0,
            anneal_full: t1,
            estimator: GradEstimator::Exact,
            jitter: 0.0,
        }
    }

    #[test]
    fn ml_loss_before_the_window_is_exactly_weighted_reconstruction() {
        let (rf, store) = tiny_model(4);
        let mut rng = testkit::rng(5);
        let batch = toy_batch(&mut rng, 8, 3);
        let cfg = exact_objective(7.0, 10, 20);
        let mut counters = CostCounters::new();
        let eval = ml_loss(&rf, &store, &batch, &cfg, 3, &mut rng, &mut counters).unwrap();
        let recon = rf.reconstruction_errors(&store, &batch).unwrap();
        let expect = 7.0 * recon.data().iter().sum::<f64>() / 8.0;
        assert!((eval.loss - expect).abs() < 1e-12, "{} vs {expect}", eval.loss);
        // The log-determinant machinery must not have run at λ = 0.
        assert_eq!(counters, CostCounters::new());
        assert_eq!(eval.cg_unconverged, 0);
    }

    #[test]
    fn ml_loss_on_a_square_build_is_negative_mean_square_log_prob() {
        // d = D: padding is a permutation, reconstruction is exactly zero,
        // and the objective collapses to the invertible-flow likelihood.
        let mut rng = testkit::rng(11);
        let mut store = ParamStore::new();
        let f_big = SquareFlow::realnvp(&mut store, &mut rng, "f", 2, 2, &[4], false);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let pad = PadSpec::with_columns(2, 2, vec![0, 1]).unwrap();
        let h = SquareFlow::identity(2);
        let rf = RectangularFlow::new(f_big, pad, h).unwrap();
        let batch = toy_batch(&mut rng, 6, 2);
        let cfg = exact_objective(123.0, 0, 0);
        let mut counters = CostCounters::new();
        let eval = ml_loss(&rf, &store, &batch, &cfg, 0, &mut rng, &mut counters).unwrap();
        let lp = square_log_prob(rf.ambient_flow(), rf.base(), &store, &batch).unwrap();
        let expect = -lp.data().iter().sum::<f64>() / 6.0;
        assert!((eval.loss - expect).abs() < 1e-9, "{} vs {expect}", eval.loss);
        assert!(eval.recon < 1e-20);
    }

    #[test]
    fn ml_loss_gradient_matches_central_differences() {
        let (rf, store) = tiny_model(7);
        let total: usize = store.iter().map(|(_, _, t)| t.numel()).sum();
        assert!(total <= 60, "model grew past the intended size: {total}");
        let mut rng = testkit::rng(8);
        let batch = toy_batch(&mut rng, 5, 3);
        // Mid-window epoch so both loss pieces carry weight.
        let cfg = exact_objective(3.0, 0, 4);
        let epoch = 3;
        let mut counters = CostCounters::new();
        let eval = ml_loss(&rf, &store, &batch, &cfg, epoch, &mut rng, &mut counters).unwrap();

        let fd = testkit::fd_param_grad(
            |s| {
                let mut c = CostCounters::new();
                ml_loss(&rf, s, &batch, &cfg, epoch, &mut testkit::rng(0), &mut c)
                    .unwrap()
                    .loss
            },
            &store,
            1e-5,
        );
        for (id, name, g) in eval.gradients.iter() {
            for (a, b) in g.data().iter().zip(fd.get(id).data()) {
                let rel = (a - b).abs() / (1.0 + b.abs());
                assert!(rel < 1e-4, "{name}: analytic {a} vs fd {b}");
            }
        }
    }

    #[test]
    fn ml_loss_with_the_stochastic_estimator_runs_and_counts() {
        let (rf, store) = tiny_model(9);
        let mut rng = testkit::rng(10);
        let batch = toy_batch(&mut rng, 6, 3);
        let cfg = ObjectiveConfig {
            estimator: GradEstimator::Stochastic(StochasticSettings {
                probes: 2,
                tolerance: 0.0,
                distribution: ProbeDistribution::Gaussian,
            }),
            ..exact_objective(3.0, 0, 0)
        };
        let mut counters = CostCounters::new();
        let eval = ml_loss(&rf, &store, &batch, &cfg, 0, &mut rng, &mut counters).unwrap();
        assert!(eval.loss.is_finite());
        // d = 1 means every CG solve converges in one iteration: per probe
        // that is 1 solve call + 1 recorded product.
        assert_eq!(counters.jvp_calls, 4);
        assert_eq!(counters.vjp_calls, 4);
        assert_eq!(counters.jvp_retained, 2);
        assert_eq!(counters.vjp_retained, 2);
        let any_grad = eval
            .gradients
            .iter()
            .any(|(_, _, g)| g.data().iter().any(|&v| v != 0.0));
        assert!(any_grad);
    }

    #[test]
    fn likelihood_pass_moves_only_the_low_flow() {
        let mut rng = testkit::rng(15);
        let mut store = ParamStore::new();
        let f_big = SquareFlow::realnvp(&mut store, &mut rng, "f", 3, 1, &[3], false);
        let h = SquareFlow::realnvp(&mut store, &mut rng, "h", 2, 1, &[3], false);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let pad = PadSpec::seeded(2, 3, 1).unwrap();
        let rf = RectangularFlow::new(f_big, pad, h).unwrap();
        let batches = vec![toy_batch(&mut rng, 6, 3), toy_batch(&mut rng, 6, 3)];
        let theta_before: Vec<Vec<f64>> = rf
            .theta_ids()
            .iter()
            .map(|&id| store.get(id).data().to_vec())
            .collect();
        let eta_before: Vec<Vec<f64>> = rf
            .eta_ids()
            .iter()
            .map(|&id| store.get(id).data().to_vec())
            .collect();
        let mut opt = AdamState::new(&store, 1e-2);
        let eta = rf.eta_ids();
        likelihood_pass(&rf, &mut store, &batches, 1.0, &mut opt, &eta).unwrap();
        for (&id, before) in rf.theta_ids().iter().zip(&theta_before) {
            assert_eq!(store.get(id).data(), &before[..], "theta must be frozen");
        }
        let eta_moved = rf
            .eta_ids()
            .iter()
            .zip(&eta_before)
            .any(|(&id, before)| store.get(id).data() != &before[..]);
        assert!(eta_moved, "eta should have taken a step");
    }

    #[test]
    fn reconstruction_pass_moves_only_the_injective_half() {
        let mut rng = testkit::rng(16);
        let mut store = ParamStore::new();
        let f_big = SquareFlow::realnvp(&mut store, &mut rng, "f", 3, 1, &[3], false);
        let h = SquareFlow::realnvp(&mut store, &mut rng, "h", 2, 1, &[3], false);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let pad = PadSpec::seeded(2, 3, 1).unwrap();
        let rf = RectangularFlow::new(f_big, pad, h).unwrap();
        let batches = vec![toy_batch(&mut rng, 6, 3)];
        let eta_before: Vec<Vec<f64>> = rf
            .eta_ids()
            .iter()
            .map(|&id| store.get(id).data().to_vec())
            .collect();
        let mut opt = AdamState::new(&store, 1e-2);
        let theta = rf.theta_ids();
        reconstruction_pass(&rf, &mut store, &batches, 5.0, &mut opt, &theta).unwrap();
        for (&id, before) in rf.eta_ids().iter().zip(&eta_before) {
            assert_eq!(store.get(id).data(), &before[..], "eta must be frozen");
        }
    }

    #[test]
    fn reconstruction_pass_is_a_no_op_on_manifold_data_at_the_optimum() {
        // Identity-initialized injective half: the manifold is the padding
        // plane, so on-manifold data reconstructs exactly and the gradient
        // vanishes identically.
        let mut rng = testkit::rng(17);
        let mut store = ParamStore::new();
        let f_big = SquareFlow::realnvp(&mut store, &mut rng, "f", 3, 2, &[4], false);
        let pad = PadSpec::seeded(1, 3, 2).unwrap();
        let h = SquareFlow::identity(1);
        let rf = RectangularFlow::new(f_big, pad, h).unwrap();
        let z = toy_batch(&mut rng, 10, 1);
        let on_manifold = rf.forward(&store, &z).unwrap();
        let before: Vec<Vec<f64>> = store
            .ids()
            .map(|id| store.get(id).data().to_vec())
            .collect();
        let mut opt = AdamState::new(&store, 1e-2);
        let theta = rf.theta_ids();
        let value =
            reconstruction_pass(&rf, &mut store, &[on_manifold], 5.0, &mut opt, &theta).unwrap();
        assert!(value < 1e-20, "objective should already be zero: {value}");
        for (id, b) in store.ids().zip(&before).collect::<Vec<_>>() {
            assert_eq!(store.get(id).data(), &b[..], "parameters must not move");
        }
    }

    #[test]
    fn fit_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let (rf, mut store) = tiny_model(20);
            let mut rng = testkit::rng(21);
            let train = toy_batch(&mut rng, 24, 3);
            let val = toy_batch(&mut rng, 12, 3);
            let cfg = TrainConfig {
                objective: exact_objective(5.0, 1, 3),
                lr: 1e-2,
                batch_size: 8,
                max_epochs: 4,
                patience: 10,
                criterion: StopCriterion::FullObjective,
                seed: 99,
            };
            let report = fit(&rf, &mut store, &train, &val, &cfg).unwrap();
            (report.epochs.clone(), store)
        };
        let (e1, s1) = run();
        let (e2, s2) = run();
        // Wall time is the one legitimately non-reproducible column.
        let strip = |metrics: &[EpochMetrics]| {
            metrics
                .iter()
                .map(|m| EpochMetrics { wall_ms: 0.0, ..m.clone() })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&e1), strip(&e2));
        for (id, _, t) in s1.iter() {
            assert_eq!(t.data(), s2.get(id).data());
        }
    }

    #[test]
    fn fit_halts_after_patience_without_improvement() {
        let (rf, mut store) = tiny_model(22);
        let mut rng = testkit::rng(23);
        let train = toy_batch(&mut rng, 16, 3);
        let val = toy_batch(&mut rng, 8, 3);
        let cfg = TrainConfig {
            objective: exact_objective(2.0, 0, 0),
            lr: 0.0, // frozen model: the first epoch sets the best, the rest stall
            batch_size: 16,
            max_epochs: 50,
            patience: 3,
            criterion: StopCriterion::FullObjective,
            seed: 1,
        };
        let report = fit(&rf, &mut store, &train, &val, &cfg).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs.len(), 4, "1 improving + 3 stale epochs");
        assert_eq!(report.best_epoch, 0);
        assert!(report.aborted.is_none());
    }

    #[test]
    fn fit_arms_early_stopping_only_after_the_annealing_window() {
        let (rf, mut store) = tiny_model(24);
        let mut rng = testkit::rng(25);
        let train = toy_batch(&mut rng, 16, 3);
        let val = toy_batch(&mut rng, 8, 3);
        let cfg = TrainConfig {
            objective: exact_objective(2.0, 2, 5),
            lr: 0.0,
            batch_size: 16,
            max_epochs: 50,
            patience: 1,
            criterion: StopCriterion::FullObjective,
            seed: 1,
        };
        let report = fit(&rf, &mut store, &train, &val, &cfg).unwrap();
        // Epochs 0–4 are unarmed; epoch 5 records the best; epoch 6 is the
        // one stale epoch patience allows.
        assert_eq!(report.epochs.len(), 7);
        assert_eq!(report.best_epoch, 5);
    }

    #[test]
    fn fit_aborts_on_numerical_blowup_and_keeps_the_last_good_checkpoint() {
        let (rf, mut store) = tiny_model(26);
        let mut rng = testkit::rng(27);
        let train = toy_batch(&mut rng, 12, 3);
        let val = toy_batch(&mut rng, 6, 3);
        let cfg = TrainConfig {
            objective: exact_objective(5.0, 0, 0),
            lr: 1e155, // guaranteed detonation: squared quantities overflow
            batch_size: 12,
            max_epochs: 8,
            patience: 50,
            criterion: StopCriterion::FullObjective,
            seed: 2,
        };
        let report = fit(&rf, &mut store, &train, &val, &cfg).unwrap();
        assert!(report.aborted.is_some(), "training should have aborted");
        for (_, name, t) in report.best_params.iter() {
            assert!(t.is_finite(), "checkpoint parameter {name} is not finite");
        }
    }

    #[test]
    fn fit_with_the_fid_criterion_produces_finite_scores() {
        let (rf, mut store) = tiny_model(28);
        let mut rng = testkit::rng(29);
        let train = toy_batch(&mut rng, 16, 3);
        let val = toy_batch(&mut rng, 10, 3);
        let cfg = TrainConfig {
            objective: exact_objective(2.0, 0, 1),
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 3,
            patience: 10,
            criterion: StopCriterion::FidLike,
            seed: 7,
        };
        let report = fit(&rf, &mut store, &train, &val, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 3);
        for m in &report.epochs {
            assert!(m.val_value.is_finite() && m.val_value >= 0.0);
        }
    }

    #[test]
    fn two_step_epoch_reports_both_pass_objectives() {
        let mut rng = testkit::rng(33);
        let mut store = ParamStore::new();
        let f_big = SquareFlow::realnvp(&mut store, &mut rng, "f", 3, 1, &[3], false);
        let h = SquareFlow::realnvp(&mut store, &mut rng, "h", 2, 1, &[3], false);
        let pad = PadSpec::seeded(2, 3, 4).unwrap();
        let rf = RectangularFlow::new(f_big, pad, h).unwrap();
        let batches = vec![toy_batch(&mut rng, 8, 3)];
        let mut opt_eta = AdamState::new(&store, 1e-3);
        let mut opt_theta = AdamState::new(&store, 1e-3);
        let (like, recon) = two_step_epoch(
            &rf,
            &mut store,
            &batches,
            1.0,
            5.0,
            &mut opt_eta,
            &mut opt_theta,
        )
        .unwrap();
        assert!(like.is_finite());
        assert!(recon.is_finite() && recon >= 0.0);
        assert_eq!(opt_eta.steps_taken(), 1);
        assert_eq!(opt_theta.steps_taken(), 1);
    }
}
