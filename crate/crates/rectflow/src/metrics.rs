//! Evaluation metrics: moment matching between sample clouds, exact
//! log-likelihood evaluation, and the log-likelihood decision stump used for
//! out-of-distribution scoring.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{matmul_square, sym_eigen};
use crate::rectangular::{rect_log_density_partial, ExactLogDet, RectangularFlow};

/// Empirical mean and unbiased covariance (divisor n − 1) of a sample cloud.
#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: Tensor,
    pub cov: Tensor,
}

impl Moments {
    pub fn dim(&self) -> usize {
        self.mean.numel()
    }
}

pub fn compute_moments(data: &Tensor) -> Result<Moments> {
    if data.shape().len() != 2 {
        return Err(Error::invalid("moments want a [n, r] sample matrix"));
    }
    let n = data.rows();
    let r = data.cols();
    if n < 2 {
        return Err(Error::invalid(
            "moments need at least two samples for an unbiased covariance",
        ));
    }
    let mut mean = vec![0.0; r];
    for row in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(row)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; r * r];
    for row in 0..n {
        let x = data.row(row);
        for i in 0..r {
            let di = x[i] - mean[i];
            for j in i..r {
                cov[i * r + j] += di * (x[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..r {
        for j in i..r {
            let v = cov[i * r + j] / denom;
            cov[i * r + j] = v;
            cov[j * r + i] = v;
        }
    }
    Ok(Moments {
        mean: Tensor::vector(mean),
        cov: Tensor::new(vec![r, r], cov),
    })
}

/// Eigenvalue hygiene shared by the matrix square roots: barely negative
/// values are arithmetic noise and clamp to zero, anything clearly negative
/// means the input was not a covariance.
fn clamp_eigenvalue(lambda: f64) -> Result<f64> {
    if lambda < -1e-8 {
        return Err(Error::invalid(format!(
            "matrix has negative eigenvalue {lambda:.3e}; not a covariance"
        )));
    }
    Ok(lambda.max(0.0))
}

fn psd_sqrt(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = sym_eigen(a, d);
    let mut roots = Vec::with_capacity(d);
    for v in vals {
        roots.push(clamp_eigenvalue(v)?.sqrt());
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += vecs[i * d + k] * roots[k] * vecs[j * d + k];
            }
            out[i * d + j] = s;
        }
    }
    Ok(out)
}

/// Squared Wasserstein-2 distance between the Gaussians described by two
/// moment pairs: ‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₂^{1/2} Σ₁ Σ₂^{1/2})^{1/2}).
/// The inner square root uses the symmetric similarity form so the result
/// stays real even though Σ₁Σ₂ itself is not symmetric.
pub fn w2_gaussians(m1: &Moments, m2: &Moments) -> Result<f64> {
    let r = m1.dim();
    if r != m2.dim() {
        return Err(Error::invalid(format!(
            "moment dimensions differ: {r} vs {}",
            m2.dim()
        )));
    }
    let mut mean_gap = 0.0;
    for (a, b) in m1.mean.data().iter().zip(m2.mean.data()) {
        mean_gap += (a - b) * (a - b);
    }
    let s2 = psd_sqrt(m2.cov.data(), r)?;
    let inner = matmul_square(&s2, &matmul_square(m1.cov.data(), &s2, r), r);
    let (vals, _) = sym_eigen(&inner, r);
    let mut cross = 0.0;
    for v in vals {
        cross += clamp_eigenvalue(v)?.sqrt();
    }
    let trace = |m: &Tensor| (0..r).map(|i| m.at(i, i)).sum::<f64>();
    let raw = mean_gap + trace(&m1.cov) + trace(&m2.cov) - 2.0 * cross;
    // A metric cannot be negative; what little slips below zero is roundoff.
    Ok(raw.max(0.0))
}

/// Moment-matching score between a reference cloud and generated samples in
/// the ambient space: fit a Gaussian to each and take their squared
/// Wasserstein-2 distance. Identical clouds score zero.
pub fn fid_like(real: &Tensor, generated: &Tensor) -> Result<f64> {
    if real.cols() != generated.cols() {
        return Err(Error::invalid(format!(
            "sample clouds live in different dimensions: {} vs {}",
            real.cols(),
            generated.cols()
        )));
    }
    let m_real = compute_moments(real)?;
    let m_gen = compute_moments(generated)?;
    w2_gaussians(&m_real, &m_gen)
}

/// Best decision stump for "in-distribution iff log-likelihood ≥ threshold",
/// scored by balanced accuracy. Ties resolve to the smallest optimal
/// threshold. The rule's orientation is fixed, so 0.5 (predict one class
/// everywhere) is the floor.
pub fn stump_accuracy(ll_in: &[f64], ll_out: &[f64]) -> (f64, f64) {
    assert!(
        !ll_in.is_empty() && !ll_out.is_empty(),
        "decision stump needs samples on both sides"
    );
    let mut candidates: Vec<f64> = ll_in.iter().chain(ll_out.iter()).copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite log-likelihoods"));
    candidates.dedup();
    let top = candidates[candidates.len() - 1] + 1.0;
    candidates.push(top);
    let mut best_t = candidates[0];
    let mut best_acc = -1.0;
    for &t in &candidates {
        let tpr = ll_in.iter().filter(|&&v| v >= t).count() as f64 / ll_in.len() as f64;
        let tnr = ll_out.iter().filter(|&&v| v < t).count() as f64 / ll_out.len() as f64;
        let acc = 0.5 * (tpr + tnr);
        if acc > best_acc {
            best_acc = acc;
            best_t = t;
        }
    }
    (best_t, best_acc)
}

/// Per-point exact log-likelihoods and reconstruction errors for a dataset.
/// Points whose Gram factorization fails conditioning come back as None and
/// are tallied rather than killing the whole evaluation.
#[derive(Debug, Clone)]
pub struct LikelihoodEval {
    pub log_likelihoods: Vec<Option<f64>>,
    pub reconstruction_errors: Vec<f64>,
    pub excluded: usize,
}

impl LikelihoodEval {
    /// The finite entries only, in data order.
    pub fn kept(&self) -> Vec<f64> {
        self.log_likelihoods.iter().flatten().copied().collect()
    }

    pub fn mean_log_likelihood(&self) -> Option<f64> {
        let kept = self.kept();
        if kept.is_empty() {
            None
        } else {
            Some(kept.iter().sum::<f64>() / kept.len() as f64)
        }
    }
}

pub fn eval_log_likelihoods(
    rf: &RectangularFlow,
    params: &ParamStore,
    data: &Tensor,
    opts: ExactLogDet,
) -> Result<LikelihoodEval> {
    let (log_likelihoods, excluded) = rect_log_density_partial(rf, params, data, opts)?;
    let recon = rf.reconstruction_errors(params, data)?;
    Ok(LikelihoodEval {
        log_likelihoods,
        reconstruction_errors: recon.into_data(),
        excluded,
    })
}

/// Everything the out-of-distribution experiment reports: per-sample scores
/// for both datasets plus the stump fitted on the log-likelihoods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodReport {
    pub in_log_likelihoods: Vec<Option<f64>>,
    pub out_log_likelihoods: Vec<Option<f64>>,
    pub in_reconstruction: Vec<f64>,
    pub out_reconstruction: Vec<f64>,
    pub excluded_in: usize,
    pub excluded_out: usize,
    pub threshold: f64,
    pub accuracy: f64,
}

pub fn ood_report(
    rf: &RectangularFlow,
    params: &ParamStore,
    in_data: &Tensor,
    out_data: &Tensor,
    opts: ExactLogDet,
) -> Result<OodReport> {
    let in_eval = eval_log_likelihoods(rf, params, in_data, opts)?;
    let out_eval = eval_log_likelihoods(rf, params, out_data, opts)?;
    let kept_in = in_eval.kept();
    let kept_out = out_eval.kept();
    if kept_in.is_empty() || kept_out.is_empty() {
        return Err(Error::invalid(
            "every point of one dataset failed evaluation; no stump can be fit",
        ));
    }
    let (threshold, accuracy) = stump_accuracy(&kept_in, &kept_out);
    Ok(OodReport {
        in_log_likelihoods: in_eval.log_likelihoods,
        out_log_likelihoods: out_eval.log_likelihoods,
        in_reconstruction: in_eval.reconstruction_errors,
        out_reconstruction: out_eval.reconstruction_errors,
        excluded_in: in_eval.excluded,
        excluded_out: out_eval.excluded,
        threshold,
        accuracy,
    })
}
