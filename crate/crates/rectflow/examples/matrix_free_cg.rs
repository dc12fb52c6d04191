//! Solving (JᵀJ)u = ε without ever forming J.
//!
//!     cargo run --example matrix_free_cg
//!
//! The stochastic estimator needs (JᵀJ)⁻¹ε, where J is the decoder
//! Jacobian. JᵀJ·w is available as one forward-mode product followed by
//! one reverse-mode product, so conjugate gradients can solve the system
//! from matrix-vector products alone — and on a d-dimensional space it
//! terminates in at most d iterations. This example solves the same
//! system matrix-free and densely, compares the answers, and shows how
//! the convergence tolerance trades iterations for accuracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rectflow::autodiff::{ParamStore, Tensor};
use rectflow::estimators::{build_jacobian, cg_solve, mvp_jtj, CostCounters};
use rectflow::flows::SquareFlow;
use rectflow::linalg::{cholesky_lower, cholesky_solve};
use rectflow::rectangular::{PadSpec, RectangularFlow};

fn main() -> rectflow::Result<()> {
    // Rectangular flow from R^3 into R^6; jitter the parameters so the
    // Jacobian is not a trivial padding.
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ambient = SquareFlow::realnvp(&mut store, &mut rng, "f", 6, 2, &[8], true);
    let rf = RectangularFlow::new(ambient, PadSpec::identity(3, 6)?, SquareFlow::identity(3))?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let padded = rf.padded();
    let d = rf.low_dim();
    let point = Tensor::new(vec![1, d], (0..d).map(|_| rng.sample(StandardNormal)).collect());
    let rhs: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();

    // Matrix-free: each application of the operator is one jvp + one vjp.
    let mut counters = CostCounters::new();
    let solve = cg_solve(
        |w| {
            let wt = Tensor::new(vec![1, d], w.to_vec());
            let out = mvp_jtj(&padded, &store, &point, &wt, &mut counters)?;
            Ok(out.into_data())
        },
        &rhs,
        0.0,
        None,
    )?;
    println!(
        "matrix-free: {} iterations (cap {d}), residual {:.2e}, {} jvps + {} vjps",
        solve.iterations, solve.residual_norm, counters.jvp_calls, counters.vjp_calls
    );

    // Dense oracle: assemble J column by column, form JᵀJ, factor, solve.
    let mut dense_counters = CostCounters::new();
    let j = build_jacobian(&padded, &store, &point, &mut dense_counters)?;
    let dd = j.rows();
    let mut gram = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            gram[a * d + b] = (0..dd).map(|r| j.at(r, a) * j.at(r, b)).sum();
        }
    }
    let l = cholesky_lower(&gram, d, "dense JᵀJ")?;
    let dense = cholesky_solve(&l, d, &rhs);
    let max_diff = solve
        .solution
        .iter()
        .zip(&dense)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    println!("dense oracle agrees to {max_diff:.2e}\n");

    // A loose tolerance stops early; zero runs to the d-iteration cap.
    println!("tolerance   iterations   residual norm");
    for tol in [1e-1, 1e-4, 1e-10, 0.0] {
        let s = cg_solve(
            |w| {
                let wt = Tensor::new(vec![1, d], w.to_vec());
                let mut c = CostCounters::new();
                Ok(mvp_jtj(&padded, &store, &point, &wt, &mut c)?.into_data())
            },
            &rhs,
            tol,
            None,
        )?;
        println!("{tol:>9.0e}   {:>10}   {:>13.2e}", s.iterations, s.residual_norm);
    }
    Ok(())
}
