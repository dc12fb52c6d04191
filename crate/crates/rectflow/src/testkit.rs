//! Shared helpers for unit tests: seeded RNG and central finite differences.
//! Oracles only; nothing here is compiled into the library proper.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite difference of f along one input coordinate (row-major
/// offset `k`).
pub fn fd_scalar(f: impl Fn(&Tensor) -> f64, x: &Tensor, k: usize, h: f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[k] += h;
    let mut minus = x.clone();
    minus.data_mut()[k] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Central finite difference of a vector-valued f along direction t:
/// (f(x + h t) - f(x - h t)) / 2h.
pub fn fd_directional(
    f: impl Fn(&Tensor) -> Vec<f64>,
    x: &Tensor,
    t: &Tensor,
    h: f64,
) -> Vec<f64> {
    let shift = |sign: f64| {
        Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(t.data())
                .map(|(&xv, &tv)| xv + sign * h * tv)
                .collect(),
        )
    };
    let plus = f(&shift(1.0));
    let minus = f(&shift(-1.0));
    plus.iter()
        .zip(minus.iter())
        .map(|(p, m)| (p - m) / (2.0 * h))
        .collect()
}

/// Central finite difference of a scalar loss with respect to every
/// parameter scalar in the store.
pub fn fd_param_grad(
    f: impl Fn(&ParamStore) -> f64,
    store: &ParamStore,
    h: f64,
) -> ParamStore {
    let mut grads = store.zeros_like();
    for id in store.ids() {
        for k in 0..store.get(id).numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= h;
            grads.get_mut(id).data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    grads
}
