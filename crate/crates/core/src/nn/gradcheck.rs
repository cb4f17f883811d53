//! Central finite-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::store::{GradBuf, ParamStore};

/// Compares analytic gradients against central finite differences on
/// `probes` randomly chosen parameter scalars. Returns the maximum relative
/// error, `|fd - analytic| / max(|fd|, |analytic|, 1e-8)`.
pub fn check_param_grads(
    store: &mut ParamStore,
    analytic: &GradBuf,
    mut loss: impl FnMut(&ParamStore) -> f64,
    probes: usize,
    step: f64,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let id = ids[rng.gen_range(0..ids.len())];
        let n = store.get(id).len();
        if n == 0 {
            continue;
        }
        let flat = rng.gen_range(0..n);
        store.perturb(id, flat, step);
        let up = loss(store);
        store.perturb(id, flat, -2.0 * step);
        let down = loss(store);
        store.perturb(id, flat, step);
        let fd = (up - down) / (2.0 * step);
        let an = analytic.get(id).as_slice().unwrap()[flat];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
