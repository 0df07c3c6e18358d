use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter; all of them when the parameter is
    /// smaller.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            max_coords_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

/// Compare tape gradients against five-point central finite differences
/// (truncation error of order `eps^4`).
///
/// `loss_fn` must be deterministic in the store values (re-seed any rng it
/// uses). The relative error of a coordinate is
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-12)`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, params: &[ParamId], loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
    };
    for &id in params {
        let n = store.tensor(id).len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords_per_param).into_vec()
        };
        for i in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let orig = store.tensor(id).data()[i];
            let mut at = |delta: f64| {
                store.get_mut(id).tensor.data_mut()[i] = orig + delta;
                eval(store)
            };
            let h = opts.eps;
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_values = (analytic, numeric);
            }
        }
    }
    Ok(report)
}
