use super::{DiffError, ParamStore, Tape, Var};

/// Outcome of comparing backward-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Relative error with an absolute floor for coordinates whose true
/// gradient is essentially zero.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares `backward` against central differences of `build_loss`.
///
/// `build_loss` must be a deterministic function of the store (reseed any
/// rng inside it). At most `max_coords` coordinates per parameter are
/// checked, spread evenly over the flat index range.
pub fn grad_check<F>(
    store: &ParamStore,
    mut build_loss: F,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, store)?;
    let grads = tape.gradients(loss)?;

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0 };
    for id in store.ids() {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = store.value(id).data()[j];
            let mut eval = |x: f64, work: &mut ParamStore| -> Result<f64, DiffError> {
                work.value_mut(id).data_mut()[j] = x;
                let mut t = Tape::new();
                let l = build_loss(&mut t, work)?;
                Ok(t.scalar(l))
            };
            let plus = eval(orig + eps, &mut work)?;
            let minus = eval(orig - eps, &mut work)?;
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let err = rel_error(analytic, numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
