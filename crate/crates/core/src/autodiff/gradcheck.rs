use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(entry name, element, analytic, numeric)` for the worst sample.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic gradients of `loss_fn` with central differences on
/// `samples` randomly chosen trainable scalars. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g)?;
    let root = loss_fn(&mut g, &vars)?;
    let grads = params.collect_grads(&g.backward(root)?, &vars);

    let trainable: Vec<usize> = (0..params.len()).filter(|&i| params.entries()[i].trainable).collect();
    let total: usize = trainable.iter().map(|&i| params.tensor(i).numel()).sum();
    if total == 0 {
        return Ok(GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None });
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let vars = store.bind(&mut g)?;
        let root = loss_fn(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut rng = seeding::stream(seed, seeding::DOMAIN_GRADCHECK, 0);
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut entry = trainable[0];
        for &i in &trainable {
            let n = params.tensor(i).numel();
            if flat < n {
                entry = i;
                break;
            }
            flat -= n;
        }
        let original = params.tensor(entry).data()[flat];
        probe.entries_mut()[entry].tensor.data_mut()[flat] = original + eps;
        let plus = eval(&probe)?;
        probe.entries_mut()[entry].tensor.data_mut()[flat] = original - eps;
        let minus = eval(&probe)?;
        probe.entries_mut()[entry].tensor.data_mut()[flat] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[entry].data()[flat];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((params.entries()[entry].name.clone(), flat, analytic, numeric));
        }
    }
    Ok(report)
}
