//! Evaluation metrics: relative L2 error and Spearman rank correlation.

use serde::Serialize;

use crate::balltree::PatchLayout;
use crate::data::{Dataset, Group};
use crate::error::{Error, Result};
use crate::model::Mspt;
use crate::numerics::Real;

/// Denominator used when the reference has zero norm.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// `‖pred − target‖₂ / ‖target‖₂` over the flattened arrays. A zero-norm
/// target uses [`ZERO_NORM_EPS`] as the denominator and logs a warning.
pub fn relative_l2<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("relative_l2", &[pred.len()], &[target.len()]));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p.to_f64(), t.to_f64());
        num += (p - t) * (p - t);
        den += t * t;
    }
    let den = if den > 0.0 {
        den.sqrt()
    } else {
        log::warn!("relative L2 against a zero-norm target");
        ZERO_NORM_EPS
    };
    Ok(num.sqrt() / den)
}

/// Midranks (1-based, ties share the average of their positions).
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of midranks.
pub fn spearman_rho(t: &[f64], t_hat: &[f64]) -> Result<f64> {
    if t.len() != t_hat.len() {
        return Err(Error::shape("spearman_rho", &[t.len()], &[t_hat.len()]));
    }
    if t.len() < 2 {
        return Err(Error::Input("Spearman correlation needs at least two values".into()));
    }
    if t.iter().chain(t_hat).any(|v| v.is_nan()) {
        return Err(Error::Numeric("Spearman correlation of NaN values".into()));
    }
    let (a, b) = (midranks(t), midranks(t_hat));
    let mean = (t.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numeric("Spearman correlation of a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-sample evaluation row.
#[derive(Clone, Debug, Serialize)]
pub struct SampleEval {
    pub n_points: usize,
    pub rel_l2: f64,
    pub rel_l2_volume: Option<f64>,
    pub rel_l2_surface: Option<f64>,
    /// Mean of the target and predicted fields: the scalar per sample that
    /// the rank correlation compares.
    pub target_mean: f64,
    pub pred_mean: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub mean_rel_l2: f64,
    pub median_rel_l2: f64,
    pub spearman: Option<f64>,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleEval>) -> Self {
        let mut v: Vec<f64> = samples.iter().map(|s| s.rel_l2).collect();
        let n = v.len();
        let mean = if n == 0 { f64::NAN } else { v.iter().sum::<f64>() / n as f64 };
        v.sort_by(f64::total_cmp);
        let median = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => v[n / 2],
            _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        };
        let t: Vec<f64> = samples.iter().map(|s| s.target_mean).collect();
        let p: Vec<f64> = samples.iter().map(|s| s.pred_mean).collect();
        let spearman = spearman_rho(&t, &p).ok();
        Self {
            samples,
            mean_rel_l2: mean,
            median_rel_l2: median,
            spearman,
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        let mut out =
            String::from("sample,n_points,rel_l2,rel_l2_volume,rel_l2_surface,target_mean,pred_mean\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{:e},{},{},{:e},{:e}\n",
                s.n_points,
                s.rel_l2,
                opt(s.rel_l2_volume),
                opt(s.rel_l2_surface),
                s.target_mean,
                s.pred_mean
            ));
        }
        out
    }
}

fn group_rel_l2(pred: &[f64], target: &[f64], groups: &[Group], g: Group, dim: usize) -> Result<Option<f64>> {
    let pick = |v: &[f64]| -> Vec<f64> {
        v.chunks(dim)
            .zip(groups)
            .filter(|(_, &gg)| gg == g)
            .flat_map(|(r, _)| r.iter().copied())
            .collect()
    };
    let (p, t) = (pick(pred), pick(target));
    if t.is_empty() {
        return Ok(None);
    }
    relative_l2(&p, &t).map(Some)
}

/// Evaluates one prediction against its sample.
pub fn evaluate_sample(pred: &[f64], target: &[f64], groups: &[Group], out_dim: usize) -> Result<SampleEval> {
    let n = target.len() / out_dim.max(1);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(SampleEval {
        n_points: n,
        rel_l2: relative_l2(pred, target)?,
        rel_l2_volume: group_rel_l2(pred, target, groups, Group::Volume, out_dim)?,
        rel_l2_surface: group_rel_l2(pred, target, groups, Group::Surface, out_dim)?,
        target_mean: mean(target),
        pred_mean: mean(pred),
    })
}

/// Runs the model on every sample of `data`.
pub fn evaluate<T: Real>(model: &Mspt<T>, data: &Dataset) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(data.len());
    for s in &data.samples {
        let layout: PatchLayout = model.layout(&s.coords_f64(), s.coord_dim, s.grid.is_some())?;
        let pred = model.forward(&s.model_input::<T>(), &layout)?;
        if !pred.all_finite() {
            return Err(Error::Numeric("model produced non-finite predictions".into()));
        }
        let target: Vec<f64> = s.targets.iter().map(|&v| v as f64).collect();
        rows.push(evaluate_sample(&pred.to_f64_vec(), &target, &s.groups, s.out_dim)?);
    }
    Ok(EvalReport::from_samples(rows))
}
