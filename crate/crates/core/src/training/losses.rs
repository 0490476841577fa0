//! Training losses recorded as tape operations.

use crate::data::Group;
use crate::error::{Error, Result};
use crate::metrics::{relative_l2, ZERO_NORM_EPS};
use crate::numerics::{Backward, BackwardCtx, Real, Tape, Tensor, Var};

struct RelL2Op<T: Real> {
    target: Tensor<T>,
}

impl<T: Real> Backward<T> for RelL2Op<T> {
    fn name(&self) -> &'static str {
        "relative_l2"
    }

    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let p = cx.inputs[0];
        let diff = p.zip_map(&self.target, "relative_l2", |a, b| a - b)?;
        let dn = diff.norm().to_f64();
        let tn = self.target.norm().to_f64();
        let tn = if tn > 0.0 { tn } else { ZERO_NORM_EPS };
        let g = cx.grad.data()[0].to_f64();
        let s = if dn > 0.0 { T::from_f64(g / (dn * tn)) } else { T::ZERO };
        Ok(vec![Some(diff.map(|d| d * s))])
    }
}

/// `‖pred − target‖ / ‖target‖` as a scalar on the tape.
pub fn relative_l2_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let p = tape.value(pred);
    if p.shape() != target.shape() {
        return Err(Error::shape("relative_l2_loss", p.shape(), target.shape()));
    }
    let v = relative_l2(p.data(), target.data())?;
    Ok(tape.push(
        &[pred],
        Tensor::scalar(T::from_f64(v)),
        RelL2Op {
            target: target.clone(),
        },
    ))
}

/// Weighted sum of per-group relative L2 losses, `w_v·L_v + w_s·L_s`.
/// Samples without group tags fall back to a single relative L2.
pub fn group_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    groups: &[Group],
    volume_weight: f64,
    surface_weight: f64,
) -> Result<Var> {
    if groups.is_empty() || groups.iter().all(|&g| g == Group::None) {
        return relative_l2_loss(tape, pred, target);
    }
    let mut total: Option<Var> = None;
    for (g, w) in [(Group::Volume, volume_weight), (Group::Surface, surface_weight)] {
        let rows: Vec<Option<usize>> = groups
            .iter()
            .enumerate()
            .filter(|(_, &gg)| gg == g)
            .map(|(i, _)| Some(i))
            .collect();
        if rows.is_empty() || w == 0.0 {
            continue;
        }
        let t = Tensor::from_fn(&[rows.len(), target.cols()], |i| {
            let (r, c) = (i / target.cols(), i % target.cols());
            target.get(rows[r].expect("selected row"), c)
        });
        let p = tape.gather_rows(pred, rows)?;
        let l = relative_l2_loss(tape, p, &t)?;
        let l = tape.scale(l, T::from_f64(w));
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Input("no tagged points carry loss weight".into()))
}

/// Central differences at interior grid nodes of a row-major `H×W×C`
/// field: all x-derivatives, then all y-derivatives, per channel.
fn grid_gradients<T: Real>(u: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (sx, sy) = (
        T::from_f64((w - 1) as f64 / 2.0),
        T::from_f64((h - 1) as f64 / 2.0),
    );
    let mut out = Vec::with_capacity(2 * (h - 2) * (w - 2) * c);
    for (axis, s) in [(0, sx), (1, sy)] {
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let (a, b) = if axis == 0 {
                    (i * w + j + 1, i * w + j - 1)
                } else {
                    ((i + 1) * w + j, (i - 1) * w + j)
                };
                for k in 0..c {
                    out.push((u[a * c + k] - u[b * c + k]) * s);
                }
            }
        }
    }
    out
}

struct GridGradOp {
    h: usize,
    w: usize,
}

impl<T: Real> Backward<T> for GridGradOp {
    fn name(&self) -> &'static str {
        "grid_gradient"
    }

    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (h, w) = (self.h, self.w);
        let c = cx.inputs[0].cols();
        let (sx, sy) = (
            T::from_f64((w - 1) as f64 / 2.0),
            T::from_f64((h - 1) as f64 / 2.0),
        );
        let mut du = Tensor::zeros(cx.inputs[0].shape());
        let d = du.data_mut();
        let g = cx.grad.data();
        let mut idx = 0;
        for (axis, s) in [(0, sx), (1, sy)] {
            for i in 1..h - 1 {
                for j in 1..w - 1 {
                    let (a, b) = if axis == 0 {
                        (i * w + j + 1, i * w + j - 1)
                    } else {
                        ((i + 1) * w + j, (i - 1) * w + j)
                    };
                    for k in 0..c {
                        d[a * c + k] += g[idx] * s;
                        d[b * c + k] -= g[idx] * s;
                        idx += 1;
                    }
                }
            }
        }
        Ok(vec![Some(du)])
    }
}

fn check_grid(n: usize, grid: Option<(usize, usize)>) -> Result<(usize, usize)> {
    match grid {
        Some((h, w)) if h * w == n && h >= 3 && w >= 3 => Ok((h, w)),
        Some((h, w)) => Err(Error::config(format!(
            "gradient regularizer needs a grid of at least 3×3 holding {n} points (got {h}×{w})"
        ))),
        None => Err(Error::config("gradient regularizer needs a sample on a regular grid")),
    }
}

/// Relative L2 between central-difference spatial gradients of prediction
/// and target.
pub fn gradient_regularizer<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    grid: Option<(usize, usize)>,
) -> Result<Var> {
    let p = tape.value(pred);
    let (h, w) = check_grid(p.rows(), grid)?;
    let c = p.cols();
    let gp = grid_gradients(p.data(), h, w, c);
    let gt = grid_gradients(target.data(), h, w, c);
    let len = gp.len();
    let gv = tape.push(&[pred], Tensor::wrap(vec![len, 1], gp), GridGradOp { h, w });
    relative_l2_loss(tape, gv, &Tensor::wrap(vec![len, 1], gt))
}

/// Value of [`gradient_regularizer`] for plain arrays.
pub fn gradient_regularizer_value(
    pred: &[f64],
    target: &[f64],
    grid: (usize, usize),
    channels: usize,
) -> Result<f64> {
    let (h, w) = check_grid(pred.len() / channels.max(1), Some(grid))?;
    relative_l2(
        &grid_gradients(pred, h, w, channels),
        &grid_gradients(target, h, w, channels),
    )
}
