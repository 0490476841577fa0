//! Steady Darcy flow `−∇·(a∇u) = 1` on the unit square with `u = 0` on the
//! boundary, discretized by the 5-point stencil on an `H×W` node grid
//! (spacing `1/(W−1)` across, `1/(H−1)` down) with harmonic-mean face
//! coefficients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, SampleRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarcyParams {
    pub height: usize,
    pub width: usize,
    /// Coefficient values inside and outside the porous phase.
    pub high: f64,
    pub low: f64,
    /// Smoothing length of the noise, in grid cells.
    pub smoothing: f64,
}

impl DarcyParams {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            high: 10.0,
            low: 1.0,
            smoothing: height.max(width) as f64 / 8.0,
        }
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Two-valued field: Gaussian white noise, smoothed by a separable
/// Gaussian filter, thresholded at zero.
pub fn coefficient_field(rng: &mut impl Rng, p: &DarcyParams) -> Vec<f64> {
    let (h, w) = (p.height, p.width);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let r = (3.0 * p.smoothing).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * p.smoothing * p.smoothing)).exp())
        .collect();
    let blur = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let d = t as isize - r;
                    let (ii, jj) = if along_rows {
                        (i as isize, j as isize + d)
                    } else {
                        (i as isize + d, j as isize)
                    };
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        s += k * src[ii as usize * w + jj as usize];
                    }
                }
                out[i * w + j] = s;
            }
        }
        out
    };
    let smooth = blur(&blur(&noise, true), false);
    smooth
        .into_iter()
        .map(|v| if v > 0.0 { p.high } else { p.low })
        .collect()
}

/// Stencil coefficients of interior node `(i, j)`: west, east, north, south
/// neighbour weights (already divided by the squared spacing).
fn stencil(a: &[f64], h: usize, w: usize, i: usize, j: usize) -> [f64; 4] {
    let (hx2, hy2) = (((w - 1) as f64).powi(2), ((h - 1) as f64).powi(2));
    let c = a[i * w + j];
    [
        harmonic(c, a[i * w + j - 1]) * hx2,
        harmonic(c, a[i * w + j + 1]) * hx2,
        harmonic(c, a[(i - 1) * w + j]) * hy2,
        harmonic(c, a[(i + 1) * w + j]) * hy2,
    ]
}

/// Solves the discrete system by banded Cholesky factorization over the
/// interior unknowns. Returns `u` on the full `H×W` grid.
pub fn darcy_solve(a: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < 3 || w < 3 || a.len() != h * w {
        return Err(Error::config(format!("Darcy grid must be at least 3×3 (got {h}×{w})")));
    }
    if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Input("Darcy coefficients must be positive".into()));
    }
    let (ni, nj) = (h - 2, w - 2);
    let n = ni * nj;
    let m = nj;
    let bw = m + 1;
    // Row p of the lower band holds columns p−m ..= p.
    let mut l = vec![0.0; n * bw];
    let at = |p: usize, q: usize| p * bw + (q + m - p);
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let p = (i - 1) * nj + (j - 1);
            let [cw, ce, cn, cs] = stencil(a, h, w, i, j);
            l[at(p, p)] = cw + ce + cn + cs;
            if j > 1 {
                l[at(p, p - 1)] = -cw;
            }
            if i > 1 {
                l[at(p, p - m)] = -cn;
            }
        }
    }
    for j in 0..n {
        let lo = j.saturating_sub(m);
        let mut d = l[at(j, j)];
        for k in lo..j {
            d -= l[at(j, k)] * l[at(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::Numeric("Darcy system is not positive definite".into()));
        }
        let d = d.sqrt();
        l[at(j, j)] = d;
        for i in j + 1..(j + m + 1).min(n) {
            let mut s = l[at(i, j)];
            for k in i.saturating_sub(m)..j {
                s -= l[at(i, k)] * l[at(j, k)];
            }
            l[at(i, j)] = s / d;
        }
    }
    let mut y = vec![1.0; n];
    for i in 0..n {
        let mut s = y[i];
        for k in i.saturating_sub(m)..i {
            s -= l[at(i, k)] * y[k];
        }
        y[i] = s / l[at(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..(i + m + 1).min(n) {
            s -= l[at(k, i)] * y[k];
        }
        y[i] = s / l[at(i, i)];
    }
    let mut u = vec![0.0; h * w];
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            u[i * w + j] = y[(i - 1) * nj + (j - 1)];
        }
    }
    Ok(u)
}

/// `‖A_h u − 1‖_∞` over the interior nodes, evaluated directly from the
/// stencil.
pub fn darcy_residual(a: &[f64], u: &[f64], h: usize, w: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let [cw, ce, cn, cs] = stencil(a, h, w, i, j);
            let c = u[i * w + j];
            let r = cw * (c - u[i * w + j - 1])
                + ce * (c - u[i * w + j + 1])
                + cn * (c - u[(i - 1) * w + j])
                + cs * (c - u[(i + 1) * w + j])
                - 1.0;
            worst = worst.max(r.abs());
        }
    }
    worst
}

const RESIDUAL_TOL: f64 = 1e-8;

/// Generates `n_samples` Darcy problems on an `H×W` grid. Input field is
/// `a`, target is `u`; every solution is checked against the residual
/// bound before it is stored.
pub fn gen_darcy(p: &DarcyParams, n_samples: usize, seed: u64) -> Result<Dataset> {
    let (h, w) = (p.height, p.width);
    if h < 3 || w < 3 {
        return Err(Error::config(format!("Darcy grid must be at least 3×3 (got {h}×{w})")));
    }
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let a = coefficient_field(&mut rng, p);
            let u = darcy_solve(&a, h, w)?;
            let res = darcy_residual(&a, &u, h, w);
            if !(res < RESIDUAL_TOL) {
                return Err(Error::Numeric(format!(
                    "sample {idx}: discrete residual {res:e} exceeds {RESIDUAL_TOL:e}"
                )));
            }
            let mut coords = Vec::with_capacity(2 * h * w);
            for i in 0..h {
                for j in 0..w {
                    coords.push((j as f64 / (w - 1) as f64) as f32);
                    coords.push((i as f64 / (h - 1) as f64) as f32);
                }
            }
            Ok(SampleRecord {
                coords,
                in_fields: a.iter().map(|&v| v as f32).collect(),
                targets: u.iter().map(|&v| v as f32).collect(),
                coord_dim: 2,
                in_dim: 1,
                out_dim: 1,
                groups: Vec::new(),
                grid: Some((h, w)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        provenance: Some(Provenance {
            name: "darcy".into(),
            seed,
            params: serde_json::to_value(p)?,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_interior_node() {
        let u = darcy_solve(&[1.0; 9], 3, 3).unwrap();
        assert!((u[4] - 0.0625).abs() < 1e-15);
        assert_eq!(u.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn rejects_small_grids() {
        assert!(matches!(darcy_solve(&[1.0; 4], 2, 2), Err(Error::Config(_))));
    }
}
