//! Nonlocal point-cloud operator: each point carries a source strength
//! `s_j`, and the target is the Gaussian-kernel sum
//! `u(x) = A Σ_j s_j exp(−|x − x_j|² / 2σ²)` over all points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, SampleRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudParams {
    pub n_points: usize,
    pub sigma: f64,
    pub amplitude: f64,
}

impl PointCloudParams {
    pub fn new(n_points: usize) -> Self {
        Self {
            n_points,
            sigma: 0.15,
            amplitude: 1.0,
        }
    }
}

/// Exact kernel sum at every point of `eval` (2-D, row-major).
pub fn kernel_sum(eval: &[f64], points: &[f64], sources: &[f64], sigma: f64, amplitude: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    eval.chunks_exact(2)
        .map(|x| {
            let mut s = 0.0;
            for (p, &q) in points.chunks_exact(2).zip(sources) {
                let d2 = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
                s += q * (-d2 * inv).exp();
            }
            amplitude * s
        })
        .collect()
}

pub fn gen_pointcloud_operator(p: &PointCloudParams, n_samples: usize, seed: u64) -> Result<Dataset> {
    if p.n_points < 16 {
        return Err(Error::config(format!("need at least 16 points (got {})", p.n_points)));
    }
    let n = p.n_points;
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let pts: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let src: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u = kernel_sum(&pts, &pts, &src, p.sigma, p.amplitude);
            SampleRecord {
                coords: pts.iter().map(|&v| v as f32).collect(),
                in_fields: src.iter().map(|&v| v as f32).collect(),
                targets: u.iter().map(|&v| v as f32).collect(),
                coord_dim: 2,
                in_dim: 1,
                out_dim: 1,
                groups: Vec::new(),
                grid: None,
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        provenance: Some(Provenance {
            name: "pointcloud".into(),
            seed,
            params: serde_json::to_value(p)?,
        }),
    })
}
