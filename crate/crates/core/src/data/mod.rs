//! Samples, the on-disk dataset container, and synthetic generators.

mod darcy;
mod io;
mod pointcloud;

pub use darcy::{coefficient_field, darcy_residual, darcy_solve, gen_darcy, DarcyParams};
pub use io::{read_dataset, write_dataset, Manifest, BlobEntry, SampleEntry};
pub use pointcloud::{gen_pointcloud_operator, kernel_sum, PointCloudParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Point group used by two-group losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    None,
    Volume,
    Surface,
}

impl Group {
    fn code(self) -> f32 {
        match self {
            Group::None => 0.0,
            Group::Volume => 1.0,
            Group::Surface => 2.0,
        }
    }

    fn from_code(c: f32) -> Result<Self> {
        match c {
            x if x == 0.0 => Ok(Group::None),
            x if x == 1.0 => Ok(Group::Volume),
            x if x == 2.0 => Ok(Group::Surface),
            x => Err(Error::Format(format!("invalid group code {x}"))),
        }
    }
}

/// One sample: `N` points with coordinates, input fields and targets,
/// stored in 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub coords: Vec<f32>,
    pub in_fields: Vec<f32>,
    pub targets: Vec<f32>,
    pub coord_dim: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Per-point groups; empty when the sample is ungrouped.
    pub groups: Vec<Group>,
    /// `(H, W)` for samples on a regular grid, row-major.
    pub grid: Option<(usize, usize)>,
}

impl SampleRecord {
    pub fn n(&self) -> usize {
        self.coords.len() / self.coord_dim.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let ok = self.coord_dim > 0
            && self.coords.len() == n * self.coord_dim
            && self.in_fields.len() == n * self.in_dim
            && self.targets.len() == n * self.out_dim
            && (self.groups.is_empty() || self.groups.len() == n);
        if !ok {
            return Err(Error::Input("sample arrays disagree on the point count".into()));
        }
        if let Some((h, w)) = self.grid {
            if h * w != n {
                return Err(Error::Input(format!("grid {h}×{w} does not hold {n} points")));
            }
        }
        let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.coords) && finite(&self.in_fields) && finite(&self.targets)) {
            return Err(Error::Input("sample contains non-finite values".into()));
        }
        Ok(())
    }

    /// Model input `[coords | in_fields]`, `N×(D + F_in)`.
    pub fn model_input<T: Real>(&self) -> Tensor<T> {
        let (d, c) = (self.coord_dim, self.in_dim);
        Tensor::from_fn(&[self.n(), d + c], |i| {
            let (p, k) = (i / (d + c), i % (d + c));
            let v = if k < d {
                self.coords[p * d + k]
            } else {
                self.in_fields[p * c + k - d]
            };
            T::from_f64(v as f64)
        })
    }

    pub fn target<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.n(), self.out_dim], |i| T::from_f64(self.targets[i] as f64))
    }

    pub fn coords_f64(&self) -> Vec<f64> {
        self.coords.iter().map(|&x| x as f64).collect()
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub name: String,
    pub seed: u64,
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
    pub provenance: Option<Provenance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
