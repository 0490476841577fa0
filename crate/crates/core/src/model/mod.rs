//! The MSPT network: pointwise embedding MLP, `B` pre-norm blocks of patch
//! attention and feed-forward layers, and a layer-norm + linear head.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use params::{BlockIndex, MsptParams, ParamIndex};

use serde::{Deserialize, Serialize};

use crate::balltree::{grid_passthrough_layout, partition, PatchLayout};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::pmsa::{pmsa_on_tape, PmsaVars};

/// Per-channel affine standardization of inputs and targets. Predictions
/// are produced in standardized units and mapped back before the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_mean: vec![0.0; in_dim],
            in_std: vec![1.0; in_dim],
            out_mean: vec![0.0; out_dim],
            out_std: vec![1.0; out_dim],
        }
    }

    /// Channel statistics over every row of every sample. `inputs[i]` is a
    /// flattened `N_i×in_dim` array, `targets[i]` likewise with `out_dim`.
    pub fn fit(inputs: &[&[f64]], in_dim: usize, targets: &[&[f64]], out_dim: usize) -> Self {
        fn stats(blocks: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
            let mut sum = vec![0.0; dim];
            let mut count = 0usize;
            for b in blocks {
                for row in b.chunks_exact(dim) {
                    sum.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
                    count += 1;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
            let mut var = vec![0.0; dim];
            for b in blocks {
                for row in b.chunks_exact(dim) {
                    for c in 0..dim {
                        var[c] += (row[c] - mean[c]).powi(2);
                    }
                }
            }
            let std = var
                .iter()
                .map(|v| {
                    let s = (v / count.max(1) as f64).sqrt();
                    if s > 1e-12 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect();
            (mean, std)
        }
        let (in_mean, in_std) = stats(inputs, in_dim);
        let (out_mean, out_std) = stats(targets, out_dim);
        Self {
            in_mean,
            in_std,
            out_mean,
            out_std,
        }
    }
}

/// A configured network with its parameters and data standardization.
#[derive(Clone, Debug)]
pub struct Mspt<T: Real> {
    pub config: ModelConfig,
    pub params: MsptParams<T>,
    pub normalizer: Normalizer,
}

/// Outcome of recording a forward pass: the `N×out_dim` prediction and the
/// tape handle of every parameter, indexed like [`MsptParams::tensors`].
pub struct Recorded {
    pub pred: Var,
    pub params: Vec<Var>,
}

fn affine_const<T: Real>(tape: &mut Tape<T>, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
    let s = tape.constant(Tensor::wrap(vec![scale.len()], scale.iter().map(|&v| T::from_f64(v)).collect()));
    let b = tape.constant(Tensor::wrap(vec![shift.len()], shift.iter().map(|&v| T::from_f64(v)).collect()));
    let y = tape.mul_row(x, s)?;
    tape.add_row(y, b)
}

impl<T: Real> Mspt<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = MsptParams::init(&config, seed);
        let normalizer = Normalizer::identity(config.in_dim, config.out_dim);
        Ok(Self {
            config,
            params,
            normalizer,
        })
    }

    /// Patch layout for one sample: identity order for samples that come
    /// on a regular grid, ball-tree order otherwise.
    pub fn layout(&self, coords: &[f64], dim: usize, on_grid: bool) -> Result<PatchLayout> {
        let n = coords.len() / dim.max(1);
        let layout = if on_grid {
            grid_passthrough_layout(n, self.config.patches)?
        } else {
            partition(coords, dim, self.config.patches, self.config.leaf_capacity)?
        };
        self.check_layout(&layout)?;
        Ok(layout)
    }

    fn check_layout(&self, layout: &PatchLayout) -> Result<()> {
        if layout.k() != self.config.patches {
            return Err(Error::config(format!(
                "layout has {} patches, model expects {}",
                layout.k(),
                self.config.patches
            )));
        }
        if let Some(l) = self.config.patch_size {
            if self.params.index().blocks.iter().any(|b| b.w_pool.is_some()) && layout.l() != l {
                return Err(Error::config(format!(
                    "linear pooling was built for L = {l}, layout has L = {}",
                    layout.l()
                )));
            }
        }
        self.config.pooling_config().validate(layout.l())
    }

    fn check_input(&self, raw: &Tensor<T>, layout: &PatchLayout) -> Result<()> {
        if raw.shape().len() != 2 || raw.cols() != self.config.in_dim {
            return Err(Error::config(format!(
                "input has shape {:?}, model expects N×{}",
                raw.shape(),
                self.config.in_dim
            )));
        }
        if raw.rows() != layout.n() {
            return Err(Error::shape("forward", raw.shape(), &[layout.n(), raw.cols()]));
        }
        if !raw.all_finite() {
            return Err(Error::Input("non-finite model input".into()));
        }
        self.check_layout(layout)
    }

    /// Records the full forward pass of one sample on `tape`.
    pub fn record(&self, tape: &mut Tape<T>, raw: &Tensor<T>, layout: &PatchLayout) -> Result<Recorded> {
        self.check_input(raw, layout)?;
        let nz = &self.normalizer;
        let d = self.config.in_dim;
        let x = Tensor::from_fn(raw.shape(), |i| {
            let c = i % d;
            T::from_f64((raw.data()[i].to_f64() - nz.in_mean[c]) / nz.in_std[c])
        });
        let x = tape.constant(x);
        let p: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t))
            .collect();
        let ix = self.params.index();

        let e = tape.matmul(x, p[ix.embed_w1])?;
        let e = tape.add_row(e, p[ix.embed_b1])?;
        let e = tape.gelu(e);
        let e = tape.matmul(e, p[ix.embed_w2])?;
        let e = tape.add_row(e, p[ix.embed_b2])?;

        let mut h = tape.gather_rows(e, layout.gather_index())?;
        let cfg = &self.config;
        let mut s = (cfg.persistent_supernodes && cfg.supernodes > 0).then(|| {
            tape.constant(Tensor::zeros(&[layout.k() * cfg.supernodes, cfg.width]))
        });
        for b in &ix.blocks {
            let (h2, s2) = self.block_on_tape(tape, h, s, layout, b, &p)?;
            h = h2;
            s = s2;
        }

        let y = tape.layer_norm(h, p[ix.head_ln_gain], p[ix.head_ln_bias])?;
        let y = tape.matmul(y, p[ix.head_w])?;
        let y = tape.add_row(y, p[ix.head_b])?;
        let y = tape.gather_rows(y, layout.scatter_index())?;
        let pred = affine_const(tape, y, &nz.out_std, &nz.out_mean)?;
        Ok(Recorded { pred, params: p })
    }

    fn block_on_tape(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        s: Option<Var>,
        layout: &PatchLayout,
        b: &BlockIndex,
        p: &[Var],
    ) -> Result<(Var, Option<Var>)> {
        let n1 = tape.layer_norm(h, p[b.ln1_gain], p[b.ln1_bias])?;
        let vars = PmsaVars {
            w_q: p[b.w_q],
            w_k: p[b.w_k],
            w_v: p[b.w_v],
            w_o: p[b.w_o],
            w_pool: b.w_pool.map(|i| p[i]),
            heads: self.config.heads,
        };
        let att = pmsa_on_tape(tape, n1, layout, &self.config.pooling_config(), &vars, s)?;
        let hh = tape.add(h, att.h)?;
        let n2 = tape.layer_norm(hh, p[b.ln2_gain], p[b.ln2_bias])?;
        let f = tape.matmul(n2, p[b.ffn_w1])?;
        let f = tape.add_row(f, p[b.ffn_b1])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, p[b.ffn_w2])?;
        let f = tape.add_row(f, p[b.ffn_b2])?;
        Ok((tape.add(hh, f)?, att.s))
    }

    /// Prediction for one sample, `N×out_dim` in the sample's point order.
    pub fn forward(&self, raw: &Tensor<T>, layout: &PatchLayout) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, raw, layout)?;
        Ok(tape.value(r.pred).clone())
    }

    /// The embedding MLP alone, applied to already standardized input.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.config.in_dim {
            return Err(Error::config(format!(
                "embed expects {} input channels, got {}",
                self.config.in_dim,
                x.cols()
            )));
        }
        let ix = self.params.index();
        let t = self.params.tensors();
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let [w1, b1, w2, b2] =
            [ix.embed_w1, ix.embed_b1, ix.embed_w2, ix.embed_b2].map(|i| tape.constant(t[i].clone()));
        let e = tape.matmul(x, w1)?;
        let e = tape.add_row(e, b1)?;
        let e = tape.gelu(e);
        let e = tape.matmul(e, w2)?;
        let e = tape.add_row(e, b2)?;
        Ok(tape.value(e).clone())
    }

    /// One block applied to slot-ordered features `h` (`N_pad×F`).
    pub fn block(&self, index: usize, h: &Tensor<T>, layout: &PatchLayout) -> Result<Tensor<T>> {
        let b = *self
            .params
            .index()
            .blocks
            .get(index)
            .ok_or_else(|| Error::config(format!("no block {index}")))?;
        let mut tape = Tape::new();
        let p: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let hv = tape.constant(h.clone());
        let cfg = &self.config;
        let s = (cfg.persistent_supernodes && cfg.supernodes > 0).then(|| {
            tape.constant(Tensor::zeros(&[layout.k() * cfg.supernodes, cfg.width]))
        });
        let (out, _) = self.block_on_tape(&mut tape, hv, s, layout, &b, &p)?;
        Ok(tape.value(out).clone())
    }
}
