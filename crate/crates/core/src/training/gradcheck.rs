//! Finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::losses::relative_l2_loss;
use crate::error::Result;
use crate::model::{ModelConfig, Mspt};
use crate::numerics::{Tape, Tensor};
use crate::pmsa::PoolingMode;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares analytic gradients against central differences of `loss`.
/// Each tensor is scored by `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)`.
pub fn check_gradients(
    names: &[String],
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut loss: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    h: f64,
) -> Result<GradcheckReport> {
    let mut work = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (t, name) in names.iter().enumerate() {
        let (mut num, mut na, mut nf) = (0.0, 0.0, 0.0);
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = loss(&work)?;
            work[t].data_mut()[i] = orig - h;
            let down = loss(&work)?;
            work[t].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[t].data()[i];
            num += (g - fd) * (g - fd);
            na += g * g;
            nf += fd * fd;
        }
        let den = na.sqrt().max(nf.sqrt()).max(1e-12);
        tensors.push(TensorCheck {
            name: name.clone(),
            rel_err: num.sqrt() / den,
        });
    }
    let max_rel_err = tensors.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tensors,
        max_rel_err,
        passed: max_rel_err < GRADCHECK_TOLERANCE,
    })
}

/// The toy configuration used by `mspt gradcheck`.
pub fn default_gradcheck_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        width: 8,
        heads: 2,
        patches: 2,
        supernodes: 1,
        pooling: PoolingMode::Mean,
        ffn_expansion: 2,
        in_dim: 3,
        out_dim: 1,
        persistent_supernodes: false,
        patch_size: None,
        leaf_capacity: None,
    }
}

/// A random 24-point instance for `cfg`: coordinates in the unit square
/// plus extra input channels, and a random target.
pub fn gradcheck_instance(cfg: &ModelConfig, seed: u64) -> (Vec<f64>, Tensor<f64>, Tensor<f64>) {
    let n = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let raw = Tensor::from_fn(&[n, cfg.in_dim], |_| rng.gen_range(0.0..1.0));
    let target = Tensor::from_fn(&[n, cfg.out_dim], |_| rng.gen_range(-1.0..1.0));
    let dim = cfg.in_dim.min(2);
    let coords = (0..n)
        .flat_map(|i| raw.row(i)[..dim].to_vec())
        .collect();
    (coords, raw, target)
}

/// Checks every parameter of a freshly initialized model on the toy
/// instance, with the relative L2 loss.
pub fn gradcheck(cfg: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    let mut model = Mspt::<f64>::new(cfg.clone(), seed)?;
    // Fresh biases and gains are 0 and 1; perturb them so no gradient is
    // trivially symmetric.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let (coords, raw, target) = gradcheck_instance(cfg, seed);
    let layout = model.layout(&coords, cfg.in_dim.min(2), false)?;

    let mut tape = Tape::new();
    let rec = model.record(&mut tape, &raw, &layout)?;
    let loss = relative_l2_loss(&mut tape, rec.pred, &target)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = model
        .params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| grads.param(i).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let names = model.params.names().to_vec();
    let params = model.params.tensors().to_vec();
    let mut probe = model.clone();
    check_gradients(
        &names,
        &params,
        &analytic,
        |p| {
            probe.params.tensors_mut().clone_from_slice(p);
            let pred = probe.forward(&raw, &layout)?;
            crate::metrics::relative_l2(pred.data(), target.data())
        },
        GRADCHECK_STEP,
    )
}
