//! Supernode pooling: compresses each patch of `L` tokens into `Q` tokens.

use serde::{Deserialize, Serialize};

use crate::balltree::PatchLayout;
use crate::error::{Error, Result};
use crate::numerics::{Backward, BackwardCtx, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Mean,
    Max,
    Linear,
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "linear" => Ok(Self::Linear),
            other => Err(Error::config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

/// Pooling mode and supernodes per patch. `q = 0` disables the global
/// context entirely (local-only attention, used as a test reduction).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub mode: PoolingMode,
    pub q: usize,
}

impl PoolingConfig {
    pub fn new(mode: PoolingMode, q: usize) -> Self {
        Self { mode, q }
    }

    pub fn local_only() -> Self {
        Self {
            mode: PoolingMode::Mean,
            q: 0,
        }
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        if self.q > 0 && matches!(self.mode, PoolingMode::Mean | PoolingMode::Max) && !l.is_multiple_of(self.q)
        {
            return Err(Error::config(format!(
                "{:?} pooling needs L divisible by Q (L = {l}, Q = {})",
                self.mode, self.q
            )));
        }
        Ok(())
    }
}

/// Pooled global context `S` (`K·Q × F`) plus, per supernode, the fraction
/// of its pooled slots that held real points. Supernodes with weight zero
/// are excluded as attention keys.
#[derive(Clone, Debug)]
pub struct SupernodeSet<T: Real> {
    pub s: Tensor<T>,
    pub weight: Vec<T>,
}

impl<T: Real> SupernodeSet<T> {
    pub fn valid(&self) -> Vec<bool> {
        self.weight.iter().map(|&w| w > T::ZERO).collect()
    }
}

/// Pools one patch `h_k` (`L×F`, row-major) into `Q×F`. Returns the pooled
/// rows, per-supernode validity weights, and for max pooling the source row
/// of every output element.
fn pool_one<T: Real>(
    h_k: &[T],
    f: usize,
    mask: &[bool],
    cfg: &PoolingConfig,
    w_pool: Option<&Tensor<T>>,
) -> Result<(Vec<T>, Vec<T>, Vec<usize>)> {
    let l = mask.len();
    let q = cfg.q;
    let mut out = vec![T::ZERO; q * f];
    let mut weight = vec![T::ZERO; q];
    let mut argmax = Vec::new();
    if q == 0 {
        return Ok((out, weight, argmax));
    }
    match cfg.mode {
        PoolingMode::Mean | PoolingMode::Max => {
            cfg.validate(l)?;
            let sub = l / q;
            if cfg.mode == PoolingMode::Max {
                argmax = vec![usize::MAX; q * f];
            }
            for s in 0..q {
                let rows = s * sub..(s + 1) * sub;
                let count = rows.clone().filter(|&r| mask[r]).count();
                weight[s] = T::from_f64(count as f64 / sub as f64);
                if count == 0 {
                    continue;
                }
                let o = &mut out[s * f..(s + 1) * f];
                if cfg.mode == PoolingMode::Mean {
                    for r in rows.filter(|&r| mask[r]) {
                        for (acc, &x) in o.iter_mut().zip(&h_k[r * f..(r + 1) * f]) {
                            *acc += x;
                        }
                    }
                    let inv = T::ONE / T::from_f64(count as f64);
                    o.iter_mut().for_each(|x| *x *= inv);
                } else {
                    let am = &mut argmax[s * f..(s + 1) * f];
                    for r in rows.filter(|&r| mask[r]) {
                        for c in 0..f {
                            let x = h_k[r * f + c];
                            if am[c] == usize::MAX || x > o[c] {
                                o[c] = x;
                                am[c] = r;
                            }
                        }
                    }
                }
            }
        }
        PoolingMode::Linear => {
            let w = w_pool.ok_or_else(|| Error::config("linear pooling needs W_pool"))?;
            if w.shape() != [l, q] {
                return Err(Error::shape("linear pooling W_pool", w.shape(), &[l, q]));
            }
            // S = W_poolᵀ H_k with padded rows treated as zero.
            for r in (0..l).filter(|&r| mask[r]) {
                let hrow = &h_k[r * f..(r + 1) * f];
                for s in 0..q {
                    let a = w.get(r, s);
                    for (acc, &x) in out[s * f..(s + 1) * f].iter_mut().zip(hrow) {
                        *acc += a * x;
                    }
                }
            }
            let frac = T::from_f64(mask.iter().filter(|&&m| m).count() as f64 / l as f64);
            weight.iter_mut().for_each(|w| *w = frac);
        }
    }
    Ok((out, weight, argmax))
}

/// Pools a single patch. `h_k` is `L×F`, `mask` has `L` entries.
pub fn pool_patch<T: Real>(
    h_k: &Tensor<T>,
    mask: &[bool],
    cfg: &PoolingConfig,
    w_pool: Option<&Tensor<T>>,
) -> Result<SupernodeSet<T>> {
    if h_k.rows() != mask.len() {
        return Err(Error::shape("pool_patch", h_k.shape(), &[mask.len()]));
    }
    let f = h_k.cols();
    let (s, weight, _) = pool_one(h_k.data(), f, mask, cfg, w_pool)?;
    Ok(SupernodeSet {
        s: Tensor::wrap(vec![cfg.q, f], s),
        weight,
    })
}

struct Pooled<T: Real> {
    set: SupernodeSet<T>,
    argmax: Vec<Vec<usize>>,
}

fn pool_all<T: Real>(
    h: &Tensor<T>,
    layout: &PatchLayout,
    cfg: &PoolingConfig,
    w_pool: Option<&Tensor<T>>,
) -> Result<Pooled<T>> {
    if h.rows() != layout.n_padded() {
        return Err(Error::shape(
            "build_global_context",
            h.shape(),
            &[layout.n_padded(), h.cols()],
        ));
    }
    cfg.validate(layout.l())?;
    let f = h.cols();
    let mut s = Vec::with_capacity(layout.k() * cfg.q * f);
    let mut weight = Vec::with_capacity(layout.k() * cfg.q);
    let mut argmax = Vec::with_capacity(layout.k());
    for k in 0..layout.k() {
        let r = layout.patch_range(k);
        let (o, w, am) = pool_one(
            &h.data()[r.start * f..r.end * f],
            f,
            &layout.valid()[r],
            cfg,
            w_pool,
        )?;
        s.extend(o);
        weight.extend(w);
        argmax.push(am);
    }
    Ok(Pooled {
        set: SupernodeSet {
            s: Tensor::wrap(vec![layout.k() * cfg.q, f], s),
            weight,
        },
        argmax,
    })
}

/// Stacks the pooled supernodes of every patch, in patch order.
pub fn build_global_context<T: Real>(
    h: &Tensor<T>,
    layout: &PatchLayout,
    cfg: &PoolingConfig,
    w_pool: Option<&Tensor<T>>,
) -> Result<SupernodeSet<T>> {
    pool_all(h, layout, cfg, w_pool).map(|p| p.set)
}

struct PoolOp {
    cfg: PoolingConfig,
    k: usize,
    l: usize,
    valid: Vec<bool>,
    argmax: Vec<Vec<usize>>,
}

impl<T: Real> Backward<T> for PoolOp {
    fn name(&self) -> &'static str {
        "pool"
    }

    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let h = cx.inputs[0];
        let f = h.cols();
        let (q, l) = (self.cfg.q, self.l);
        let g = cx.grad;
        let mut dh = Tensor::zeros(h.shape());
        let mut dw = match cx.inputs.get(1) {
            Some(w) if cx.needs[1] => Some(Tensor::zeros(w.shape())),
            _ => None,
        };
        for k in 0..self.k {
            let base = k * l;
            let mask = &self.valid[base..base + l];
            for s in 0..q {
                let grow = g.row(k * q + s);
                match self.cfg.mode {
                    PoolingMode::Mean => {
                        let sub = l / q;
                        let rows = s * sub..(s + 1) * sub;
                        let count = rows.clone().filter(|&r| mask[r]).count();
                        if count == 0 {
                            continue;
                        }
                        let inv = T::ONE / T::from_f64(count as f64);
                        for r in rows.filter(|&r| mask[r]) {
                            for (d, &gv) in dh.row_mut(base + r).iter_mut().zip(grow) {
                                *d += gv * inv;
                            }
                        }
                    }
                    PoolingMode::Max => {
                        let am = &self.argmax[k][s * f..(s + 1) * f];
                        for c in 0..f {
                            if am[c] != usize::MAX {
                                let r = base + am[c];
                                let v = dh.get(r, c) + grow[c];
                                dh.set(r, c, v);
                            }
                        }
                    }
                    PoolingMode::Linear => {
                        let w = cx.inputs[1];
                        for r in (0..l).filter(|&r| mask[r]) {
                            let a = w.get(r, s);
                            let hrow = h.row(base + r);
                            let mut dot = T::ZERO;
                            for (d, (&gv, &x)) in
                                dh.row_mut(base + r).iter_mut().zip(grow.iter().zip(hrow))
                            {
                                *d += a * gv;
                                dot += gv * x;
                            }
                            if let Some(dw) = dw.as_mut() {
                                let v = dw.get(r, s) + dot;
                                dw.set(r, s, v);
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![cx.needs[0].then_some(dh)];
        if cx.inputs.len() > 1 {
            out.push(dw);
        }
        Ok(out)
    }
}

/// Records pooling on a tape. Returns the supernode matrix and validity
/// weights.
pub fn pool_on_tape<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    layout: &PatchLayout,
    cfg: &PoolingConfig,
    w_pool: Option<Var>,
) -> Result<(Var, Vec<T>)> {
    let pooled = pool_all(tape.value(h), layout, cfg, w_pool.map(|w| tape.value(w)))?;
    let op = PoolOp {
        cfg: *cfg,
        k: layout.k(),
        l: layout.l(),
        valid: layout.valid().to_vec(),
        argmax: pooled.argmax,
    };
    let inputs: Vec<Var> = match (cfg.mode, cfg.q, w_pool) {
        (PoolingMode::Linear, q, Some(w)) if q > 0 => vec![h, w],
        _ => vec![h],
    };
    let weight = pooled.set.weight;
    let v = tape.push(&inputs, pooled.set.s, op);
    Ok((v, weight))
}
