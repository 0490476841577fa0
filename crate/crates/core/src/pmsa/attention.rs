//! Patch attention against local tokens and the shared global context.
//!
//! Every patch attends with its valid tokens as queries over the keys
//! `[local tokens ; all valid supernodes]`. Supernode keys and values are
//! projected once and shared by all patches. Patches are processed in
//! parallel; each patch writes a disjoint output block, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::balltree::PatchLayout;
use crate::error::{Error, Result};
use crate::numerics::kernels::{gemm_acc, gemm_set, gemm_tn_acc, softmax_in_place, softmax_unnormalized, transpose_slice};
use crate::numerics::{counter, matmul, Backward, BackwardCtx, Real, Tape, Tensor, Var};
use crate::pmsa::pooling::{build_global_context, pool_on_tape, PoolingConfig, PoolingMode};

/// Projection weights of one attention layer. All projections are `F×F`
/// without bias. `w_pool` (`L×Q`) is only used by linear pooling.
#[derive(Clone, Debug)]
pub struct PmsaParams<T: Real> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w_pool: Option<Tensor<T>>,
    pub heads: usize,
}

impl<T: Real> PmsaParams<T> {
    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    fn validate(&self) -> Result<()> {
        let f = self.width();
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != [f, f] {
                return Err(Error::shape("attention weights", w.shape(), &[f, f]));
            }
        }
        check_heads(f, self.heads)
    }
}

pub(crate) fn check_heads(f: usize, heads: usize) -> Result<()> {
    if heads == 0 || !f.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "feature width {f} is not divisible into {heads} heads"
        )));
    }
    Ok(())
}

struct Sources<'a, T> {
    q: &'a [T],
    kloc: &'a [T],
    vloc: &'a [T],
    kglob: &'a [T],
    vglob: &'a [T],
    f: usize,
    heads: usize,
}

fn gather_head<T: Real>(src: &[T], f: usize, rows: &[usize], h: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&src[r * f + h * d..r * f + (h + 1) * d]);
    }
    out
}

fn gather_keys<T: Real>(
    loc: &[T],
    glob: &[T],
    locals: &[usize],
    globs: &[usize],
    f: usize,
    h: usize,
    d: usize,
) -> Vec<T> {
    let mut out = gather_head(loc, f, locals, h, d);
    for &r in globs {
        out.extend_from_slice(&glob[r * f + h * d..r * f + (h + 1) * d]);
    }
    out
}

fn scatter_head<T: Real>(dst: &mut [T], f: usize, src: &[T], h: usize, d: usize) {
    for (i, row) in src.chunks_exact(d).enumerate() {
        for (o, &x) in dst[i * f + h * d..i * f + (h + 1) * d].iter_mut().zip(row) {
            *o += x;
        }
    }
}

/// Attention for one patch over all heads. `qrows` index `src.q`, `locals`
/// index the local key/value rows and `globs` the supernode rows. Returns the
/// `|qrows|×F` output, the per-head probabilities if requested, and the
/// multiply count.
fn patch_forward<T: Real>(
    src: &Sources<'_, T>,
    qrows: &[usize],
    locals: &[usize],
    globs: &[usize],
    keep: bool,
) -> (Vec<T>, Vec<Vec<T>>, u64) {
    let f = src.f;
    let d = f / src.heads;
    let nq = qrows.len();
    let nk = locals.len() + globs.len();
    let scale = T::ONE / T::from_f64(d as f64).sqrt();
    let mut out = vec![T::ZERO; nq * f];
    let mut probs = Vec::new();
    if nq == 0 {
        return (out, probs, 0);
    }
    let mut q = Vec::with_capacity(nq * d);
    let mut kt = vec![T::ZERO; d * nk];
    let mut v = Vec::with_capacity(nk * d);
    let mut p = Vec::new();
    let mut o = vec![T::ZERO; nq * d];
    for h in 0..src.heads {
        let cols = h * d..(h + 1) * d;
        q.clear();
        for &r in qrows {
            q.extend_from_slice(&src.q[r * f..][cols.clone()]);
        }
        let keys = locals.iter().map(|&r| &src.kloc[r * f..]).chain(globs.iter().map(|&r| &src.kglob[r * f..]));
        for (j, row) in keys.enumerate() {
            for (c, &x) in row[cols.clone()].iter().enumerate() {
                kt[c * nk + j] = x;
            }
        }
        v.clear();
        for row in locals.iter().map(|&r| &src.vloc[r * f..]).chain(globs.iter().map(|&r| &src.vglob[r * f..])) {
            v.extend_from_slice(&row[cols.clone()]);
        }
        if keep || p.is_empty() {
            p = vec![T::ZERO; nq * nk];
        }
        gemm_set(&q, &kt, &mut p, nq, d, nk);
        if keep {
            for row in p.chunks_exact_mut(nk) {
                softmax_in_place(row, scale);
            }
            gemm_set(&p, &v, &mut o, nq, nk, d);
        } else {
            // Without a backward pass the probabilities are never needed,
            // so the normalization is applied to the narrower output.
            let inv: Vec<T> = p.chunks_exact_mut(nk).map(|row| softmax_unnormalized(row, scale)).collect();
            gemm_set(&p, &v, &mut o, nq, nk, d);
            for (row, &s) in o.chunks_exact_mut(d).zip(&inv) {
                row.iter_mut().for_each(|x| *x *= s);
            }
        }
        scatter_head(&mut out, f, &o, h, d);
        if keep {
            probs.push(std::mem::take(&mut p));
        }
    }
    (out, probs, 2 * (nq * nk * f) as u64)
}

struct PatchGrads<T> {
    dq: Vec<T>,
    dk_loc: Vec<T>,
    dv_loc: Vec<T>,
    dk_glob: Vec<T>,
    dv_glob: Vec<T>,
}

fn patch_backward<T: Real>(
    src: &Sources<'_, T>,
    qrows: &[usize],
    locals: &[usize],
    globs: &[usize],
    probs: &[Vec<T>],
    dout: &[T],
) -> PatchGrads<T> {
    let f = src.f;
    let d = f / src.heads;
    let nq = qrows.len();
    let (nl, ng) = (locals.len(), globs.len());
    let nk = nl + ng;
    let scale = T::ONE / T::from_f64(d as f64).sqrt();
    let mut g = PatchGrads {
        dq: vec![T::ZERO; nq * f],
        dk_loc: vec![T::ZERO; nl * f],
        dv_loc: vec![T::ZERO; nl * f],
        dk_glob: vec![T::ZERO; ng * f],
        dv_glob: vec![T::ZERO; ng * f],
    };
    if nq == 0 {
        return g;
    }
    for (h, p) in probs.iter().enumerate() {
        let q = gather_head(src.q, f, qrows, h, d);
        let k = gather_keys(src.kloc, src.kglob, locals, globs, f, h, d);
        let v = gather_keys(src.vloc, src.vglob, locals, globs, f, h, d);
        let mut go = Vec::with_capacity(nq * d);
        for i in 0..nq {
            go.extend_from_slice(&dout[i * f + h * d..i * f + (h + 1) * d]);
        }
        let mut dv = vec![T::ZERO; nk * d];
        gemm_tn_acc(p, &go, &mut dv, nq, nk, d);
        let vt = transpose_slice(&v, nk, d);
        let mut ds = vec![T::ZERO; nq * nk];
        gemm_acc(&go, &vt, &mut ds, nq, d, nk);
        for (srow, prow) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
            let dot: T = srow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (s, &pv) in srow.iter_mut().zip(prow) {
                *s = pv * (*s - dot) * scale;
            }
        }
        let mut dq = vec![T::ZERO; nq * d];
        gemm_acc(&ds, &k, &mut dq, nq, nk, d);
        let mut dk = vec![T::ZERO; nk * d];
        gemm_tn_acc(&ds, &q, &mut dk, nq, nk, d);
        scatter_head(&mut g.dq, f, &dq, h, d);
        scatter_head(&mut g.dk_loc, f, &dk[..nl * d], h, d);
        scatter_head(&mut g.dv_loc, f, &dv[..nl * d], h, d);
        scatter_head(&mut g.dk_glob, f, &dk[nl * d..], h, d);
        scatter_head(&mut g.dv_glob, f, &dv[nl * d..], h, d);
    }
    g
}

/// Which supernodes and slots take part in attention.
#[derive(Clone, Debug)]
struct Geometry {
    k: usize,
    l: usize,
    heads: usize,
    locals: Vec<Vec<usize>>,
    globs: Vec<usize>,
}

impl Geometry {
    fn new(layout: &PatchLayout, glob_valid: &[bool], heads: usize) -> Self {
        let valid = layout.valid();
        Self {
            k: layout.k(),
            l: layout.l(),
            heads,
            locals: (0..layout.k())
                .map(|k| layout.patch_range(k).filter(|&i| valid[i]).collect())
                .collect(),
            globs: (0..glob_valid.len()).filter(|&i| glob_valid[i]).collect(),
        }
    }
}

fn add_rows<T: Real>(dst: &mut [T], f: usize, rows: &[usize], src: &[T]) {
    for (&r, row) in rows.iter().zip(src.chunks_exact(f)) {
        for (o, &x) in dst[r * f..(r + 1) * f].iter_mut().zip(row) {
            *o += x;
        }
    }
}

/// Local-query attention over all patches. Returns the `N_pad×F` output
/// (zero at padded slots), per-patch probabilities, and the multiply count.
fn local_forward<T: Real>(
    geo: &Geometry,
    src: &Sources<'_, T>,
    keep: bool,
) -> (Vec<T>, Vec<Vec<Vec<T>>>, u64) {
    let f = src.f;
    let (k, l) = (geo.k, geo.l);
    let mut out = vec![T::ZERO; k * l * f];
    let results: Vec<(Vec<Vec<T>>, u64)> = out
        .par_chunks_mut(l * f)
        .enumerate()
        .map(|(p, block)| {
            let locals = &geo.locals[p];
            let (o, probs, mults) = patch_forward(src, locals, locals, &geo.globs, keep);
            for (&slot, row) in locals.iter().zip(o.chunks_exact(f)) {
                let r = slot - p * l;
                block[r * f..(r + 1) * f].copy_from_slice(row);
            }
            (probs, mults)
        })
        .collect();
    let mults = results.iter().map(|r| r.1).sum();
    (out, results.into_iter().map(|r| r.0).collect(), mults)
}

/// Supernode-query attention, averaged over patches. Output is `G×F`.
fn glob_forward<T: Real>(
    geo: &Geometry,
    src: &Sources<'_, T>,
    g_rows: usize,
    keep: bool,
) -> (Vec<T>, Vec<Vec<Vec<T>>>, u64) {
    let f = src.f;
    let results: Vec<(Vec<T>, Vec<Vec<T>>, u64)> = (0..geo.k)
        .into_par_iter()
        .map(|p| patch_forward(src, &geo.globs, &geo.locals[p], &geo.globs, keep))
        .collect();
    let inv_k = T::ONE / T::from_f64(geo.k as f64);
    let mut out = vec![T::ZERO; g_rows * f];
    let mut caches = Vec::with_capacity(geo.k);
    let mut mults = 0;
    for (o, probs, m) in results {
        let scaled: Vec<T> = o.iter().map(|&x| x * inv_k).collect();
        add_rows(&mut out, f, &geo.globs, &scaled);
        caches.push(probs);
        mults += m;
    }
    (out, caches, mults)
}

struct AttnOp<T: Real> {
    geo: Geometry,
    glob_queries: bool,
    probs: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Backward<T> for AttnOp<T> {
    fn name(&self) -> &'static str {
        if self.glob_queries {
            "glob_attention"
        } else {
            "patch_attention"
        }
    }

    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let [q, kl, vl, kg, vg] = [0, 1, 2, 3, 4].map(|i| cx.inputs[i]);
        let f = q.cols();
        let src = Sources {
            q: q.data(),
            kloc: kl.data(),
            vloc: vl.data(),
            kglob: kg.data(),
            vglob: vg.data(),
            f,
            heads: self.geo.heads,
        };
        let geo = &self.geo;
        let grad = cx.grad.data();
        let per_patch: Vec<PatchGrads<T>> = (0..geo.k)
            .into_par_iter()
            .map(|p| {
                let locals = &geo.locals[p];
                if self.glob_queries {
                    let inv_k = T::ONE / T::from_f64(geo.k as f64);
                    let mut dout = Vec::with_capacity(geo.globs.len() * f);
                    for &r in &geo.globs {
                        dout.extend(grad[r * f..(r + 1) * f].iter().map(|&x| x * inv_k));
                    }
                    patch_backward(&src, &geo.globs, locals, &geo.globs, &self.probs[p], &dout)
                } else {
                    let mut dout = Vec::with_capacity(locals.len() * f);
                    for &r in locals {
                        dout.extend_from_slice(&grad[r * f..(r + 1) * f]);
                    }
                    patch_backward(&src, locals, locals, &geo.globs, &self.probs[p], &dout)
                }
            })
            .collect();
        let mut dq = Tensor::zeros(q.shape());
        let mut dkl = Tensor::zeros(kl.shape());
        let mut dvl = Tensor::zeros(vl.shape());
        let mut dkg = Tensor::zeros(kg.shape());
        let mut dvg = Tensor::zeros(vg.shape());
        for (p, g) in per_patch.iter().enumerate() {
            let locals = &geo.locals[p];
            let qrows = if self.glob_queries { &geo.globs } else { locals };
            add_rows(dq.data_mut(), f, qrows, &g.dq);
            add_rows(dkl.data_mut(), f, locals, &g.dk_loc);
            add_rows(dvl.data_mut(), f, locals, &g.dv_loc);
            add_rows(dkg.data_mut(), f, &geo.globs, &g.dk_glob);
            add_rows(dvg.data_mut(), f, &geo.globs, &g.dv_glob);
        }
        Ok([dq, dkl, dvl, dkg, dvg]
            .into_iter()
            .zip(&cx.needs)
            .map(|(t, &n)| n.then_some(t))
            .collect())
    }
}

fn check_inputs<T: Real>(h: &Tensor<T>, layout: &PatchLayout, f: usize) -> Result<()> {
    if h.shape().len() != 2 || h.rows() != layout.n_padded() || h.cols() != f {
        return Err(Error::shape("pmsa_forward", h.shape(), &[layout.n_padded(), f]));
    }
    Ok(())
}

/// Parallelized multi-scale attention on a patch-ordered, padded input
/// `h` (`N_pad×F`). Returns `N_pad×F`; rows at padded slots are zero.
pub fn pmsa_forward<T: Real>(
    h: &Tensor<T>,
    layout: &PatchLayout,
    cfg: &PoolingConfig,
    params: &PmsaParams<T>,
) -> Result<Tensor<T>> {
    params.validate()?;
    let f = params.width();
    check_inputs(h, layout, f)?;
    let ctx = build_global_context(h, layout, cfg, params.w_pool.as_ref())?;
    // Supernodes pass through all three projections once, shared by every
    // patch; their query rows only feed the persistent-supernode variant.
    let _q_glob = matmul(&ctx.s, &params.w_q)?;
    let k_glob = matmul(&ctx.s, &params.w_k)?;
    let v_glob = matmul(&ctx.s, &params.w_v)?;
    let geo = Geometry::new(layout, &ctx.valid(), params.heads);
    let l = geo.l;
    // Token projections are done patch by patch so that each patch's
    // working set stays in cache.
    let mut out = vec![T::ZERO; geo.k * l * f];
    let mults: u64 = out
        .par_chunks_mut(l * f)
        .enumerate()
        .map(|(p, block)| {
            let rows = &h.data()[p * l * f..(p + 1) * l * f];
            let proj = |w: &Tensor<T>| {
                let mut c = vec![T::ZERO; l * f];
                gemm_acc(rows, w.data(), &mut c, l, f, f);
                c
            };
            let (q, k, v) = (proj(&params.w_q), proj(&params.w_k), proj(&params.w_v));
            let src = Sources {
                q: &q,
                kloc: &k,
                vloc: &v,
                kglob: k_glob.data(),
                vglob: v_glob.data(),
                f,
                heads: params.heads,
            };
            let locals: Vec<usize> = geo.locals[p].iter().map(|&s| s - p * l).collect();
            let (o, _, mults) = patch_forward(&src, &locals, &locals, &geo.globs, false);
            let mut full = vec![T::ZERO; l * f];
            for (&r, row) in locals.iter().zip(o.chunks_exact(f)) {
                full[r * f..(r + 1) * f].copy_from_slice(row);
            }
            gemm_acc(&full, params.w_o.data(), block, l, f, f);
            mults
        })
        .sum();
    counter::add(mults + 4 * (geo.k * l * f * f) as u64);
    Ok(Tensor::wrap(h.shape().to_vec(), out))
}

/// Tape handles for one attention layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct PmsaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_pool: Option<Var>,
    pub heads: usize,
}

/// Output of a recorded attention layer: the token update and, with
/// persistent supernodes, the next supernode state.
#[derive(Clone, Copy, Debug)]
pub struct PmsaOut {
    pub h: Var,
    pub s: Option<Var>,
}

/// Records attention on a tape. With `s_prev` given, supernodes persist
/// across blocks: the pooled context is offset by `s_prev`, and the
/// returned `s` is the patch-averaged supernode attention output.
pub fn pmsa_on_tape<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    layout: &PatchLayout,
    cfg: &PoolingConfig,
    vars: &PmsaVars,
    s_prev: Option<Var>,
) -> Result<PmsaOut> {
    let f = tape.value(vars.w_q).rows();
    check_heads(f, vars.heads)?;
    check_inputs(tape.value(h), layout, f)?;
    let w_pool = if cfg.mode == PoolingMode::Linear {
        vars.w_pool
    } else {
        None
    };
    let (pooled, weight) = pool_on_tape(tape, h, layout, cfg, w_pool)?;
    let s = match s_prev {
        Some(prev) => tape.add(pooled, prev)?,
        None => pooled,
    };
    let glob_valid: Vec<bool> = weight.iter().map(|&w| w > T::ZERO).collect();
    let geo = Geometry::new(layout, &glob_valid, vars.heads);
    let q = tape.matmul(h, vars.w_q)?;
    let k = tape.matmul(h, vars.w_k)?;
    let v = tape.matmul(h, vars.w_v)?;
    let kg = tape.matmul(s, vars.w_k)?;
    let vg = tape.matmul(s, vars.w_v)?;

    let run = |tape: &mut Tape<T>, qv: Var, glob_queries: bool| -> Var {
        let (out, probs, rows) = {
            let src = Sources {
                q: tape.value(qv).data(),
                kloc: tape.value(k).data(),
                vloc: tape.value(v).data(),
                kglob: tape.value(kg).data(),
                vglob: tape.value(vg).data(),
                f,
                heads: vars.heads,
            };
            if glob_queries {
                let g = tape.value(kg).rows();
                let (o, p, _) = glob_forward(&geo, &src, g, true);
                (o, p, g)
            } else {
                let (o, p, _) = local_forward(&geo, &src, true);
                (o, p, layout.n_padded())
            }
        };
        let op = AttnOp {
            geo: geo.clone(),
            glob_queries,
            probs,
        };
        tape.push(&[qv, k, v, kg, vg], Tensor::wrap(vec![rows, f], out), op)
    };

    let o = run(tape, q, false);
    let h_out = tape.matmul(o, vars.w_o)?;
    let s_out = match s_prev {
        Some(_) => {
            let qg = tape.matmul(s, vars.w_q)?;
            let og = run(tape, qg, true);
            Some(tape.matmul(og, vars.w_o)?)
        }
        None => None,
    };
    Ok(PmsaOut { h: h_out, s: s_out })
}
