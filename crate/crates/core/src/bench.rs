//! Cost-model sweeps: analytic multiply counts, tensor-memory high-water
//! marks and forward wall time of one attention layer.
//!
//! Timings are CPU measurements and only meaningful as trends.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balltree::{grid_passthrough_layout, PatchLayout};
use crate::error::{Error, Result};
use crate::numerics::{alloc, counter, Precision, Real, Tensor};
use crate::pmsa::{flop_count, pmsa_forward, PmsaParams, PoolingConfig, PoolingMode};

pub const CSV_HEADER: &str = "N,K,L,Q,F,heads,threads,precision,flops_analytic,bytes_peak,ms_median,status";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub n: Vec<usize>,
    /// Patch counts. Ignored when `patch_sizes` is non-empty.
    #[serde(default)]
    pub k: Vec<usize>,
    /// Patch sizes; `K = ⌈N/L⌉` per configuration.
    #[serde(default)]
    pub patch_sizes: Vec<usize>,
    pub q: Vec<usize>,
    pub f: Vec<usize>,
    pub heads: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub precision: Precision,
    /// Configurations whose estimated tensor memory exceeds this many
    /// bytes are reported as skipped instead of run.
    #[serde(default)]
    pub memory_cap: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::config("a sweep needs at least 3 repetitions"));
        }
        if self.n.is_empty() || self.q.is_empty() || self.f.is_empty() || self.heads.is_empty() {
            return Err(Error::config("every sweep axis needs at least one value"));
        }
        if self.k.is_empty() && self.patch_sizes.is_empty() {
            return Err(Error::config("a sweep needs patch counts or patch sizes"));
        }
        Ok(())
    }

    /// Every configuration of the sweep, in row order.
    pub fn configs(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &n in &self.n {
            let ks: Vec<usize> = if self.patch_sizes.is_empty() {
                self.k.clone()
            } else {
                self.patch_sizes.iter().map(|&l| n.div_ceil(l.max(1))).collect()
            };
            for &k in &ks {
                for &q in &self.q {
                    for &f in &self.f {
                        for &heads in &self.heads {
                            out.push(SweepPoint { n, k, q, f, heads });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepPoint {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub f: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub q: usize,
    pub f: usize,
    pub heads: usize,
    pub threads: usize,
    pub precision: Precision,
    pub flops_analytic: u64,
    pub bytes_peak: Option<usize>,
    pub ms_median: Option<f64>,
    /// `ok`, or the reason the configuration was not run.
    pub status: String,
}

impl CostRow {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.k,
            self.l,
            self.q,
            self.f,
            self.heads,
            self.threads,
            self.precision,
            self.flops_analytic,
            opt(self.bytes_peak.map(|b| b.to_string())),
            opt(self.ms_median.map(|m| format!("{m:.4}"))),
            self.status
        )
    }
}

/// Rough tensor footprint of one forward pass, used for the memory cap.
pub fn estimated_bytes(p: &SweepPoint, precision: Precision) -> usize {
    let l = p.n.div_ceil(p.k);
    let rows = p.k * l + p.k * p.q;
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    width * (8 * rows * p.f + p.k * l * (l + p.k * p.q))
}

struct Instance<T: Real> {
    h: Tensor<T>,
    layout: PatchLayout,
    params: PmsaParams<T>,
    pooling: PoolingConfig,
}

fn instance<T: Real>(p: &SweepPoint, seed: u64) -> Result<Instance<T>> {
    let layout = grid_passthrough_layout(p.n, p.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (2 * p.f) as f64).sqrt();
    let mut w = || Tensor::from_fn(&[p.f, p.f], |_| T::from_f64(rng.gen_range(-bound..bound)));
    let params = PmsaParams {
        w_q: w(),
        w_k: w(),
        w_v: w(),
        w_o: w(),
        w_pool: None,
        heads: p.heads,
    };
    let valid = layout.valid().to_vec();
    let h = Tensor::from_fn(&[layout.n_padded(), p.f], |i| {
        if valid[i / p.f] {
            T::from_f64(rng.gen_range(-1.0..1.0))
        } else {
            T::ZERO
        }
    });
    Ok(Instance {
        h,
        layout,
        params,
        pooling: PoolingConfig::new(PoolingMode::Mean, p.q),
    })
}

/// One timed forward pass on a fresh instance: tensor bytes allocated
/// above the instance itself, and milliseconds.
fn time_once<T: Real>(p: &SweepPoint, spec: &SweepSpec) -> Result<(usize, f64)> {
    let inst = instance::<T>(p, spec.seed)?;
    let base = alloc::live_bytes();
    alloc::reset_peak();
    let t = Instant::now();
    let out = pmsa_forward(&inst.h, &inst.layout, &inst.pooling, &inst.params)?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    drop(out);
    Ok((alloc::peak_bytes().saturating_sub(base), ms))
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn blank_row(p: &SweepPoint, spec: &SweepSpec) -> Result<CostRow> {
    let l = p.n.div_ceil(p.k.max(1));
    let mut row = CostRow {
        n: p.n,
        k: p.k,
        l,
        q: p.q,
        f: p.f,
        heads: p.heads,
        threads: rayon::current_num_threads(),
        precision: spec.precision,
        flops_analytic: flop_count(p.k * l, p.k, l, p.q, p.f)?,
        bytes_peak: None,
        ms_median: None,
        status: "ok".into(),
    };
    if p.k == 0 || p.k > p.n || !p.f.is_multiple_of(p.heads.max(1)) {
        row.status = "skipped: invalid configuration".into();
    } else if grid_passthrough_layout(p.n, p.k).is_err() {
        row.status = "skipped: padding exceeds one patch".into();
    } else if let Some(cap) = spec.memory_cap {
        let need = estimated_bytes(p, spec.precision);
        if need > cap {
            row.status = format!("skipped: needs ~{need} bytes over cap {cap}");
        }
    }
    Ok(row)
}

/// Measures a set of configurations. Repetitions are interleaved: every
/// pass runs each configuration once, so slow drifts in machine speed
/// affect all configurations alike.
pub fn run_points(points: &[SweepPoint], spec: &SweepSpec) -> Result<Vec<CostRow>> {
    let mut rows = points.iter().map(|p| blank_row(p, spec)).collect::<Result<Vec<_>>>()?;
    let live: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].status == "ok").collect();
    let mut times = vec![Vec::with_capacity(spec.reps); rows.len()];
    let mut peaks = vec![0usize; rows.len()];
    for pass in 0..spec.warmup + spec.reps {
        for &i in &live {
            let (peak, ms) = match spec.precision {
                Precision::F32 => time_once::<f32>(&points[i], spec)?,
                Precision::F64 => time_once::<f64>(&points[i], spec)?,
            };
            if pass >= spec.warmup {
                times[i].push(ms);
                peaks[i] = peaks[i].max(peak);
            }
        }
    }
    for &i in &live {
        rows[i].bytes_peak = Some(peaks[i]);
        rows[i].ms_median = Some(median(&mut times[i]));
    }
    Ok(rows)
}

/// Runs one configuration (or records why it was skipped).
pub fn run_point(p: &SweepPoint, spec: &SweepSpec) -> Result<CostRow> {
    Ok(run_points(std::slice::from_ref(p), spec)?.remove(0))
}

pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<CostRow>> {
    spec.validate()?;
    let rows = run_points(&spec.configs(), spec)?;
    for row in &rows {
        log::info!("{}", row.csv_row());
    }
    Ok(rows)
}

/// Appends rows to a CSV file, writing the header only when the file is
/// new or empty.
pub fn append_csv(path: &Path, rows: &[CostRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Multiplies counted by the instrumented kernels for one forward pass.
pub fn counted_multiplies(p: &SweepPoint, seed: u64) -> Result<u64> {
    let inst = instance::<f32>(p, seed)?;
    counter::start();
    let out = pmsa_forward(&inst.h, &inst.layout, &inst.pooling, &inst.params);
    let count = counter::stop();
    out?;
    Ok(count)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub k: usize,
    pub l: usize,
    pub flops: u64,
}

/// Analytic cost of one layer at fixed `N` across patch counts. Each `K`
/// uses `L = ⌈N/K⌉` and is costed on the padded size `K·L`.
pub fn tradeoff_table(n: usize, ks: &[usize], q: usize, f: usize) -> Result<Vec<TradeoffRow>> {
    ks.iter()
        .map(|&k| {
            if k == 0 || k > n {
                return Err(Error::config(format!("K = {k} is outside 1..={n}")));
            }
            let l = n.div_ceil(k);
            Ok(TradeoffRow {
                k,
                l,
                flops: flop_count(k * l, k, l, q, f)?,
            })
        })
        .collect()
}

/// Position of the cheapest row, if it lies strictly inside the table.
pub fn interior_minimum(rows: &[TradeoffRow]) -> Option<usize> {
    let (best, _) = rows.iter().enumerate().min_by_key(|(_, r)| r.flops)?;
    (best > 0 && best + 1 < rows.len()).then_some(best)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
