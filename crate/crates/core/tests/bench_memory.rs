//! Kept in its own test binary: the allocation counters are process-wide,
//! so nothing else may allocate tensors while it measures.

use mspt::bench::*;
use mspt::numerics::Precision;

#[test]
fn peak_memory_grows_subquadratically() {
    let ns = [1024usize, 2048, 4096, 8192, 16384];
    let spec = SweepSpec {
        n: ns.to_vec(),
        k: Vec::new(),
        patch_sizes: vec![128],
        q: vec![1],
        f: vec![32],
        heads: vec![4],
        reps: 3,
        warmup: 1,
        precision: Precision::F32,
        memory_cap: None,
        seed: 0,
    };
    let rows = run_sweep(&spec).unwrap();
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.bytes_peak.unwrap() as f64).collect();
    let slope = loglog_slope(&x, &y);
    assert!(slope < 1.3, "slope {slope}, peaks {y:?}");
}
