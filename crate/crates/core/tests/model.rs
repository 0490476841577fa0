use mspt::balltree::{grid_passthrough_layout, make_patches, PatchLayout};
use mspt::model::{read_checkpoint, write_checkpoint, ModelConfig, Mspt};
use mspt::numerics::Tensor;
use mspt::pmsa::PoolingMode;
use mspt::Error;
use mspt_oracle as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(blocks: usize, width: usize, heads: usize, patches: usize, q: usize) -> ModelConfig {
    ModelConfig {
        blocks,
        width,
        heads,
        patches,
        supernodes: q,
        pooling: PoolingMode::Mean,
        ffn_expansion: 2,
        in_dim: 3,
        out_dim: 1,
        persistent_supernodes: false,
        patch_size: None,
        leaf_capacity: None,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Perturbs every parameter so that zero biases and unit gains do not hide
/// mistakes.
fn jitter(model: &mut Mspt<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.2..0.2));
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    // 12 blocks, 8 heads, 256 channels; 7 input channels (coordinates,
    // signed distance, normals), 4 outputs.
    let mut cfg = config(12, 256, 8, 64, 1);
    cfg.in_dim = 7;
    cfg.out_dim = 4;
    let (f, b, e) = (256usize, 12usize, 2usize);
    let embed = 7 * f + f + f * f + f;
    let per_block = (f + f) + 4 * f * f + (f + f) + (f * e * f + e * f) + (e * f * f + f);
    let head = (f + f) + 4 * f + 4;
    let expect = embed + b * per_block + head;
    let model = Mspt::<f32>::new(cfg.clone(), 0).unwrap();
    assert_eq!(model.params.count(), expect);
    assert_eq!(cfg.parameter_count(), expect);

    let mut doubled = cfg.clone();
    doubled.blocks = 24;
    assert_eq!(doubled.parameter_count() - cfg.parameter_count(), 12 * per_block);

    let mut lin = cfg;
    lin.pooling = PoolingMode::Linear;
    lin.supernodes = 4;
    lin.patch_size = Some(64);
    assert_eq!(lin.parameter_count(), expect + 12 * 64 * 4);
    assert_eq!(Mspt::<f32>::new(lin.clone(), 0).unwrap().params.count(), lin.parameter_count());
}

#[test]
fn initialization_follows_scheme() {
    let model = Mspt::<f64>::new(config(2, 8, 2, 2, 1), 3).unwrap();
    let p = &model.params;
    assert!(p.get("block0.ln1.gain").unwrap().data().iter().all(|&x| x == 1.0));
    assert!(p.get("block1.ffn.b1").unwrap().data().iter().all(|&x| x == 0.0));
    let w = p.get("block0.ffn.w1").unwrap();
    let a = (6.0f64 / (8.0 + 16.0)).sqrt();
    assert!(w.data().iter().all(|x| x.abs() <= a));
    assert!(w.data().iter().any(|x| x.abs() > 0.5 * a));
    let again = Mspt::<f64>::new(config(2, 8, 2, 2, 1), 3).unwrap();
    assert!(p.tensors().iter().zip(again.params.tensors()).all(|(a, b)| a.bit_eq(b)));
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(matches!(Mspt::<f32>::new(config(1, 10, 4, 2, 1), 0), Err(Error::Config(_))));
    assert!(matches!(Mspt::<f32>::new(config(0, 8, 4, 2, 1), 0), Err(Error::Config(_))));
    let mut lin = config(1, 8, 2, 2, 1);
    lin.pooling = PoolingMode::Linear;
    assert!(matches!(Mspt::<f32>::new(lin, 0), Err(Error::Config(_))));
}

#[test]
fn embed_matches_two_layer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = Mspt::<f64>::new(config(1, 8, 2, 2, 1), 1).unwrap();
    jitter(&mut model, 2);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let out = model.embed(&x).unwrap();
    let p = &model.params;
    let d = |n: &str| p.get(n).unwrap().data();
    let h = oracle::linear(x.data(), 5, 3, d("embed.w1"), 8, Some(d("embed.b1")));
    let h: Vec<f64> = h.into_iter().map(oracle::gelu).collect();
    let expect = oracle::linear(&h, 5, 8, d("embed.w2"), 8, Some(d("embed.b2")));
    let diff = out.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");

    let mut zero = model.clone();
    for name in ["embed.w1", "embed.w2"] {
        let i = zero.params.names().iter().position(|n| n == name).unwrap();
        zero.params.tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let out = zero.embed(&x).unwrap();
    for r in 0..5 {
        assert_eq!(out.row(r), d("embed.b2"));
    }

    let twin = Tensor::from_rows(&[&[0.3, -0.1, 0.7], &[0.3, -0.1, 0.7]]).unwrap();
    let out = model.embed(&twin).unwrap();
    assert_eq!(out.row(0), out.row(1));
}

#[test]
fn block_matches_composed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, f) = (16, 4);
    let mut model = Mspt::<f64>::new(config(1, f, 2, 2, 1), 6).unwrap();
    jitter(&mut model, 7);
    let layout = make_patches((0..n).collect(), n, 2).unwrap();
    let h = rand_tensor(&mut rng, &[n, f]);
    let out = model.block(0, &h, &layout).unwrap();

    let d = |s: &str| model.params.get(&format!("block0.{s}")).unwrap().data().to_vec();
    let ln1 = oracle::layer_norm(h.data(), f, &d("ln1.gain"), &d("ln1.bias"), 1e-5);
    let (wq, wk, wv, wo) = (d("attn.w_q"), d("attn.w_k"), d("attn.w_v"), d("attn.w_o"));
    let attn = oracle::Attn { wq: &wq, wk: &wk, wv: &wv, wo: &wo, f, heads: 2 };
    let patches: Vec<Vec<Option<usize>>> =
        (0..2).map(|k| (k * 8..(k + 1) * 8).map(Some).collect()).collect();
    let a = oracle::pmsa(&ln1, n, &patches, oracle::Pool::Mean, 1, None, &attn);
    let hh: Vec<f64> = h.data().iter().zip(&a).map(|(x, y)| x + y).collect();
    let ln2 = oracle::layer_norm(&hh, f, &d("ln2.gain"), &d("ln2.bias"), 1e-5);
    let mid = oracle::linear(&ln2, n, f, &d("ffn.w1"), 2 * f, Some(&d("ffn.b1")));
    let mid: Vec<f64> = mid.into_iter().map(oracle::gelu).collect();
    let ffn = oracle::linear(&mid, n, 2 * f, &d("ffn.w2"), f, Some(&d("ffn.b2")));
    let expect: Vec<f64> = hh.iter().zip(&ffn).map(|(x, y)| x + y).collect();
    let diff = out.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "{diff}");
}

#[test]
fn single_point_block_runs() {
    let model = Mspt::<f64>::new(config(1, 4, 2, 1, 1), 0).unwrap();
    let layout = make_patches(vec![0], 1, 1).unwrap();
    let out = model.block(0, &Tensor::from_rows(&[&[0.1, 0.2, -0.3, 0.4]]).unwrap(), &layout).unwrap();
    assert!(out.all_finite());
}

fn grid_input(rng: &mut ChaCha8Rng, side: usize) -> (Tensor<f64>, Vec<f64>) {
    let n = side * side;
    let mut coords = Vec::with_capacity(2 * n);
    let raw = Tensor::from_fn(&[n, 3], |i| {
        let (p, c) = (i / 3, i % 3);
        match c {
            0 => (p % side) as f64 / (side - 1) as f64,
            1 => (p / side) as f64 / (side - 1) as f64,
            _ => rng.gen_range(0.0..1.0),
        }
    });
    for p in 0..n {
        coords.extend_from_slice(&raw.row(p)[..2]);
    }
    (raw, coords)
}

#[test]
fn permutation_bookkeeping_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Mspt::<f64>::new(config(2, 8, 2, 4, 1), 9).unwrap();
    let (raw, coords) = grid_input(&mut rng, 6);
    let layout = model.layout(&coords, 2, false).unwrap();
    let out = model.forward(&raw, &layout).unwrap();

    let perm = layout.perm();
    let permuted = Tensor::from_fn(raw.shape(), |i| raw.get(perm[i / 3], i % 3));
    let grid = grid_passthrough_layout(36, 4).unwrap();
    let out_p = model.forward(&permuted, &grid).unwrap();
    for (slot, &orig) in perm.iter().enumerate() {
        assert_eq!(out.row(orig), out_p.row(slot));
    }
}

#[test]
fn grid_sample_runs_end_to_end_deterministically() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Mspt::<f32>::new(config(2, 16, 4, 4, 1), 11).unwrap();
    let (raw, coords) = grid_input(&mut rng, 8);
    let layout = model.layout(&coords, 2, true).unwrap();
    let raw32 = raw.cast::<f32>();
    let a = model.forward(&raw32, &layout).unwrap();
    let b = model.forward(&raw32, &layout).unwrap();
    assert_eq!(a.shape(), &[64, 1]);
    assert!(a.all_finite());
    assert!(a.bit_eq(&b));
}

#[test]
fn extra_padding_leaves_predictions_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = Mspt::<f64>::new(config(2, 8, 2, 4, 1), 13).unwrap();
    jitter(&mut model, 14);
    let (raw, _) = grid_input(&mut rng, 5);
    let n = 25;
    let tight = make_patches((0..n).collect(), n, 4).unwrap();
    assert_eq!((tight.l(), tight.padding()), (7, 3));
    let a = model.forward(&raw, &tight).unwrap();
    // Same patches plus one made entirely of padding.
    let mut wide = model.clone();
    wide.config.patches = 5;
    let loose = PatchLayout::with_patch_size((0..n).collect(), 5, 7).unwrap();
    let b = wide.forward(&raw, &loose).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn persistent_supernodes_change_deeper_blocks_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut cfg = config(2, 8, 2, 4, 1);
    let base = Mspt::<f64>::new(cfg.clone(), 16).unwrap();
    cfg.persistent_supernodes = true;
    let mut pers = base.clone();
    pers.config = cfg;
    let (raw, coords) = grid_input(&mut rng, 6);
    let layout = base.layout(&coords, 2, true).unwrap();
    let a = base.forward(&raw, &layout).unwrap();
    let b = pers.forward(&raw, &layout).unwrap();
    assert!(b.all_finite());
    assert!(a.max_abs_diff(&b) > 1e-9);
    let h = rand_tensor(&mut rng, &[36, 8]);
    assert!(base.block(0, &h, &layout).unwrap().bit_eq(&pers.block(0, &h, &layout).unwrap()));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = Mspt::<f32>::new(config(2, 8, 2, 2, 1), 17).unwrap();
    model.normalizer.in_mean = vec![0.1, 1.0 / 3.0, -2.5];
    model.normalizer.out_std = vec![std::f64::consts::PI];
    let meta = serde_json::json!({"epoch": 3});
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model, &meta).unwrap();
    let back = read_checkpoint::<f32>(&buf).unwrap();
    assert_eq!(back.meta, meta);
    assert_eq!(back.model.config, model.config);
    assert_eq!(back.model.normalizer, model.normalizer);
    assert_eq!(back.model.params.names(), model.params.names());
    for (a, b) in back.model.params.tensors().iter().zip(model.params.tensors()) {
        assert!(a.bit_eq(b));
    }
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back.model, &meta).unwrap();
    assert_eq!(again, buf);

    assert!(matches!(read_checkpoint::<f32>(&buf[..buf.len() - 3]), Err(Error::Corrupt(_))));
    assert!(matches!(read_checkpoint::<f32>(&buf[..20]), Err(Error::Corrupt(_))));
    assert!(matches!(read_checkpoint::<f32>(b"not a checkpoint at all"), Err(Error::Format(_))));
}
