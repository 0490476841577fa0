use mspt::balltree::{build_tree, leaf_order, make_patches, partition, BallTree};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(seed: u64, n: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn depth_bound(n: usize, cap: usize) -> usize {
    let leaves = n.div_ceil(cap);
    (usize::BITS - (leaves - 1).leading_zeros()) as usize + 1
}

fn check_tree(tree: &BallTree, coords: &[f64], n: usize) {
    let dim = tree.dim();
    for node in tree.nodes() {
        for &i in tree.members(node) {
            let d: f64 = coords[i * dim..(i + 1) * dim]
                .iter()
                .zip(&node.center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(d <= node.radius * (1.0 + 1e-12) + 1e-12);
        }
        if let Some((l, r)) = node.children {
            let (l, r) = (&tree.nodes()[l], &tree.nodes()[r]);
            assert!(l.len().abs_diff(r.len()) <= 1);
            assert_eq!((l.start, l.end, r.end), (node.start, r.start, node.end));
        } else {
            let scale = 1usize << (node.depth - 1);
            assert!(node.len() == n / scale || node.len() == n.div_ceil(scale));
        }
    }
    assert!(tree.depth() <= depth_bound(n, tree.leaf_capacity()));
    let mut sorted = leaf_order(tree);
    sorted.sort_unstable();
    assert!(sorted.iter().copied().eq(0..n));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn structural_invariants(seed in any::<u64>(), n in 1usize..3000, dim in 2usize..=3, cap in 1usize..200) {
        let coords = cloud(seed, n, dim);
        let tree = build_tree(&coords, dim, cap).unwrap();
        check_tree(&tree, &coords, n);
    }

    #[test]
    fn construction_is_deterministic(seed in any::<u64>(), n in 1usize..500) {
        let coords = cloud(seed, n, 2);
        let a = leaf_order(&build_tree(&coords, 2, 7).unwrap());
        let b = leaf_order(&build_tree(&coords, 2, 7).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn padding_stays_below_one_patch(n in 1usize..2000, k in 1usize..64) {
        match make_patches((0..n).collect(), n, k) {
            Ok(layout) => {
                prop_assert_eq!(layout.l(), n.div_ceil(k));
                prop_assert!(layout.padding() < layout.l());
                prop_assert_eq!(layout.valid().iter().filter(|&&v| !v).count(), layout.padding());
                for (s, &v) in layout.valid().iter().enumerate() {
                    prop_assert_eq!(v, s < n);
                }
            }
            Err(_) => prop_assert!(k > n || k * n.div_ceil(k) - n >= n.div_ceil(k)),
        }
    }
}

#[test]
fn large_cloud_invariants() {
    let n = 10_000;
    let coords = cloud(99, n, 3);
    let tree = build_tree(&coords, 3, 37).unwrap();
    check_tree(&tree, &coords, n);
}

#[test]
fn duplicate_points_are_handled() {
    let coords = vec![0.5; 2 * 33];
    let tree = build_tree(&coords, 2, 4).unwrap();
    check_tree(&tree, &coords, 33);
}

fn mean_distances(coords: &[f64], layout: &mspt::balltree::PatchLayout) -> (f64, f64) {
    let perm = layout.perm();
    let n = perm.len();
    let patch = |slot: usize| slot / layout.l();
    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..n {
        for b in a + 1..n {
            let (i, j) = (perm[a], perm[b]);
            let d = ((coords[2 * i] - coords[2 * j]).powi(2)
                + (coords[2 * i + 1] - coords[2 * j + 1]).powi(2))
            .sqrt();
            if patch(a) == patch(b) {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                ne += 1;
            }
        }
    }
    (intra / ni as f64, inter / ne as f64)
}

#[test]
fn patches_are_spatially_local() {
    let seeds = 40;
    let local = (0..seeds)
        .filter(|&s| {
            let coords = cloud(1000 + s, 512, 2);
            let layout = partition(&coords, 2, 8, None).unwrap();
            let (intra, inter) = mean_distances(&coords, &layout);
            intra < inter
        })
        .count();
    assert!(local as f64 >= 0.95 * seeds as f64, "{local}/{seeds}");
}
