//! Balanced binary ball tree over point coordinates, its depth-first leaf
//! order, and the contiguous padded patch layout cut from that order.
//!
//! Each internal node splits its points along the axis through a pair of
//! distant points found by a double farthest-point sweep: start at the
//! lowest-index member `s`, take the member `p` farthest from `s`, then the
//! member `q` farthest from `p`. Members are ordered by their projection onto
//! `p − q` (measured from `q`), ties going to the lower original index, and
//! the first `⌈n/2⌉` go left. Leaf members are stored in ascending original
//! index, so the whole construction is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BallNode {
    /// Mean of the member coordinates.
    pub center: Vec<f64>,
    /// Largest member distance to `center`.
    pub radius: f64,
    /// Member range `[start, end)` in the tree's leaf order.
    pub start: usize,
    pub end: usize,
    /// Arena indices of the two children, `None` for leaves.
    pub children: Option<(usize, usize)>,
    /// Root has depth 1.
    pub depth: usize,
}

impl BallNode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct BallTree {
    nodes: Vec<BallNode>,
    perm: Vec<usize>,
    dim: usize,
    leaf_capacity: usize,
}

impl BallTree {
    pub fn root(&self) -> &BallNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[BallNode] {
        &self.nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaf_capacity(&self) -> usize {
        self.leaf_capacity
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Original point indices owned by `node`.
    pub fn members(&self, node: &BallNode) -> &[usize] {
        &self.perm[node.start..node.end]
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Builder<'a> {
    coords: &'a [f64],
    dim: usize,
    cap: usize,
    perm: Vec<usize>,
    nodes: Vec<BallNode>,
    keyed: Vec<(f64, usize)>,
}

impl Builder<'_> {
    fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Member of `perm[start..end]` farthest from `from`; lowest index wins ties.
    fn farthest(&self, start: usize, end: usize, from: &[f64]) -> usize {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &i in &self.perm[start..end] {
            let d = dist2(self.point(i), from);
            if d > best.0 || (d == best.0 && i < best.1) {
                best = (d, i);
            }
        }
        best.1
    }

    fn build(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let n = end - start;
        let mut center = vec![0.0; self.dim];
        for &i in &self.perm[start..end] {
            for (c, &x) in center.iter_mut().zip(self.point(i)) {
                *c += x;
            }
        }
        center.iter_mut().for_each(|c| *c /= n as f64);
        let radius = self.perm[start..end]
            .iter()
            .map(|&i| dist2(self.point(i), &center).sqrt())
            .fold(0.0, f64::max);

        let id = self.nodes.len();
        self.nodes.push(BallNode {
            center,
            radius,
            start,
            end,
            children: None,
            depth,
        });
        if n <= self.cap {
            self.perm[start..end].sort_unstable();
            return id;
        }

        let s = *self.perm[start..end].iter().min().expect("non-empty node");
        let p = self.farthest(start, end, self.point(s));
        let q = self.farthest(start, end, self.point(p));
        let (pp, qq) = (self.point(p).to_vec(), self.point(q).to_vec());
        let axis: Vec<f64> = pp.iter().zip(&qq).map(|(a, b)| a - b).collect();

        let mut keyed = std::mem::take(&mut self.keyed);
        keyed.clear();
        for &i in &self.perm[start..end] {
            let x = self.point(i);
            let proj: f64 = x
                .iter()
                .zip(&qq)
                .zip(&axis)
                .map(|((xi, qi), ai)| (xi - qi) * ai)
                .sum();
            keyed.push((proj, i));
        }
        let left = n.div_ceil(2);
        keyed.select_nth_unstable_by(left - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, &(_, i)) in self.perm[start..end].iter_mut().zip(&keyed) {
            *slot = i;
        }
        self.keyed = keyed;

        let l = self.build(start, start + left, depth + 1);
        let r = self.build(start + left, end, depth + 1);
        self.nodes[id].children = Some((l, r));
        id
    }
}

/// Builds the ball tree over `coords`, a row-major `N×dim` array.
pub fn build_tree(coords: &[f64], dim: usize, leaf_capacity: usize) -> Result<BallTree> {
    if dim == 0 || coords.is_empty() || !coords.len().is_multiple_of(dim) {
        return Err(Error::Input(format!(
            "coordinates must be a non-empty N×D array (got {} values, D = {dim})",
            coords.len()
        )));
    }
    if leaf_capacity == 0 {
        return Err(Error::config("leaf capacity must be positive"));
    }
    if let Some(pos) = coords.iter().position(|x| !x.is_finite()) {
        return Err(Error::Input(format!(
            "non-finite coordinate at point {}",
            pos / dim
        )));
    }
    let n = coords.len() / dim;
    let mut b = Builder {
        coords,
        dim,
        cap: leaf_capacity,
        perm: (0..n).collect(),
        nodes: Vec::with_capacity(2 * n.div_ceil(leaf_capacity)),
        keyed: Vec::with_capacity(n),
    };
    b.build(0, n, 1);
    Ok(BallTree {
        nodes: b.nodes,
        perm: b.perm,
        dim,
        leaf_capacity,
    })
}

/// Depth-first (left first) concatenation of leaf members.
pub fn leaf_order(tree: &BallTree) -> Vec<usize> {
    tree.perm.clone()
}

/// `K` contiguous patches of `L` slots over a permuted point sequence.
/// Slots past `N` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    perm: Vec<usize>,
    inverse: Vec<usize>,
    k: usize,
    l: usize,
    valid: Vec<bool>,
}

fn check_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    let n = perm.len();
    let mut inverse = vec![usize::MAX; n];
    for (slot, &i) in perm.iter().enumerate() {
        if i >= n || inverse[i] != usize::MAX {
            return Err(Error::Input(format!("not a permutation of 0..{n}")));
        }
        inverse[i] = slot;
    }
    Ok(inverse)
}

impl PatchLayout {
    /// General layout of `k` patches of `l` slots. Unlike [`make_patches`]
    /// this allows trailing patches made entirely of padding.
    pub fn with_patch_size(perm: Vec<usize>, k: usize, l: usize) -> Result<Self> {
        let n = perm.len();
        if n == 0 || k == 0 || l == 0 {
            return Err(Error::config("layout needs N, K, L ≥ 1"));
        }
        if k * l < n {
            return Err(Error::config(format!(
                "{k} patches of {l} slots cannot hold {n} points"
            )));
        }
        let inverse = check_permutation(&perm)?;
        let valid = (0..k * l).map(|s| s < n).collect();
        Ok(Self {
            perm,
            inverse,
            k,
            l,
            valid,
        })
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn n_padded(&self) -> usize {
        self.k * self.l
    }

    pub fn padding(&self) -> usize {
        self.n_padded() - self.n()
    }

    /// Slot → original point index.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Original point index → slot.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn patch_range(&self, k: usize) -> std::ops::Range<usize> {
        k * self.l..(k + 1) * self.l
    }

    /// Row index for gathering per-point data into padded slot order.
    pub fn gather_index(&self) -> Vec<Option<usize>> {
        (0..self.n_padded())
            .map(|s| self.perm.get(s).copied())
            .collect()
    }

    /// Row index for scattering slot-ordered data back to original order,
    /// dropping padding.
    pub fn scatter_index(&self) -> Vec<Option<usize>> {
        self.inverse.iter().map(|&s| Some(s)).collect()
    }

    pub fn to_doc(&self) -> PartitionDoc {
        PartitionDoc {
            n: self.n(),
            k: self.k,
            l: self.l,
            perm: self.perm.clone(),
            valid: self.valid.clone(),
        }
    }
}

/// JSON document emitted by `mspt partition`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionDoc {
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub perm: Vec<usize>,
    pub valid: Vec<bool>,
}

/// Cuts `perm` into `k` patches of `L = ⌈N/K⌉` slots, padding the tail of
/// the last patch. Rejects `k` values that would leave a patch with no
/// real point (always the case for `K > N`).
pub fn make_patches(perm: Vec<usize>, n: usize, k: usize) -> Result<PatchLayout> {
    if perm.len() != n {
        return Err(Error::Input(format!(
            "permutation has {} entries, expected {n}",
            perm.len()
        )));
    }
    if k == 0 || n == 0 {
        return Err(Error::config("need at least one point and one patch"));
    }
    if k > n {
        return Err(Error::config(format!(
            "K = {k} exceeds N = {n}: patches would be empty"
        )));
    }
    let l = n.div_ceil(k);
    if k * l - n >= l {
        return Err(Error::config(format!(
            "K = {k} with N = {n} gives L = {l} and {} padded slots: the last patch would be empty",
            k * l - n
        )));
    }
    PatchLayout::with_patch_size(perm, k, l)
}

/// Identity ordering for inputs that already come in a natural order.
pub fn grid_passthrough_layout(n: usize, k: usize) -> Result<PatchLayout> {
    make_patches((0..n).collect(), n, k)
}

/// Ball-tree partition of one sample. `leaf_capacity` defaults to `L`.
pub fn partition(
    coords: &[f64],
    dim: usize,
    k: usize,
    leaf_capacity: Option<usize>,
) -> Result<PatchLayout> {
    let n = coords.len() / dim.max(1);
    if k == 0 || k > n {
        return Err(Error::config(format!("K = {k} is invalid for N = {n}")));
    }
    let cap = leaf_capacity.unwrap_or_else(|| n.div_ceil(k));
    let tree = build_tree(coords, dim, cap)?;
    make_patches(leaf_order(&tree), n, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_tree() {
        let t = build_tree(&[0.5, -1.0], 2, 4).unwrap();
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.root().radius, 0.0);
        assert_eq!(t.root().center, vec![0.5, -1.0]);
    }

    #[test]
    fn collinear_split() {
        let t = build_tree(&[0.0, 1.0, 2.0, 3.0], 1, 1).unwrap();
        let (l, r) = t.root().children.unwrap();
        let mut left = t.members(&t.nodes()[l]).to_vec();
        left.sort();
        let mut right = t.members(&t.nodes()[r]).to_vec();
        right.sort();
        assert_eq!(left, vec![0, 1]);
        assert_eq!(right, vec![2, 3]);
        assert_eq!(leaf_order(&t), vec![0, 1, 2, 3]);
    }

    #[test]
    fn one_leaf_is_identity() {
        let t = build_tree(&[3.0, 1.0, 2.0], 1, 8).unwrap();
        assert_eq!(leaf_order(&t), vec![0, 1, 2]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            build_tree(&[0.0, f64::NAN], 1, 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn patch_arithmetic() {
        let l = make_patches((0..8).collect(), 8, 2).unwrap();
        assert_eq!((l.l(), l.padding()), (4, 0));
        let l = make_patches((0..5).collect(), 5, 2).unwrap();
        assert_eq!((l.l(), l.n_padded(), l.padding()), (3, 6, 1));
        assert_eq!(l.valid(), &[true, true, true, true, true, false]);
        let l = make_patches((0..972).collect(), 972, 32).unwrap();
        assert_eq!((l.l(), l.padding()), (31, 20));
        assert!(matches!(
            make_patches((0..3).collect(), 3, 4),
            Err(Error::Config(_))
        ));
        // N = 5, K = 4 → L = 2 and 3 padded slots: the 4th patch is empty.
        assert!(make_patches((0..5).collect(), 5, 4).is_err());
    }

    #[test]
    fn grid_passthrough() {
        let l = grid_passthrough_layout(4096, 32).unwrap();
        assert_eq!(l.l(), 128);
        assert!(l.perm().iter().enumerate().all(|(i, &p)| i == p));
        let l = grid_passthrough_layout(9, 3).unwrap();
        assert_eq!(l.patch_range(1), 3..6);
        assert_eq!(&l.perm()[l.patch_range(2)], &[6, 7, 8]);
        let l = grid_passthrough_layout(10, 3).unwrap();
        assert_eq!((l.l(), l.padding()), (4, 2));
    }

    #[test]
    fn index_maps_roundtrip() {
        let l = make_patches(vec![2, 0, 4, 1, 3], 5, 2).unwrap();
        let g = l.gather_index();
        assert_eq!(g, vec![Some(2), Some(0), Some(4), Some(1), Some(3), None]);
        let s = l.scatter_index();
        for (i, slot) in s.iter().enumerate() {
            assert_eq!(g[slot.unwrap()], Some(i));
        }
    }
}
