//! Density clustering: core distances, mutual-reachability MST (dense Prim),
//! single-linkage hierarchy, condensed tree, excess-of-mass selection.

use rayon::prelude::*;

use super::{ClusterLabels, ClusterParams, NOISE};
use crate::tensor::FeatureMatrix;
use crate::{Error, Result};

/// Point set with cached squared norms, in f32 so a desk-scale grid fits in
/// cache. Squared distances use `max(0, ni + nj - 2 a.b)`; the fixed lane
/// order keeps results thread-independent.
pub(crate) struct Points {
    n: usize,
    cols: usize,
    data: Vec<f32>,
    norms: Vec<f32>,
}

impl Points {
    pub fn from_matrix(m: &FeatureMatrix) -> Self {
        let n = m.rows();
        let cols = m.cols();
        let data = m.data().to_vec();
        let norms = (0..n)
            .map(|i| dot32(&data[i * cols..(i + 1) * cols], &data[i * cols..(i + 1) * cols]))
            .collect();
        Self { n, cols, data, norms }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[cfg_attr(not(test), allow(dead_code))]
    #[inline]
    pub fn dist2(&self, i: usize, j: usize) -> f64 {
        let d = self.norms[i] + self.norms[j] - 2.0 * dot32(self.row(i), self.row(j));
        d.max(0.0) as f64
    }
}

#[inline]
fn dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Distance from each point to its k-th nearest *other* point.
pub fn core_distances(points: &FeatureMatrix, k: usize) -> Result<Vec<f64>> {
    let p = Points::from_matrix(points);
    if k == 0 {
        return Err(Error::Config("core distance k must be >= 1".into()));
    }
    if p.len() <= k {
        return Err(Error::InsufficientData(format!(
            "need more than k={k} points, got {}",
            p.len()
        )));
    }
    Ok(core_distances_inner(&p, k))
}

/// Fixed-width k-smallest window, ascending, padded with infinity; most
/// candidates fail the single "worse than the k-th" comparison.
#[inline]
fn ksmall_push(window: &mut [f32], d: f32) {
    let k = window.len();
    if d >= window[k - 1] {
        return;
    }
    let at = window.partition_point(|&v| v < d);
    window.copy_within(at..k - 1, at + 1);
    window[at] = d;
}

/// k-smallest distances per row, symmetric: each unordered pair is evaluated
/// once and contributes to both endpoints. Parallel tasks own private
/// tables; the k-smallest multiset per row is order-independent, so the
/// merged result does not depend on thread count.
pub(crate) fn core_distances_inner(p: &Points, k: usize) -> Vec<f64> {
    const BLOCK: usize = 256;
    let n = p.len();
    let nb = n.div_ceil(BLOCK);
    let pairs: Vec<(usize, usize)> = (0..nb)
        .flat_map(|a| (a..nb).map(move |b| (a, b)))
        .collect();
    let chunk = pairs
        .len()
        .div_ceil(4 * rayon::current_num_threads().max(1))
        .max(1);

    let tables: Vec<Vec<f32>> = pairs
        .par_chunks(chunk)
        .map(|chunk_pairs| {
            let mut table = vec![f32::INFINITY; n * k];
            for &(a, b) in chunk_pairs {
                let (a0, a1) = (a * BLOCK, ((a + 1) * BLOCK).min(n));
                let (b0, b1) = (b * BLOCK, ((b + 1) * BLOCK).min(n));
                for i in a0..a1 {
                    let row_i = p.row(i);
                    let norm_i = p.norms[i];
                    let j_start = if a == b { i + 1 } else { b0 };
                    for j in j_start..b1 {
                        let d = (norm_i + p.norms[j] - 2.0 * dot32(row_i, p.row(j))).max(0.0);
                        ksmall_push(&mut table[i * k..(i + 1) * k], d);
                        ksmall_push(&mut table[j * k..(j + 1) * k], d);
                    }
                }
            }
            table
        })
        .collect();

    let mut out = Vec::with_capacity(n);
    let mut merged = vec![f32::INFINITY; k];
    for i in 0..n {
        merged.fill(f32::INFINITY);
        for table in &tables {
            for &d in &table[i * k..(i + 1) * k] {
                if d.is_finite() {
                    ksmall_push(&mut merged, d);
                }
            }
        }
        out.push((merged[k - 1] as f64).sqrt());
    }
    out
}

/// One edge of the spanning tree; `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Exact minimum spanning tree under the mutual reachability distance
/// `max(core(a), core(b), d(a, b))`, grown densely from vertex 0. Ties take
/// the lowest candidate index, so the edge set is deterministic.
pub fn mst_mutual_reachability(points: &FeatureMatrix, core: &[f64]) -> Result<Vec<MstEdge>> {
    let p = Points::from_matrix(points);
    if core.len() != p.len() {
        return Err(Error::Dimension(format!(
            "{} core distances for {} points",
            core.len(),
            p.len()
        )));
    }
    Ok(mst_inner(&p, core))
}

struct RelaxCtx<'a> {
    p: &'a Points,
    row_u: &'a [f32],
    norm_u: f32,
    core_u: f64,
    u: u32,
}

/// Relaxes the candidates against the current tree vertex and returns the
/// lexicographic (weight, vertex, position) minimum. Tree growth is
/// inherently sequential; keeping the scan single-threaded also makes the
/// edge list trivially thread-count independent.
fn relax_scan(
    ctx: &RelaxCtx<'_>,
    best_dist: &mut [f64],
    best_parent: &mut [u32],
    active: &[u32],
    act_core: &[f64],
    base: usize,
) -> (f64, usize, usize) {
    let (p, row_u, norm_u, core_u, u) = (ctx.p, ctx.row_u, ctx.norm_u, ctx.core_u, ctx.u);
    let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
    for (pos, ((d, par), (&v, &core_v))) in best_dist
        .iter_mut()
        .zip(best_parent.iter_mut())
        .zip(active.iter().zip(act_core))
        .enumerate()
    {
        // mrd(u, v) >= max(core_u, core_v): when the candidate already sits
        // at that bound the distance cannot improve it.
        if *d > core_u && *d > core_v {
            let vi = v as usize;
            let d2 = (norm_u + p.norms[vi] - 2.0 * dot32(row_u, p.row(vi))).max(0.0) as f64;
            let w = core_u.max(core_v).max(d2.sqrt());
            if w < *d {
                *d = w;
                *par = u;
            }
        }
        if (*d, v as usize) < (best.0, best.1) {
            best = (*d, v as usize, base + pos);
        }
    }
    best
}

pub(crate) fn mst_inner(p: &Points, core: &[f64]) -> Vec<MstEdge> {
    let n = p.len();
    if n < 2 {
        return Vec::new();
    }
    // Candidate vertices and their best-known attachment, in parallel
    // arrays that shrink together as the tree grows. Growth is sequential;
    // results cannot depend on thread count.
    let mut active: Vec<u32> = (1..n as u32).collect();
    let mut act_core: Vec<f64> = active.iter().map(|&v| core[v as usize]).collect();
    let mut best_dist = vec![f64::INFINITY; n - 1];
    let mut best_parent = vec![0u32; n - 1];
    let mut edges = Vec::with_capacity(n - 1);
    let mut u = 0usize;

    for _ in 1..n {
        let ctx = RelaxCtx {
            p,
            row_u: p.row(u),
            norm_u: p.norms[u],
            core_u: core[u],
            u: u as u32,
        };
        let best = relax_scan(
            &ctx,
            &mut best_dist,
            &mut best_parent,
            &active,
            &act_core,
            0,
        );
        let (weight, vertex, pos) = best;
        let parent = best_parent[pos] as usize;
        let (a, b) = (parent.min(vertex), parent.max(vertex));
        edges.push(MstEdge { a, b, weight });
        active.swap_remove(pos);
        act_core.swap_remove(pos);
        best_dist.swap_remove(pos);
        best_parent.swap_remove(pos);
        u = vertex;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
    /// Dendrogram node id currently representing each set.
    node: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            node: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, node: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (big, small) = if self.size[ra] >= self.size[rb] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.node[big] = node;
        self.size[big]
    }
}

/// One merge of the single-linkage dendrogram. Leaves are ids `0..n`;
/// merge `i` creates node `n + i`.
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

fn single_linkage(n: usize, edges: &[MstEdge]) -> Vec<Merge> {
    let mut sorted: Vec<&MstEdge> = edges.iter().collect();
    sorted.sort_by(|x, y| {
        (x.weight, x.a, x.b)
            .partial_cmp(&(y.weight, y.a, y.b))
            .expect("finite weights")
    });
    let mut uf = UnionFind::new(n);
    let mut merges = Vec::with_capacity(n - 1);
    for (i, e) in sorted.iter().enumerate() {
        let ra = uf.find(e.a);
        let rb = uf.find(e.b);
        let (left, right) = (uf.node[ra], uf.node[rb]);
        let size = uf.union(e.a, e.b, n + i);
        merges.push(Merge {
            left,
            right,
            distance: e.weight,
            size,
        });
    }
    merges
}

/// Row of the condensed tree: `child` (a point id < n, or a cluster id >= n)
/// detaches from cluster `parent` at density `lambda` with `size` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondensedNode {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

fn lambda_of(distance: f64) -> f64 {
    if distance > 0.0 {
        1.0 / distance
    } else {
        f64::INFINITY
    }
}

/// Prunes the dendrogram: splits survive only when both sides hold at least
/// `min_cluster_size` points, otherwise points fall out of their cluster at
/// the split density. Cluster ids start at `n` (the root).
fn condense_impl(n: usize, merges: &[Merge], min_cluster_size: usize) -> Vec<CondensedNode> {
    let root = n + merges.len() - 1;
    let mut rows = Vec::with_capacity(2 * n);
    // relabel[dendrogram node] -> condensed cluster id.
    let mut relabel = vec![usize::MAX; root + 1];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut ignore = vec![false; root + 1];

    let node_size = |id: usize| -> usize {
        if id < n {
            1
        } else {
            merges[id - n].size
        }
    };

    // Iterative BFS from the root over internal nodes.
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n || ignore[node] {
            continue;
        }
        let merge = &merges[node - n];
        let lambda = lambda_of(merge.distance);
        let (left, right) = (merge.left, merge.right);
        let (ls, rs) = (node_size(left), node_size(right));
        let parent_label = relabel[node];

        let big_l = ls >= min_cluster_size;
        let big_r = rs >= min_cluster_size;
        match (big_l, big_r) {
            (true, true) => {
                for (child, size) in [(left, ls), (right, rs)] {
                    relabel[child] = next_label;
                    next_label += 1;
                    rows.push(CondensedNode {
                        parent: parent_label,
                        child: relabel[child],
                        lambda,
                        size,
                    });
                    queue.push_back(child);
                }
            }
            (false, false) => {
                for child in [left, right] {
                    shed_leaves(n, merges, child, parent_label, lambda, &mut rows, &mut ignore);
                }
            }
            (false, true) => {
                relabel[right] = parent_label;
                queue.push_back(right);
                shed_leaves(n, merges, left, parent_label, lambda, &mut rows, &mut ignore);
            }
            (true, false) => {
                relabel[left] = parent_label;
                queue.push_back(left);
                shed_leaves(n, merges, right, parent_label, lambda, &mut rows, &mut ignore);
            }
        }
    }
    rows
}

/// Records every leaf under `sub` as falling out of `parent_label` at
/// `lambda`, and marks the subtree as handled.
fn shed_leaves(
    n: usize,
    merges: &[Merge],
    sub: usize,
    parent_label: usize,
    lambda: f64,
    rows: &mut Vec<CondensedNode>,
    ignore: &mut [bool],
) {
    let mut stack = vec![sub];
    while let Some(id) = stack.pop() {
        if id < n {
            rows.push(CondensedNode {
                parent: parent_label,
                child: id,
                lambda,
                size: 1,
            });
        } else {
            ignore[id] = true;
            let m = &merges[id - n];
            stack.push(m.left);
            stack.push(m.right);
        }
    }
}

/// Excess-of-mass cluster selection over the condensed tree. Returns the
/// selected cluster ids in ascending order; the root is never selected.
pub(crate) fn select_eom(n: usize, rows: &[CondensedNode]) -> Vec<usize> {
    if rows.is_empty() {
        return Vec::new();
    }
    let max_cluster = rows
        .iter()
        .map(|r| r.parent.max(if r.child >= n { r.child } else { 0 }))
        .max()
        .unwrap_or(n);
    let idx = |cluster: usize| cluster - n;

    // Birth lambdas: the lambda at which a cluster id appears as a child.
    let mut birth = vec![0.0f64; max_cluster - n + 1];
    for r in rows {
        if r.child >= n {
            birth[idx(r.child)] = r.lambda;
        }
    }
    // Stability: sum over members of (their exit lambda - birth), sizes as
    // weights. Infinite-birth clusters live over an empty density range.
    let mut stability = vec![0.0f64; max_cluster - n + 1];
    for r in rows {
        let b = birth[idx(r.parent)];
        let term = if r.lambda.is_infinite() && b.is_infinite() {
            0.0
        } else {
            (r.lambda - b) * r.size as f64
        };
        stability[idx(r.parent)] += term;
    }

    // Child clusters per cluster.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); max_cluster - n + 1];
    for r in rows {
        if r.child >= n {
            children[idx(r.parent)].push(r.child);
        }
    }

    // Bottom-up sweep, skipping the root (id n): a cluster survives when its
    // own stability is at least the total of its selected subtree.
    let mut selected = vec![false; max_cluster - n + 1];
    for cluster in (n + 1..=max_cluster).rev() {
        let child_total: f64 = children[idx(cluster)]
            .iter()
            .map(|&c| stability[idx(c)])
            .sum();
        if child_total > stability[idx(cluster)] {
            stability[idx(cluster)] = child_total;
        } else {
            selected[idx(cluster)] = true;
            // Deselect every descendant cluster.
            let mut stack = children[idx(cluster)].clone();
            while let Some(c) = stack.pop() {
                selected[idx(c)] = false;
                stack.extend(children[idx(c)].iter().copied());
            }
        }
    }
    (n + 1..=max_cluster).filter(|&c| selected[idx(c)]).collect()
}

fn label_points(n: usize, rows: &[CondensedNode], selected: &[usize]) -> ClusterLabels {
    let mut label_of_cluster = std::collections::HashMap::new();
    for (i, &c) in selected.iter().enumerate() {
        label_of_cluster.insert(c, i as i32);
    }
    // Parent chains over clusters.
    let mut cluster_parent = std::collections::HashMap::new();
    let mut point_parent = vec![usize::MAX; n];
    for r in rows {
        if r.child >= n {
            cluster_parent.insert(r.child, r.parent);
        } else {
            point_parent[r.child] = r.parent;
        }
    }
    let mut labels = vec![NOISE; n];
    for point in 0..n {
        let mut cluster = point_parent[point];
        loop {
            if cluster == usize::MAX {
                break;
            }
            if let Some(&l) = label_of_cluster.get(&cluster) {
                labels[point] = l;
                break;
            }
            match cluster_parent.get(&cluster) {
                Some(&up) => cluster = up,
                None => break,
            }
        }
    }
    ClusterLabels::new(labels, selected.len())
}

/// Full pipeline: mutual-reachability MST → single linkage → condensed tree
/// → excess-of-mass selection → labels with noise.
pub fn hdbscan(points: &FeatureMatrix, params: &ClusterParams) -> Result<ClusterLabels> {
    params.validate()?;
    let p = Points::from_matrix(points);
    let n = p.len();
    let need = params.min_cluster_size.max(params.min_samples + 1);
    if n < need {
        return Err(Error::InsufficientData(format!(
            "hdbscan needs at least {need} points, got {n}"
        )));
    }
    let core = core_distances_inner(&p, params.min_samples);
    let edges = mst_inner(&p, &core);
    let merges = single_linkage(n, &edges);
    let rows = condense_impl(n, &merges, params.min_cluster_size);
    let selected = select_eom(n, &rows);
    Ok(label_points(n, &rows, &selected))
}
