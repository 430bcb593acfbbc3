use crate::error::{Error, Result};
use crate::tensor::Real;

/// Directed K-nearest-neighbor graph over the nodes of one sample. Edges
/// run from each listed neighbor to its center node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MelGraph {
    n: usize,
    k: usize,
    neighbors: Vec<usize>,
}

impl MelGraph {
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Neighbors of `center`, nearest first.
    pub fn neighbors_of(&self, center: usize) -> &[usize] {
        &self.neighbors[center * self.k..(center + 1) * self.k]
    }

    /// Flat `[N][K]` neighbor table.
    pub fn table(&self) -> &[usize] {
        &self.neighbors
    }

    /// `(center, neighbor)` pairs in center order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.neighbors_of(i).iter().map(move |&j| (i, j)))
    }

    /// Checks the structural invariants: exactly K distinct in-range
    /// neighbors per node and no self-loops.
    pub fn validate(&self) -> Result<()> {
        if self.neighbors.len() != self.n * self.k {
            return Err(Error::shape("neighbor table size"));
        }
        for i in 0..self.n {
            let row = self.neighbors_of(i);
            for (a, &j) in row.iter().enumerate() {
                if j >= self.n || j == i || row[..a].contains(&j) {
                    return Err(Error::invalid(format!("bad neighbor {j} for node {i}")));
                }
            }
        }
        Ok(())
    }
}

/// Builds the K-NN graph of the rows of `x` (`n` rows of width `d`) under the
/// Euclidean distance. Equal distances go to the smaller index.
pub fn knn_graph<T: Real>(x: &[T], n: usize, d: usize, k: usize) -> Result<MelGraph> {
    if x.len() != n * d {
        return Err(Error::shape(format!("{} values for {n} nodes of width {d}", x.len())));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("K = {k} outside [1, {})", n.saturating_sub(1))));
    }
    let xf: Vec<f64> = x.iter().map(|v| v.f64()).collect();
    // squared distances, upper triangle computed once and mirrored
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        let xi = &xf[i * d..(i + 1) * d];
        for j in i + 1..n {
            let xj = &xf[j * d..(j + 1) * d];
            let acc = sq_dist(xi, xj);
            dist[i * n + j] = acc;
            dist[j * n + i] = acc;
        }
    }
    let mut neighbors = vec![0usize; n * k];
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, out) in neighbors.chunks_mut(k).enumerate() {
        cand.clear();
        let row = &dist[i * n..(i + 1) * n];
        cand.extend(row.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &v)| (v, j)));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        cand[..k].sort_unstable_by(cmp);
        for (o, c) in out.iter_mut().zip(&cand) {
            *o = c.1;
        }
    }
    Ok(MelGraph { n, k, neighbors })
}

/// Squared Euclidean distance with four independent partial sums.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            let t = x[l] - y[l];
            acc[l] += t * t;
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
