//! k-NN similarity graphs, Laplacians and hypergraph Laplacians.
//!
//! Every [`GraphOperator`] is rescaled to unit spectral norm on construction
//! so the propagation term of an unrolled layer never amplifies.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{self, Mat};

/// Default neighborhood size for k-NN graphs.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    None,
    Laplacian,
    HypergraphLaplacian,
}

impl GraphKind {
    pub fn name(self) -> &'static str {
        match self {
            GraphKind::None => "none",
            GraphKind::Laplacian => "laplacian",
            GraphKind::HypergraphLaplacian => "hypergraph",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "none" => Some(GraphKind::None),
            "laplacian" | "knn" => Some(GraphKind::Laplacian),
            "hypergraph" => Some(GraphKind::HypergraphLaplacian),
            _ => None,
        }
    }
}

/// A normalized N×N propagation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphOperator {
    matrix: Mat,
    kind: GraphKind,
    spectral_norm: f64,
    unscaled_norm: f64,
    k_neighbors: usize,
}

impl GraphOperator {
    /// The scaled operator `G(L)`.
    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    /// Spectral norm of the stored (scaled) matrix: 1, or 0 for an empty graph.
    pub fn spectral_norm(&self) -> f64 {
        self.spectral_norm
    }

    /// Spectral norm before rescaling; the stored matrix is the raw one
    /// divided by this value.
    pub fn unscaled_norm(&self) -> f64 {
        self.unscaled_norm
    }

    pub fn k_neighbors(&self) -> usize {
        self.k_neighbors
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    /// The all-zero operator, for models that carry no graph term.
    pub fn empty(n: usize) -> Self {
        GraphOperator {
            matrix: Mat::zeros(n, n),
            kind: GraphKind::None,
            spectral_norm: 0.0,
            unscaled_norm: 0.0,
            k_neighbors: 0,
        }
    }

    fn scaled(raw: Mat, kind: GraphKind, k_neighbors: usize) -> Result<Self> {
        let norm = numerics::symmetric_spectral_norm(&raw)?;
        if norm == 0.0 {
            return Ok(GraphOperator {
                matrix: raw,
                kind,
                spectral_norm: 0.0,
                unscaled_norm: 0.0,
                k_neighbors,
            });
        }
        let matrix = raw.scale(1.0 / norm);
        let spectral_norm = numerics::symmetric_spectral_norm(&matrix)?;
        Ok(GraphOperator {
            matrix,
            kind,
            spectral_norm,
            unscaled_norm: norm,
            k_neighbors,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest other rows of `x` for every row.
/// Distance ties go to the lower index.
pub fn knn_indices(x: &Mat, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = x.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(alloc::format!(
            "k-NN needs 1 <= k < N, got k={k} with N={n}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(x.row(i), x.row(j)), j)),
        );
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(cand.iter().take(k).map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Binary symmetric k-NN adjacency: `S[i][j] = 1` iff j is among i's k
/// nearest neighbors or i among j's. Zero diagonal.
pub fn knn_similarity(x: &Mat, k: usize) -> Result<Mat> {
    let n = x.rows();
    let nbrs = knn_indices(x, k)?;
    let mut s = Mat::zeros(n, n);
    for (i, row) in nbrs.iter().enumerate() {
        for &j in row {
            s[(i, j)] = 1.0;
            s[(j, i)] = 1.0;
        }
    }
    Ok(s)
}

/// Adjacency from an undirected edge list. Self-loops are dropped.
pub fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Mat> {
    let mut s = Mat::zeros(n, n);
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::invalid(alloc::format!(
                "edge ({i}, {j}) references a node outside 0..{n}"
            )));
        }
        if i != j {
            s[(i, j)] = 1.0;
            s[(j, i)] = 1.0;
        }
    }
    Ok(s)
}

/// `L = E − S` with `E` the degree matrix, without rescaling.
pub fn raw_laplacian(s: &Mat) -> Result<Mat> {
    check_similarity(s)?;
    let n = s.rows();
    let mut l = s.scale(-1.0);
    for i in 0..n {
        l[(i, i)] = s.row(i).iter().sum::<f64>();
    }
    Ok(l)
}

fn check_similarity(s: &Mat) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(Error::ShapeMismatch {
            op: "laplacian",
            left: s.shape(),
            right: (s.cols(), s.rows()),
        });
    }
    if !s.is_symmetric(1e-12) {
        return Err(Error::invalid("similarity matrix is not symmetric"));
    }
    for i in 0..s.rows() {
        if s[(i, i)] != 0.0 {
            return Err(Error::invalid(alloc::format!(
                "similarity matrix has nonzero diagonal at {i}"
            )));
        }
        if s.row(i).iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(alloc::format!(
                "similarity matrix has a negative weight in row {i}"
            )));
        }
    }
    Ok(())
}

/// Graph Laplacian scaled to unit spectral norm.
pub fn laplacian(s: &Mat) -> Result<GraphOperator> {
    laplacian_with_k(s, 0)
}

pub(crate) fn laplacian_with_k(s: &Mat, k: usize) -> Result<GraphOperator> {
    let l = raw_laplacian(s)?;
    GraphOperator::scaled(l, GraphKind::Laplacian, k)
}

/// k-NN graph Laplacian of the rows of `x`.
pub fn knn_laplacian(x: &Mat, k: usize) -> Result<GraphOperator> {
    let s = knn_similarity(x, k)?;
    laplacian_with_k(&s, k)
}

/// Normalized hypergraph Laplacian `I − Dv^{-1/2} H De^{-1} Hᵀ Dv^{-1/2}`
/// with one unit-weight hyperedge per vertex holding the vertex and its k
/// nearest neighbors, then scaled to unit spectral norm.
pub fn hypergraph_laplacian(x: &Mat, k: usize) -> Result<GraphOperator> {
    let n = x.rows();
    let nbrs = knn_indices(x, k)?;
    // incidence: edge e contains vertex e and its neighbors
    let edges: Vec<Vec<usize>> = nbrs
        .into_iter()
        .enumerate()
        .map(|(e, mut members)| {
            members.push(e);
            members.sort_unstable();
            members
        })
        .collect();
    let mut vertex_degree = vec![0.0; n];
    for members in &edges {
        for &v in members {
            vertex_degree[v] += 1.0;
        }
    }
    let inv_sqrt: Vec<f64> = vertex_degree.iter().map(|&d| 1.0 / libm::sqrt(d)).collect();
    let mut theta = Mat::zeros(n, n);
    for members in &edges {
        let w = 1.0 / members.len() as f64;
        for &u in members {
            for &v in members {
                theta[(u, v)] += w * inv_sqrt[u] * inv_sqrt[v];
            }
        }
    }
    let mut l = theta.scale(-1.0);
    for i in 0..n {
        l[(i, i)] += 1.0;
    }
    // enforce exact symmetry against summation-order noise
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (l[(i, j)] + l[(j, i)]);
            l[(i, j)] = avg;
            l[(j, i)] = avg;
        }
    }
    GraphOperator::scaled(l, GraphKind::HypergraphLaplacian, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn brute_knn_edges(points: &[f64], k: usize) -> Vec<(usize, usize)> {
        let n = points.len();
        let mut edges = Vec::new();
        for i in 0..n {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((points[i] - points[j]).abs(), j))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &(_, j) in d.iter().take(k) {
                edges.push((i.min(j), i.max(j)));
            }
        }
        edges.sort();
        edges.dedup();
        edges
    }

    #[test]
    fn knn_colinear_points() {
        let pts = [0.0, 1.0, 3.0];
        let x = Mat::from_rows(&pts.map(|p| [p])).unwrap();
        let s = knn_similarity(&x, 1).unwrap();
        let mut edges = Vec::new();
        for i in 0..3 {
            for j in (i + 1)..3 {
                if s[(i, j)] == 1.0 {
                    edges.push((i, j));
                }
            }
        }
        assert_eq!(edges, brute_knn_edges(&pts, 1));
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn knn_full_neighborhood_is_complete() {
        let mut rng = Rng::new(1);
        let x = Mat::randn(6, 2, &mut rng);
        let s = knn_similarity(&x, 5).unwrap();
        let want = Mat::from_fn(6, 6, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(s, want);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let x = Mat::zeros(4, 2);
        assert!(knn_similarity(&x, 4).is_err());
        assert!(knn_similarity(&x, 0).is_err());
    }

    #[test]
    fn knn_ties_break_by_index() {
        let x = Mat::zeros(4, 2);
        let nbrs = knn_indices(&x, 2).unwrap();
        assert_eq!(nbrs, vec![vec![1, 2], vec![0, 2], vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn path_laplacian() {
        let s = Mat::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
        let l = raw_laplacian(&s).unwrap();
        let want =
            Mat::from_rows(&[[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]]).unwrap();
        assert_eq!(l, want);
        let g = laplacian(&s).unwrap();
        // path P3 eigenvalues are 0, 1, 3
        assert!((g.unscaled_norm() - 3.0).abs() < 1e-12);
        assert!((g.spectral_norm() - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert!(g.matrix().row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn empty_graph_laplacian() {
        let g = laplacian(&Mat::zeros(4, 4)).unwrap();
        assert_eq!(g.matrix(), &Mat::zeros(4, 4));
        assert_eq!(g.spectral_norm(), 0.0);
    }

    #[test]
    fn laplacian_rejects_asymmetric() {
        let s = Mat::from_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!(laplacian(&s).is_err());
    }

    #[test]
    fn scaled_knn_laplacian_has_unit_norm() {
        let mut rng = Rng::new(9);
        for _ in 0..5 {
            let x = Mat::randn(40, 3, &mut rng);
            let g = knn_laplacian(&x, 5).unwrap();
            let p = numerics::spectral_norm(g.matrix(), 2000, 1e-14).unwrap();
            assert!((p - 1.0).abs() < 1e-6, "{p}");
            assert!(g.spectral_norm() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn hypergraph_two_nodes() {
        let x = Mat::from_rows(&[[0.0], [1.0]]).unwrap();
        let g = hypergraph_laplacian(&x, 1).unwrap();
        let want = Mat::from_rows(&[[0.5, -0.5], [-0.5, 0.5]]).unwrap();
        // eigenvalues {0, 1}, so scaling leaves it unchanged
        assert!(g.matrix().sub(&want).unwrap().max_abs() < 1e-12);
        let (lo, hi) = numerics::symmetric_eigen_extremes(g.matrix()).unwrap();
        assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hypergraph_constant_features_deterministic() {
        let x = Mat::from_fn(7, 3, |_, _| 0.25);
        let a = hypergraph_laplacian(&x, 3).unwrap();
        let b = hypergraph_laplacian(&x, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.matrix().is_symmetric(1e-12));
    }

    #[test]
    fn edge_list_adjacency() {
        let s = adjacency_from_edges(3, &[(0, 1), (1, 2), (2, 2)]).unwrap();
        assert_eq!(s[(0, 1)], 1.0);
        assert_eq!(s[(2, 1)], 1.0);
        assert_eq!(s[(2, 2)], 0.0);
        assert!(adjacency_from_edges(2, &[(0, 5)]).is_err());
    }
}
