//! Road-network graph: adjacency, hop distances, the geographic mask and the
//! normalized-Laplacian eigenvector basis used for spatial embeddings.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::io::DenseMatrix;
use crate::matrix::BinaryMatrix;
use crate::par;
use crate::{Error, Result};

/// Eigenvalues at or below this are treated as part of the null space.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-8;

/// Default hop threshold for the geographic mask.
pub const DEFAULT_HOP_THRESHOLD: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    adjacency: BinaryMatrix,
}

impl RoadNetwork {
    /// Builds a network from directed edges. Duplicates collapse to one edge
    /// and self-loops are dropped so the adjacency diagonal stays zero.
    pub fn build_from_edge_list(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("network needs at least one node".into()));
        }
        let mut adjacency = BinaryMatrix::zeros(n, n);
        for &(s, d) in edges {
            if s >= n || d >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({s},{d}) references a node outside 0..{n}"
                )));
            }
            if s != d {
                adjacency.set(s, d, true);
            }
        }
        let mut unique = Vec::with_capacity(edges.len());
        for i in 0..n {
            for j in 0..n {
                if adjacency.get(i, j) {
                    unique.push((i, j));
                }
            }
        }
        Ok(Self {
            node_count: n,
            edges: unique,
            adjacency,
        })
    }

    /// One node per cell (row-major) with directed edges between every pair
    /// of 8-neighbouring cells, both orientations stored.
    pub fn grid_to_graph(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!("grid {rows}x{cols} is empty")));
        }
        let mut edges = Vec::new();
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                            continue;
                        }
                        let from = (r as usize) * cols + c as usize;
                        let to = (nr as usize) * cols + nc as usize;
                        edges.push((from, to));
                    }
                }
            }
        }
        Self::build_from_edge_list(rows * cols, &edges)
    }

    /// Bidirectional ring 0-1-...-(n-1)-0.
    pub fn ring(n: usize) -> Result<Self> {
        let mut edges = Vec::with_capacity(2 * n);
        if n > 1 {
            for i in 0..n {
                let j = (i + 1) % n;
                edges.push((i, j));
                edges.push((j, i));
            }
        }
        Self::build_from_edge_list(n, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &BinaryMatrix {
        &self.adjacency
    }

    fn out_neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency
            .row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
    }

    /// Number of weakly connected components.
    pub fn component_count(&self) -> usize {
        let n = self.node_count;
        let mut seen = vec![false; n];
        let mut count = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(u) = queue.pop_front() {
                for v in 0..n {
                    if !seen[v] && (self.adjacency.get(u, v) || self.adjacency.get(v, u)) {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        count
    }
}

/// Parses `src,dst[,weight]` lines; `#` starts a comment, weights are ignored.
pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Data(format!(
                "edge list line {}: expected `src,dst[,weight]`, got `{raw}`",
                lineno + 1
            )));
        }
        let idx = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                Error::Data(format!("edge list line {}: bad node id `{s}`", lineno + 1))
            })
        };
        if fields.len() == 3 {
            fields[2].parse::<f64>().map_err(|_| {
                Error::Data(format!("edge list line {}: bad weight `{}`", lineno + 1, fields[2]))
            })?;
        }
        edges.push((idx(fields[0])?, idx(fields[1])?));
    }
    Ok(edges)
}

pub fn format_edge_list(net: &RoadNetwork) -> String {
    let mut out = String::from("# src,dst\n");
    for (s, d) in net.edges() {
        out.push_str(&format!("{s},{d}\n"));
    }
    out
}

pub fn read_edge_list(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_edge_list(&text)
}

/// All-pairs hop counts; `None` marks unreachable pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopDistanceMatrix {
    n: usize,
    dist: Vec<Option<u32>>,
}

impl HopDistanceMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u32> {
        self.dist[i * self.n + j]
    }
}

/// Breadth-first search from every source along directed edges.
pub fn hop_distances(net: &RoadNetwork) -> HopDistanceMatrix {
    let n = net.node_count();
    let rows = par::map_range(n, |src| {
        let mut row = vec![None; n];
        row[src] = Some(0u32);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = row[u].expect("queued nodes have a distance");
            for v in net.out_neighbours(u) {
                if row[v].is_none() {
                    row[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        row
    });
    HopDistanceMatrix {
        n,
        dist: rows.into_iter().flatten().collect(),
    }
}

/// `M_geo[i][j] = 1` iff `j` is reachable from `i` within `lambda` hops
/// (self always included).
pub fn geographic_mask(dist: &HopDistanceMatrix, lambda: u32) -> BinaryMatrix {
    let n = dist.size();
    let mut mask = BinaryMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if matches!(dist.get(i, j), Some(d) if d <= lambda) {
                mask.set(i, j, true);
            }
        }
    }
    mask
}

/// `I - D^{-1/2} A D^{-1/2}` over the symmetrized adjacency, row-major.
/// Isolated nodes get a zero `D^{-1/2}` entry.
pub fn normalized_laplacian(net: &RoadNetwork) -> Vec<f64> {
    let n = net.node_count();
    let a = net.adjacency();
    let sym = |i: usize, j: usize| a.get(i, j) || a.get(j, i);
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg = (0..n).filter(|&j| sym(i, j)).count();
            if deg == 0 {
                0.0
            } else {
                1.0 / (deg as f64).sqrt()
            }
        })
        .collect();
    let mut lap = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let adj = if sym(i, j) { 1.0 } else { 0.0 };
            let id = if i == j { 1.0 } else { 0.0 };
            lap[i * n + j] = id - inv_sqrt_deg[i] * adj * inv_sqrt_deg[j];
        }
    }
    lap
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianEmbeddingBasis {
    /// N x k, row-major: row `n` is node `n`'s embedding.
    vectors: Vec<f64>,
    eigenvalues: Vec<f64>,
    nodes: usize,
}

impl LaplacianEmbeddingBasis {
    pub fn from_parts(nodes: usize, eigenvalues: Vec<f64>, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != nodes * eigenvalues.len() {
            return Err(Error::shape(
                "LaplacianEmbeddingBasis::from_parts",
                format!("{} values for {nodes}x{}", vectors.len(), eigenvalues.len()),
            ));
        }
        Ok(Self {
            vectors,
            eigenvalues,
            nodes,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Row-major N x k values.
    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn node_row(&self, n: usize) -> &[f64] {
        let k = self.dim();
        &self.vectors[n * k..(n + 1) * k]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.nodes).map(|n| self.node_row(n)[c]).collect()
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.nodes,
            cols: self.dim(),
            data: self.vectors.clone(),
        }
    }

    /// File layout: eigenvalues on the first row, then one row per node.
    pub fn to_file_matrix(&self) -> DenseMatrix {
        let mut data = self.eigenvalues.clone();
        data.extend_from_slice(&self.vectors);
        DenseMatrix {
            rows: self.nodes + 1,
            cols: self.dim(),
            data,
        }
    }

    pub fn from_file_matrix(m: &DenseMatrix) -> Result<Self> {
        if m.rows < 2 {
            return Err(Error::Data(
                "basis file needs an eigenvalue row and at least one node row".into(),
            ));
        }
        Self::from_parts(m.rows - 1, m.row(0).to_vec(), m.data[m.cols..].to_vec())
    }
}

/// The `k` eigenvectors of the normalized Laplacian with the smallest
/// eigenvalues above [`ZERO_EIGENVALUE_TOL`], ascending. Each vector is
/// sign-fixed so its largest-magnitude component (lowest index on ties) is
/// positive.
pub fn laplacian_embedding_basis(net: &RoadNetwork, k: usize) -> Result<LaplacianEmbeddingBasis> {
    let n = net.node_count();
    let lap = normalized_laplacian(net);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &lap));

    let mut order: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > ZERO_EIGENVALUE_TOL)
        .collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("eigenvalues of a symmetric matrix are finite")
            .then(a.cmp(&b))
    });
    if k > order.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {k} Laplacian eigenvectors but only {} nontrivial ones exist",
            order.len()
        )));
    }

    let mut vectors = vec![0.0; n * k];
    let mut eigenvalues = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        eigenvalues.push(eig.eigenvalues[idx]);
        let col = eig.eigenvectors.column(idx);
        let norm = col.norm();
        let mut pivot = 0;
        for r in 1..n {
            if col[r].abs() > col[pivot].abs() {
                pivot = r;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[r * k + c] = sign * col[r] / norm;
        }
    }
    LaplacianEmbeddingBasis::from_parts(n, eigenvalues, vectors)
}
