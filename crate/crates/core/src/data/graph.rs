//! Static sensor adjacency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Symmetric binary adjacency with zero diagonal, plus optional node
/// positions in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorGraph {
    n: usize,
    adjacency: Vec<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coordinates: Option<Vec<[f64; 2]>>,
}

impl SensorGraph {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            adjacency: vec![vec![0; n]; n],
            coordinates: None,
        }
    }

    pub fn from_adjacency(adjacency: Vec<Vec<u8>>) -> Result<Self> {
        let n = adjacency.len();
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!("adjacency row {i} has {} entries", row.len())));
            }
            if row[i] != 0 {
                return Err(Error::InvalidArgument(format!("self-loop at node {i}")));
            }
            for (j, &a) in row.iter().enumerate() {
                if a > 1 {
                    return Err(Error::InvalidArgument(format!("A({i},{j}) = {a} is not binary")));
                }
                if adjacency[j][i] != a {
                    return Err(Error::InvalidArgument(format!("A is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self {
            n,
            adjacency,
            coordinates: None,
        })
    }

    pub fn with_coordinates(mut self, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != self.n {
            return Err(Error::NodeMismatch {
                what: "coordinates".into(),
                expected: self.n,
                found: coords.len(),
            });
        }
        self.coordinates = Some(coords);
        Ok(self)
    }

    /// Connects every node to its `k` nearest neighbors (Euclidean), then
    /// symmetrizes by union. Distance ties go to the lower index.
    pub fn knn(coords: &[[f64; 2]], k: usize) -> Result<Self> {
        let n = coords.len();
        if k == 0 || k >= n {
            return Err(Error::InvalidArgument(format!(
                "k must satisfy 1 <= k < N, got k={k}, N={n}"
            )));
        }
        let mut adjacency = vec![vec![0u8; n]; n];
        for i in 0..n {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = coords[i][0] - coords[j][0];
                    let dy = coords[i][1] - coords[j][1];
                    (dx * dx + dy * dy, j)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in others.iter().take(k) {
                adjacency[i][j] = 1;
                adjacency[j][i] = 1;
            }
        }
        Ok(Self {
            n,
            adjacency,
            coordinates: Some(coords.to_vec()),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn coordinates(&self) -> Option<&[[f64; 2]]> {
        self.coordinates.as_deref()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j] != 0
    }

    pub fn adjacency(&self) -> &[Vec<u8>] {
        &self.adjacency
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i]
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0)
            .map(|(j, _)| j)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn set_edge(&mut self, i: usize, j: usize, present: bool) {
        assert_ne!(i, j, "self-loops are not allowed");
        let v = u8::from(present);
        self.adjacency[i][j] = v;
        self.adjacency[j][i] = v;
    }

    /// Relabels nodes: node `perm[i]` of the result is node `i` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::empty(self.n);
        for (i, j) in self.edges() {
            out.set_edge(perm[i], perm[j], true);
        }
        if let Some(c) = &self.coordinates {
            let mut coords = vec![[0.0; 2]; self.n];
            for (i, &p) in perm.iter().enumerate() {
                coords[p] = c[i];
            }
            out.coordinates = Some(coords);
        }
        out
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.n;
        let deg: Vec<f64> = (0..n).map(|i| self.degree(i) as f64 + 1.0).collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let a = if i == j { 1.0 } else { f64::from(self.adjacency[i][j]) };
                if a != 0.0 {
                    data[i * n + j] = a / (deg[i] * deg[j]).sqrt();
                }
            }
        }
        Tensor::from_parts(vec![n, n], data)
    }
}
