//! Factor-graph view of a Gaussian model in information form.
//!
//! The joint density is `exp(-1/2 f^T P f + h^T f)`; node potentials carry
//! `(P_ii, h_i)` and every nonzero off-diagonal `P_ij` becomes a pairwise factor.

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::operator::SparseOperator;

/// Node potentials plus symmetric pairwise weights.
///
/// Adjacency is kept in both directions so that neighbour lists of any node
/// are contiguous; [`FactorGraph::edges`] yields each undirected edge once.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    node_precision: Vec<f64>,
    node_shift: Vec<f64>,
    adj_ptr: Vec<usize>,
    adj: Vec<(usize, f64)>,
}

impl FactorGraph {
    pub fn from_precision(precision: &SparseOperator, shift: Option<&[f64]>) -> Result<Self> {
        let n = precision.dim();
        let node_shift = match shift {
            Some(h) if h.len() != n => return Err(Error::Dimension { expected: n, got: h.len() }),
            Some(h) => h.to_vec(),
            None => vec![0.0; n],
        };
        let mut node_precision = Vec::with_capacity(n);
        let mut adj_ptr = Vec::with_capacity(n + 1);
        let mut adj = Vec::with_capacity(precision.nnz().saturating_sub(n));
        adj_ptr.push(0);
        for i in 0..n {
            let mut diag = 0.0;
            for (j, v) in precision.row(i) {
                if j == i {
                    diag = v;
                } else {
                    adj.push((j, v));
                }
            }
            if !(diag > 0.0 && diag.is_finite()) {
                return Err(Error::InvalidPrecision { index: i, value: diag });
            }
            node_precision.push(diag);
            adj_ptr.push(adj.len());
        }
        let graph = Self { node_precision, node_shift, adj_ptr, adj };
        graph.check_symmetric()?;
        Ok(graph)
    }

    fn check_symmetric(&self) -> Result<()> {
        for i in 0..self.len() {
            for &(j, w) in self.neighbors(i) {
                let back = self.neighbors(j).iter().find(|&&(k, _)| k == i).map(|&(_, v)| v);
                if back != Some(w) {
                    return Err(Error::Parameter(format!("precision is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.node_precision.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_precision.is_empty()
    }

    pub fn node_precision(&self) -> &[f64] {
        &self.node_precision
    }

    pub fn node_shift(&self) -> &[f64] {
        &self.node_shift
    }

    /// `(neighbour, P_ij)` pairs of node `i`, sorted by neighbour.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[self.adj_ptr[i]..self.adj_ptr[i + 1]]
    }

    /// Undirected edges `(i, j, P_ij)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.len())
            .flat_map(move |i| self.neighbors(i).iter().filter(move |&&(j, _)| j > i).map(move |&(j, w)| (i, j, w)))
    }

    pub fn edge_count(&self) -> usize {
        self.adj.len() / 2
    }

    pub fn directed_edge_count(&self) -> usize {
        self.adj.len()
    }

    /// Add independent Gaussian point observations to the node potentials.
    pub fn apply_observations(&self, obs: &ObservationSet) -> Result<Self> {
        obs.validate(self.len())?;
        let mut out = self.clone();
        for o in obs.entries() {
            out.node_precision[o.node] += 1.0 / o.variance;
            out.node_shift[o.node] += o.value / o.variance;
        }
        Ok(out)
    }

    /// Row-major dense posterior precision. Test and oracle use only.
    pub fn dense_precision(&self) -> Vec<f64> {
        let n = self.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = self.node_precision[i];
            for &(j, w) in self.neighbors(i) {
                d[i * n + j] = w;
            }
        }
        d
    }
}

/// `h = P * mean`, the information vector that centres the prior at `mean`.
pub fn prior_shift_from_mean(precision: &SparseOperator, mean: &[f64]) -> Result<Vec<f64>> {
    precision.matvec(mean)
}

/// Point observation of a single node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub node: usize,
    pub value: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    entries: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(entries: Vec<Observation>) -> Self {
        Self { entries }
    }

    /// Observations with a shared noise variance.
    pub fn with_variance(values: impl IntoIterator<Item = (usize, f64)>, variance: f64) -> Self {
        Self::new(values.into_iter().map(|(node, value)| Observation { node, value, variance }).collect())
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, obs: Observation) {
        self.entries.push(obs);
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (k, o) in self.entries.iter().enumerate() {
            if o.node >= n {
                return Err(Error::Observation(format!("entry {k}: node {} outside {n} nodes", o.node)));
            }
            if !o.value.is_finite() {
                return Err(Error::Observation(format!("entry {k}: non-finite value")));
            }
            if !(o.variance > 0.0 && o.variance.is_finite()) {
                return Err(Error::Observation(format!("entry {k}: variance {} must be positive", o.variance)));
            }
        }
        Ok(())
    }
}

/// Snap a continuous lattice coordinate to the nearest node index; exact
/// halves go to the lower index.
pub fn snap_coordinate(x: f64) -> f64 {
    (x - 0.5).ceil()
}

/// Resolve possibly fractional lattice coordinates to a node index.
pub fn snap_to_node(grid: &GridSpec, x: f64, y: f64) -> Result<usize> {
    if !(x.is_finite() && y.is_finite()) {
        return Err(Error::Observation(format!("non-finite coordinate ({x}, {y})")));
    }
    let (i, j) = (snap_coordinate(x), snap_coordinate(y));
    if i < 0.0 || j < 0.0 || i >= grid.nx() as f64 || j >= grid.ny() as f64 {
        return Err(Error::Observation(format!("coordinate ({x}, {y}) lies outside the grid")));
    }
    grid.linear_index(i as usize, j as usize)
}
