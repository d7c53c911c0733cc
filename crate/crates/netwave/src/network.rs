//! Directed pipe network: topology validation, node classification and the
//! space of divergence-free edgewise-constant fluxes.
//!
//! A node is a boundary node exactly when it is incident to a single edge;
//! everything else is a junction. The classification is always computed from
//! incidence. Edge orientation is semantic: it fixes the local coordinate
//! axis 0 -> length of each pipe, and the signs of the junction flux balance
//! depend on it, so edges are never reoriented.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// One directed pipe. `tail -> head` defines the positive flux direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: String,
    pub tail: usize,
    pub head: usize,
    pub length: f64,
}

/// Raw topology description as it appears in a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySpec {
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeSpec>,
    /// Optional declaration, validated against the computed classification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_nodes: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub id: String,
    pub tail: String,
    pub head: String,
    pub length: f64,
}

/// Validated directed network with node classification.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    node_ids: Vec<String>,
    edges: Vec<Edge>,
    boundary: Vec<usize>,
    interior: Vec<usize>,
    /// Per node: edge indices with this node as head (incoming).
    incoming: Vec<Vec<usize>>,
    /// Per node: edge indices with this node as tail (outgoing).
    outgoing: Vec<Vec<usize>>,
}

impl NetworkGraph {
    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_id(&self, index: usize) -> &str {
        &self.node_ids[index]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }

    /// Boundary nodes (incident to exactly one edge), in spec order.
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    /// Junction nodes, in spec order.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary.contains(&node)
    }

    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }

    /// Junction flux-balance matrix: one row per interior node, one column
    /// per edge; +1 where the edge enters the node, -1 where it leaves.
    /// A flux assignment k (one constant per edge) satisfies the junction
    /// balance exactly when `balance * k = 0`.
    pub fn balance_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.interior.len(), self.edges.len());
        for (row, &v) in self.interior.iter().enumerate() {
            for &e in &self.incoming[v] {
                m[(row, e)] += 1.0;
            }
            for &e in &self.outgoing[v] {
                m[(row, e)] -= 1.0;
            }
        }
        m
    }

    /// Canonical text form used for hashing. Lengths are rendered as raw
    /// bit patterns so the hash is exact.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        s.push_str("nodes:");
        for id in &self.node_ids {
            s.push_str(id);
            s.push(';');
        }
        s.push_str("edges:");
        for e in &self.edges {
            s.push_str(&format!(
                "{}|{}|{}|{:016x};",
                e.id,
                e.tail,
                e.head,
                e.length.to_bits()
            ));
        }
        s
    }
}

/// Orthonormal basis of the kernel space: edgewise-constant flux assignments
/// with zero net flux at every junction.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    /// `edge_count x dim`; columns are orthonormal in the Euclidean sense.
    pub vectors: DMatrix<f64>,
    pub dim: usize,
}

/// Validate a topology description and classify its nodes.
pub fn build_graph(spec: &TopologySpec) -> Result<NetworkGraph> {
    if spec.nodes.is_empty() {
        return Err(Error::InvalidNetwork("node list is empty".into()));
    }
    let mut index = HashMap::new();
    for (i, id) in spec.nodes.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::InvalidNetwork(format!("duplicate node id '{id}'")));
        }
    }

    let mut edges = Vec::with_capacity(spec.edges.len());
    let mut seen_ids = HashSet::new();
    for e in &spec.edges {
        if !seen_ids.insert(e.id.clone()) {
            return Err(Error::InvalidNetwork(format!("duplicate edge id '{}'", e.id)));
        }
        let tail = *index.get(&e.tail).ok_or_else(|| {
            Error::InvalidNetwork(format!("edge '{}': unknown tail node '{}'", e.id, e.tail))
        })?;
        let head = *index.get(&e.head).ok_or_else(|| {
            Error::InvalidNetwork(format!("edge '{}': unknown head node '{}'", e.id, e.head))
        })?;
        if tail == head {
            return Err(Error::InvalidNetwork(format!(
                "edge '{}' is a self-loop at node '{}'",
                e.id, e.tail
            )));
        }
        if !(e.length.is_finite() && e.length > 0.0) {
            return Err(Error::InvalidNetwork(format!(
                "edge '{}' has nonpositive length {}",
                e.id, e.length
            )));
        }
        edges.push(Edge {
            id: e.id.clone(),
            tail,
            head,
            length: e.length,
        });
    }

    let n = spec.nodes.len();
    let mut incoming = vec![Vec::new(); n];
    let mut outgoing = vec![Vec::new(); n];
    for (i, e) in edges.iter().enumerate() {
        incoming[e.head].push(i);
        outgoing[e.tail].push(i);
    }

    // Connectivity over the undirected incidence.
    let mut reached = vec![false; n];
    let mut stack = vec![0usize];
    reached[0] = true;
    while let Some(v) = stack.pop() {
        for &e in incoming[v].iter().chain(outgoing[v].iter()) {
            for w in [edges[e].tail, edges[e].head] {
                if !reached[w] {
                    reached[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    if let Some(i) = reached.iter().position(|r| !r) {
        return Err(Error::InvalidNetwork(format!(
            "graph is disconnected: node '{}' unreachable from '{}'",
            spec.nodes[i], spec.nodes[0]
        )));
    }

    let mut boundary = Vec::new();
    let mut interior = Vec::new();
    for v in 0..n {
        if incoming[v].len() + outgoing[v].len() == 1 {
            boundary.push(v);
        } else {
            interior.push(v);
        }
    }

    if let Some(declared) = &spec.boundary_nodes {
        let mut declared_idx = Vec::new();
        for id in declared {
            let i = *index.get(id).ok_or_else(|| {
                Error::InvalidNetwork(format!("declared boundary node '{id}' not in node list"))
            })?;
            declared_idx.push(i);
        }
        declared_idx.sort_unstable();
        let mut computed = boundary.clone();
        computed.sort_unstable();
        if declared_idx != computed {
            let names: Vec<_> = boundary.iter().map(|&i| spec.nodes[i].as_str()).collect();
            return Err(Error::InvalidNetwork(format!(
                "declared boundary nodes conflict with incidence; computed boundary set is {names:?}"
            )));
        }
    }

    Ok(NetworkGraph {
        node_ids: spec.nodes.clone(),
        edges,
        boundary,
        interior,
        incoming,
        outgoing,
    })
}

/// Orthonormal basis of the null space of the junction balance matrix.
///
/// The balance matrix B is small (junctions x edges); its null space is read
/// off the eigendecomposition of the normal matrix B^T B, keeping eigenvectors
/// whose eigenvalue is below `1e-12 * lambda_max`. Genuine nonzero eigenvalues
/// of these integer matrices sit many orders above that cut, eigensolver noise
/// on true zeros (~1e-15 * lambda_max) well below it.
pub fn kernel_space(g: &NetworkGraph) -> KernelBasis {
    let m = g.balance_matrix();
    let ne = g.edge_count();
    if m.nrows() == 0 {
        // No junctions: every edgewise-constant assignment is admissible.
        return KernelBasis {
            vectors: DMatrix::identity(ne, ne),
            dim: ne,
        };
    }
    let normal = m.transpose() * &m;
    let eig = normal.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let sigma_max = lambda_max.max(1.0).sqrt();
    let tol = 1e-12 * lambda_max.max(1.0);
    let mut null_cols: Vec<usize> = (0..ne).filter(|&j| eig.eigenvalues[j] <= tol).collect();
    null_cols.sort_unstable();
    let dim = null_cols.len();
    let mut vectors = DMatrix::zeros(ne, dim);
    for (k, &j) in null_cols.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(j));
    }
    debug_assert!(
        (&m * &vectors).amax() <= 1e-12 * sigma_max,
        "kernel columns must satisfy the junction balance"
    );
    KernelBasis { vectors, dim }
}

/// Net flux defect of an edgewise-constant assignment at a junction.
pub fn balance_defect(g: &NetworkGraph, node: usize, per_edge: &DVector<f64>) -> f64 {
    let inflow: f64 = g.incoming(node).iter().map(|&e| per_edge[e]).sum();
    let outflow: f64 = g.outgoing(node).iter().map(|&e| per_edge[e]).sum();
    inflow - outflow
}

/// The seven-edge diamond test network: two boundary nodes joined through
/// four junctions, all pipe lengths one.
pub fn diamond() -> TopologySpec {
    let edge = |id: &str, tail: &str, head: &str| EdgeSpec {
        id: id.into(),
        tail: tail.into(),
        head: head.into(),
        length: 1.0,
    };
    TopologySpec {
        nodes: ["v1", "j1", "j2", "j3", "j4", "v2"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        edges: vec![
            edge("e1", "v1", "j1"),
            edge("e2", "j1", "j2"),
            edge("e3", "j1", "j3"),
            edge("e4", "j2", "j3"),
            edge("e5", "j2", "j4"),
            edge("e6", "j3", "j4"),
            edge("e7", "j4", "v2"),
        ],
        boundary_nodes: None,
    }
}

/// Single pipe between two boundary nodes, length one.
pub fn single_edge() -> TopologySpec {
    TopologySpec {
        nodes: vec!["v1".into(), "v2".into()],
        edges: vec![EdgeSpec {
            id: "e1".into(),
            tail: "v1".into(),
            head: "v2".into(),
            length: 1.0,
        }],
        boundary_nodes: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_two_edges() -> TopologySpec {
        TopologySpec {
            nodes: vec!["v1".into(), "m".into(), "v2".into()],
            edges: vec![
                EdgeSpec {
                    id: "e1".into(),
                    tail: "v1".into(),
                    head: "m".into(),
                    length: 1.0,
                },
                EdgeSpec {
                    id: "e2".into(),
                    tail: "m".into(),
                    head: "v2".into(),
                    length: 2.0,
                },
            ],
            boundary_nodes: None,
        }
    }

    #[test]
    fn diamond_classification() {
        let g = build_graph(&diamond()).unwrap();
        assert_eq!(g.edge_count(), 7);
        let boundary: Vec<_> = g.boundary_nodes().iter().map(|&i| g.node_id(i)).collect();
        assert_eq!(boundary, ["v1", "v2"]);
        assert_eq!(g.interior_nodes().len(), 4);
    }

    #[test]
    fn single_edge_classification() {
        let g = build_graph(&single_edge()).unwrap();
        assert_eq!(g.boundary_nodes().len(), 2);
        assert!(g.interior_nodes().is_empty());
    }

    #[test]
    fn path_classification() {
        let g = build_graph(&path_two_edges()).unwrap();
        let interior: Vec<_> = g.interior_nodes().iter().map(|&i| g.node_id(i)).collect();
        assert_eq!(interior, ["m"]);
        let boundary: Vec<_> = g.boundary_nodes().iter().map(|&i| g.node_id(i)).collect();
        assert_eq!(boundary, ["v1", "v2"]);
    }

    #[test]
    fn rejects_self_loop() {
        let mut spec = single_edge();
        spec.edges[0].head = "v1".into();
        // Self-loop also makes v2 unreachable; the loop must be reported first.
        assert!(matches!(
            build_graph(&spec),
            Err(Error::InvalidNetwork(msg)) if msg.contains("self-loop")
        ));
    }

    #[test]
    fn rejects_nonpositive_length() {
        let mut spec = single_edge();
        spec.edges[0].length = 0.0;
        assert!(build_graph(&spec).is_err());
        spec.edges[0].length = -1.0;
        assert!(build_graph(&spec).is_err());
        spec.edges[0].length = f64::NAN;
        assert!(build_graph(&spec).is_err());
    }

    #[test]
    fn rejects_duplicate_edge_id() {
        let mut spec = path_two_edges();
        spec.edges[1].id = "e1".into();
        assert!(matches!(
            build_graph(&spec),
            Err(Error::InvalidNetwork(msg)) if msg.contains("duplicate edge id")
        ));
    }

    #[test]
    fn rejects_disconnected() {
        let mut spec = path_two_edges();
        spec.nodes.push("w1".into());
        spec.nodes.push("w2".into());
        spec.edges.push(EdgeSpec {
            id: "e3".into(),
            tail: "w1".into(),
            head: "w2".into(),
            length: 1.0,
        });
        assert!(matches!(
            build_graph(&spec),
            Err(Error::InvalidNetwork(msg)) if msg.contains("disconnected")
        ));
    }

    #[test]
    fn rejects_conflicting_boundary_declaration() {
        let mut spec = path_two_edges();
        spec.boundary_nodes = Some(vec!["v1".into(), "m".into()]);
        assert!(build_graph(&spec).is_err());
        spec.boundary_nodes = Some(vec!["v1".into(), "v2".into()]);
        assert!(build_graph(&spec).is_ok());
    }

    #[test]
    fn accepts_parallel_edges() {
        // Two pipes joining the same pair of nodes; both nodes then carry
        // two incident edges and are classified as junctions.
        let spec = TopologySpec {
            nodes: vec!["a".into(), "b".into()],
            edges: vec![
                EdgeSpec {
                    id: "e1".into(),
                    tail: "a".into(),
                    head: "b".into(),
                    length: 1.0,
                },
                EdgeSpec {
                    id: "e2".into(),
                    tail: "a".into(),
                    head: "b".into(),
                    length: 1.0,
                },
            ],
            boundary_nodes: None,
        };
        let g = build_graph(&spec).unwrap();
        assert!(g.boundary_nodes().is_empty());
        assert_eq!(g.interior_nodes().len(), 2);
        // Balance at each node forces k1 + k2 = 0.
        let k = kernel_space(&g);
        assert_eq!(k.dim, 1);
        assert!((k.vectors[(0, 0)] + k.vectors[(1, 0)]).abs() < 1e-13);
    }

    #[test]
    fn kernel_dimensions() {
        let g = build_graph(&diamond()).unwrap();
        assert_eq!(kernel_space(&g).dim, 3);
        // |E| - #junctions when the balance matrix has full row rank.
        assert_eq!(kernel_space(&g).dim, g.edge_count() - g.interior_nodes().len());

        let g = build_graph(&single_edge()).unwrap();
        assert_eq!(kernel_space(&g).dim, 1);

        let g = build_graph(&path_two_edges()).unwrap();
        let k = kernel_space(&g);
        assert_eq!(k.dim, 1);
        // Equal constants on both edges.
        assert!((k.vectors[(0, 0)] - k.vectors[(1, 0)]).abs() < 1e-13);
    }

    #[test]
    fn kernel_columns_balance_at_every_junction() {
        let g = build_graph(&diamond()).unwrap();
        let k = kernel_space(&g);
        for c in 0..k.dim {
            let col = DVector::from_column_slice(k.vectors.column(c).as_slice());
            for &v in g.interior_nodes() {
                assert!(balance_defect(&g, v, &col).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn kernel_span_invariant_under_edge_reordering() {
        let g1 = build_graph(&diamond()).unwrap();
        let mut spec = diamond();
        spec.edges.reverse();
        let g2 = build_graph(&spec).unwrap();
        let k1 = kernel_space(&g1);
        let k2 = kernel_space(&g2);
        assert_eq!(k1.dim, k2.dim);
        // Map k2's columns into g1's edge order, then check mutual projection.
        let perm: Vec<usize> = g1
            .edges()
            .iter()
            .map(|e| g2.edges().iter().position(|f| f.id == e.id).unwrap())
            .collect();
        let mut k2_in_g1 = DMatrix::zeros(7, k2.dim);
        for j in 0..7 {
            for c in 0..k2.dim {
                k2_in_g1[(j, c)] = k2.vectors[(perm[j], c)];
            }
        }
        // Both bases are orthonormal, so the projection of one onto the other
        // must reproduce it when the spans agree.
        let resid = &k2_in_g1 - &k1.vectors * (k1.vectors.transpose() * &k2_in_g1);
        assert!(resid.amax() < 1e-12);
    }
}
