//! Lowest-order virtual element assembly on triangles with hanging nodes.
//!
//! Each active triangle is treated as a polygon whose boundary nodes are the
//! three vertices plus every hanging node on its sides; all of them carry a
//! degree of freedom. Shape functions are harmonic-like liftings that are
//! piecewise linear along the boundary walk, never evaluated in the
//! interior. Everything the discrete forms need comes from the elliptic
//! projection onto affine functions, computed from boundary data alone, plus
//! a stabilization term that penalizes hanging-node values deviating from
//! the linear interpolation between their side's endpoints.

use nalgebra::{DMatrix, DVector};

use crate::geometry::{dist, dot, midpoint, sub, sym_apply, tri_centroid, tri_signed_area, Point};
use crate::mesh::{ElementId, Mesh, MeshError, NodeId};
use crate::solver::SparseSystem;

/// Affine function `p(x) = value + grad . (x - anchor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearPoly {
    pub anchor: Point,
    pub value: f64,
    pub grad: Point,
}

impl LinearPoly {
    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        self.value + dot(self.grad, sub(x, self.anchor))
    }
}

/// Everything assembled on one element.
#[derive(Clone, Debug)]
pub struct LocalMatrices {
    /// Boundary nodes, counterclockwise; index space of the matrices.
    pub nodes: Vec<NodeId>,
    /// `K[i][j] = |E| (A grad p_i) . grad p_j` where `p_i` projects basis `i`.
    pub consistency: DMatrix<f64>,
    /// `S = D' D`; rows of `D` constrain hanging nodes to the line between
    /// their side's endpoints. Unscaled: the assembly multiplies by gamma.
    pub stability: DMatrix<f64>,
    /// `M[i][j] = c_E  integral of p_i p_j` over the triangle.
    pub mass: DMatrix<f64>,
    /// `F[i] = f_E  integral of p_i`.
    pub load: DVector<f64>,
    /// Elliptic projections of the basis functions, anchored at the centroid.
    pub projectors: Vec<LinearPoly>,
}

/// Elliptic projections of all boundary-node basis functions of an active
/// element. The gradient comes from the divergence theorem (the boundary
/// walk is piecewise affine, so edge trapezoids are exact) and the constant
/// from matching boundary averages.
pub fn pi_nabla_basis(mesh: &Mesh, e: ElementId) -> Result<Vec<LinearPoly>, MeshError> {
    let boundary = mesh.element_boundary(e)?;
    let n = boundary.nodes.len();
    let pos: Vec<Point> = boundary
        .nodes
        .iter()
        .map(|&v| mesh.node(v).map(|node| node.pos))
        .collect::<Result<_, _>>()?;
    let vp = mesh.vertex_positions(e)?;
    let area = tri_signed_area(vp[0], vp[1], vp[2]);
    let centroid = tri_centroid(vp[0], vp[1], vp[2]);

    // Outward normal of edge a->b scaled by its length, and edge lengths.
    let edge_normal = |a: Point, b: Point| -> Point { [b[1] - a[1], a[0] - b[0]] };
    let lengths: Vec<f64> = (0..n).map(|i| dist(pos[i], pos[(i + 1) % n])).collect();
    let perimeter: f64 = lengths.iter().sum();

    // Boundary moment of (x - centroid): sum of h_e (mid_e - centroid).
    let mut moment = [0.0, 0.0];
    for i in 0..n {
        let mid = midpoint(pos[i], pos[(i + 1) % n]);
        moment[0] += lengths[i] * (mid[0] - centroid[0]);
        moment[1] += lengths[i] * (mid[1] - centroid[1]);
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let n_prev = edge_normal(pos[prev], pos[i]);
        let n_next = edge_normal(pos[i], pos[(i + 1) % n]);
        let grad = [(n_prev[0] + n_next[0]) / (2.0 * area), (n_prev[1] + n_next[1]) / (2.0 * area)];
        // Boundary integral of the hat basis: half the two adjacent edges.
        let boundary_avg = 0.5 * (lengths[prev] + lengths[i]);
        let value = (boundary_avg - dot(grad, moment)) / perimeter;
        out.push(LinearPoly { anchor: centroid, value, grad });
    }
    Ok(out)
}

/// Elliptic projection of the function with the given boundary-node values.
pub fn pi_nabla(mesh: &Mesh, e: ElementId, values: &[f64]) -> Result<LinearPoly, MeshError> {
    let basis = pi_nabla_basis(mesh, e)?;
    if values.len() != basis.len() {
        return Err(MeshError::Corrupt(format!(
            "{e}: {} nodal values for {} boundary nodes",
            values.len(),
            basis.len()
        )));
    }
    let mut acc = LinearPoly { anchor: basis[0].anchor, value: 0.0, grad: [0.0, 0.0] };
    for (p, &v) in basis.iter().zip(values) {
        acc.value += v * p.value;
        acc.grad[0] += v * p.grad[0];
        acc.grad[1] += v * p.grad[1];
    }
    Ok(acc)
}

/// Assembles the local consistency, stabilization, mass and load terms of an
/// active element.
pub fn local_matrices(mesh: &Mesh, e: ElementId) -> Result<LocalMatrices, MeshError> {
    let boundary = mesh.element_boundary(e)?;
    let n = boundary.nodes.len();
    let projectors = pi_nabla_basis(mesh, e)?;
    let el = mesh.element(e)?;
    let vp = mesh.vertex_positions(e)?;
    let area = tri_signed_area(vp[0], vp[1], vp[2]).abs();

    let mut consistency = DMatrix::zeros(n, n);
    for i in 0..n {
        let agi = sym_apply(el.data.a, projectors[i].grad);
        for j in 0..n {
            consistency[(i, j)] = area * dot(agi, projectors[j].grad);
        }
    }

    // Mass term via the midpoint rule on the triangle, exact for the
    // quadratic integrand p_i p_j.
    let mut mass = DMatrix::zeros(n, n);
    if el.data.c != 0.0 {
        let mids = [midpoint(vp[0], vp[1]), midpoint(vp[1], vp[2]), midpoint(vp[2], vp[0])];
        let w = el.data.c * area / 3.0;
        for i in 0..n {
            for j in 0..=i {
                let mut acc = 0.0;
                for &q in &mids {
                    acc += projectors[i].eval(q) * projectors[j].eval(q);
                }
                mass[(i, j)] = w * acc;
                mass[(j, i)] = mass[(i, j)];
            }
        }
    }

    // Load: the projector is affine, so its integral is area * value at the
    // centroid anchor.
    let mut load = DVector::zeros(n);
    for i in 0..n {
        load[i] = el.data.f * area * projectors[i].value;
    }

    // Stabilization rows: one per hanging node, tying its value to the
    // affine interpolation between the endpoints of the side it lies on.
    let mut d = DMatrix::zeros(n, n);
    for k in 0..3u8 {
        let side = boundary.side_interior(k);
        if side.is_empty() {
            continue;
        }
        let ia = boundary.vertex_pos[k as usize] as usize;
        let ib = boundary.vertex_pos[(k as usize + 1) % 3] as usize;
        let pa = mesh.node(boundary.nodes[ia])?.pos;
        let pb = mesh.node(boundary.nodes[ib])?.pos;
        let len = dist(pb, pa);
        for (off, &node) in side.iter().enumerate() {
            let row = ia + 1 + off;
            let t = dist(mesh.node(node)?.pos, pa) / len;
            d[(row, row)] = 1.0;
            d[(row, ia)] = -(1.0 - t);
            d[(row, ib)] = -t;
        }
    }
    let stability = d.transpose() * &d;

    Ok(LocalMatrices {
        nodes: boundary.nodes.clone(),
        consistency,
        stability,
        mass,
        load,
        projectors,
    })
}

/// Stabilization energy `u' S u` of one element for a global nodal vector.
pub fn stab_energy(mesh: &Mesh, e: ElementId, nodal: &[f64]) -> Result<f64, MeshError> {
    let boundary = mesh.element_boundary(e)?;
    // Recompute rows directly; cheaper than forming S for a single vector.
    let mut acc = 0.0;
    for k in 0..3u8 {
        let side = boundary.side_interior(k);
        if side.is_empty() {
            continue;
        }
        let a = boundary.nodes[boundary.vertex_pos[k as usize] as usize];
        let b = boundary.nodes[boundary.vertex_pos[(k as usize + 1) % 3] as usize];
        let pa = mesh.node(a)?.pos;
        let pb = mesh.node(b)?.pos;
        let len = dist(pb, pa);
        let va = nodal[a.idx()];
        let vb = nodal[b.idx()];
        for &node in side {
            let t = dist(mesh.node(node)?.pos, pa) / len;
            let r = nodal[node.idx()] - ((1.0 - t) * va + t * vb);
            acc += r * r;
        }
    }
    Ok(acc)
}

/// Maps mesh nodes to solver unknowns, excluding Dirichlet (boundary) nodes.
#[derive(Clone, Debug)]
pub struct DofMap {
    node_to_dof: Vec<Option<u32>>,
    dof_to_node: Vec<NodeId>,
}

impl DofMap {
    pub fn new(mesh: &Mesh) -> DofMap {
        let mut node_to_dof = vec![None; mesh.n_nodes()];
        let mut dof_to_node = Vec::new();
        for (i, node) in mesh.nodes().iter().enumerate() {
            if !node.on_boundary {
                node_to_dof[i] = Some(dof_to_node.len() as u32);
                dof_to_node.push(NodeId(i as u32));
            }
        }
        DofMap { node_to_dof, dof_to_node }
    }

    #[inline]
    pub fn n_dofs(&self) -> usize {
        self.dof_to_node.len()
    }

    #[inline]
    pub fn dof(&self, n: NodeId) -> Option<u32> {
        self.node_to_dof.get(n.idx()).copied().flatten()
    }

    #[inline]
    pub fn node(&self, dof: u32) -> NodeId {
        self.dof_to_node[dof as usize]
    }

    /// Scatter a solver vector into a full nodal vector, filling constrained
    /// nodes from the Dirichlet data.
    pub fn expand(&self, x: &[f64], dirichlet: &DirichletData) -> Vec<f64> {
        let mut out = vec![0.0; self.node_to_dof.len()];
        for (i, slot) in self.node_to_dof.iter().enumerate() {
            out[i] = match slot {
                Some(d) => x[*d as usize],
                None => dirichlet.value_at(i),
            };
        }
        out
    }
}

/// Dirichlet boundary data by node.
#[derive(Clone, Debug)]
pub enum DirichletData {
    Homogeneous,
    /// Full-length nodal vector; only boundary-node entries are read.
    Values(Vec<f64>),
}

impl DirichletData {
    #[inline]
    fn value_at(&self, node_idx: usize) -> f64 {
        match self {
            DirichletData::Homogeneous => 0.0,
            DirichletData::Values(v) => v[node_idx],
        }
    }
}

/// Nodal interpolation of a function: evaluate at every node position.
pub fn interpolate_nodal(mesh: &Mesh, f: impl Fn(Point) -> f64) -> Vec<f64> {
    mesh.nodes().iter().map(|n| f(n.pos)).collect()
}

/// Assembles the global system `(K + gamma S + M) u = F` over free nodes,
/// eliminating Dirichlet nodes against the given boundary data.
pub fn assemble_with_dirichlet(
    mesh: &Mesh,
    gamma: f64,
    dirichlet: &DirichletData,
) -> Result<(SparseSystem, DofMap), MeshError> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(MeshError::Config(format!("stabilization weight {gamma} invalid")));
    }
    if let DirichletData::Values(v) = dirichlet {
        if v.len() != mesh.n_nodes() {
            return Err(MeshError::Config(format!(
                "Dirichlet vector length {} does not match {} nodes",
                v.len(),
                mesh.n_nodes()
            )));
        }
    }
    let map = DofMap::new(mesh);
    let n = map.n_dofs();
    let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
    let mut rhs = vec![0.0; n];

    for e in mesh.active_elements() {
        let local = local_matrices(mesh, e)?;
        let m = local.nodes.len();
        for i in 0..m {
            let Some(row) = map.dof(local.nodes[i]) else { continue };
            rhs[row as usize] += local.load[i];
            for j in 0..m {
                let b_ij = local.consistency[(i, j)]
                    + gamma * local.stability[(i, j)]
                    + local.mass[(i, j)];
                if b_ij == 0.0 {
                    continue;
                }
                match map.dof(local.nodes[j]) {
                    Some(col) => triplets.push((row, col, b_ij)),
                    None => {
                        let g = dirichlet.value_at(local.nodes[j].idx());
                        if g != 0.0 {
                            rhs[row as usize] -= b_ij * g;
                        }
                    }
                }
            }
        }
    }

    let sys = SparseSystem::from_triplets(n, triplets, rhs)
        .map_err(|e| MeshError::Corrupt(format!("assembly produced an invalid system: {e}")))?;
    Ok((sys, map))
}
