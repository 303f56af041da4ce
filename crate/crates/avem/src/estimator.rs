//! Stabilization-free a posteriori error machinery: residual and flux-jump
//! indicators, the stabilization energy monitor, hierarchical detail vectors
//! for hanging nodes, and data oscillation.

use crate::assembly::{pi_nabla_basis, stab_energy, LinearPoly};
use crate::geometry::{
    dist, dot, sub, sym_apply, tri_signed_area, Point, TriQuadRule, TRI_MIDPOINT_RULE,
    TRI_SEVEN_POINT_RULE,
};
use crate::mesh::{ElementId, Mesh, MeshError};

/// Per-element error indicators for one discrete solution. All vectors are
/// aligned with `elems`, the active elements in ascending id order.
#[derive(Clone, Debug)]
pub struct LocalIndicators {
    pub elems: Vec<ElementId>,
    /// Element sizes `h_E = sqrt(|E|)`.
    pub h: Vec<f64>,
    /// Weighted interior residual `h_E^2 ||f - c Pu||^2`.
    pub resid2: Vec<f64>,
    /// Weighted flux jumps `1/2 sum_e h_E j_e^2 h_e` over the element's
    /// skeleton edges; boundary edges contribute nothing.
    pub jump2: Vec<f64>,
    /// `resid2 + jump2`.
    pub eta2: Vec<f64>,
    /// Stabilization energy of the solution on the element (no weight).
    pub stab: Vec<f64>,
}

impl LocalIndicators {
    pub fn eta2_total(&self) -> f64 {
        self.eta2.iter().sum()
    }

    pub fn stab_total(&self) -> f64 {
        self.stab.iter().sum()
    }

    /// Pairs consumed by Dörfler marking.
    pub fn marking_pairs(&self) -> Vec<(ElementId, f64)> {
        self.elems.iter().copied().zip(self.eta2.iter().copied()).collect()
    }
}

/// Computes all local indicators for the solution given as a full nodal
/// vector (boundary values included).
pub fn compute_indicators(mesh: &Mesh, nodal: &[f64]) -> Result<LocalIndicators, MeshError> {
    if nodal.len() != mesh.n_nodes() {
        return Err(MeshError::Corrupt(format!(
            "nodal vector length {} does not match {} nodes",
            nodal.len(),
            mesh.n_nodes()
        )));
    }
    let elems: Vec<ElementId> = mesh.active_elements().collect();
    // Pass 1: elliptic projections and fluxes, indexed by raw element id.
    let mut proj: Vec<Option<(LinearPoly, Point)>> = vec![None; mesh.n_elements()];
    for &e in &elems {
        let boundary = mesh.element_boundary(e)?;
        let basis = pi_nabla_basis(mesh, e)?;
        let mut p = LinearPoly { anchor: basis[0].anchor, value: 0.0, grad: [0.0, 0.0] };
        for (b, &node) in basis.iter().zip(&boundary.nodes) {
            let v = nodal[node.idx()];
            p.value += v * b.value;
            p.grad[0] += v * b.grad[0];
            p.grad[1] += v * b.grad[1];
        }
        let flux = sym_apply(mesh.element(e)?.data.a, p.grad);
        proj[e.idx()] = Some((p, flux));
    }

    let n = elems.len();
    let mut out = LocalIndicators {
        elems,
        h: vec![0.0; n],
        resid2: vec![0.0; n],
        jump2: vec![0.0; n],
        eta2: vec![0.0; n],
        stab: vec![0.0; n],
    };
    for (idx, &e) in out.elems.clone().iter().enumerate() {
        let el = mesh.element(e)?;
        let vp = mesh.vertex_positions(e)?;
        let area = tri_signed_area(vp[0], vp[1], vp[2]).abs();
        let h_elem = area.sqrt();
        let (p, flux) = proj[e.idx()].expect("active element projected");

        // Interior residual: affine integrand squared, midpoint rule exact.
        let r2 = TRI_MIDPOINT_RULE.integrate(vp[0], vp[1], vp[2], |x| {
            let r = el.data.f - el.data.c * p.eval(x);
            r * r
        });

        // Flux jumps across the skeleton edges of this element.
        let mut jump2 = 0.0;
        let boundary = mesh.element_boundary(e)?;
        for (a, b) in boundary.edges() {
            let (e1, e2) = mesh.edge_incidence(a, b)?;
            let Some(other) = (if e1 == e { e2 } else { Some(e1) }) else {
                continue; // boundary edge
            };
            let (_, other_flux) = proj[other.idx()].expect("active neighbor projected");
            let pa = mesh.node(a)?.pos;
            let pb = mesh.node(b)?.pos;
            let len = dist(pa, pb);
            let normal = [(pb[1] - pa[1]) / len, (pa[0] - pb[0]) / len];
            let j = dot(sub(flux, other_flux), normal);
            jump2 += 0.5 * h_elem * j * j * len;
        }

        out.h[idx] = h_elem;
        out.resid2[idx] = h_elem * h_elem * r2;
        out.jump2[idx] = jump2;
        out.eta2[idx] = out.resid2[idx] + jump2;
        out.stab[idx] = stab_energy(mesh, e, nodal)?;
    }
    Ok(out)
}

/// Ratio of the weighted stabilization energy to the squared estimator,
/// `gamma^2 S / eta^2`. A vanishing estimator with leftover stabilization
/// energy is inconsistent and reported as an error; both zero gives zero.
pub fn stab_ratio(eta2: f64, stab: f64, gamma: f64) -> Result<f64, MeshError> {
    if !(eta2 >= 0.0 && stab >= 0.0) {
        return Err(MeshError::Corrupt(format!(
            "negative energies: eta^2 = {eta2}, stabilization = {stab}"
        )));
    }
    if eta2 == 0.0 {
        if stab > 0.0 {
            return Err(MeshError::Corrupt(format!(
                "estimator vanished while stabilization energy is {stab}"
            )));
        }
        return Ok(0.0);
    }
    Ok(gamma * gamma * stab / eta2)
}

/// Hanging-node detail coefficients of a nodal vector.
#[derive(Clone, Debug)]
pub struct DetailVectors {
    /// Hanging nodes, ascending by id.
    pub hanging: Vec<crate::mesh::NodeId>,
    /// One-level details `v(x) - (v(x') + v(x''))/2` against the parents.
    pub d: Vec<f64>,
    /// Deviation from the conforming interpolant, `v(x) - (I v)(x)`, where
    /// `I v` rebuilds hanging values from parents in creation order.
    pub delta: Vec<f64>,
}

impl DetailVectors {
    pub fn d_norm(&self) -> f64 {
        self.d.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn delta_norm(&self) -> f64 {
        self.delta.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Computes both detail vectors of a nodal function.
pub fn hierarchical_details(mesh: &Mesh, nodal: &[f64]) -> Result<DetailVectors, MeshError> {
    if nodal.len() != mesh.n_nodes() {
        return Err(MeshError::Corrupt(format!(
            "nodal vector length {} does not match {} nodes",
            nodal.len(),
            mesh.n_nodes()
        )));
    }
    let mut hanging = Vec::new();
    let mut d = Vec::new();
    // Conforming interpolant: hanging values replaced in id order, so parent
    // values are final before any child reads them.
    let mut interp = nodal.to_vec();
    for i in 0..mesh.n_nodes() {
        let node = crate::mesh::NodeId(i as u32);
        if !mesh.is_hanging(node)? {
            continue;
        }
        let [p, q] = mesh
            .node(node)?
            .parents
            .ok_or_else(|| MeshError::Corrupt(format!("hanging node {node} without parents")))?;
        hanging.push(node);
        d.push(nodal[i] - 0.5 * (nodal[p.idx()] + nodal[q.idx()]));
        interp[i] = 0.5 * (interp[p.idx()] + interp[q.idx()]);
    }
    let delta = hanging.iter().map(|n| nodal[n.idx()] - interp[n.idx()]).collect();
    Ok(DetailVectors { hanging, d, delta })
}

/// Coefficient and load callables for oscillation measurement, evaluated
/// pointwise; the discrete data are their element averages.
pub struct ProblemData<'a> {
    pub a: &'a dyn Fn(Point) -> [f64; 3],
    pub c: &'a dyn Fn(Point) -> f64,
    pub f: &'a dyn Fn(Point) -> f64,
}

/// Quadrature accuracy for oscillation integrals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuadOrder {
    Degree2,
    #[default]
    Degree5,
}

impl QuadOrder {
    fn rule(self) -> TriQuadRule {
        match self {
            QuadOrder::Degree2 => TRI_MIDPOINT_RULE,
            QuadOrder::Degree5 => TRI_SEVEN_POINT_RULE,
        }
    }
}

/// Squared data oscillation of one element:
/// `h_E^2 ||f - f_E||^2 + ||(A - A_E) grad Pu||^2 + ||(c - c_E) Pu||^2`,
/// with element averages computed by the same quadrature rule.
pub fn oscillation(
    mesh: &Mesh,
    e: ElementId,
    nodal: &[f64],
    data: &ProblemData<'_>,
    order: QuadOrder,
) -> Result<f64, MeshError> {
    let boundary = mesh.element_boundary(e)?;
    let basis = pi_nabla_basis(mesh, e)?;
    let mut p = LinearPoly { anchor: basis[0].anchor, value: 0.0, grad: [0.0, 0.0] };
    for (b, &node) in basis.iter().zip(&boundary.nodes) {
        let v = nodal[node.idx()];
        p.value += v * b.value;
        p.grad[0] += v * b.grad[0];
        p.grad[1] += v * b.grad[1];
    }
    let vp = mesh.vertex_positions(e)?;
    let area = tri_signed_area(vp[0], vp[1], vp[2]).abs();
    let rule = order.rule();

    let f_mean = rule.integrate(vp[0], vp[1], vp[2], |x| (data.f)(x)) / area;
    let c_mean = rule.integrate(vp[0], vp[1], vp[2], |x| (data.c)(x)) / area;
    let mut a_mean = [0.0; 3];
    for k in 0..3 {
        a_mean[k] = rule.integrate(vp[0], vp[1], vp[2], |x| (data.a)(x)[k]) / area;
    }

    let f_term = rule.integrate(vp[0], vp[1], vp[2], |x| {
        let r = (data.f)(x) - f_mean;
        r * r
    });
    let a_term = rule.integrate(vp[0], vp[1], vp[2], |x| {
        let ax = (data.a)(x);
        let da = [ax[0] - a_mean[0], ax[1] - a_mean[1], ax[2] - a_mean[2]];
        let v = sym_apply(da, p.grad);
        dot(v, v)
    });
    let c_term = rule.integrate(vp[0], vp[1], vp[2], |x| {
        let r = ((data.c)(x) - c_mean) * p.eval(x);
        r * r
    });
    Ok(area * f_term + a_term + c_term)
}
