//! The adaptive loop: solve, estimate, record, mark, refine. Each round
//! assembles the stabilized system on the current mesh, solves it with a
//! warm-started conjugate gradient, evaluates the error indicators, and
//! either stops (estimator small enough, or the mesh large enough) or
//! Dörfler-marks and refines under the nonconformity bound.

use serde::Serialize;

use crate::assembly::{
    assemble_with_dirichlet, interpolate_nodal, pi_nabla, DirichletData, DofMap,
};
use crate::estimator::{compute_indicators, stab_ratio};
use crate::geometry::{dot, graded_tri_cells, sub, Point, TRI_SEVEN_POINT_RULE};
use crate::mesh::{Mesh, MeshError};
use crate::refine::{dorfler_mark, refine};
use crate::solver::{cg_solve, CgConfig, SolveError};

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("linear solve failed: {0}")]
    Solve(#[from] SolveError),
    #[error("invalid adaptive configuration: {0}")]
    Config(String),
}

/// A known exact solution, used for Dirichlet traces, error measurement and
/// the contraction monitor.
pub trait ExactSolution {
    fn value(&self, x: Point) -> f64;
    fn gradient(&self, x: Point) -> Point;
    /// H1 seminorm over the domain, the denominator of relative errors.
    fn h1_seminorm(&self) -> f64;
    /// Point where the gradient blows up, if any; error quadrature grades
    /// toward it on elements that touch it.
    fn singular_vertex(&self) -> Option<Point> {
        None
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptConfig {
    /// Dörfler marking fraction in (0, 1].
    pub theta: f64,
    /// Nonconformity bound enforced after each refinement; 0 keeps meshes
    /// conforming, reproducing first-order finite elements.
    pub lambda_max: u32,
    /// Stabilization weight.
    pub gamma: f64,
    /// Stop once the node count reaches this.
    pub n_max: Option<usize>,
    /// Stop once the estimator drops to this.
    pub eps: Option<f64>,
    /// Safety bound on adaptive rounds.
    pub max_iterations: usize,
    pub cg: CgConfig,
    /// Weight of the squared estimator in the contraction quantity; `None`
    /// calibrates it from the first round as `0.01 e_1^2 / eta_1^2`.
    pub beta: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            theta: 0.5,
            lambda_max: 10,
            gamma: 1.0,
            n_max: None,
            eps: None,
            max_iterations: 1000,
            cg: CgConfig::default(),
            beta: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), DriverError> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(DriverError::Config(format!(
                "marking fraction {} outside (0, 1]",
                self.theta
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(DriverError::Config(format!("stabilization weight {}", self.gamma)));
        }
        if self.n_max.is_none() && self.eps.is_none() {
            return Err(DriverError::Config(
                "no stopping criterion: set a node budget, a tolerance, or both".into(),
            ));
        }
        if let Some(eps) = self.eps {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(DriverError::Config(format!("tolerance {eps} must be positive")));
            }
        }
        if let Some(n) = self.n_max {
            if n == 0 {
                return Err(DriverError::Config("node budget must be positive".into()));
            }
        }
        if self.max_iterations == 0 {
            return Err(DriverError::Config("iteration bound must be positive".into()));
        }
        if let Some(beta) = self.beta {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(DriverError::Config(format!("contraction weight {beta}")));
            }
        }
        Ok(())
    }
}

/// One row of the adaptive history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdaptRecord {
    /// Adaptive round, starting at 1.
    pub iter: usize,
    /// Unknown count: every mesh node carries one.
    pub n_dofs: usize,
    /// Active elements.
    pub n_elements: usize,
    /// Mesh nodes (equals `n_dofs`; kept for census output).
    pub n_vertices: usize,
    /// Nonconformity index of the mesh.
    pub lambda_max: u32,
    /// Squared estimator, summed over elements.
    pub eta2: f64,
    /// Stabilization energy of the solution, unweighted.
    pub stab: f64,
    /// `gamma^2 stab / eta2`.
    pub ratio: f64,
    /// Relative H1-like error against the exact solution, when known.
    pub h1_err: Option<f64>,
    /// Contraction quantity `e^2 + beta eta^2`, when an exact solution and
    /// a weight are available.
    pub contraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StopReason {
    /// `eta <= eps`.
    EstimatorBelowTolerance,
    /// Node count reached the budget.
    ReachedSizeLimit,
    /// The estimator vanished identically; nothing left to refine.
    EstimatorZero,
    /// Safety iteration bound hit before any criterion fired.
    IterationLimit,
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub records: Vec<AdaptRecord>,
    pub mesh: Mesh,
    /// Final solution as a full nodal vector.
    pub solution: Vec<f64>,
    pub stop: StopReason,
}

/// Extends a nodal vector from a coarser state of the same mesh: values at
/// nodes created since are filled with the average of their parents, in
/// creation order so chains resolve. Used to warm start the solver.
pub fn prolong(mesh: &Mesh, old: &[f64]) -> Result<Vec<f64>, MeshError> {
    if old.len() > mesh.n_nodes() {
        return Err(MeshError::Corrupt(format!(
            "nodal vector length {} exceeds node count {}",
            old.len(),
            mesh.n_nodes()
        )));
    }
    let mut out = Vec::with_capacity(mesh.n_nodes());
    out.extend_from_slice(old);
    for i in old.len()..mesh.n_nodes() {
        let node = mesh.nodes()[i];
        let [p, q] = node
            .parents
            .ok_or_else(|| MeshError::Corrupt(format!("node n{i} created without parents")))?;
        out.push(0.5 * (out[p.idx()] + out[q.idx()]));
    }
    Ok(out)
}

/// Relative H1-like distance between the exact solution and the elementwise
/// elliptic projections of the discrete one. Elements touching the singular
/// vertex are integrated on cells graded toward it.
pub fn h1_like_error(
    mesh: &Mesh,
    nodal: &[f64],
    exact: &dyn ExactSolution,
) -> Result<f64, MeshError> {
    const GRADING_LEVELS: u32 = 4;
    let singular = exact.singular_vertex();
    let mut acc = 0.0;
    for e in mesh.active_elements() {
        let boundary = mesh.element_boundary(e)?;
        let values: Vec<f64> = boundary.nodes.iter().map(|n| nodal[n.idx()]).collect();
        let g = pi_nabla(mesh, e, &values)?.grad;
        let vp = mesh.vertex_positions(e)?;
        let integrand = |x: Point| {
            let d = sub(exact.gradient(x), g);
            dot(d, d)
        };
        let apex = singular.and_then(|s| vp.iter().position(|&v| v == s));
        match apex {
            Some(k) => {
                for cell in
                    graded_tri_cells(vp[k], vp[(k + 1) % 3], vp[(k + 2) % 3], GRADING_LEVELS)
                {
                    acc += TRI_SEVEN_POINT_RULE.integrate(cell[0], cell[1], cell[2], integrand);
                }
            }
            None => acc += TRI_SEVEN_POINT_RULE.integrate(vp[0], vp[1], vp[2], integrand),
        }
    }
    Ok(acc.sqrt() / exact.h1_seminorm())
}

/// Contraction factors `q_{k+1} / q_k` from consecutive records carrying the
/// contraction quantity.
pub fn contraction_monitor(records: &[AdaptRecord]) -> Vec<f64> {
    records
        .windows(2)
        .filter_map(|w| match (w[0].contraction, w[1].contraction) {
            (Some(a), Some(b)) if a > 0.0 => Some(b / a),
            _ => None,
        })
        .collect()
}

/// Runs the adaptive loop to completion. The observer sees every round
/// right after its record is produced (mesh, full nodal solution, record).
pub fn galerkin_loop(
    mut mesh: Mesh,
    cfg: &AdaptConfig,
    exact: Option<&dyn ExactSolution>,
    mut observer: impl FnMut(&Mesh, &[f64], &AdaptRecord),
) -> Result<AdaptOutcome, DriverError> {
    cfg.validate()?;
    let mut records: Vec<AdaptRecord> = Vec::new();
    let mut beta = cfg.beta;
    let mut warm: Option<Vec<f64>> = None;

    loop {
        let iter = records.len() + 1;

        // Solve. Dirichlet data comes from the exact trace when available.
        let dirichlet = match exact {
            Some(ex) => DirichletData::Values(interpolate_nodal(&mesh, |p| ex.value(p))),
            None => DirichletData::Homogeneous,
        };
        let (sys, map) = assemble_with_dirichlet(&mesh, cfg.gamma, &dirichlet)?;
        let x0 = warm.as_ref().map(|w| restrict(&map, w));
        let out = cg_solve(&sys, x0.as_deref(), &cfg.cg)?;
        let nodal = map.expand(&out.x, &dirichlet);

        // Estimate and record.
        let ind = compute_indicators(&mesh, &nodal)?;
        let eta2 = ind.eta2_total();
        let stab = ind.stab_total();
        let h1_err = match exact {
            Some(ex) => Some(h1_like_error(&mesh, &nodal, ex)?),
            None => None,
        };
        if iter == 1 && beta.is_none() {
            if let Some(e1) = h1_err {
                if eta2 > 0.0 && e1 > 0.0 {
                    beta = Some(0.01 * e1 * e1 / eta2);
                }
            }
        }
        let contraction = match (h1_err, beta) {
            (Some(e), Some(b)) => Some(e * e + b * eta2),
            _ => None,
        };
        let record = AdaptRecord {
            iter,
            n_dofs: mesh.n_nodes(),
            n_elements: mesh.n_active_elements(),
            n_vertices: mesh.n_nodes(),
            lambda_max: mesh.max_index()?,
            eta2,
            stab,
            ratio: stab_ratio(eta2, stab, cfg.gamma)?,
            h1_err,
            contraction,
        };
        observer(&mesh, &nodal, &record);
        records.push(record);

        // Stop checks, in priority order.
        let eta = eta2.sqrt();
        let stop = if cfg.eps.is_some_and(|eps| eta <= eps) {
            Some(StopReason::EstimatorBelowTolerance)
        } else if cfg.n_max.is_some_and(|n| mesh.n_nodes() >= n) {
            Some(StopReason::ReachedSizeLimit)
        } else if eta2 == 0.0 {
            Some(StopReason::EstimatorZero)
        } else if iter >= cfg.max_iterations {
            Some(StopReason::IterationLimit)
        } else {
            None
        };
        if let Some(stop) = stop {
            return Ok(AdaptOutcome { records, mesh, solution: nodal, stop });
        }

        // Mark and refine, then carry the solution over as a warm start.
        let marked = dorfler_mark(&ind.marking_pairs(), cfg.theta)?;
        refine(&mut mesh, &marked, cfg.lambda_max)?;
        warm = Some(prolong(&mesh, &nodal)?);
    }
}

/// Free-DoF restriction of a full nodal vector.
fn restrict(map: &DofMap, full: &[f64]) -> Vec<f64> {
    (0..map.n_dofs()).map(|d| full[map.node(d as u32).idx()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::test_meshes::two_tri_square;
    use crate::mesh::ElementData;
    use approx::assert_relative_eq;

    struct Affine {
        coeffs: [f64; 3],
        domain_area: f64,
    }

    impl ExactSolution for Affine {
        fn value(&self, x: Point) -> f64 {
            self.coeffs[0] + self.coeffs[1] * x[0] + self.coeffs[2] * x[1]
        }
        fn gradient(&self, _: Point) -> Point {
            [self.coeffs[1], self.coeffs[2]]
        }
        fn h1_seminorm(&self) -> f64 {
            (self.coeffs[1] * self.coeffs[1] + self.coeffs[2] * self.coeffs[2]).sqrt()
                * self.domain_area.sqrt()
        }
    }

    #[test]
    fn config_requires_a_stopping_criterion() {
        let cfg = AdaptConfig::default();
        assert!(matches!(cfg.validate(), Err(DriverError::Config(_))));
        let ok = AdaptConfig { n_max: Some(100), ..Default::default() };
        ok.validate().unwrap();
        let bad_eps = AdaptConfig { eps: Some(0.0), ..Default::default() };
        assert!(bad_eps.validate().is_err());
    }

    #[test]
    fn affine_solution_stops_immediately() {
        let data = ElementData { a: [1.5, 0.2, 1.0], c: 0.0, f: 0.0 };
        let mesh = two_tri_square(data);
        let exact = Affine { coeffs: [0.4, -1.0, 2.0], domain_area: 1.0 };
        let cfg = AdaptConfig {
            eps: Some(1e-8),
            cg: CgConfig { tol_rel: 1e-13, max_iter: None },
            ..Default::default()
        };
        let out = galerkin_loop(mesh, &cfg, Some(&exact), |_, _, _| {}).unwrap();
        assert_eq!(out.stop, StopReason::EstimatorBelowTolerance);
        assert_eq!(out.records.len(), 1);
        let rec = out.records[0];
        assert!(rec.eta2.sqrt() <= 1e-8);
        assert!(rec.h1_err.unwrap() < 1e-10, "error {}", rec.h1_err.unwrap());
        for (i, node) in out.mesh.nodes().iter().enumerate() {
            assert_relative_eq!(
                out.solution[i],
                exact.value(node.pos),
                epsilon = 1e-10,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn poisson_square_run_is_deterministic_and_sane() {
        let data = ElementData { a: [1.0, 0.0, 1.0], c: 0.0, f: 1.0 };
        let cfg = AdaptConfig { n_max: Some(250), lambda_max: 2, ..Default::default() };
        let run = || {
            let mut snapshots = 0usize;
            let out = galerkin_loop(two_tri_square(data), &cfg, None, |mesh, nodal, rec| {
                snapshots += 1;
                assert_eq!(nodal.len(), mesh.n_nodes());
                assert_eq!(rec.n_dofs, mesh.n_nodes());
            })
            .unwrap();
            assert_eq!(snapshots, out.records.len());
            out
        };
        let a = run();
        let b = run();
        assert_eq!(a.stop, StopReason::ReachedSizeLimit);
        assert_eq!(a.records, b.records, "two identical runs must agree bitwise");
        assert_eq!(a.solution, b.solution);
        assert!(a.records.len() > 3);
        assert!(a.mesh.n_nodes() >= 250);
        for rec in &a.records {
            assert!(rec.lambda_max <= 2);
            assert!(rec.ratio.is_finite());
            assert!(rec.h1_err.is_none());
        }
        // The estimator must come down as the mesh grows.
        let first = a.records.first().unwrap().eta2;
        let last = a.records.last().unwrap().eta2;
        assert!(last < 0.5 * first, "eta^2 {first} -> {last}");
        a.mesh.audit_structure().unwrap();
        a.mesh.audit_geometry().unwrap();
        // Homogeneous data: solution vanishes on the boundary, positive
        // inside (discrete maximum principle holds for this setup).
        for (i, node) in a.mesh.nodes().iter().enumerate() {
            if node.on_boundary {
                assert_eq!(a.solution[i], 0.0);
            }
        }
    }

    #[test]
    fn prolong_fills_chains() {
        let data = ElementData { a: [1.0, 0.0, 1.0], c: 0.0, f: 1.0 };
        let mut mesh = two_tri_square(data);
        let old = vec![1.0, 2.0, 3.0, 4.0];
        crate::refine::bisection(&mut mesh, crate::mesh::ElementId(0)).unwrap();
        let children = mesh.elements()[0].children.unwrap();
        crate::refine::bisection(&mut mesh, children[0]).unwrap();
        let new = prolong(&mesh, &old).unwrap();
        assert_eq!(new.len(), mesh.n_nodes());
        assert_eq!(&new[..4], &old[..]);
        for i in 4..mesh.n_nodes() {
            let [p, q] = mesh.nodes()[i].parents.unwrap();
            assert_eq!(new[i], 0.5 * (new[p.idx()] + new[q.idx()]));
        }
        assert!(prolong(&mesh, &vec![0.0; mesh.n_nodes() + 1]).is_err());
    }

    #[test]
    fn contraction_monitor_ratios() {
        let mk = |iter: usize, q: Option<f64>| AdaptRecord {
            iter,
            n_dofs: 0,
            n_elements: 0,
            n_vertices: 0,
            lambda_max: 0,
            eta2: 0.0,
            stab: 0.0,
            ratio: 0.0,
            h1_err: None,
            contraction: q,
        };
        let recs = [mk(1, Some(4.0)), mk(2, Some(2.0)), mk(3, Some(1.0)), mk(4, None)];
        assert_eq!(contraction_monitor(&recs), vec![0.5, 0.5]);
        assert!(contraction_monitor(&recs[3..]).is_empty());
    }
}
