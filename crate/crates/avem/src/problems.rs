//! Built-in benchmark problems: initial meshes, coefficient data, and exact
//! solutions where one is known in closed form.
//!
//! Two model problems are provided:
//!
//! * [`problem_lshape`]: the Laplacian with unit load on an L-shaped domain.
//!   The reentrant corner at the origin produces a well-known gradient
//!   singularity; no closed-form solution is tracked.
//! * [`problem_kellogg`]: a checkerboard diffusion problem on the square
//!   `(-1,1)^2` whose piecewise-constant coefficient jumps across the axes.
//!   The exact solution `r^delta * nu(alpha)` is known and exposed through
//!   [`KelloggExact`], enabling error tracking in the adaptive driver.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::sync::OnceLock;

use crate::driver::ExactSolution;
use crate::geometry::{gauss_legendre_integrate, Point};
use crate::mesh::{build_initial_mesh, ElementData, InitialElement, InitialNode, Mesh, MeshError};

/// Diffusion coefficient used in the first and third quadrants of the
/// checkerboard problem (the other two quadrants use 1). The value is tuned
/// so that the interface exponent of the exact solution is exactly
/// [`KELLOGG_DELTA`].
pub const KELLOGG_A_ODD: f64 = 161.447_638_797_588_1;

/// Radial exponent of the checkerboard exact solution `r^delta * nu(alpha)`.
/// The solution is barely in `H^1`: its gradient behaves like `r^(delta-1)`.
pub const KELLOGG_DELTA: f64 = 0.1;

/// Angular phase parameter of the checkerboard exact solution.
pub const KELLOGG_RHO: f64 = FRAC_PI_4;

/// Angular phase parameter of the checkerboard exact solution.
pub const KELLOGG_SIGMA: f64 = -14.922_565_104_551_52;

/// Initial mesh for the L-shaped benchmark: the square `(-1,1)^2` with the
/// closed quadrant `[0,1] x [-1,0]` removed, triangulated by splitting each
/// of the three remaining unit squares along the diagonal that ends at the
/// reentrant corner. Data: `A = I`, `c = 0`, `f = 1`, homogeneous Dirichlet.
pub fn problem_lshape() -> Result<Mesh, MeshError> {
    let unit = ElementData { a: [1.0, 0.0, 1.0], c: 0.0, f: 1.0 };
    let nodes: Vec<InitialNode> = [
        [-1.0, -1.0],
        [0.0, -1.0],
        [0.0, 0.0],
        [1.0, 0.0],
        [1.0, 1.0],
        [0.0, 1.0],
        [-1.0, 1.0],
        [-1.0, 0.0],
    ]
    .into_iter()
    .map(|pos| InitialNode { pos, on_boundary: true })
    .collect();
    let elements = [[0, 1, 2], [0, 2, 7], [2, 3, 4], [2, 4, 5], [2, 5, 6], [2, 6, 7]]
        .into_iter()
        .map(|vertices| InitialElement { vertices, newest: None, data: unit })
        .collect::<Vec<_>>();
    build_initial_mesh(&nodes, &elements)
}

/// Initial mesh for the checkerboard benchmark together with its exact
/// solution. The square `(-1,1)^2` is cut into four unit quadrants, each
/// split along the diagonal through the origin, so every root triangle has
/// the coefficient-cross point as a vertex. Data: `A = a(x) I` with
/// `a = KELLOGG_A_ODD` where `x*y > 0` and `a = 1` elsewhere, `c = 0`,
/// `f = 0`; the Dirichlet trace of the exact solution closes the problem.
pub fn problem_kellogg() -> Result<(Mesh, KelloggExact), MeshError> {
    let material = |odd: bool| ElementData {
        a: if odd { [KELLOGG_A_ODD, 0.0, KELLOGG_A_ODD] } else { [1.0, 0.0, 1.0] },
        c: 0.0,
        f: 0.0,
    };
    let mut nodes = vec![InitialNode { pos: [0.0, 0.0], on_boundary: false }];
    nodes.extend(
        [
            [1.0, 0.0],
            [1.0, 1.0],
            [0.0, 1.0],
            [-1.0, 1.0],
            [-1.0, 0.0],
            [-1.0, -1.0],
            [0.0, -1.0],
            [1.0, -1.0],
        ]
        .into_iter()
        .map(|pos| InitialNode { pos, on_boundary: true }),
    );
    // Quadrant pattern (numbered counterclockwise from the positive x-axis):
    // elements 0-1 sit in quadrant 1, 2-3 in quadrant 2, and so on.
    let elements = [
        ([0, 1, 2], true),
        ([0, 2, 3], true),
        ([0, 3, 4], false),
        ([0, 4, 5], false),
        ([0, 5, 6], true),
        ([0, 6, 7], true),
        ([0, 7, 8], false),
        ([0, 8, 1], false),
    ]
    .into_iter()
    .map(|(vertices, odd)| InitialElement { vertices, newest: None, data: material(odd) })
    .collect::<Vec<_>>();
    let mesh = build_initial_mesh(&nodes, &elements)?;
    Ok((mesh, KelloggExact::new()))
}

/// Exact solution of the checkerboard diffusion problem.
///
/// In polar coordinates centred at the coefficient cross,
/// `u(r, alpha) = r^delta * nu(alpha)` where `nu` is a piecewise cosine
/// chosen so that `u` is continuous and the conormal flux `a du/dn` is
/// continuous across the four interface rays (the coordinate half-axes).
/// The four branches share the form `k * cos((alpha - s) * delta)` with
/// per-quadrant constants `k`, `s`.
pub struct KelloggExact {
    /// Branch constants `(k, s)` for quadrants 1..=4.
    branch: [(f64, f64); 4],
    seminorm: OnceLock<f64>,
}

impl KelloggExact {
    pub fn new() -> Self {
        let (d, r, s) = (KELLOGG_DELTA, KELLOGG_RHO, KELLOGG_SIGMA);
        KelloggExact {
            branch: [
                (((FRAC_PI_2 - s) * d).cos(), FRAC_PI_2 - r),
                ((r * d).cos(), PI - s),
                ((s * d).cos(), PI + r),
                (((FRAC_PI_2 - r) * d).cos(), 1.5 * PI + s),
            ],
            seminorm: OnceLock::new(),
        }
    }

    /// Scalar diffusion coefficient at `p`; on the interface itself the
    /// first/third-quadrant value is reported (the coefficient is only ever
    /// sampled at interior quadrature points, where the choice is moot).
    pub fn coefficient(&self, p: Point) -> f64 {
        if p[0] * p[1] > 0.0 {
            KELLOGG_A_ODD
        } else {
            1.0
        }
    }

    /// Angular factor and its derivative, `(nu(alpha), nu'(alpha))`, for
    /// `alpha` in `[0, 2*pi)`.
    fn nu(&self, alpha: f64) -> (f64, f64) {
        let q = ((alpha / FRAC_PI_2) as usize).min(3);
        let (k, s) = self.branch[q];
        let t = (alpha - s) * KELLOGG_DELTA;
        (k * t.cos(), -k * KELLOGG_DELTA * t.sin())
    }

    /// Polar angle of `p` in `[0, 2*pi)`.
    fn angle(p: Point) -> f64 {
        let a = p[1].atan2(p[0]);
        if a < 0.0 {
            a + 2.0 * PI
        } else {
            a
        }
    }

    /// Distance from the origin to the boundary of `(-1,1)^2` along `alpha`.
    fn boundary_radius(alpha: f64) -> f64 {
        1.0 / alpha.cos().abs().max(alpha.sin().abs())
    }

    /// Integrand of the 1-D angular reduction of the squared gradient
    /// seminorm: integrating `|grad u|^2 = r^(2*delta-2) * (delta^2 nu^2 +
    /// nu'^2)` radially over the square gives
    /// `(delta^2 nu^2 + nu'^2) * R(alpha)^(2*delta) / (2*delta)`.
    fn seminorm_integrand(&self, alpha: f64) -> f64 {
        let (nu, dnu) = self.nu(alpha);
        let angular = KELLOGG_DELTA * KELLOGG_DELTA * nu * nu + dnu * dnu;
        angular * Self::boundary_radius(alpha).powf(2.0 * KELLOGG_DELTA)
    }
}

impl Default for KelloggExact {
    fn default() -> Self {
        Self::new()
    }
}

impl ExactSolution for KelloggExact {
    fn value(&self, p: Point) -> f64 {
        let r = p[0].hypot(p[1]);
        if r == 0.0 {
            return 0.0;
        }
        let (nu, _) = self.nu(Self::angle(p));
        r.powf(KELLOGG_DELTA) * nu
    }

    fn gradient(&self, p: Point) -> Point {
        let r = p[0].hypot(p[1]);
        if r == 0.0 {
            // The gradient blows up like r^(delta-1); poison accidental use.
            return [f64::NAN, f64::NAN];
        }
        let alpha = Self::angle(p);
        let (nu, dnu) = self.nu(alpha);
        let radial = KELLOGG_DELTA * nu;
        let scale = r.powf(KELLOGG_DELTA - 1.0);
        let (sin, cos) = alpha.sin_cos();
        [scale * (radial * cos - dnu * sin), scale * (radial * sin + dnu * cos)]
    }

    fn h1_seminorm(&self) -> f64 {
        *self.seminorm.get_or_init(|| {
            // The angular integrand is analytic inside each octant but has
            // kinks at multiples of pi/4 (branch seams and square corners),
            // so integrate octant by octant.
            let mut total = 0.0;
            for k in 0..8 {
                let lo = k as f64 * FRAC_PI_4;
                total += gauss_legendre_integrate(lo, lo + FRAC_PI_4, 64, |a| {
                    self.seminorm_integrand(a)
                });
            }
            (total / (2.0 * KELLOGG_DELTA)).sqrt()
        })
    }

    fn singular_vertex(&self) -> Option<Point> {
        Some([0.0, 0.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::adaptive_simpson;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn lshape_initial_mesh_shape() {
        let mesh = problem_lshape().unwrap();
        assert_eq!(mesh.nodes().len(), 8);
        assert_eq!(mesh.elements().len(), 6);
        mesh.audit_structure().unwrap();
        mesh.audit_geometry().unwrap();
        assert_abs_diff_eq!(mesh.domain_area(), 3.0, epsilon = 1e-14);
        // Every root refinement edge must be a square diagonal ending at the
        // reentrant corner, so the first bisections cut toward it.
        for id in mesh.active_elements() {
            let (a, b, _) = mesh.element(id).unwrap().refinement_edge();
            let (pa, pb) = (mesh.node(a).unwrap().pos, mesh.node(b).unwrap().pos);
            assert_abs_diff_eq!(crate::geometry::dist(pa, pb), 2f64.sqrt(), epsilon = 1e-14);
            assert!(pa == [0.0, 0.0] || pb == [0.0, 0.0]);
        }
    }

    #[test]
    fn kellogg_initial_mesh_shape() {
        let (mesh, _) = problem_kellogg().unwrap();
        assert_eq!(mesh.nodes().len(), 9);
        assert_eq!(mesh.elements().len(), 8);
        mesh.audit_structure().unwrap();
        mesh.audit_geometry().unwrap();
        assert_abs_diff_eq!(mesh.domain_area(), 4.0, epsilon = 1e-14);
        assert!(!mesh.node(crate::mesh::NodeId(0)).unwrap().on_boundary);
        for id in mesh.active_elements() {
            let e = mesh.element(id).unwrap();
            // Each root triangle touches the cross point and carries the
            // coefficient of the quadrant containing its centroid.
            assert!(e.vertices.contains(&crate::mesh::NodeId(0)));
            let c = crate::geometry::tri_centroid(
                mesh.node(e.vertices[0]).unwrap().pos,
                mesh.node(e.vertices[1]).unwrap().pos,
                mesh.node(e.vertices[2]).unwrap().pos,
            );
            let odd = c[0] * c[1] > 0.0;
            assert_eq!(e.data.a[0], if odd { KELLOGG_A_ODD } else { 1.0 });
            assert_eq!(e.data.a[2], e.data.a[0]);
            let (a, b, _) = e.refinement_edge();
            let on_cross = |n: crate::mesh::NodeId| n == crate::mesh::NodeId(0);
            assert!(on_cross(a) || on_cross(b));
        }
    }

    #[test]
    fn kellogg_value_continuous_across_interfaces() {
        let exact = KelloggExact::new();
        // At each seam the two adjacent branches must produce the same nu;
        // the branch constants are built to make the products agree exactly.
        for q in 0..4 {
            let seam = (q as f64 + 1.0) * FRAC_PI_2;
            let (k_l, s_l) = exact.branch[q];
            let (k_r, s_r) = exact.branch[(q + 1) % 4];
            let seam_r = if q == 3 { 0.0 } else { seam };
            let left = k_l * ((seam - s_l) * KELLOGG_DELTA).cos();
            let right = k_r * ((seam_r - s_r) * KELLOGG_DELTA).cos();
            assert_relative_eq!(left, right, max_relative = 1e-12);
        }
        // and through the public interface at matched cartesian points
        for &r in &[1e-3, 0.1, 0.9] {
            let eps = 1e-13;
            let above = exact.value([eps * r, r]);
            let below = exact.value([-eps * r, r]);
            assert_relative_eq!(above, below, max_relative = 1e-9);
        }
    }

    #[test]
    fn kellogg_conormal_flux_continuous() {
        let exact = KelloggExact::new();
        // Across the seam at angle q*pi/2 the conormal direction is e_alpha,
        // so flux continuity reads a_left * nu'(seam-) == a_right * nu'(seam+).
        let coeff = [KELLOGG_A_ODD, 1.0, KELLOGG_A_ODD, 1.0];
        let mut magnitude = 0.0f64;
        for q in 0..4 {
            let seam = (q as f64 + 1.0) * FRAC_PI_2;
            let (k_l, s_l) = exact.branch[q];
            let (k_r, s_r) = exact.branch[(q + 1) % 4];
            let seam_r = if q == 3 { 0.0 } else { seam };
            let d = KELLOGG_DELTA;
            let left = coeff[q] * (-k_l * d * ((seam - s_l) * d).sin());
            let right = coeff[(q + 1) % 4] * (-k_r * d * ((seam_r - s_r) * d).sin());
            assert_relative_eq!(left, right, max_relative = 1e-8);
            magnitude = magnitude.max(left.abs());
        }
        // The flux is small but far from roundoff, so the match means something.
        assert!(magnitude > 0.01);
    }

    #[test]
    fn kellogg_gradient_matches_finite_differences() {
        let exact = KelloggExact::new();
        let probes = [[0.3, 0.4], [-0.5, 0.2], [-0.3, -0.7], [0.6, -0.1], [0.01, 0.02]];
        for p in probes {
            let g = exact.gradient(p);
            let h = 1e-6 * p[0].hypot(p[1]);
            let gx = (exact.value([p[0] + h, p[1]]) - exact.value([p[0] - h, p[1]])) / (2.0 * h);
            let gy = (exact.value([p[0], p[1] + h]) - exact.value([p[0], p[1] - h])) / (2.0 * h);
            assert_relative_eq!(g[0], gx, max_relative = 1e-6, epsilon = 1e-9);
            assert_relative_eq!(g[1], gy, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn kellogg_seminorm_matches_adaptive_quadrature() {
        let exact = KelloggExact::new();
        let fast = exact.h1_seminorm();
        assert_eq!(fast, exact.h1_seminorm(), "cache must be stable");
        let mut total = 0.0;
        for k in 0..8 {
            let lo = k as f64 * FRAC_PI_4;
            total += adaptive_simpson(&|a| exact.seminorm_integrand(a), lo, lo + FRAC_PI_4, 1e-11);
        }
        let slow = (total / (2.0 * KELLOGG_DELTA)).sqrt();
        assert_relative_eq!(fast, slow, max_relative = 1e-8);
        // Frozen value so regressions in either quadrature path are visible.
        assert_relative_eq!(fast, KELLOGG_SEMINORM_FROZEN, max_relative = 1e-10);
    }

    /// Reference value of the exact gradient seminorm, recorded from the
    /// cross-checked quadratures above.
    const KELLOGG_SEMINORM_FROZEN: f64 = 0.40075889998129666;

    #[test]
    fn kellogg_solution_finite_away_from_origin() {
        let exact = KelloggExact::new();
        assert_eq!(exact.value([0.0, 0.0]), 0.0);
        assert!(exact.gradient([0.0, 0.0])[0].is_nan());
        assert_eq!(exact.singular_vertex(), Some([0.0, 0.0]));
        // The angular factor changes sign inside quadrants; only finiteness
        // and decay toward the cross point are generic.
        for &r in &[1e-12, 1e-6, 1.0] {
            let v = exact.value([r, r]);
            assert!(v.is_finite() && v != 0.0);
        }
        assert!(exact.value([1e-12, 1e-12]).abs() < exact.value([1.0, 1.0]).abs());
    }
}
