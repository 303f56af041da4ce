//! Small planar-geometry and quadrature helpers shared by the mesh,
//! assembly and estimator layers.
//!
//! Points are plain `[f64; 2]` so they serialize naturally and stay cheap
//! to copy in the hot loops.

/// A point or vector in the plane.
pub type Point = [f64; 2];

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn scale(s: f64, a: Point) -> Point {
    [s * a[0], s * a[1]]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

/// Midpoint of two points, computed as `0.5 * (a + b)` per coordinate so the
/// result is bit-reproducible wherever it is recomputed.
#[inline]
pub fn midpoint(a: Point, b: Point) -> Point {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

/// Signed area of the triangle `(a, b, c)`; positive for counterclockwise
/// orientation.
#[inline]
pub fn tri_signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * cross(sub(b, a), sub(c, a))
}

#[inline]
pub fn tri_centroid(a: Point, b: Point, c: Point) -> Point {
    [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
}

/// Apply a symmetric 2x2 matrix stored as `[m11, m12, m22]` to a vector.
#[inline]
pub fn sym_apply(m: [f64; 3], v: Point) -> Point {
    [m[0] * v[0] + m[1] * v[1], m[1] * v[0] + m[2] * v[1]]
}

/// A quadrature rule on the reference triangle, stored as barycentric
/// coordinates with weights summing to one. Integrals are approximated as
/// `|T| * sum_k w_k f(x_k)` with `x_k = l1*A + l2*B + l3*C`.
#[derive(Clone, Copy, Debug)]
pub struct TriQuadRule {
    pub points: &'static [([f64; 3], f64)],
    /// Highest total polynomial degree integrated exactly.
    pub degree: u32,
}

/// Three-midpoint rule, exact for quadratics.
pub const TRI_MIDPOINT_RULE: TriQuadRule = TriQuadRule {
    points: &[
        ([0.5, 0.5, 0.0], 1.0 / 3.0),
        ([0.0, 0.5, 0.5], 1.0 / 3.0),
        ([0.5, 0.0, 0.5], 1.0 / 3.0),
    ],
    degree: 2,
};

// Seven-point rule, exact for quintics. Two orbits around the centroid with
// parameters a = (6 ± sqrt(15)) / 21 and weights (155 ∓ sqrt(15)) / 1200.
const A_MINUS: f64 = 0.10128650732345633; // (6 - sqrt(15)) / 21
const A_PLUS: f64 = 0.47014206410511505; // (6 + sqrt(15)) / 21
const B_MINUS: f64 = 1.0 - 2.0 * A_MINUS;
const B_PLUS: f64 = 1.0 - 2.0 * A_PLUS;
const W_MINUS: f64 = 0.12593918054482716; // (155 - sqrt(15)) / 1200
const W_PLUS: f64 = 0.13239415278850616; // (155 + sqrt(15)) / 1200

pub const TRI_SEVEN_POINT_RULE: TriQuadRule = TriQuadRule {
    points: &[
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 9.0 / 40.0),
        ([B_MINUS, A_MINUS, A_MINUS], W_MINUS),
        ([A_MINUS, B_MINUS, A_MINUS], W_MINUS),
        ([A_MINUS, A_MINUS, B_MINUS], W_MINUS),
        ([B_PLUS, A_PLUS, A_PLUS], W_PLUS),
        ([A_PLUS, B_PLUS, A_PLUS], W_PLUS),
        ([A_PLUS, A_PLUS, B_PLUS], W_PLUS),
    ],
    degree: 5,
};

impl TriQuadRule {
    /// Integrate `f` over the triangle `(a, b, c)`.
    pub fn integrate(&self, a: Point, b: Point, c: Point, mut f: impl FnMut(Point) -> f64) -> f64 {
        let area = tri_signed_area(a, b, c).abs();
        let mut acc = 0.0;
        for &(l, w) in self.points {
            let x =
                [l[0] * a[0] + l[1] * b[0] + l[2] * c[0], l[0] * a[1] + l[1] * b[1] + l[2] * c[1]];
            acc += w * f(x);
        }
        area * acc
    }
}

/// Exact integral of the monomial `x^p y^q` over a triangle, by mapping to
/// the reference triangle and expanding the affine substitution. Intended
/// for validating quadrature rules and small closed-form checks, not for
/// hot paths.
pub fn tri_monomial_integral(v: [Point; 3], p: u32, q: u32) -> f64 {
    let jac = 2.0 * tri_signed_area(v[0], v[1], v[2]).abs();
    // x = x0 + dx1*u + dx2*w, y likewise, over {u, w >= 0, u + w <= 1}.
    let (x0, dx1, dx2) = (v[0][0], v[1][0] - v[0][0], v[2][0] - v[0][0]);
    let (y0, dy1, dy2) = (v[0][1], v[1][1] - v[0][1], v[2][1] - v[0][1]);
    let mut acc = 0.0;
    for (i, j, k, cx) in trinomial_terms(x0, dx1, dx2, p) {
        let _ = i;
        for (_, m, n, cy) in trinomial_terms(y0, dy1, dy2, q) {
            acc += cx * cy * ref_tri_monomial(j + m, k + n);
        }
    }
    jac * acc
}

/// Terms of `(c0 + c1*u + c2*w)^n` as `(i, j, k, coeff)` with `i+j+k = n`,
/// where `coeff` includes the multinomial factor and the powers of the `c`s.
fn trinomial_terms(c0: f64, c1: f64, c2: f64, n: u32) -> Vec<(u32, u32, u32, f64)> {
    let mut out = Vec::new();
    for i in 0..=n {
        for j in 0..=(n - i) {
            let k = n - i - j;
            let coeff =
                multinomial(n, i, j) * c0.powi(i as i32) * c1.powi(j as i32) * c2.powi(k as i32);
            out.push((i, j, k, coeff));
        }
    }
    out
}

fn multinomial(n: u32, i: u32, j: u32) -> f64 {
    factorial(n) / (factorial(i) * factorial(j) * factorial(n - i - j))
}

fn factorial(n: u32) -> f64 {
    (1..=n as u64).map(|k| k as f64).product()
}

/// `∫ u^a w^b du dw` over the reference triangle: `a! b! / (a + b + 2)!`.
fn ref_tri_monomial(a: u32, b: u32) -> f64 {
    factorial(a) * factorial(b) / factorial(a + b + 2)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on the
/// Legendre recurrence. Exact for polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() <= 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x.abs(); // negative half, ascending later
        weights[i] = w;
        nodes[n - 1 - i] = x.abs();
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrate `f` over `[a, b]` with an `n`-point Gauss-Legendre rule.
pub fn gauss_legendre_integrate(a: f64, b: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let (xs, ws) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in xs.iter().zip(&ws) {
        acc += w * f(mid + half * x);
    }
    half * acc
}

/// Adaptive Simpson quadrature with absolute tolerance, for test oracles.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Split the triangle `(apex, b, c)` into `2 * levels + 1` cells graded
/// geometrically toward `apex`: each level peels off the outer half (two
/// triangles) and recurses on the inner similar triangle. Used to integrate
/// integrands with a point singularity at `apex`.
pub fn graded_tri_cells(apex: Point, b: Point, c: Point, levels: u32) -> Vec<[Point; 3]> {
    let mut cells = Vec::with_capacity(2 * levels as usize + 1);
    let (mut b, mut c) = (b, c);
    for _ in 0..levels {
        let mb = midpoint(apex, b);
        let mc = midpoint(apex, c);
        cells.push([mb, b, c]);
        cells.push([mb, c, mc]);
        b = mb;
        c = mc;
    }
    cells.push([apex, b, c]);
    cells
}
