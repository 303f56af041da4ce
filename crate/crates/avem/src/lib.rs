//! Adaptive virtual element method for 2-D elliptic problems
//! `-div(A grad u) + c u = f` with Dirichlet boundary data.

pub mod assembly;
pub mod driver;
pub mod estimator;
pub mod geometry;
pub mod io;
pub mod mesh;
pub mod problems;
pub mod refine;
pub mod render;
pub mod solver;

pub use assembly::{
    assemble_with_dirichlet, interpolate_nodal, local_matrices, pi_nabla, pi_nabla_basis,
    stab_energy, DirichletData, DofMap, LinearPoly, LocalMatrices,
};
pub use driver::{
    contraction_monitor, galerkin_loop, h1_like_error, prolong, AdaptConfig, AdaptOutcome,
    AdaptRecord, DriverError, ExactSolution, StopReason,
};
pub use estimator::{
    compute_indicators, hierarchical_details, oscillation, stab_ratio, DetailVectors,
    LocalIndicators, ProblemData, QuadOrder,
};
pub use mesh::{
    build_initial_mesh, ElementBoundary, ElementData, ElementId, InitialElement, InitialNode, Mesh,
    MeshDto, MeshError, NodeId,
};
pub use problems::{
    problem_kellogg, problem_lshape, KelloggExact, KELLOGG_A_ODD, KELLOGG_DELTA, KELLOGG_RHO,
    KELLOGG_SIGMA,
};
pub use refine::{bisection, dorfler_mark, make_admissible, refine, MarkSet, RefineReport};
pub use render::{render_svg, SvgOptions};
pub use solver::{cg_solve, CgConfig, CgOutcome, SolveError, SparseSystem};
