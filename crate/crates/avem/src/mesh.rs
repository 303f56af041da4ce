//! Triangular meshes with hanging nodes.
//!
//! Elements form a binary forest: roots come from the initial mesh and every
//! bisection replaces an active (leaf) triangle with two children. Nodes are
//! never removed. Each straight mesh segment (a root triangle side, a half of
//! a split segment, or an edge created by a bisection) is tracked in a
//! segment map keyed by its endpoint node ids, and splitting is recorded by
//! storing the midpoint node on the segment. This makes all hanging-node
//! queries combinatorial: the nodes lying strictly inside a triangle side are
//! exactly the recursive midpoints of that side's segment tree, so boundary
//! walks, nonconformity indices and edge incidence never compare coordinates.

use std::collections::HashMap;
use std::fmt;
use std::hash::BuildHasherDefault;

use serde::{Deserialize, Serialize};

use crate::geometry::{midpoint, tri_centroid, tri_signed_area, Point};

/// Hash state with fixed keys so map behaviour is reproducible run to run.
/// These maps are only ever iterated for validation, never into output.
pub(crate) type DetHash = BuildHasherDefault<std::collections::hash_map::DefaultHasher>;
pub(crate) type DetMap<K, V> = HashMap<K, V, DetHash>;

/// Index of a node in [`Mesh::nodes`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

/// Index of an element in [`Mesh::elements`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementId(pub u32);

impl NodeId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl ElementId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// A mesh node. Nodes created by splitting a segment remember the segment
/// endpoints as `parents` (stored with the smaller id first) and sit exactly
/// at their midpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub pos: Point,
    pub parents: Option<[NodeId; 2]>,
    /// True when the node lies on the domain boundary.
    pub on_boundary: bool,
}

/// Per-element problem data, constant on the element and inherited verbatim
/// by both children of a bisection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementData {
    /// Symmetric positive definite diffusion tensor, stored `[a11, a12, a22]`.
    pub a: [f64; 3],
    /// Reaction coefficient, must be nonnegative.
    pub c: f64,
    /// Load density.
    pub f: f64,
}

impl ElementData {
    pub const LAPLACE: ElementData = ElementData { a: [1.0, 0.0, 1.0], c: 0.0, f: 0.0 };

    fn validate(&self) -> Result<(), String> {
        let [a11, a12, a22] = self.a;
        if !(a11.is_finite() && a12.is_finite() && a22.is_finite()) {
            return Err("diffusion tensor has non-finite entries".into());
        }
        if a11 <= 0.0 || a11 * a22 - a12 * a12 <= 0.0 {
            return Err(format!("diffusion tensor [{a11}, {a12}, {a22}] is not positive definite"));
        }
        if !self.c.is_finite() || self.c < 0.0 {
            return Err(format!("reaction coefficient {} is negative or non-finite", self.c));
        }
        if !self.f.is_finite() {
            return Err("load density is non-finite".into());
        }
        Ok(())
    }
}

/// A triangle in the bisection forest. `children == None` marks it active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Element {
    /// Vertex node ids in counterclockwise order.
    pub vertices: [NodeId; 3],
    /// Index into `vertices` of the newest vertex; the refinement edge is
    /// the side opposite to it.
    pub newest: u8,
    pub parent: Option<ElementId>,
    pub children: Option<[ElementId; 2]>,
    pub data: ElementData,
}

impl Element {
    #[inline]
    pub fn is_active(&self) -> bool {
        self.children.is_none()
    }

    /// Endpoints `(a, b)` of the refinement edge and the opposite vertex `c`.
    #[inline]
    pub fn refinement_edge(&self) -> (NodeId, NodeId, NodeId) {
        let k = self.newest as usize;
        (self.vertices[(k + 1) % 3], self.vertices[(k + 2) % 3], self.vertices[k])
    }
}

/// One straight segment of the mesh skeleton. A set `midpoint` means the
/// segment has been split in two; the halves appear as separate entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub midpoint: Option<NodeId>,
    /// True when the segment is part of the domain boundary. Halves inherit
    /// the flag; edges created inside a triangle are never on the boundary.
    pub on_boundary: bool,
}

/// Ordered boundary description of an active element: all mesh nodes on its
/// three sides, counterclockwise, starting at `vertices[0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementBoundary {
    pub nodes: Vec<NodeId>,
    /// Positions of the three triangle vertices inside `nodes`.
    pub vertex_pos: [u32; 3],
}

impl ElementBoundary {
    /// Consecutive node pairs along the boundary, cyclically.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        let n = self.nodes.len();
        (0..n).map(move |i| (self.nodes[i], self.nodes[(i + 1) % n]))
    }

    /// Nodes strictly inside side `k` (between vertex `k` and vertex `k+1`).
    pub fn side_interior(&self, k: u8) -> &[NodeId] {
        let start = self.vertex_pos[k as usize] as usize + 1;
        let end = if k == 2 { self.nodes.len() } else { self.vertex_pos[k as usize + 1] as usize };
        &self.nodes[start..end]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("invalid initial mesh: {0}")]
    InitialMesh(String),
    #[error("node {0} out of range")]
    NodeOutOfRange(NodeId),
    #[error("element {0} out of range")]
    ElementOutOfRange(ElementId),
    #[error("element {0} is not active")]
    InactiveElement(ElementId),
    #[error("no segment between {0} and {1}")]
    MissingSegment(NodeId, NodeId),
    #[error("mesh invariant violated: {0}")]
    Corrupt(String),
    #[error("admissibility completion stalled after {limit} bisections (nonconformity {lambda} > {cap})")]
    CompletionStalled { limit: usize, lambda: u32, cap: u32 },
    #[error("invalid refinement parameters: {0}")]
    Config(String),
}

/// Node description for [`build_initial_mesh`].
#[derive(Clone, Copy, Debug)]
pub struct InitialNode {
    pub pos: Point,
    pub on_boundary: bool,
}

/// Element description for [`build_initial_mesh`]. Vertices must be listed
/// counterclockwise. When `newest` is `None` the vertex opposite the longest
/// side is used (ties resolved towards the smallest vertex id), which points
/// the first refinement edge at the longest side.
#[derive(Clone, Copy, Debug)]
pub struct InitialElement {
    pub vertices: [u32; 3],
    pub newest: Option<u8>,
    pub data: ElementData,
}

#[inline]
fn seg_key(a: NodeId, b: NodeId) -> (u32, u32) {
    if a.0 <= b.0 {
        (a.0, b.0)
    } else {
        (b.0, a.0)
    }
}

/// Incidence of a skeleton edge: the one or two active elements whose
/// boundary walk contains the edge.
#[derive(Clone, Copy, Debug, Default)]
struct EdgePair {
    first: Option<ElementId>,
    second: Option<ElementId>,
}

impl EdgePair {
    fn push(&mut self, e: ElementId) -> Result<(), ()> {
        if self.first.is_none() {
            self.first = Some(e);
        } else if self.second.is_none() {
            self.second = Some(e);
        } else {
            return Err(());
        }
        Ok(())
    }
}

/// Caches rebuilt from scratch whenever the mesh changes.
#[derive(Clone, Debug)]
struct Derived {
    /// Per node: lies strictly inside a side of some active element.
    hanging: Vec<bool>,
    /// Per node: nonconformity index (0 for proper nodes, otherwise one more
    /// than the larger index of the two segment endpoints it bisected).
    lambda: Vec<u32>,
    lambda_max: u32,
    /// Per element: boundary walk, present only for active elements.
    boundaries: Vec<Option<ElementBoundary>>,
    /// Skeleton edge -> incident active elements.
    edges: DetMap<(u32, u32), EdgePair>,
    /// Hanging node -> active elements holding it strictly inside a side,
    /// with the side index; sorted by element id.
    holders: DetMap<u32, Vec<(ElementId, u8)>>,
}

/// A triangular mesh refined by newest-vertex bisection, with hanging nodes.
#[derive(Clone, Debug)]
pub struct Mesh {
    nodes: Vec<Node>,
    elements: Vec<Element>,
    segments: DetMap<(u32, u32), Segment>,
    n_roots: u32,
    derived: std::cell::OnceCell<Box<Derived>>,
}

/// Validates and assembles an initial conforming mesh. Requirements: at
/// least one counterclockwise triangle, every side shared by at most two
/// triangles, and boundary flags exactly matching side incidence (a node is
/// flagged iff it is an endpoint of a side used by exactly one triangle).
pub fn build_initial_mesh(
    nodes: &[InitialNode],
    elements: &[InitialElement],
) -> Result<Mesh, MeshError> {
    let err = |m: String| MeshError::InitialMesh(m);
    if nodes.len() < 3 {
        return Err(err(format!("need at least 3 nodes, got {}", nodes.len())));
    }
    if elements.is_empty() {
        return Err(err("need at least one element".into()));
    }
    if nodes.len() > u32::MAX as usize || elements.len() > u32::MAX as usize {
        return Err(err("mesh too large for 32-bit ids".into()));
    }
    for (i, n) in nodes.iter().enumerate() {
        if !(n.pos[0].is_finite() && n.pos[1].is_finite()) {
            return Err(err(format!("node {i} has non-finite coordinates")));
        }
    }

    let mut built = Vec::with_capacity(elements.len());
    for (i, el) in elements.iter().enumerate() {
        let v = el.vertices;
        if v[0] == v[1] || v[1] == v[2] || v[0] == v[2] {
            return Err(err(format!("element {i} has repeated vertices")));
        }
        for &vi in &v {
            if vi as usize >= nodes.len() {
                return Err(err(format!("element {i} references missing node {vi}")));
            }
        }
        let p = [nodes[v[0] as usize].pos, nodes[v[1] as usize].pos, nodes[v[2] as usize].pos];
        let area = tri_signed_area(p[0], p[1], p[2]);
        if !(area > 0.0) {
            return Err(err(format!("element {i} is not counterclockwise (signed area {area})")));
        }
        let newest = match el.newest {
            Some(k) if k < 3 => k,
            Some(k) => return Err(err(format!("element {i} newest index {k} out of range"))),
            None => pick_newest_vertex(v, p),
        };
        built.push(Element {
            vertices: [NodeId(v[0]), NodeId(v[1]), NodeId(v[2])],
            newest,
            parent: None,
            children: None,
            data: el.data,
        });
        el.data.validate().map_err(|m| err(format!("element {i}: {m}")))?;
    }

    let segments = root_segments(&built).map_err(err)?;

    // Boundary flags must match side incidence exactly.
    let mut on_boundary_side = vec![false; nodes.len()];
    for (&(a, b), seg) in &segments {
        if seg.on_boundary {
            on_boundary_side[a as usize] = true;
            on_boundary_side[b as usize] = true;
        }
    }
    for (i, n) in nodes.iter().enumerate() {
        if n.on_boundary != on_boundary_side[i] {
            return Err(err(format!(
                "node {i} boundary flag {} does not match side incidence",
                n.on_boundary
            )));
        }
    }

    let mesh = Mesh {
        nodes: nodes
            .iter()
            .map(|n| Node { pos: n.pos, parents: None, on_boundary: n.on_boundary })
            .collect(),
        n_roots: built.len() as u32,
        elements: built,
        segments,
        derived: std::cell::OnceCell::new(),
    };
    // Reject initial meshes with hanging nodes: a root vertex inside another
    // root's side never enters that side's (empty) segment tree, so it would
    // silently break the combinatorial model. Detected geometrically here.
    for (i, n) in mesh.nodes.iter().enumerate() {
        for el in &mesh.elements {
            let vp = [
                mesh.nodes[el.vertices[0].idx()].pos,
                mesh.nodes[el.vertices[1].idx()].pos,
                mesh.nodes[el.vertices[2].idx()].pos,
            ];
            for k in 0..3 {
                if el.vertices.contains(&NodeId(i as u32)) {
                    continue;
                }
                if point_strictly_inside_segment(n.pos, vp[k], vp[(k + 1) % 3]) {
                    return Err(err(format!(
                        "node {i} lies inside a side of another element; the initial mesh must be conforming"
                    )));
                }
            }
        }
    }
    mesh.derived().map_err(|e| err(format!("derived data: {e}")))?;
    Ok(mesh)
}

/// Newest vertex opposite the longest side; ties resolved by smallest
/// vertex id so the choice is deterministic.
fn pick_newest_vertex(v: [u32; 3], p: [Point; 3]) -> u8 {
    let mut best = 0usize;
    let mut best_len = -1.0f64;
    for k in 0..3 {
        let len = crate::geometry::dist(p[(k + 1) % 3], p[(k + 2) % 3]);
        if len > best_len || (len == best_len && v[k] < v[best]) {
            best = k;
            best_len = len;
        }
    }
    best as u8
}

fn point_strictly_inside_segment(x: Point, a: Point, b: Point) -> bool {
    let scale = crate::geometry::dist(a, b);
    if scale == 0.0 {
        return false;
    }
    let cross = crate::geometry::cross(crate::geometry::sub(b, a), crate::geometry::sub(x, a));
    if cross.abs() > 1e-12 * scale * scale {
        return false;
    }
    let t = crate::geometry::dot(crate::geometry::sub(x, a), crate::geometry::sub(b, a))
        / (scale * scale);
    t > 1e-9 && t < 1.0 - 1e-9
}

/// Build the segment map of a root layer from side incidence: a side used by
/// exactly one triangle lies on the domain boundary.
fn root_segments(roots: &[Element]) -> Result<DetMap<(u32, u32), Segment>, String> {
    let mut incidence: DetMap<(u32, u32), u32> = DetMap::default();
    for el in roots {
        let v = el.vertices;
        for k in 0..3 {
            *incidence.entry(seg_key(v[k], v[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    let mut segments = DetMap::default();
    for (&key, &count) in &incidence {
        if count > 2 {
            return Err(format!("side ({}, {}) is shared by {count} triangles", key.0, key.1));
        }
        segments.insert(key, Segment { midpoint: None, on_boundary: count == 1 });
    }
    Ok(segments)
}

impl Mesh {
    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_active_elements(&self) -> usize {
        self.elements.iter().filter(|e| e.is_active()).count()
    }

    #[inline]
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    #[inline]
    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn node(&self, n: NodeId) -> Result<&Node, MeshError> {
        self.nodes.get(n.idx()).ok_or(MeshError::NodeOutOfRange(n))
    }

    pub fn element(&self, e: ElementId) -> Result<&Element, MeshError> {
        self.elements.get(e.idx()).ok_or(MeshError::ElementOutOfRange(e))
    }

    /// Ids of active elements, ascending.
    pub fn active_elements(&self) -> impl Iterator<Item = ElementId> + '_ {
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_active())
            .map(|(i, _)| ElementId(i as u32))
    }

    pub fn vertex_positions(&self, e: ElementId) -> Result<[Point; 3], MeshError> {
        let el = self.element(e)?;
        Ok([
            self.node(el.vertices[0])?.pos,
            self.node(el.vertices[1])?.pos,
            self.node(el.vertices[2])?.pos,
        ])
    }

    pub fn element_area(&self, e: ElementId) -> Result<f64, MeshError> {
        let p = self.vertex_positions(e)?;
        Ok(tri_signed_area(p[0], p[1], p[2]).abs())
    }

    /// Element size used in the estimator weights: the square root of the
    /// element area.
    pub fn element_size(&self, e: ElementId) -> Result<f64, MeshError> {
        Ok(self.element_area(e)?.sqrt())
    }

    pub fn element_centroid(&self, e: ElementId) -> Result<Point, MeshError> {
        let p = self.vertex_positions(e)?;
        Ok(tri_centroid(p[0], p[1], p[2]))
    }

    pub fn segment(&self, a: NodeId, b: NodeId) -> Option<&Segment> {
        self.segments.get(&seg_key(a, b))
    }

    /// Total area of the root layer, which active elements must tile.
    pub fn domain_area(&self) -> f64 {
        (0..self.n_roots)
            .map(|i| {
                let p = self.vertex_positions(ElementId(i)).expect("root element");
                tri_signed_area(p[0], p[1], p[2]).abs()
            })
            .sum()
    }

    // ----- derived queries -----

    fn derived(&self) -> Result<&Derived, MeshError> {
        if self.derived.get().is_none() {
            let d = self.build_derived()?;
            let _ = self.derived.set(Box::new(d));
        }
        Ok(self.derived.get().expect("just initialized"))
    }

    /// True when the node lies strictly inside a side of some active element.
    pub fn is_hanging(&self, n: NodeId) -> Result<bool, MeshError> {
        let d = self.derived()?;
        d.hanging.get(n.idx()).copied().ok_or(MeshError::NodeOutOfRange(n))
    }

    /// Nonconformity index of a node: 0 when the node is a vertex of every
    /// active element it lies on, otherwise one more than the larger index
    /// of the two endpoints of the segment it bisected.
    pub fn global_index(&self, n: NodeId) -> Result<u32, MeshError> {
        let d = self.derived()?;
        d.lambda.get(n.idx()).copied().ok_or(MeshError::NodeOutOfRange(n))
    }

    /// Largest nonconformity index over all nodes.
    pub fn max_index(&self) -> Result<u32, MeshError> {
        Ok(self.derived()?.lambda_max)
    }

    pub fn element_boundary(&self, e: ElementId) -> Result<&ElementBoundary, MeshError> {
        let d = self.derived()?;
        let slot = d.boundaries.get(e.idx()).ok_or(MeshError::ElementOutOfRange(e))?;
        slot.as_ref().ok_or(MeshError::InactiveElement(e))
    }

    /// Active elements incident to the skeleton edge `(a, b)`: one element
    /// for a boundary edge, two for an interior edge.
    pub fn edge_incidence(
        &self,
        a: NodeId,
        b: NodeId,
    ) -> Result<(ElementId, Option<ElementId>), MeshError> {
        let d = self.derived()?;
        let pair = d.edges.get(&seg_key(a, b)).ok_or(MeshError::MissingSegment(a, b))?;
        Ok((pair.first.expect("edge map entries are never empty"), pair.second))
    }

    /// Active elements holding `n` strictly inside one of their sides,
    /// paired with the side index, ascending by element id. Empty for
    /// proper nodes.
    pub fn side_holders(&self, n: NodeId) -> Result<&[(ElementId, u8)], MeshError> {
        if n.idx() >= self.nodes.len() {
            return Err(MeshError::NodeOutOfRange(n));
        }
        let d = self.derived()?;
        Ok(d.holders.get(&n.0).map(|v| v.as_slice()).unwrap_or(&[]))
    }

    /// Appends the nodes strictly inside segment `(a, b)` in order from `a`
    /// to `b` by walking the segment tree.
    fn collect_interior(
        &self,
        a: NodeId,
        b: NodeId,
        out: &mut Vec<NodeId>,
        depth: u32,
    ) -> Result<(), MeshError> {
        if depth > 64 {
            return Err(MeshError::Corrupt(format!("segment tree under ({a}, {b}) too deep")));
        }
        let seg = self.segments.get(&seg_key(a, b)).ok_or(MeshError::MissingSegment(a, b))?;
        if let Some(m) = seg.midpoint {
            self.collect_interior(a, m, out, depth + 1)?;
            out.push(m);
            self.collect_interior(m, b, out, depth + 1)?;
        }
        Ok(())
    }

    fn build_boundary(&self, e: ElementId) -> Result<ElementBoundary, MeshError> {
        let el = self.element(e)?;
        let mut nodes = Vec::with_capacity(8);
        let mut vertex_pos = [0u32; 3];
        for k in 0..3 {
            vertex_pos[k] = nodes.len() as u32;
            nodes.push(el.vertices[k]);
            self.collect_interior(el.vertices[k], el.vertices[(k + 1) % 3], &mut nodes, 0)?;
        }
        Ok(ElementBoundary { nodes, vertex_pos })
    }

    fn build_derived(&self) -> Result<Derived, MeshError> {
        let n = self.nodes.len();
        let mut hanging = vec![false; n];
        let mut holders: DetMap<u32, Vec<(ElementId, u8)>> = DetMap::default();
        let mut boundaries: Vec<Option<ElementBoundary>> = vec![None; self.elements.len()];
        let mut edges: DetMap<(u32, u32), EdgePair> = DetMap::default();

        for (i, el) in self.elements.iter().enumerate() {
            if !el.is_active() {
                continue;
            }
            let eid = ElementId(i as u32);
            let boundary = self.build_boundary(eid)?;
            for k in 0..3u8 {
                for &x in boundary.side_interior(k) {
                    hanging[x.idx()] = true;
                    holders.entry(x.0).or_default().push((eid, k));
                }
            }
            for (a, b) in boundary.edges() {
                edges.entry(seg_key(a, b)).or_default().push(eid).map_err(|()| {
                    MeshError::Corrupt(format!("edge ({a}, {b}) lies in more than two elements"))
                })?;
            }
            boundaries[i] = Some(boundary);
        }

        // Leaf segments of active sides: exactly one incident element when
        // the segment is on the boundary, two otherwise.
        for (key, pair) in &edges {
            let seg = self.segments.get(key).ok_or_else(|| {
                MeshError::Corrupt(format!("edge ({}, {}) has no segment", key.0, key.1))
            })?;
            let count = 1 + pair.second.is_some() as u32;
            let expected = if seg.on_boundary { 1 } else { 2 };
            if count != expected {
                return Err(MeshError::Corrupt(format!(
                    "edge ({}, {}) has {count} incident elements, expected {expected}",
                    key.0, key.1
                )));
            }
        }

        // Node ids grow monotonically, so both parents of a hanging node are
        // already resolved when we reach it.
        let mut lambda = vec![0u32; n];
        let mut lambda_max = 0;
        for i in 0..n {
            if !hanging[i] {
                continue;
            }
            let [p, q] = self.nodes[i]
                .parents
                .ok_or_else(|| MeshError::Corrupt(format!("hanging node n{i} has no parents")))?;
            if p.idx() >= i || q.idx() >= i {
                return Err(MeshError::Corrupt(format!(
                    "node n{i} has parents {p}, {q} with larger ids"
                )));
            }
            lambda[i] = 1 + lambda[p.idx()].max(lambda[q.idx()]);
            lambda_max = lambda_max.max(lambda[i]);
        }

        Ok(Derived { hanging, lambda, lambda_max, boundaries, edges, holders })
    }

    // ----- mutation (crate-internal; callers keep the forest consistent) -----

    fn invalidate(&mut self) {
        self.derived.take();
    }

    /// Splits segment `(a, b)`, creating the midpoint node if the segment
    /// has not been split yet, and returns the midpoint id.
    pub(crate) fn split_segment(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MeshError> {
        let key = seg_key(a, b);
        let seg = *self.segments.get(&key).ok_or(MeshError::MissingSegment(a, b))?;
        if let Some(m) = seg.midpoint {
            return Ok(m);
        }
        if self.nodes.len() >= u32::MAX as usize {
            return Err(MeshError::Corrupt("node ids exhausted".into()));
        }
        let m = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            pos: midpoint(self.nodes[key.0 as usize].pos, self.nodes[key.1 as usize].pos),
            parents: Some([NodeId(key.0), NodeId(key.1)]),
            on_boundary: seg.on_boundary,
        });
        self.segments.get_mut(&key).expect("looked up above").midpoint = Some(m);
        self.insert_fresh_segment(seg_key(a, m), seg.on_boundary)?;
        self.insert_fresh_segment(seg_key(m, b), seg.on_boundary)?;
        self.invalidate();
        Ok(m)
    }

    /// Registers the interior edge created by a bisection (newest vertex to
    /// refinement-edge midpoint). The pair must be new.
    pub(crate) fn insert_interior_segment(
        &mut self,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), MeshError> {
        self.insert_fresh_segment(seg_key(a, b), false)?;
        self.invalidate();
        Ok(())
    }

    fn insert_fresh_segment(
        &mut self,
        key: (u32, u32),
        on_boundary: bool,
    ) -> Result<(), MeshError> {
        let prev = self.segments.insert(key, Segment { midpoint: None, on_boundary });
        if prev.is_some() {
            return Err(MeshError::Corrupt(format!(
                "segment ({}, {}) created twice",
                key.0, key.1
            )));
        }
        Ok(())
    }

    pub(crate) fn push_element(&mut self, el: Element) -> Result<ElementId, MeshError> {
        if self.elements.len() >= u32::MAX as usize {
            return Err(MeshError::Corrupt("element ids exhausted".into()));
        }
        let id = ElementId(self.elements.len() as u32);
        self.elements.push(el);
        self.invalidate();
        Ok(id)
    }

    pub(crate) fn set_children(
        &mut self,
        parent: ElementId,
        children: [ElementId; 2],
    ) -> Result<(), MeshError> {
        let el = self.elements.get_mut(parent.idx()).ok_or(MeshError::ElementOutOfRange(parent))?;
        if el.children.is_some() {
            return Err(MeshError::InactiveElement(parent));
        }
        el.children = Some(children);
        self.invalidate();
        Ok(())
    }

    // ----- audits -----

    /// Checks the combinatorial invariants: id ranges, parent/child links,
    /// bisection patterns, the segment forest, and edge incidence counts.
    pub fn audit_structure(&self) -> Result<(), MeshError> {
        let corrupt = |m: String| MeshError::Corrupt(m);
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some([p, q]) = node.parents {
                if p.idx() >= i || q.idx() >= i {
                    return Err(corrupt(format!("node n{i} parents not older")));
                }
                if p.0 >= q.0 {
                    return Err(corrupt(format!("node n{i} parents not id-ordered")));
                }
                let expect = midpoint(self.nodes[p.idx()].pos, self.nodes[q.idx()].pos);
                if node.pos != expect {
                    return Err(corrupt(format!("node n{i} is not at its parents' midpoint")));
                }
                let seg = self
                    .segments
                    .get(&(p.0, q.0))
                    .ok_or_else(|| corrupt(format!("node n{i} split a missing segment")))?;
                if seg.midpoint != Some(NodeId(i as u32)) {
                    return Err(corrupt(format!("segment ({p}, {q}) does not record n{i}")));
                }
                if seg.on_boundary != node.on_boundary {
                    return Err(corrupt(format!("node n{i} boundary flag mismatch")));
                }
            }
        }
        for (i, el) in self.elements.iter().enumerate() {
            let id = ElementId(i as u32);
            if el.newest >= 3 {
                return Err(corrupt(format!("{id} newest index out of range")));
            }
            let v = el.vertices;
            if v[0] == v[1] || v[1] == v[2] || v[0] == v[2] {
                return Err(corrupt(format!("{id} has repeated vertices")));
            }
            for &vi in &v {
                if vi.idx() >= self.nodes.len() {
                    return Err(MeshError::NodeOutOfRange(vi));
                }
            }
            if let Some(p) = el.parent {
                if p.idx() >= i {
                    return Err(corrupt(format!("{id} parent not older")));
                }
            } else if i as u32 >= self.n_roots {
                return Err(corrupt(format!("{id} has no parent but is not a root")));
            }
            let pos = self.vertex_positions(id)?;
            if !(tri_signed_area(pos[0], pos[1], pos[2]) > 0.0) {
                return Err(corrupt(format!("{id} is not counterclockwise")));
            }
            if let Some([c1, c2]) = el.children {
                if c1.idx() <= i || c2.idx() <= i || c1 == c2 {
                    return Err(corrupt(format!("{id} children ids invalid")));
                }
                let (a, b, c) = el.refinement_edge();
                let seg =
                    self.segments.get(&seg_key(a, b)).ok_or(MeshError::MissingSegment(a, b))?;
                let m = seg
                    .midpoint
                    .ok_or_else(|| corrupt(format!("{id} split an unsplit segment")))?;
                let e1 = self.element(c1)?;
                let e2 = self.element(c2)?;
                let ok = e1.vertices == [a, m, c]
                    && e1.newest == 1
                    && e2.vertices == [m, b, c]
                    && e2.newest == 0
                    && e1.parent == Some(id)
                    && e2.parent == Some(id)
                    && e1.data == el.data
                    && e2.data == el.data;
                if !ok {
                    return Err(corrupt(format!("{id} children do not match its bisection")));
                }
                self.segments.get(&seg_key(m, c)).ok_or(MeshError::MissingSegment(m, c))?;
            }
        }
        // Rebuilding the caches validates boundary walks and edge incidence.
        self.build_derived()?;
        Ok(())
    }

    /// Checks the geometric invariants: active elements tile the root layer
    /// (area match plus pairwise interior disjointness with a bounding-box
    /// sweep). Quadratic in the worst case, intended for snapshots.
    pub fn audit_geometry(&self) -> Result<(), MeshError> {
        let corrupt = |m: String| MeshError::Corrupt(m);
        let active: Vec<ElementId> = self.active_elements().collect();
        let total: f64 = active.iter().map(|&e| self.element_area(e)).sum::<Result<f64, _>>()?;
        let domain = self.domain_area();
        if (total - domain).abs() > 1e-10 * domain {
            return Err(corrupt(format!("active area {total} does not tile domain area {domain}")));
        }
        // Sweep over x-sorted bounding boxes; exact overlap test per close pair.
        let mut boxes: Vec<(f64, f64, f64, f64, ElementId)> = Vec::with_capacity(active.len());
        for &e in &active {
            let p = self.vertex_positions(e)?;
            let xs = [p[0][0], p[1][0], p[2][0]];
            let ys = [p[0][1], p[1][1], p[2][1]];
            let min = |v: [f64; 3]| v[0].min(v[1]).min(v[2]);
            let max = |v: [f64; 3]| v[0].max(v[1]).max(v[2]);
            boxes.push((min(xs), max(xs), min(ys), max(ys), e));
        }
        boxes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.4.cmp(&b.4)));
        for i in 0..boxes.len() {
            let (xmin_i, xmax_i, ymin_i, ymax_i, ei) = boxes[i];
            let _ = xmin_i;
            for &(xmin_j, _, ymin_j, ymax_j, ej) in boxes[i + 1..].iter() {
                if xmin_j > xmax_i {
                    break;
                }
                if ymin_j > ymax_i || ymax_j < ymin_i {
                    continue;
                }
                let a = self.vertex_positions(ei)?;
                let b = self.vertex_positions(ej)?;
                if triangles_overlap(&a, &b) {
                    return Err(corrupt(format!("active elements {ei} and {ej} overlap")));
                }
            }
        }
        Ok(())
    }
}

/// Strict interior overlap of two triangles via separating axes, with slack
/// so shared edges and vertices do not count. Orientation-agnostic: both
/// projection intervals are compared per axis.
fn triangles_overlap(a: &[Point; 3], b: &[Point; 3]) -> bool {
    let scale =
        crate::geometry::dist(a[0], a[1]).max(crate::geometry::dist(b[0], b[1])).max(1e-300);
    let tol = 1e-9 * scale;
    for (tri, other) in [(a, b), (b, a)] {
        for k in 0..3 {
            let p = tri[k];
            let q = tri[(k + 1) % 3];
            let n = [q[1] - p[1], p[0] - q[0]];
            let len = crate::geometry::norm(n);
            if len == 0.0 {
                continue;
            }
            let project = |pts: &[Point; 3]| {
                let vals = pts.map(|x| (n[0] * x[0] + n[1] * x[1]) / len);
                (vals[0].min(vals[1]).min(vals[2]), vals[0].max(vals[1]).max(vals[2]))
            };
            let (min_t, max_t) = project(tri);
            let (min_o, max_o) = project(other);
            // Gap (or penetration below tol) along this axis: disjoint.
            if min_t - max_o >= -tol || min_o - max_t >= -tol {
                return false;
            }
        }
    }
    true
}

// ----- serialization -----

/// Serializable mesh image. The segment forest is not stored; it is replayed
/// from the element forest on load, which also revalidates every bisection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeshDto {
    pub nodes: Vec<Node>,
    pub elements: Vec<Element>,
}

impl From<&Mesh> for MeshDto {
    fn from(mesh: &Mesh) -> Self {
        MeshDto { nodes: mesh.nodes.clone(), elements: mesh.elements.clone() }
    }
}

impl TryFrom<MeshDto> for Mesh {
    type Error = MeshError;

    fn try_from(dto: MeshDto) -> Result<Self, MeshError> {
        let n_roots = dto.elements.iter().take_while(|e| e.parent.is_none()).count() as u32;
        let roots = &dto.elements[..n_roots as usize];
        if roots.is_empty() {
            return Err(MeshError::InitialMesh("no root elements".into()));
        }
        let mut segments = root_segments(roots).map_err(MeshError::InitialMesh)?;

        // Replay bisections in id order; parents always precede children.
        for (i, el) in dto.elements.iter().enumerate() {
            let Some([c1, _]) = el.children else { continue };
            let (a, b, c) = el.refinement_edge();
            let m = dto.elements.get(c1.idx()).ok_or(MeshError::ElementOutOfRange(c1))?.vertices[1];
            let key = seg_key(a, b);
            let seg = *segments.get(&key).ok_or_else(|| {
                MeshError::Corrupt(format!("element e{i} split a missing segment"))
            })?;
            let on_boundary = seg.on_boundary;
            if let Some(existing) = seg.midpoint {
                if existing != m {
                    return Err(MeshError::Corrupt(format!(
                        "segment ({a}, {b}) split twice with different midpoints"
                    )));
                }
            } else {
                segments.get_mut(&key).expect("looked up above").midpoint = Some(m);
                insert_fresh(&mut segments, seg_key(a, m), on_boundary)?;
                insert_fresh(&mut segments, seg_key(m, b), on_boundary)?;
            }
            insert_fresh(&mut segments, seg_key(m, c), false)?;
        }

        let mesh = Mesh {
            nodes: dto.nodes,
            elements: dto.elements,
            segments,
            n_roots,
            derived: std::cell::OnceCell::new(),
        };
        mesh.audit_structure()?;
        Ok(mesh)
    }
}

fn insert_fresh(
    segments: &mut DetMap<(u32, u32), Segment>,
    key: (u32, u32),
    on_boundary: bool,
) -> Result<(), MeshError> {
    if segments.insert(key, Segment { midpoint: None, on_boundary }).is_some() {
        return Err(MeshError::Corrupt(format!(
            "segment ({}, {}) created twice during replay",
            key.0, key.1
        )));
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::test_meshes::two_tri_square;
    use super::*;
    use crate::refine::bisection;

    const DATA: ElementData = ElementData { a: [1.0, 0.0, 1.0], c: 0.0, f: 1.0 };

    #[test]
    fn square_mesh_basics() {
        let mesh = two_tri_square(DATA);
        assert_eq!(mesh.n_nodes(), 4);
        assert_eq!(mesh.n_active_elements(), 2);
        // Newest vertex is opposite the hypotenuse (0,0)-(1,1): the right
        // angle corners n1 and n3.
        assert_eq!(mesh.elements()[0].newest, 1);
        assert_eq!(mesh.elements()[1].newest, 2);
        let (a, b, _) = mesh.elements()[0].refinement_edge();
        assert_eq!(seg_key(a, b), (0, 2));
        assert!(!mesh.segment(NodeId(0), NodeId(2)).unwrap().on_boundary);
        assert!(mesh.segment(NodeId(0), NodeId(1)).unwrap().on_boundary);
        assert_eq!(mesh.max_index().unwrap(), 0);
        assert_eq!(mesh.domain_area(), 1.0);
        mesh.audit_structure().unwrap();
        mesh.audit_geometry().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        let nodes = [
            InitialNode { pos: [0.0, 0.0], on_boundary: true },
            InitialNode { pos: [1.0, 0.0], on_boundary: true },
            InitialNode { pos: [0.0, 1.0], on_boundary: true },
        ];
        // Clockwise orientation.
        let cw = [InitialElement { vertices: [0, 2, 1], newest: None, data: DATA }];
        assert!(build_initial_mesh(&nodes, &cw).is_err());
        // Interior flag on a boundary node.
        let fixed = [InitialElement { vertices: [0, 1, 2], newest: None, data: DATA }];
        let mut bad = nodes;
        bad[1].on_boundary = false;
        assert!(build_initial_mesh(&bad, &fixed).is_err());
        // Indefinite diffusion tensor.
        let sick = [InitialElement {
            vertices: [0, 1, 2],
            newest: None,
            data: ElementData { a: [1.0, 2.0, 1.0], c: 0.0, f: 0.0 },
        }];
        assert!(build_initial_mesh(&nodes, &sick).is_err());
    }

    #[test]
    fn rejects_nonmanifold_and_nonconforming_input() {
        let nodes = [
            InitialNode { pos: [0.0, 0.0], on_boundary: true },
            InitialNode { pos: [1.0, 0.0], on_boundary: true },
            InitialNode { pos: [0.5, 1.0], on_boundary: true },
            InitialNode { pos: [0.5, -1.0], on_boundary: true },
            InitialNode { pos: [0.5, -2.0], on_boundary: true },
        ];
        let tris = [
            InitialElement { vertices: [0, 1, 2], newest: None, data: DATA },
            InitialElement { vertices: [1, 0, 3], newest: None, data: DATA },
            InitialElement { vertices: [0, 1, 4], newest: None, data: DATA },
        ];
        assert!(build_initial_mesh(&nodes, &tris).is_err());

        // A vertex resting inside another triangle's side.
        let nodes = [
            InitialNode { pos: [0.0, 0.0], on_boundary: true },
            InitialNode { pos: [2.0, 0.0], on_boundary: true },
            InitialNode { pos: [1.0, 1.0], on_boundary: true },
            InitialNode { pos: [0.0, 2.0], on_boundary: true },
            InitialNode { pos: [0.5, 0.5], on_boundary: true },
        ];
        let tris = [
            InitialElement { vertices: [0, 1, 2], newest: None, data: DATA },
            InitialElement { vertices: [4, 2, 3], newest: None, data: DATA },
        ];
        assert!(build_initial_mesh(&nodes, &tris).is_err());
    }

    #[test]
    fn single_bisection_creates_hanging_node() {
        let mut mesh = two_tri_square(DATA);
        let children = bisection(&mut mesh, ElementId(0)).unwrap();
        assert_eq!(children, [ElementId(2), ElementId(3)]);
        assert_eq!(mesh.n_nodes(), 5);
        let m = NodeId(4);
        assert_eq!(mesh.node(m).unwrap().pos, [0.5, 0.5]);
        assert_eq!(mesh.node(m).unwrap().parents, Some([NodeId(0), NodeId(2)]));
        assert!(!mesh.node(m).unwrap().on_boundary);
        // The midpoint hangs on element 1, which still owns the full diagonal.
        assert!(mesh.is_hanging(m).unwrap());
        assert_eq!(mesh.global_index(m).unwrap(), 1);
        assert_eq!(mesh.max_index().unwrap(), 1);
        assert_eq!(mesh.side_holders(m).unwrap(), &[(ElementId(1), 0)]);
        let boundary = mesh.element_boundary(ElementId(1)).unwrap();
        assert_eq!(boundary.nodes, vec![NodeId(0), m, NodeId(2), NodeId(3)]);
        assert_eq!(boundary.vertex_pos, [0, 2, 3]);
        assert_eq!(boundary.side_interior(0), &[m]);
        assert!(boundary.side_interior(1).is_empty());
        // Children are conforming on their own sides. Child ids: e2 keeps
        // the first refinement-edge endpoint n2, e3 gets (m, n0, n1).
        let b2 = mesh.element_boundary(ElementId(2)).unwrap();
        assert_eq!(b2.nodes.len(), 3);
        assert_eq!(mesh.element(ElementId(2)).unwrap().vertices, [NodeId(2), m, NodeId(1)]);
        assert_eq!(mesh.element(ElementId(3)).unwrap().vertices, [m, NodeId(0), NodeId(1)]);
        // Edge incidence: half-diagonal (n0, m) belongs to child 3 and the
        // coarse neighbor 1.
        let (e1, e2) = mesh.edge_incidence(NodeId(0), m).unwrap();
        assert_eq!((e1, e2), (ElementId(1), Some(ElementId(3))));
        mesh.audit_structure().unwrap();
        mesh.audit_geometry().unwrap();
    }

    #[test]
    fn repeated_bisection_grows_nonconformity() {
        let mut mesh = two_tri_square(DATA);
        let [t1, _] = bisection(&mut mesh, ElementId(0)).unwrap();
        // t1 = (n2, n4, n1) with newest n4; its refinement edge is the
        // boundary side (n1, n2).
        let (a, b, _) = mesh.element(t1).unwrap().refinement_edge();
        assert_eq!(seg_key(a, b), seg_key(NodeId(1), NodeId(2)));
        let [_, t4] = bisection(&mut mesh, t1).unwrap();
        let m2 = NodeId(5);
        assert!(mesh.node(m2).unwrap().on_boundary);
        assert_eq!(mesh.global_index(m2).unwrap(), 0, "boundary split is conforming here");
        // Now chase a second-order hanging node: bisect t4 = (n5, n2, n4),
        // whose refinement edge is the half-diagonal (n2, n4) inside the
        // side still owned whole by coarse element 1.
        let (a3, b3, _) = mesh.element(t4).unwrap().refinement_edge();
        assert_eq!(seg_key(a3, b3), seg_key(NodeId(2), NodeId(4)));
        bisection(&mut mesh, t4).unwrap();
        let m3 = NodeId(6);
        assert_eq!(mesh.node(m3).unwrap().parents, Some([NodeId(2), NodeId(4)]));
        assert!(mesh.is_hanging(m3).unwrap());
        // Its parents: n2 proper, n4 hanging with index 1.
        assert_eq!(mesh.global_index(NodeId(4)).unwrap(), 1);
        assert_eq!(mesh.global_index(m3).unwrap(), 2);
        assert_eq!(mesh.max_index().unwrap(), 2);
        // Element 1 now holds two hanging nodes on its first side, in order.
        let boundary = mesh.element_boundary(ElementId(1)).unwrap();
        assert_eq!(boundary.side_interior(0), &[NodeId(4), m3]);
        mesh.audit_structure().unwrap();
        mesh.audit_geometry().unwrap();
    }

    #[test]
    fn bisection_rejects_inactive_elements() {
        let mut mesh = two_tri_square(DATA);
        bisection(&mut mesh, ElementId(0)).unwrap();
        assert!(matches!(
            bisection(&mut mesh, ElementId(0)),
            Err(MeshError::InactiveElement(ElementId(0)))
        ));
    }

    #[test]
    fn serde_round_trip_restores_segments() {
        let mut mesh = two_tri_square(DATA);
        bisection(&mut mesh, ElementId(0)).unwrap();
        bisection(&mut mesh, ElementId(2)).unwrap();
        bisection(&mut mesh, ElementId(1)).unwrap();
        let json = serde_json::to_string(&MeshDto::from(&mesh)).unwrap();
        let back: Mesh = serde_json::from_str::<MeshDto>(&json).unwrap().try_into().unwrap();
        assert_eq!(back.nodes, mesh.nodes);
        assert_eq!(back.elements, mesh.elements);
        assert_eq!(back.n_roots, mesh.n_roots);
        let mut a: Vec<_> = mesh.segments.iter().map(|(k, s)| (*k, *s)).collect();
        let mut b: Vec<_> = back.segments.iter().map(|(k, s)| (*k, *s)).collect();
        a.sort_by_key(|e| e.0);
        b.sort_by_key(|e| e.0);
        assert_eq!(a, b);
    }

    #[test]
    fn deserialization_rejects_tampered_children() {
        let mut mesh = two_tri_square(DATA);
        bisection(&mut mesh, ElementId(0)).unwrap();
        let mut dto = MeshDto::from(&mesh);
        // Swap the two children: breaks the bisection pattern.
        let [c1, c2] = dto.elements[0].children.unwrap();
        dto.elements[0].children = Some([c2, c1]);
        assert!(Mesh::try_from(dto).is_err());
    }

    #[test]
    fn audit_catches_overlap() {
        let mut mesh = two_tri_square(DATA);
        // Force an overlap by reflecting node 3 into the lower triangle.
        mesh.nodes[3].pos = [0.7, 0.1];
        assert!(mesh.audit_geometry().is_err());
    }
}
