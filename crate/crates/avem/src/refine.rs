//! Newest-vertex bisection, Dörfler marking and admissibility completion.
//!
//! Refinement never conforms the mesh: bisecting an element can leave the
//! midpoint hanging on a coarser neighbor. Mesh quality is instead enforced
//! by bounding every node's nonconformity index. The completion loop below
//! repeatedly locates a node with the largest index and bisects the coarsest
//! element holding it until the bound is met.

use std::collections::BTreeSet;

use crate::mesh::{Element, ElementId, Mesh, MeshError, NodeId};

/// Elements marked for refinement, iterated in ascending id order.
pub type MarkSet = BTreeSet<ElementId>;

/// Counts of what one [`refine`] call did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RefineReport {
    /// Marked elements that were bisected.
    pub marked_bisections: usize,
    /// Extra bisections spent restoring the nonconformity bound.
    pub completion_bisections: usize,
    /// Marked elements skipped because they were no longer active.
    pub skipped_inactive: usize,
}

/// Bisects an active element across its refinement edge. The midpoint node
/// is reused when the edge was already split from the other side; otherwise
/// it is created. Returns the two children, ordered so the first one keeps
/// the first refinement-edge endpoint.
pub fn bisection(mesh: &mut Mesh, t: ElementId) -> Result<[ElementId; 2], MeshError> {
    let el = *mesh.element(t)?;
    if !el.is_active() {
        return Err(MeshError::InactiveElement(t));
    }
    let (a, b, c) = el.refinement_edge();
    let m = mesh.split_segment(a, b)?;
    mesh.insert_interior_segment(m, c)?;
    let t1 = mesh.push_element(Element {
        vertices: [a, m, c],
        newest: 1,
        parent: Some(t),
        children: None,
        data: el.data,
    })?;
    let t2 = mesh.push_element(Element {
        vertices: [m, b, c],
        newest: 0,
        parent: Some(t),
        children: None,
        data: el.data,
    })?;
    mesh.set_children(t, [t1, t2])?;
    Ok([t1, t2])
}

/// Dörfler marking on squared local indicators: sorts descending (ties by
/// ascending element id) and returns the shortest nonempty prefix whose sum
/// reaches `theta` times the total.
pub fn dorfler_mark(indicators: &[(ElementId, f64)], theta: f64) -> Result<MarkSet, MeshError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(MeshError::Config(format!("marking fraction {theta} outside (0, 1]")));
    }
    if indicators.is_empty() {
        return Err(MeshError::Config("no indicators to mark from".into()));
    }
    for &(e, v) in indicators {
        if !v.is_finite() || v < 0.0 {
            return Err(MeshError::Config(format!("indicator for {e} is {v}")));
        }
    }
    let mut sorted = indicators.to_vec();
    sorted.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut seen = BTreeSet::new();
    for &(e, _) in &sorted {
        if !seen.insert(e) {
            return Err(MeshError::Config(format!("duplicate indicator for {e}")));
        }
    }
    let total: f64 = sorted.iter().map(|&(_, v)| v).sum();
    let mut marked = MarkSet::new();
    let mut acc = 0.0;
    for &(e, v) in &sorted {
        marked.insert(e);
        acc += v;
        if acc >= theta * total {
            break;
        }
    }
    Ok(marked)
}

/// Bisects elements until every node's nonconformity index is at most `cap`.
/// Each round picks a node with the largest index (smallest id on ties) and
/// resolves it on the lowest-id active element holding it inside a side.
/// Returns the number of bisections performed.
pub fn make_admissible(mesh: &mut Mesh, cap: u32) -> Result<usize, MeshError> {
    // Fixed at entry: growth during completion must not extend the budget,
    // otherwise a cycle could run forever.
    let limit = 64 * mesh.n_active_elements().max(1);
    let mut count = 0usize;
    loop {
        let lambda_max = mesh.max_index()?;
        if lambda_max <= cap {
            return Ok(count);
        }
        if count >= limit {
            return Err(MeshError::CompletionStalled { limit, lambda: lambda_max, cap });
        }
        let worst = (0..mesh.n_nodes() as u32)
            .map(NodeId)
            .find(|&n| mesh.global_index(n).expect("id in range") == lambda_max)
            .ok_or_else(|| MeshError::Corrupt("max nonconformity index has no node".into()))?;
        let &(holder, side) = mesh.side_holders(worst)?.first().ok_or_else(|| {
            MeshError::Corrupt(format!("{worst} has positive index but no holder"))
        })?;
        count += resolve_hanging(mesh, holder, side)?;
    }
}

/// Splits the side `side` of active element `e` at its midpoint. When the
/// side is the element's refinement edge one bisection does it; otherwise
/// the element is bisected first and the child that inherited the side (for
/// which it is the refinement edge) is bisected next.
fn resolve_hanging(mesh: &mut Mesh, e: ElementId, side: u8) -> Result<usize, MeshError> {
    let newest = mesh.element(e)?.newest;
    if side as usize == (newest as usize + 1) % 3 {
        bisection(mesh, e)?;
        Ok(1)
    } else {
        let children = bisection(mesh, e)?;
        // Side `newest` (from vertex C) lands in the first child, the side
        // after the refinement edge in the second; both become the child's
        // refinement edge.
        let child =
            if side as usize == (newest as usize + 2) % 3 { children[1] } else { children[0] };
        bisection(mesh, child)?;
        Ok(2)
    }
}

/// One refinement step: bisect every marked element that is still active,
/// then restore the nonconformity bound `cap`.
pub fn refine(mesh: &mut Mesh, marked: &MarkSet, cap: u32) -> Result<RefineReport, MeshError> {
    let mut report = RefineReport::default();
    for &e in marked {
        if !mesh.element(e)?.is_active() {
            report.skipped_inactive += 1;
            continue;
        }
        bisection(mesh, e)?;
        report.marked_bisections += 1;
    }
    report.completion_bisections = make_admissible(mesh, cap)?;
    Ok(report)
}
