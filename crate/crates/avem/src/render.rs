//! Minimal SVG rendering of meshes, used by the command line tool to make
//! refinement history inspectable without plotting dependencies.

use std::fmt::Write as _;

use crate::mesh::Mesh;

/// Rendering options for [`render_svg`].
#[derive(Debug, Clone)]
pub struct SvgOptions {
    /// Clip window `[xmin, ymin, xmax, ymax]`; `None` draws the whole mesh.
    pub window: Option<[f64; 4]>,
    /// Output width in pixels; height follows the window aspect ratio.
    pub width: u32,
    /// Shade elements whose boundary carries hanging nodes.
    pub highlight: bool,
}

impl Default for SvgOptions {
    fn default() -> Self {
        SvgOptions { window: None, width: 800, highlight: true }
    }
}

/// Render the active elements of `mesh` as an SVG document.
///
/// Each element is drawn as the polygon through its full boundary node
/// chain, so hanging nodes appear as collinear polygon corners. Elements
/// with more than three boundary nodes are shaded when
/// [`SvgOptions::highlight`] is set. Elements entirely outside the clip
/// window are skipped. Output is deterministic: elements are emitted in
/// ascending id order.
pub fn render_svg(mesh: &Mesh, opts: &SvgOptions) -> String {
    let window = opts.window.unwrap_or_else(|| mesh_bbox(mesh));
    let [x0, y0, x1, y1] = window;
    let span_x = (x1 - x0).max(f64::MIN_POSITIVE);
    let span_y = (y1 - y0).max(f64::MIN_POSITIVE);
    let width = opts.width.max(16) as f64;
    let height = width * span_y / span_x;
    let margin = 0.01 * width;
    // Map domain coordinates to pixel coordinates, flipping y so the domain
    // y-axis points up in the image.
    let px = |x: f64| margin + (x - x0) / span_x * width;
    let py = |y: f64| margin + (y1 - y) / span_y * height;
    let stroke = (width / 800.0).max(0.25);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\">",
        width + 2.0 * margin,
        height + 2.0 * margin
    );
    for id in mesh.active_elements() {
        let boundary = match mesh.element_boundary(id) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let mut clipped = true;
        let mut points = String::new();
        for &n in &boundary.nodes {
            let p = mesh.node(n).expect("boundary refers to live node").pos;
            if p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1 {
                clipped = false;
            }
            if !points.is_empty() {
                points.push(' ');
            }
            let _ = write!(points, "{:.3},{:.3}", px(p[0]), py(p[1]));
        }
        if clipped {
            continue;
        }
        let fill = if opts.highlight && boundary.nodes.len() > 3 { "#f4a6a6" } else { "none" };
        let _ = writeln!(
            out,
            "<polygon points=\"{}\" fill=\"{}\" stroke=\"black\" stroke-width=\"{:.3}\"/>",
            points, fill, stroke
        );
    }
    out.push_str("</svg>\n");
    out
}

fn mesh_bbox(mesh: &Mesh) -> [f64; 4] {
    let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for node in mesh.nodes() {
        bbox[0] = bbox[0].min(node.pos[0]);
        bbox[1] = bbox[1].min(node.pos[1]);
        bbox[2] = bbox[2].max(node.pos[0]);
        bbox[3] = bbox[3].max(node.pos[1]);
    }
    bbox
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{test_meshes::two_tri_square, ElementData, ElementId};
    use crate::refine::{refine, MarkSet};

    #[test]
    fn renders_one_polygon_per_active_element() {
        let mesh = two_tri_square(ElementData::LAPLACE);
        let svg = render_svg(&mesh, &SvgOptions::default());
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polygon").count(), mesh.n_active_elements());
        assert!(!svg.contains("#f4a6a6"));
    }

    #[test]
    fn hanging_elements_are_shaded() {
        let mut mesh = two_tri_square(ElementData::LAPLACE);
        // One bisection leaves the neighbor with a hanging node on the
        // shared diagonal.
        let marks: MarkSet = [ElementId(0)].into_iter().collect();
        refine(&mut mesh, &marks, 1).unwrap();
        let svg = render_svg(&mesh, &SvgOptions::default());
        assert_eq!(svg.matches("<polygon").count(), mesh.n_active_elements());
        assert_eq!(svg.matches("#f4a6a6").count(), 1);
        let plain = render_svg(&mesh, &SvgOptions { highlight: false, ..SvgOptions::default() });
        assert!(!plain.contains("#f4a6a6"));
    }

    #[test]
    fn window_clips_far_elements() {
        let mut mesh = two_tri_square(ElementData::LAPLACE);
        let marks: MarkSet = [ElementId(0)].into_iter().collect();
        refine(&mut mesh, &marks, 1).unwrap();
        let svg = render_svg(
            &mesh,
            &SvgOptions { window: Some([0.7, 0.0, 1.0, 0.3]), ..SvgOptions::default() },
        );
        // Only elements with a boundary node inside the window survive.
        let full = render_svg(&mesh, &SvgOptions::default());
        assert!(svg.matches("<polygon").count() < full.matches("<polygon").count());
        assert!(svg.matches("<polygon").count() >= 1);
        // identical calls yield identical bytes
        let again = render_svg(
            &mesh,
            &SvgOptions { window: Some([0.7, 0.0, 1.0, 0.3]), ..SvgOptions::default() },
        );
        assert_eq!(svg, again);
    }
}
