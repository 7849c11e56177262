use super::triangulate::{midpoint, split_faces};
use super::{Layer, Puppet};

/// Splits every face into four at its edge midpoints.
///
/// Existing vertices keep their indices, so joints carry over unchanged. New
/// vertices get the midpoint of their edge's positions and UVs. Face `f`
/// becomes faces `4f..4f+4`, so layer ranges scale by four.
pub fn subdivide_midpoint(p: &Puppet) -> Puppet {
    let (faces, edges) = split_faces(&p.faces, p.vertex_count());
    let mut rest_vertices = p.rest_vertices.clone();
    let mut uv = p.uv.clone();
    for &(a, b) in &edges {
        rest_vertices.push(midpoint(p.rest_vertices[a], p.rest_vertices[b]));
        uv.push(midpoint(p.uv[a], p.uv[b]));
    }
    let layers = p
        .layers
        .iter()
        .map(|l| Layer {
            name: l.name.clone(),
            face_start: 4 * l.face_start,
            face_end: 4 * l.face_end,
        })
        .collect();
    Puppet {
        rest_vertices,
        faces,
        layers,
        joints: p.joints.clone(),
        uv,
        texture: p.texture.clone(),
    }
}
