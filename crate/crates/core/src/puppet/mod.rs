//! The layered deformable puppet.
//!
//! All parts live in one triangle mesh. Each layer owns a contiguous range of
//! faces and is drawn after (on top of) the layers before it. Joints pair a
//! vertex of one layer with a vertex of another layer that should stay
//! coincident under deformation.

mod build;
mod cotan;
mod io;
mod locate;
mod subdivide;
pub mod triangulate;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point2;
use crate::image::Image;

pub use build::{
    build_puppet, compute_joints, overlap_centroid, BuildOptions, BuildReport, JointPart,
    PartJoint, PartSpec,
};
pub use cotan::{cotangent_weights, EdgeWeights};
pub use io::{load_outline_file, OutlineFile, OutlinePart, PuppetFile};
pub(crate) use io::parse_json;
pub use locate::{eval_control_point, locate_or_nearest, locate_point, Located};
pub use subdivide::subdivide_midpoint;
pub use triangulate::{triangulate, PartMesh};

#[derive(Debug, Error)]
pub enum PuppetError {
    #[error("face {face} references vertex {index} but the puppet has {count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("face {face} is covered by {count} layers (must be exactly one)")]
    LayerCoverage { face: usize, count: usize },
    #[error("layer `{layer}` has an invalid face range {start}..{end}")]
    LayerRange {
        layer: String,
        start: usize,
        end: usize,
    },
    #[error("vertex {vertex} is used by faces of layers {first} and {second}")]
    VertexSharedAcrossLayers {
        vertex: usize,
        first: usize,
        second: usize,
    },
    #[error("vertex {0} is not referenced by any face")]
    UnreferencedVertex(usize),
    #[error("joint {joint} connects vertices {p} and {q} of the same layer")]
    JointSameLayer { joint: usize, p: usize, q: usize },
    #[error("joint {joint} references vertex {index} out of range")]
    JointIndex { joint: usize, index: usize },
    #[error("uv of vertex {0} lies outside [0,1]^2")]
    UvOutOfRange(usize),
    #[error("expected {expected} uv coordinates, found {found}")]
    UvCount { expected: usize, found: usize },
    #[error("vertex {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("texture must be RGBA, got {0} channels")]
    TextureChannels(usize),
    #[error("part `{part}`: outline needs at least 3 vertices, got {count}")]
    TooFewVertices { part: String, count: usize },
    #[error("part `{part}`: outline edges {first} and {second} intersect")]
    SelfIntersecting {
        part: String,
        first: usize,
        second: usize,
    },
    #[error("part `{part}`: outline has zero area")]
    ZeroArea { part: String },
    #[error("rest triangle of face {face} is degenerate (zero area)")]
    DegenerateFace { face: usize },
    #[error("point lies outside every face (nearest face at distance {distance})")]
    Miss { distance: f64 },
    #[error("deform state has {found} vertices, puppet has {expected}")]
    StateLength { expected: usize, found: usize },
    #[error("control point references face {0} which does not exist")]
    BadControlPoint(usize),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}

/// A named, contiguous, half-open range of faces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub face_start: usize,
    pub face_end: usize,
}

impl Layer {
    pub fn faces(&self) -> std::ops::Range<usize> {
        self.face_start..self.face_end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Puppet {
    /// Rest pose in normalized device coordinates.
    pub rest_vertices: Vec<Point2>,
    pub faces: Vec<[usize; 3]>,
    /// Back to front.
    pub layers: Vec<Layer>,
    pub joints: Vec<[usize; 2]>,
    pub uv: Vec<Point2>,
    /// RGBA texture atlas.
    pub texture: Image,
}

/// Vertex positions for one pose, index-aligned with [`Puppet::rest_vertices`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformState {
    pub vertices: Vec<Point2>,
}

/// A point on the mesh surface, fixed to a face by barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub face: usize,
    pub bary: [f64; 3],
}

impl DeformState {
    pub fn rest(puppet: &Puppet) -> Self {
        DeformState {
            vertices: puppet.rest_vertices.clone(),
        }
    }

    pub fn check(&self, puppet: &Puppet) -> Result<(), PuppetError> {
        if self.vertices.len() != puppet.vertex_count() {
            return Err(PuppetError::StateLength {
                expected: puppet.vertex_count(),
                found: self.vertices.len(),
            });
        }
        if let Some(i) = self
            .vertices
            .iter()
            .position(|v| !v[0].is_finite() || !v[1].is_finite())
        {
            return Err(PuppetError::NonFinite(i));
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| [v[0], v[1]]).collect()
    }

    pub fn from_flat(data: &[f64]) -> Self {
        DeformState {
            vertices: data.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bbox(&self) -> (Point2, Point2) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}

impl ControlPoint {
    pub fn is_valid(&self) -> bool {
        self.bary.iter().all(|&b| b >= 0.0) && (self.bary.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
}

impl Puppet {
    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Layer index of each face.
    pub fn face_layers(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.faces.len()];
        for (li, layer) in self.layers.iter().enumerate() {
            for f in layer.faces() {
                if f < out.len() {
                    out[f] = li;
                }
            }
        }
        out
    }

    /// Layer index of each vertex (`usize::MAX` for unreferenced vertices).
    pub fn vertex_layers(&self) -> Vec<usize> {
        let face_layer = self.face_layers();
        let mut out = vec![usize::MAX; self.rest_vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            for &v in face {
                if v < out.len() {
                    out[v] = face_layer[f];
                }
            }
        }
        out
    }

    pub fn triangle(&self, vertices: &[Point2], face: usize) -> [Point2; 3] {
        let [a, b, c] = self.faces[face];
        [vertices[a], vertices[b], vertices[c]]
    }

    /// Checks every structural invariant of the puppet.
    pub fn validate(&self) -> Result<(), PuppetError> {
        let n = self.rest_vertices.len();
        for (i, v) in self.rest_vertices.iter().enumerate() {
            if !v[0].is_finite() || !v[1].is_finite() {
                return Err(PuppetError::NonFinite(i));
            }
        }
        for (f, face) in self.faces.iter().enumerate() {
            for &i in face {
                if i >= n {
                    return Err(PuppetError::IndexOutOfRange {
                        face: f,
                        index: i,
                        count: n,
                    });
                }
            }
        }
        let mut cover = vec![0usize; self.faces.len()];
        for layer in &self.layers {
            if layer.face_start > layer.face_end || layer.face_end > self.faces.len() {
                return Err(PuppetError::LayerRange {
                    layer: layer.name.clone(),
                    start: layer.face_start,
                    end: layer.face_end,
                });
            }
            for f in layer.faces() {
                cover[f] += 1;
            }
        }
        if let Some((face, &count)) = cover.iter().enumerate().find(|(_, &c)| c != 1) {
            return Err(PuppetError::LayerCoverage { face, count });
        }
        let face_layer = self.face_layers();
        let mut vlayer = vec![usize::MAX; n];
        for (f, face) in self.faces.iter().enumerate() {
            for &v in face {
                let l = face_layer[f];
                if vlayer[v] == usize::MAX {
                    vlayer[v] = l;
                } else if vlayer[v] != l {
                    return Err(PuppetError::VertexSharedAcrossLayers {
                        vertex: v,
                        first: vlayer[v].min(l),
                        second: vlayer[v].max(l),
                    });
                }
            }
        }
        if let Some(v) = vlayer.iter().position(|&l| l == usize::MAX) {
            return Err(PuppetError::UnreferencedVertex(v));
        }
        for (j, &[p, q]) in self.joints.iter().enumerate() {
            for idx in [p, q] {
                if idx >= n {
                    return Err(PuppetError::JointIndex { joint: j, index: idx });
                }
            }
            if vlayer[p] == vlayer[q] {
                return Err(PuppetError::JointSameLayer { joint: j, p, q });
            }
        }
        if self.uv.len() != n {
            return Err(PuppetError::UvCount {
                expected: n,
                found: self.uv.len(),
            });
        }
        if let Some(i) = self
            .uv
            .iter()
            .position(|uv| !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]))
        {
            return Err(PuppetError::UvOutOfRange(i));
        }
        if self.texture.channels != 4 {
            return Err(PuppetError::TextureChannels(self.texture.channels));
        }
        Ok(())
    }

    /// Connected components of the face graph (faces sharing a vertex), as
    /// sorted face lists in order of their smallest face.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.rest_vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for face in &self.faces {
            for k in 1..3 {
                let (a, b) = (find(&mut parent, face[0]), find(&mut parent, face[k]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut roots: Vec<usize> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (f, face) in self.faces.iter().enumerate() {
            let r = find(&mut parent, face[0]);
            match roots.iter().position(|&x| x == r) {
                Some(i) => groups[i].push(f),
                None => {
                    roots.push(r);
                    groups.push(vec![f]);
                }
            }
        }
        groups
    }

    /// Undirected edges `(min, max)` in first-seen order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for face in &self.faces {
            for k in 0..3 {
                let (a, b) = (face[k], face[(k + 1) % 3]);
                let e = (a.min(b), a.max(b));
                if seen.insert(e) {
                    out.push(e);
                }
            }
        }
        out
    }

    /// Total unsigned area of all faces for the given vertex positions.
    pub fn mesh_area(&self, vertices: &[Point2]) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| 0.5 * crate::geom::orient(vertices[a], vertices[b], vertices[c]).abs())
            .sum()
    }
}
