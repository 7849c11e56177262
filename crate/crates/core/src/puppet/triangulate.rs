//! Ear-clipping triangulation of part outlines, with optional uniform
//! refinement.

use std::collections::HashMap;

use crate::geom::{self, orient, Point2};

use super::PuppetError;

/// Triangle mesh of a single part, before it is merged into a puppet.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMesh {
    pub vertices: Vec<Point2>,
    /// Counter-clockwise triangles.
    pub faces: Vec<[usize; 3]>,
}

impl PartMesh {
    pub fn area(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| 0.5 * orient(self.vertices[a], self.vertices[b], self.vertices[c]))
            .sum()
    }

    pub fn max_edge(&self) -> f64 {
        let mut m: f64 = 0.0;
        for f in &self.faces {
            for k in 0..3 {
                m = m.max(geom::dist(self.vertices[f[k]], self.vertices[f[(k + 1) % 3]]));
            }
        }
        m
    }

    /// One level of midpoint subdivision; existing vertex indices are kept.
    pub fn subdivide(&self) -> PartMesh {
        let (faces, edges) = split_faces(&self.faces, self.vertices.len());
        let mut vertices = self.vertices.clone();
        for (a, b) in edges {
            vertices.push(midpoint(self.vertices[a], self.vertices[b]));
        }
        PartMesh { vertices, faces }
    }

    pub fn nearest_vertex(&self, p: Point2) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, v) in self.vertices.iter().enumerate() {
            let d = geom::dist(*v, p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Inserts `p` as a vertex if it lies inside the mesh, splitting the
    /// containing face (or the two faces of the containing edge). Returns the
    /// new vertex index, or `None` when `p` is outside every face.
    pub fn insert_point(&mut self, p: Point2) -> Option<usize> {
        const EPS: f64 = 1e-12;
        let (f, w) = self.faces.iter().enumerate().find_map(|(f, &[a, b, c])| {
            let w = geom::barycentric(p, self.vertices[a], self.vertices[b], self.vertices[c])?;
            w.iter().all(|&x| x >= -EPS).then_some((f, w))
        })?;
        let face = self.faces[f];
        if let Some(k) = (0..3).find(|&k| (w[k] - 1.0).abs() <= EPS) {
            return Some(face[k]);
        }
        let idx = self.vertices.len();
        self.vertices.push(p);
        match (0..3).find(|&k| w[k].abs() <= EPS) {
            Some(k) => {
                // on the edge opposite corner k
                let (a, b) = (face[(k + 1) % 3], face[(k + 2) % 3]);
                let faces = std::mem::take(&mut self.faces);
                for fc in faces {
                    match edge_slot(&fc, a, b) {
                        Some(s) => {
                            let (u, v, o) = (fc[s], fc[(s + 1) % 3], fc[(s + 2) % 3]);
                            self.faces.push([u, idx, o]);
                            self.faces.push([idx, v, o]);
                        }
                        None => self.faces.push(fc),
                    }
                }
            }
            None => {
                let [a, b, c] = face;
                self.faces[f] = [a, b, idx];
                self.faces.insert(f + 1, [b, c, idx]);
                self.faces.insert(f + 2, [c, a, idx]);
            }
        }
        Some(idx)
    }
}

/// Position `s` such that `(face[s], face[s+1])` is the undirected edge `ab`.
fn edge_slot(face: &[usize; 3], a: usize, b: usize) -> Option<usize> {
    (0..3).find(|&s| {
        let (u, v) = (face[s], face[(s + 1) % 3]);
        (u == a && v == b) || (u == b && v == a)
    })
}

#[inline]
pub(crate) fn midpoint(a: Point2, b: Point2) -> Point2 {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

/// Splits each face into four. New vertices are numbered from `n_vertices`
/// in first-seen edge order; the returned edge list gives their endpoints.
/// Face `f` becomes faces `4f..4f+4`.
pub(crate) fn split_faces(
    faces: &[[usize; 3]],
    n_vertices: usize,
) -> (Vec<[usize; 3]>, Vec<(usize, usize)>) {
    let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges = Vec::new();
    let mut out = Vec::with_capacity(faces.len() * 4);
    let mut get = |a: usize, b: usize, edges: &mut Vec<(usize, usize)>| -> usize {
        let key = (a.min(b), a.max(b));
        *mid.entry(key).or_insert_with(|| {
            edges.push(key);
            n_vertices + edges.len() - 1
        })
    };
    for &[a, b, c] in faces {
        let ab = get(a, b, &mut edges);
        let bc = get(b, c, &mut edges);
        let ca = get(c, a, &mut edges);
        out.push([a, ab, ca]);
        out.push([ab, b, bc]);
        out.push([ca, bc, c]);
        out.push([ab, bc, ca]);
    }
    (out, edges)
}

/// Checks that `outline` is a simple polygon with positive area.
pub fn validate_outline(part: &str, outline: &[Point2]) -> Result<(), PuppetError> {
    let n = outline.len();
    if n < 3 {
        return Err(PuppetError::TooFewVertices {
            part: part.to_string(),
            count: n,
        });
    }
    if outline.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(PuppetError::ZeroArea {
            part: part.to_string(),
        });
    }
    for i in 0..n {
        let (a, b) = (outline[i], outline[(i + 1) % n]);
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            let (c, d) = (outline[j], outline[(j + 1) % n]);
            let hit = if adjacent {
                // adjacent edges may only share their common endpoint
                let (shared, other_a, other_c) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                orient(other_a, shared, other_c) == 0.0
                    && geom::dot(geom::sub(other_a, shared), geom::sub(other_c, shared)) > 0.0
                    || a == b
                    || c == d
            } else {
                geom::segments_intersect(a, b, c, d)
            };
            if hit {
                return Err(PuppetError::SelfIntersecting {
                    part: part.to_string(),
                    first: i,
                    second: j,
                });
            }
        }
    }
    if geom::polygon_area(outline).abs() <= 1e-12 {
        return Err(PuppetError::ZeroArea {
            part: part.to_string(),
        });
    }
    Ok(())
}

/// Ear clipping. Returns counter-clockwise triangles indexing `outline`.
pub fn ear_clip(outline: &[Point2]) -> Vec<[usize; 3]> {
    let n = outline.len();
    let mut ring: Vec<usize> = (0..n).collect();
    if geom::polygon_area(outline) < 0.0 {
        ring.reverse();
    }
    let mut tris = Vec::with_capacity(n.saturating_sub(2));
    while ring.len() > 3 {
        let m = ring.len();
        let mut chosen = None;
        let mut fallback = (0, f64::NEG_INFINITY);
        for i in 0..m {
            let (ip, ic, inx) = (ring[(i + m - 1) % m], ring[i], ring[(i + 1) % m]);
            let (p, c, nx) = (outline[ip], outline[ic], outline[inx]);
            let turn = orient(p, c, nx);
            if turn > fallback.1 {
                fallback = (i, turn);
            }
            if turn <= 0.0 {
                continue;
            }
            let blocked = ring.iter().any(|&k| {
                if k == ip || k == ic || k == inx {
                    return false;
                }
                let q = outline[k];
                if q == p || q == c || q == nx {
                    return false;
                }
                orient(p, c, q) >= 0.0 && orient(c, nx, q) >= 0.0 && orient(nx, p, q) >= 0.0
            });
            if !blocked {
                chosen = Some(i);
                break;
            }
        }
        let i = chosen.unwrap_or(fallback.0);
        let m = ring.len();
        let tri = [ring[(i + m - 1) % m], ring[i], ring[(i + 1) % m]];
        if orient(outline[tri[0]], outline[tri[1]], outline[tri[2]]) > 0.0 {
            tris.push(tri);
        }
        ring.remove(i);
    }
    if orient(outline[ring[0]], outline[ring[1]], outline[ring[2]]) > 0.0 {
        tris.push([ring[0], ring[1], ring[2]]);
    }
    tris
}

/// Triangulates a part outline. With `refine_edge`, the mesh is uniformly
/// midpoint-subdivided until no edge is longer than the threshold (at most
/// eight levels).
pub fn triangulate(
    part: &str,
    outline: &[Point2],
    refine_edge: Option<f64>,
) -> Result<PartMesh, PuppetError> {
    validate_outline(part, outline)?;
    let mut mesh = PartMesh {
        vertices: outline.to_vec(),
        faces: ear_clip(outline),
    };
    if let Some(limit) = refine_edge.filter(|l| *l > 0.0) {
        let mut levels = 0;
        while mesh.max_edge() > limit && levels < 8 {
            mesh = mesh.subdivide();
            levels += 1;
        }
    }
    Ok(mesh)
}
