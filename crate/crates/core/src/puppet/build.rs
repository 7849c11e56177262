//! Assembling a puppet from part outlines and textures.

use log::warn;

use crate::geom::{self, Point2};
use crate::image::{pixel_center, Image};

use super::triangulate::{triangulate, PartMesh};
use super::{subdivide_midpoint, Layer, Puppet, PuppetError};

/// One body part: its outline in rest-pose NDC and a texture whose extent is
/// the outline's bounding box.
#[derive(Debug, Clone)]
pub struct PartSpec {
    pub name: String,
    pub outline: Vec<Point2>,
    pub texture: Image,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Uniform refinement threshold on edge length (NDC), per part.
    pub refine_edge: Option<f64>,
    /// Midpoint subdivision levels applied to the merged mesh.
    pub subdivisions: usize,
    /// Atlas grid columns; defaults to `ceil(sqrt(parts))`.
    pub atlas_columns: Option<usize>,
    /// Resolution of the overlap raster used to place joints.
    pub joint_raster: usize,
    /// Overlap centroids closer than this to an existing vertex reuse it;
    /// otherwise the centroid is inserted as a new vertex.
    pub snap_tolerance: f64,
    /// Joints given by hand as `(part, local vertex, part, local vertex)`.
    /// When set, automatic placement is skipped.
    pub explicit_joints: Option<Vec<(usize, usize, usize, usize)>>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            refine_edge: None,
            subdivisions: 0,
            atlas_columns: None,
            joint_raster: 512,
            snap_tolerance: 2.0 / 512.0,
            explicit_joints: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub puppet: Puppet,
    pub warnings: Vec<String>,
}

/// Input to [`compute_joints`].
#[derive(Debug, Clone)]
pub struct JointPart<'a> {
    pub layer: usize,
    pub outline: &'a [Point2],
}

/// A joint between two parts, with part-local vertex indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PartJoint {
    pub part_a: usize,
    pub vertex_a: usize,
    pub part_b: usize,
    pub vertex_b: usize,
    pub centroid: Point2,
}

/// Centroid of the overlap of two polygons, estimated on a `res × res`
/// raster spanning the intersection of their bounding boxes. `None` when no
/// raster sample lies in both polygons.
pub fn overlap_centroid(a: &[Point2], b: &[Point2], res: usize) -> Option<Point2> {
    let bbox = |p: &[Point2]| {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in p {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    };
    let (alo, ahi) = bbox(a);
    let (blo, bhi) = bbox(b);
    let lo = [alo[0].max(blo[0]), alo[1].max(blo[1])];
    let hi = [ahi[0].min(bhi[0]), ahi[1].min(bhi[1])];
    if lo[0] >= hi[0] || lo[1] >= hi[1] {
        return None;
    }
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for r in 0..res {
        for c in 0..res {
            let u = pixel_center(c, r, res, res);
            let p = [
                lo[0] + (u[0] + 1.0) * 0.5 * (hi[0] - lo[0]),
                lo[1] + (u[1] + 1.0) * 0.5 * (hi[1] - lo[1]),
            ];
            if geom::point_in_polygon(p, a) && geom::point_in_polygon(p, b) {
                sx += p[0];
                sy += p[1];
                count += 1;
            }
        }
    }
    (count > 0).then(|| [sx / count as f64, sy / count as f64])
}

/// Places one hinge joint for every pair of parts whose outlines overlap,
/// at the overlap centroid. Each side of the joint is the part vertex at the
/// centroid: an existing vertex within `snap_tolerance`, a vertex inserted at
/// the centroid, or (centroid outside the part) the nearest vertex.
///
/// Pairs without overlap produce no joint; parts that end up with no joint
/// at all are reported as warnings.
pub fn compute_joints(
    parts: &[JointPart<'_>],
    meshes: &mut [PartMesh],
    opts: &BuildOptions,
) -> (Vec<PartJoint>, Vec<String>) {
    let mut joints = Vec::new();
    let mut warnings = Vec::new();
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            if parts[i].layer == parts[j].layer {
                continue;
            }
            let Some(c) = overlap_centroid(parts[i].outline, parts[j].outline, opts.joint_raster)
            else {
                continue;
            };
            let va = anchor_vertex(&mut meshes[i], c, opts.snap_tolerance);
            let vb = anchor_vertex(&mut meshes[j], c, opts.snap_tolerance);
            joints.push(PartJoint {
                part_a: i,
                vertex_a: va,
                part_b: j,
                vertex_b: vb,
                centroid: c,
            });
        }
    }
    if parts.len() > 1 {
        for i in 0..parts.len() {
            if !joints.iter().any(|j| j.part_a == i || j.part_b == i) {
                let msg = format!("part {i} overlaps no other part; it has no joint");
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    (joints, warnings)
}

fn anchor_vertex(mesh: &mut PartMesh, c: Point2, tol: f64) -> usize {
    let (nearest, d) = mesh.nearest_vertex(c);
    if d <= tol {
        return nearest;
    }
    mesh.insert_point(c).unwrap_or(nearest)
}

/// Builds a puppet from parts given back to front.
pub fn build_puppet(parts: &[PartSpec], opts: &BuildOptions) -> Result<BuildReport, PuppetError> {
    let mut meshes = Vec::with_capacity(parts.len());
    for part in parts {
        meshes.push(triangulate(&part.name, &part.outline, opts.refine_edge)?);
    }

    let (part_joints, warnings) = match &opts.explicit_joints {
        Some(list) => (
            list.iter()
                .map(|&(pa, va, pb, vb)| PartJoint {
                    part_a: pa,
                    vertex_a: va,
                    part_b: pb,
                    vertex_b: vb,
                    centroid: meshes[pa].vertices[va],
                })
                .collect(),
            Vec::new(),
        ),
        None => {
            let jp: Vec<JointPart> = parts
                .iter()
                .enumerate()
                .map(|(i, p)| JointPart {
                    layer: i,
                    outline: &p.outline,
                })
                .collect();
            compute_joints(&jp, &mut meshes, opts)
        }
    };

    let (texture, cells) = compose_atlas(parts, opts.atlas_columns);
    let mut rest_vertices = Vec::new();
    let mut uv = Vec::new();
    let mut faces = Vec::new();
    let mut layers = Vec::new();
    let mut offsets = Vec::new();
    for (k, (part, mesh)) in parts.iter().zip(&meshes).enumerate() {
        let base = rest_vertices.len();
        offsets.push(base);
        let (lo, hi) = outline_bbox(&part.outline);
        let cell = cells[k];
        for v in &mesh.vertices {
            rest_vertices.push(*v);
            let fx = (v[0] - lo[0]) / (hi[0] - lo[0]);
            let fy = (hi[1] - v[1]) / (hi[1] - lo[1]);
            let u = (cell.0 as f64 + fx * part.texture.width as f64) / texture.width as f64;
            let w = (cell.1 as f64 + fy * part.texture.height as f64) / texture.height as f64;
            uv.push([u.clamp(0.0, 1.0), w.clamp(0.0, 1.0)]);
        }
        let start = faces.len();
        faces.extend(mesh.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        layers.push(Layer {
            name: part.name.clone(),
            face_start: start,
            face_end: faces.len(),
        });
    }
    let joints = part_joints
        .iter()
        .map(|j| [offsets[j.part_a] + j.vertex_a, offsets[j.part_b] + j.vertex_b])
        .collect();

    let mut puppet = Puppet {
        rest_vertices,
        faces,
        layers,
        joints,
        uv,
        texture,
    };
    for _ in 0..opts.subdivisions {
        puppet = subdivide_midpoint(&puppet);
    }
    puppet.validate()?;
    Ok(BuildReport { puppet, warnings })
}

fn outline_bbox(outline: &[Point2]) -> (Point2, Point2) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for v in outline {
        for k in 0..2 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    (lo, hi)
}

/// Packs part textures into a grid with a one-texel replicated border around
/// each cell. Returns the atlas and each part's top-left texel position.
fn compose_atlas(parts: &[PartSpec], columns: Option<usize>) -> (Image, Vec<(usize, usize)>) {
    let n = parts.len().max(1);
    let cols = columns
        .unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
        .clamp(1, n);
    let rows = n.div_ceil(cols);
    let cw = parts.iter().map(|p| p.texture.width).max().unwrap_or(1) + 2;
    let ch = parts.iter().map(|p| p.texture.height).max().unwrap_or(1) + 2;
    let mut atlas = Image::new(cols * cw, rows * ch, 4);
    let mut cells = Vec::with_capacity(parts.len());
    for (k, part) in parts.iter().enumerate() {
        let (ox, oy) = ((k % cols) * cw, (k / cols) * ch);
        let tex = part.texture.to_rgba();
        for r in 0..tex.height + 2 {
            for c in 0..tex.width + 2 {
                let sc = c.saturating_sub(1).min(tex.width - 1);
                let sr = r.saturating_sub(1).min(tex.height - 1);
                atlas
                    .pixel_mut(ox + c, oy + r)
                    .copy_from_slice(tex.pixel(sc, sr));
            }
        }
        cells.push((ox + 1, oy + 1));
    }
    (atlas, cells)
}
