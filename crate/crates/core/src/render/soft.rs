use std::f64::consts::PI;

use super::texture::{self, TexSample};
use super::{check_state, face_uv, pixel_range, raster_triangle, topology, RasterConfig};
use crate::error::Result;
use crate::geom::{self, Point2};
use crate::image::pixel_center;
use crate::puppet::{DeformState, Puppet};

/// What the soft pass draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftMode {
    /// Textured layers over the configured background.
    Textured,
    /// Opaque white layers over transparent black; every channel of the
    /// result equals the soft coverage.
    Mask,
}

/// Where a layer's color at a pixel comes from.
#[derive(Debug, Clone, Copy)]
enum Source {
    /// Pixel center inside `face`.
    Face {
        verts: [usize; 3],
        bary: [f64; 3],
        uv: [Point2; 3],
        /// Inverse transpose of `[v1−v0, v2−v0]`.
        minv_t: [[f64; 2]; 2],
    },
    /// Outside the layer: the closest point on an outline edge.
    Edge {
        a: usize,
        b: usize,
        t: f64,
        interior: bool,
        e: Point2,
        r: Point2,
        uv: [Point2; 2],
    },
    /// Mask mode: constant white.
    White,
}

/// Silhouette term: opacity depends on a soft minimum `m` of the distances
/// to the layer's outline edges, signed by inside/outside.
#[derive(Debug, Clone, Copy)]
struct Band {
    /// Range of this pixel's entries in [`SoftRender::terms`].
    start: usize,
    len: usize,
    /// +1 inside the layer, −1 outside.
    sign: f64,
    /// d(opacity)/d(signed distance).
    slope: f64,
}

/// One edge's share of a soft distance: `dm/dd_e` and the data for
/// `dd_e/dvertex`.
#[derive(Debug, Clone, Copy)]
struct EdgeTerm {
    a: usize,
    b: usize,
    t: f64,
    /// Unit vector from the pixel center to the closest point.
    n: Point2,
    w: f64,
}

/// `m = (Σ d_e^−k)^(−1/k)`: zero on the outline, within a factor
/// `N^(−1/k)` of the nearest distance, and smooth where two edges are
/// equally near.
const SOFTMIN_POWER: i32 = 8;

/// Edge weights below this are dropped from the backward pass.
const TERM_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct Contrib {
    opacity: f64,
    band: Option<Band>,
    source: Source,
    tex: TexSample,
}

/// A soft render together with everything its backward pass needs.
pub struct SoftRender {
    width: usize,
    height: usize,
    vertex_count: usize,
    background: [f64; 4],
    pixels: Vec<Vec<Contrib>>,
    terms: Vec<EdgeTerm>,
    image: Vec<f64>,
}

fn erf3() -> f64 {
    libm::erf(3.0)
}

/// Layer opacity as a function of signed distance (positive inside).
pub(crate) fn ramp(sd: f64, sigma: f64) -> (f64, f64) {
    let x = sd / sigma;
    let e3 = erf3();
    let a = 0.5 + 0.5 * libm::erf(x) / e3;
    let slope = (-x * x).exp() / (sigma * PI.sqrt() * e3);
    (a, slope)
}

const WHITE: TexSample = TexSample {
    value: [1.0; 4],
    d_du: [0.0; 4],
    d_dv: [0.0; 4],
};

impl SoftRender {
    pub fn new(state: &DeformState, puppet: &Puppet, cfg: &RasterConfig, mode: SoftMode) -> Result<Self> {
        cfg.validate()?;
        check_state(state, puppet)?;
        let v = &state.vertices;
        let n = cfg.pixel_count();
        let band = 3.0 * cfg.sigma;
        let background = match mode {
            SoftMode::Textured => cfg.background,
            SoftMode::Mask => [0.0; 4],
        };
        let mut pixels: Vec<Vec<Contrib>> = vec![Vec::new(); n];
        let mut inside: Vec<Option<(usize, [f64; 3])>> = vec![None; n];
        let mut terms: Vec<EdgeTerm> = Vec::new();
        let mut nearest: Vec<(f64, usize, f64, Point2)> = Vec::new();
        let mut scratch: Vec<(f64, f64, Point2)> = Vec::new();
        for layer in topology(puppet) {
            // pixels this far from every edge have m ≥ band
            let reach = band * (layer.boundary.len().max(1) as f64).powf(1.0 / SOFTMIN_POWER as f64);
            inside.iter_mut().for_each(|x| *x = None);
            nearest.clear();
            nearest.resize(n, (reach, usize::MAX, 0.0, [0.0; 2]));
            for &f in &layer.faces {
                raster_triangle(puppet.triangle(v, f), cfg, |p, b| inside[p] = Some((f, b)));
            }
            for (ei, &[a, b]) in layer.boundary.iter().enumerate() {
                let (va, vb) = (v[a], v[b]);
                let lo = [va[0].min(vb[0]) - reach, va[1].min(vb[1]) - reach];
                let hi = [va[0].max(vb[0]) + reach, va[1].max(vb[1]) + reach];
                let Some((c0, c1, r0, r1)) = pixel_range(lo, hi, cfg) else {
                    continue;
                };
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let p = pixel_center(c, r, cfg.width, cfg.height);
                        let (t, q) = geom::closest_on_segment(p, va, vb);
                        let d = geom::dist(p, q);
                        let slot = &mut nearest[r * cfg.width + c];
                        if d < slot.0 {
                            *slot = (d, ei, t, q);
                        }
                    }
                }
            }
            for (pix, contribs) in pixels.iter_mut().enumerate() {
                let (_, ei, t, _) = nearest[pix];
                let hit = inside[pix];
                if hit.is_none() && ei == usize::MAX {
                    continue;
                }
                let p = pixel_center(pix % cfg.width, pix / cfg.width, cfg.width, cfg.height);
                let band_term = if ei == usize::MAX {
                    None
                } else {
                    scratch.clear();
                    scratch.extend(layer.boundary.iter().map(|&[a, b]| {
                        let (t, q) = geom::closest_on_segment(p, v[a], v[b]);
                        (geom::dist(p, q), t, q)
                    }));
                    let start = terms.len();
                    let m = if let Some(z) = scratch.iter().position(|s| s.0 == 0.0) {
                        let [a, b] = layer.boundary[z];
                        terms.push(EdgeTerm {
                            a,
                            b,
                            t: scratch[z].1,
                            n: [0.0; 2],
                            w: 1.0,
                        });
                        0.0
                    } else {
                        let sum: f64 = scratch.iter().map(|s| s.0.powi(-SOFTMIN_POWER)).sum();
                        let m = sum.powf(-1.0 / SOFTMIN_POWER as f64);
                        for (&[a, b], &(d, t, q)) in layer.boundary.iter().zip(&scratch) {
                            let w = (m / d).powi(SOFTMIN_POWER + 1);
                            if w > TERM_CUTOFF {
                                let n = geom::scale(geom::sub(q, p), 1.0 / d);
                                terms.push(EdgeTerm { a, b, t, n, w });
                            }
                        }
                        m
                    };
                    if m < band {
                        let sign = if hit.is_some() { 1.0 } else { -1.0 };
                        let (opacity, slope) = ramp(sign * m, cfg.sigma);
                        Some((
                            Band {
                                start,
                                len: terms.len() - start,
                                sign,
                                slope,
                            },
                            opacity,
                        ))
                    } else {
                        terms.truncate(start);
                        None
                    }
                };
                if hit.is_none() && band_term.is_none() {
                    continue;
                }
                let opacity = band_term.map_or(1.0, |b| b.1);
                let band_term = band_term.map(|b| b.0);
                let source = match (mode, hit) {
                    (SoftMode::Mask, _) => Source::White,
                    (SoftMode::Textured, Some((f, bary))) => {
                        let verts = puppet.faces[f];
                        let (v0, v1, v2) = (v[verts[0]], v[verts[1]], v[verts[2]]);
                        let (m00, m10) = (v1[0] - v0[0], v1[1] - v0[1]);
                        let (m01, m11) = (v2[0] - v0[0], v2[1] - v0[1]);
                        let det = m00 * m11 - m01 * m10;
                        Source::Face {
                            verts,
                            bary,
                            uv: verts.map(|i| puppet.uv[i]),
                            minv_t: [[m11 / det, -m10 / det], [-m01 / det, m00 / det]],
                        }
                    }
                    (SoftMode::Textured, None) => {
                        let [a, b] = layer.boundary[ei];
                        let (va, vb) = (v[a], v[b]);
                        Source::Edge {
                            a,
                            b,
                            t,
                            interior: t > 0.0 && t < 1.0,
                            e: geom::sub(vb, va),
                            r: geom::sub(p, va),
                            uv: [puppet.uv[a], puppet.uv[b]],
                        }
                    }
                };
                let tex = match source {
                    Source::White => WHITE,
                    Source::Face { bary, .. } => {
                        let f = hit.expect("face source").0;
                        texture::sample(&puppet.texture, face_uv(puppet, f, bary))
                    }
                    Source::Edge { t, uv, .. } => {
                        let u = [(1.0 - t) * uv[0][0] + t * uv[1][0], (1.0 - t) * uv[0][1] + t * uv[1][1]];
                        texture::sample(&puppet.texture, u)
                    }
                };
                contribs.push(Contrib {
                    opacity,
                    band: band_term,
                    source,
                    tex,
                });
            }
        }
        let mut image = vec![0.0; n * 4];
        for (pix, contribs) in pixels.iter().enumerate() {
            let mut o = background;
            for c in contribs {
                composite(&mut o, c);
            }
            image[pix * 4..pix * 4 + 4].copy_from_slice(&o);
        }
        Ok(SoftRender {
            width: cfg.width,
            height: cfg.height,
            vertex_count: v.len(),
            background,
            pixels,
            terms,
            image,
        })
    }

    /// Straight RGBA, `H×W×4`.
    pub fn image(&self) -> &[f64] {
        &self.image
    }

    pub fn rgb(&self) -> Vec<f64> {
        self.image.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.image.chunks(4).map(|p| p[3]).collect()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Vertex gradient given d(loss)/d(image) for the `H×W×4` image.
    pub fn backward(&self, upstream: &[f64]) -> Vec<Point2> {
        let mut grad = vec![[0.0; 2]; self.vertex_count];
        let mut prefix: Vec<[f64; 4]> = Vec::new();
        for (pix, contribs) in self.pixels.iter().enumerate() {
            let mut g: [f64; 4] = upstream[pix * 4..pix * 4 + 4].try_into().unwrap();
            if contribs.is_empty() || g.iter().all(|&x| x == 0.0) {
                continue;
            }
            prefix.clear();
            let mut o = self.background;
            for c in contribs {
                prefix.push(o);
                composite(&mut o, c);
            }
            for (c, below) in contribs.iter().zip(&prefix).rev() {
                let ta = c.tex.value[3];
                let a = c.opacity * ta;
                let mut da = g[3] * (1.0 - below[3]);
                for k in 0..3 {
                    da += g[k] * (c.tex.value[k] - below[k]);
                }
                let dtex = [a * g[0], a * g[1], a * g[2], da * c.opacity];
                let d_opacity = da * ta;
                for x in &mut g {
                    *x *= 1.0 - a;
                }
                if let Some(bt) = c.band {
                    let dsd = d_opacity * bt.slope * bt.sign;
                    for e in &self.terms[bt.start..bt.start + bt.len] {
                        for k in 0..2 {
                            grad[e.a][k] += dsd * e.w * (1.0 - e.t) * e.n[k];
                            grad[e.b][k] += dsd * e.w * e.t * e.n[k];
                        }
                    }
                }
                let duv = [
                    (0..4).map(|k| dtex[k] * c.tex.d_du[k]).sum::<f64>(),
                    (0..4).map(|k| dtex[k] * c.tex.d_dv[k]).sum::<f64>(),
                ];
                match c.source {
                    Source::White => {}
                    Source::Face {
                        verts,
                        bary,
                        uv,
                        minv_t,
                    } => {
                        let gb = uv.map(|u| geom::dot(duv, u));
                        let gamma = [gb[1] - gb[0], gb[2] - gb[0]];
                        let w = [
                            -(minv_t[0][0] * gamma[0] + minv_t[0][1] * gamma[1]),
                            -(minv_t[1][0] * gamma[0] + minv_t[1][1] * gamma[1]),
                        ];
                        for (vi, b) in verts.iter().zip(bary) {
                            grad[*vi][0] += b * w[0];
                            grad[*vi][1] += b * w[1];
                        }
                    }
                    Source::Edge {
                        a,
                        b,
                        t,
                        interior,
                        e,
                        r,
                        uv,
                    } => {
                        if interior {
                            let dt = geom::dot(duv, geom::sub(uv[1], uv[0]));
                            let ee = geom::dot(e, e);
                            for k in 0..2 {
                                grad[a][k] += dt * (-e[k] - r[k] + 2.0 * t * e[k]) / ee;
                                grad[b][k] += dt * (r[k] - 2.0 * t * e[k]) / ee;
                            }
                        }
                    }
                }
            }
        }
        grad
    }
}

fn composite(o: &mut [f64; 4], c: &Contrib) {
    let a = c.opacity * c.tex.value[3];
    for k in 0..3 {
        o[k] = a * c.tex.value[k] + (1.0 - a) * o[k];
    }
    o[3] = a + (1.0 - a) * o[3];
}
