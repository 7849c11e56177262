//! Layered rasterization of a deformed puppet.
//!
//! [`render`] is the crisp forward pass: each pixel center takes the texture
//! color of the topmost face that covers it, layers drawn back to front.
//!
//! Gradients come from a soft variant ([`SoftRender`]). Within `3σ` of a
//! layer's outline the layer's opacity ramps smoothly from 0 to 1 as a
//! function of a signed soft minimum of the distances to the outline edges,
//! so pixel values depend smoothly on vertex positions at silhouettes and
//! near corners. Inside a face, texture lookups follow the barycentric
//! coordinates exactly.

mod ops;
mod soft;
pub mod texture;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Point2};
use crate::image::{pixel_center, Image};
use crate::puppet::{DeformState, Puppet};

pub use ops::{render_mask_var, render_rgb_var};
pub use soft::{SoftMode, SoftRender};

/// Raster size, silhouette softness and background color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub width: usize,
    pub height: usize,
    /// Width of the silhouette transition, in NDC units.
    pub sigma: f64,
    /// Straight RGBA.
    pub background: [f64; 4],
}

impl RasterConfig {
    /// `σ` defaults to 1.5 pixel pitches; the background is transparent.
    pub fn new(width: usize, height: usize) -> Self {
        RasterConfig {
            width,
            height,
            sigma: 3.0 / width.max(height) as f64,
            background: [0.0; 4],
        }
    }

    pub fn with_background(mut self, background: [f64; 4]) -> Self {
        self.background = background;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Invalid(format!(
                "raster must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// The face visible at a pixel center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub face: usize,
    pub bary: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOut {
    pub rgba: Image,
    /// Hard coverage, one channel.
    pub mask: Image,
    pub provenance: Vec<Option<Fragment>>,
}

/// Faces grouped by layer with each layer's outline edges.
#[derive(Debug, Clone)]
pub(crate) struct LayerTopology {
    pub faces: Vec<usize>,
    /// Edges used by exactly one face of the layer.
    pub boundary: Vec<[usize; 2]>,
}

pub(crate) fn topology(puppet: &Puppet) -> Vec<LayerTopology> {
    puppet
        .layers
        .iter()
        .map(|layer| {
            let faces: Vec<usize> = layer.faces().collect();
            let mut count: std::collections::BTreeMap<(usize, usize), (usize, [usize; 2])> =
                Default::default();
            for &f in &faces {
                let face = puppet.faces[f];
                for k in 0..3 {
                    let (a, b) = (face[k], face[(k + 1) % 3]);
                    let e = count.entry((a.min(b), a.max(b))).or_insert((0, [a, b]));
                    e.0 += 1;
                }
            }
            let boundary = count.values().filter(|(n, _)| *n == 1).map(|(_, e)| *e).collect();
            LayerTopology { faces, boundary }
        })
        .collect()
}

/// Inclusive pixel range whose centers may fall in `[lo, hi]` (NDC).
pub(crate) fn pixel_range(lo: Point2, hi: Point2, cfg: &RasterConfig) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    // x = (2c+1)/W − 1  ⇒  c = ((x+1)W − 1)/2
    let c0 = (((lo[0] + 1.0) * w - 1.0) / 2.0).ceil().max(0.0);
    let c1 = (((hi[0] + 1.0) * w - 1.0) / 2.0).floor().min(w - 1.0);
    // y = 1 − (2r+1)/H  ⇒  r = ((1−y)H − 1)/2
    let r0 = (((1.0 - hi[1]) * h - 1.0) / 2.0).ceil().max(0.0);
    let r1 = (((1.0 - lo[1]) * h - 1.0) / 2.0).floor().min(h - 1.0);
    if !(c0 <= c1 && r0 <= r1) {
        return None;
    }
    Some((c0 as usize, c1 as usize, r0 as usize, r1 as usize))
}

/// Visits each pixel whose center lies in the closed triangle, with its
/// barycentric coordinates.
pub(crate) fn raster_triangle(tri: [Point2; 3], cfg: &RasterConfig, mut f: impl FnMut(usize, [f64; 3])) {
    let lo = [tri[0][0].min(tri[1][0]).min(tri[2][0]), tri[0][1].min(tri[1][1]).min(tri[2][1])];
    let hi = [tri[0][0].max(tri[1][0]).max(tri[2][0]), tri[0][1].max(tri[1][1]).max(tri[2][1])];
    let Some((c0, c1, r0, r1)) = pixel_range(lo, hi, cfg) else {
        return;
    };
    for r in r0..=r1 {
        for c in c0..=c1 {
            let p = pixel_center(c, r, cfg.width, cfg.height);
            if let Some(b) = geom::barycentric(p, tri[0], tri[1], tri[2]) {
                if b.iter().all(|&x| x >= 0.0) {
                    f(r * cfg.width + c, b);
                }
            }
        }
    }
}

pub(crate) fn check_state(state: &DeformState, puppet: &Puppet) -> Result<()> {
    state.check(puppet)?;
    Ok(())
}

pub(crate) fn face_uv(puppet: &Puppet, face: usize, b: [f64; 3]) -> Point2 {
    let [i, j, k] = puppet.faces[face];
    geom::combine([puppet.uv[i], puppet.uv[j], puppet.uv[k]], b)
}

/// Hard forward render.
pub fn render(state: &DeformState, puppet: &Puppet, cfg: &RasterConfig) -> Result<RenderOut> {
    cfg.validate()?;
    check_state(state, puppet)?;
    let n = cfg.pixel_count();
    let mut provenance: Vec<Option<Fragment>> = vec![None; n];
    let mut rgba = Image::filled(cfg.width, cfg.height, &cfg.background);
    let mut mask = Image::new(cfg.width, cfg.height, 1);
    let mut top: Vec<Option<Fragment>> = vec![None; n];
    for layer in topology(puppet) {
        top.iter_mut().for_each(|t| *t = None);
        for &f in &layer.faces {
            let tri = puppet.triangle(&state.vertices, f);
            raster_triangle(tri, cfg, |p, b| top[p] = Some(Fragment { face: f, bary: b }));
        }
        // composite over the layers below so transparent texels show them
        for (p, fr) in top.iter().enumerate() {
            let Some(fr) = *fr else { continue };
            let s = texture::sample(&puppet.texture, face_uv(puppet, fr.face, fr.bary)).value;
            let a = s[3];
            let dst = &mut rgba.data[p * 4..p * 4 + 4];
            for k in 0..3 {
                dst[k] = a * s[k] + (1.0 - a) * dst[k];
            }
            dst[3] = a + (1.0 - a) * dst[3];
            mask.data[p] = 1.0;
            provenance[p] = Some(fr);
        }
    }
    Ok(RenderOut {
        rgba,
        mask,
        provenance,
    })
}

/// Hard coverage: 1 where any face covers the pixel center, else 0.
pub fn render_mask(state: &DeformState, puppet: &Puppet, cfg: &RasterConfig) -> Result<Image> {
    cfg.validate()?;
    check_state(state, puppet)?;
    let mut mask = Image::new(cfg.width, cfg.height, 1);
    for f in 0..puppet.face_count() {
        raster_triangle(puppet.triangle(&state.vertices, f), cfg, |p, _| mask.data[p] = 1.0);
    }
    Ok(mask)
}

/// Sum of the soft coverage mask.
pub fn coverage_area(state: &DeformState, puppet: &Puppet, cfg: &RasterConfig) -> Result<f64> {
    let soft = SoftRender::new(state, puppet, cfg, SoftMode::Mask)?;
    Ok(soft.alpha().iter().sum())
}

/// Gradient of a loss with respect to vertex positions, given the loss
/// gradient with respect to the soft RGBA image (`H×W×4`).
pub fn render_backward(
    state: &DeformState,
    puppet: &Puppet,
    cfg: &RasterConfig,
    upstream: &[f64],
) -> Result<Vec<Point2>> {
    let n = cfg.pixel_count() * 4;
    if upstream.len() != n {
        return Err(Error::shape(
            "render_backward",
            format!("upstream has {} values, expected {}x{}x4", upstream.len(), cfg.height, cfg.width),
        ));
    }
    let soft = SoftRender::new(state, puppet, cfg, SoftMode::Textured)?;
    Ok(soft.backward(upstream))
}
