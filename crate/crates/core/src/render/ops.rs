use super::{RasterConfig, SoftMode, SoftRender};
use crate::autodiff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::puppet::{DeformState, Puppet};

struct RenderOp {
    soft: SoftRender,
    mode: SoftMode,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &str {
        match self.mode {
            SoftMode::Textured => "render_rgb",
            SoftMode::Mask => "render_mask",
        }
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, upstream: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (w, h) = self.soft.size();
        let mut full = vec![0.0; w * h * 4];
        match self.mode {
            SoftMode::Textured => {
                for (dst, src) in full.chunks_mut(4).zip(upstream.chunks(3)) {
                    dst[..3].copy_from_slice(src);
                }
            }
            SoftMode::Mask => {
                for (dst, src) in full.chunks_mut(4).zip(upstream) {
                    dst[3] = *src;
                }
            }
        }
        let g = self.soft.backward(&full);
        Ok(vec![Some(g.into_iter().flat_map(|p| [p[0], p[1]]).collect())])
    }
}

fn state_of(g: &Graph, verts: Var, puppet: &Puppet) -> Result<DeformState> {
    let t = g.value(verts);
    if t.shape() != [puppet.vertex_count(), 2] {
        return Err(Error::shape(
            "render",
            format!("vertices {:?} for a puppet with {} vertices", t.shape(), puppet.vertex_count()),
        ));
    }
    Ok(DeformState::from_flat(t.data()))
}

/// Soft textured render of `verts` (`[V,2]`) as an `[H,W,3]` RGB value,
/// composited over the configured background.
pub fn render_rgb_var(g: &mut Graph, verts: Var, puppet: &Puppet, cfg: &RasterConfig) -> Result<Var> {
    let state = state_of(g, verts, puppet)?;
    let soft = SoftRender::new(&state, puppet, cfg, SoftMode::Textured)?;
    let out = Tensor::new(vec![cfg.height, cfg.width, 3], soft.rgb())?;
    Ok(g.custom(
        &[verts],
        out,
        Box::new(RenderOp {
            soft,
            mode: SoftMode::Textured,
        }),
    ))
}

/// Soft coverage mask of `verts` as an `[H,W]` value.
pub fn render_mask_var(g: &mut Graph, verts: Var, puppet: &Puppet, cfg: &RasterConfig) -> Result<Var> {
    let state = state_of(g, verts, puppet)?;
    let soft = SoftRender::new(&state, puppet, cfg, SoftMode::Mask)?;
    let out = Tensor::new(vec![cfg.height, cfg.width], soft.alpha())?;
    Ok(g.custom(
        &[verts],
        out,
        Box::new(RenderOp {
            soft,
            mode: SoftMode::Mask,
        }),
    ))
}
