use super::{arap_with_gradient, joints_gradient, joints_loss, user_gradient, user_loss, Constraint, MeshTerms};
use crate::autodiff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::image::Image;
use crate::puppet::{DeformState, Puppet};
use crate::render::{render_mask_var, RasterConfig};

/// A scalar of one input whose gradient is known at forward time.
struct Linearized {
    name: &'static str,
    grad: Vec<f64>,
}

impl CustomOp for Linearized {
    fn name(&self) -> &str {
        self.name
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, upstream: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let u = upstream[0];
        Ok(vec![Some(self.grad.iter().map(|g| g * u).collect())])
    }
}

fn vertices(g: &Graph, v: Var, n: usize, op: &'static str) -> Result<Vec<Point2>> {
    let t = g.value(v);
    if t.shape() != [n, 2] {
        return Err(Error::shape(op, format!("vertices {:?}, expected [{n}, 2]", t.shape())));
    }
    Ok(t.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

fn linearized(g: &mut Graph, v: Var, name: &'static str, value: f64, grad: Vec<Point2>) -> Var {
    let grad = grad.into_iter().flat_map(|p| [p[0], p[1]]).collect();
    g.custom(&[v], Tensor::scalar(value), Box::new(Linearized { name, grad }))
}

/// ARAP energy of `verts` (`[V,2]`).
pub fn arap_var(g: &mut Graph, verts: Var, terms: &MeshTerms) -> Result<Var> {
    let d = vertices(g, verts, terms.rest.len(), "arap")?;
    let (e, grad) = arap_with_gradient(&terms.rest, &d, &terms.weights);
    Ok(linearized(g, verts, "arap", e, grad))
}

pub fn joints_var(g: &mut Graph, verts: Var, terms: &MeshTerms) -> Result<Var> {
    let d = vertices(g, verts, terms.rest.len(), "joints")?;
    let e = joints_loss(&d, &terms.joints);
    Ok(linearized(g, verts, "joints", e, joints_gradient(&d, &terms.joints)))
}

pub fn user_var(g: &mut Graph, verts: Var, puppet: &Puppet, constraints: &[Constraint]) -> Result<Var> {
    let s = DeformState {
        vertices: vertices(g, verts, puppet.vertex_count(), "user")?,
    };
    let e = user_loss(&s, puppet, constraints);
    Ok(linearized(g, verts, "user", e, user_gradient(&s, puppet, constraints)))
}

/// Sum of squared differences between `rendered` (`[H,W,C]`) and `input`.
pub fn rec_var(g: &mut Graph, rendered: Var, input: &Image) -> Result<Var> {
    let want = [input.height, input.width, input.channels];
    if g.shape(rendered) != want {
        return Err(Error::shape(
            "rec_loss",
            format!("rendered {:?} vs input {}", g.shape(rendered), input.shape_string()),
        ));
    }
    let t = g.constant(Tensor::new(want.to_vec(), input.data.clone())?);
    let d = g.sub(rendered, t)?;
    g.sqnorm(d)
}

struct MaskedRec {
    input: Vec<f64>,
    channels: usize,
    num: f64,
    den: f64,
}

impl CustomOp for MaskedRec {
    fn name(&self) -> &str {
        "masked_rec"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, upstream: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (r, m) = (inputs[0].data(), inputs[1].data());
        let u = upstream[0];
        let ch = self.channels;
        let mut dr = vec![0.0; r.len()];
        let mut dm = vec![0.0; m.len()];
        let base = -self.num / (self.den * self.den);
        for (p, &mp) in m.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..ch {
                let i = p * ch + k;
                let d = self.input[i] * mp - r[i];
                dr[i] = -2.0 * d / self.den * u;
                acc += 2.0 * d * self.input[i];
            }
            dm[p] = (acc / self.den + base) * u;
        }
        Ok(vec![Some(dr), Some(dm)])
    }
}

/// `‖input ⊙ mask − rendered‖² / Σ mask` with `rendered` `[H,W,C]` (the
/// character over black) and `mask` `[H,W]`.
pub fn masked_rec_var(g: &mut Graph, rendered: Var, mask: Var, input: &Image) -> Result<Var> {
    let (h, w, ch) = (input.height, input.width, input.channels);
    if g.shape(rendered) != [h, w, ch] || g.shape(mask) != [h, w] {
        return Err(Error::shape(
            "masked_rec_loss",
            format!(
                "rendered {:?}, mask {:?}, input {}",
                g.shape(rendered),
                g.shape(mask),
                input.shape_string()
            ),
        ));
    }
    let r = g.value(rendered).data();
    let m = g.value(mask).data();
    let den: f64 = m.iter().sum();
    if !(den > 1e-9) {
        return Err(Error::DegenerateMask);
    }
    let mut num = 0.0;
    for (p, &mp) in m.iter().enumerate() {
        for k in 0..ch {
            let d = input.data[p * ch + k] * mp - r[p * ch + k];
            num += d * d;
        }
    }
    let op = MaskedRec {
        input: input.data.clone(),
        channels: ch,
        num,
        den,
    };
    Ok(g.custom(&[rendered, mask], Tensor::scalar(num / den), Box::new(op)))
}

/// `(Σ soft mask − rest_area)²`.
pub fn area_var(g: &mut Graph, verts: Var, puppet: &Puppet, cfg: &RasterConfig, rest_area: f64) -> Result<Var> {
    let mask = render_mask_var(g, verts, puppet, cfg)?;
    let s = g.sum(mask)?;
    let r = g.constant(Tensor::scalar(rest_area));
    let d = g.sub(s, r)?;
    g.mul(d, d)
}
