//! Inbetweening, posing by constraints and correspondence on top of a
//! trained [`DeformModel`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::energies::{arap_var, joints_var, user_loss, user_var, Constraint, LossWeights, MeshTerms};
use crate::error::{Error, Result};
use crate::geom::{self, Point2};
use crate::image::{ndc_to_pixel, Image};
use crate::model::{DeformModel, Latent, LATENT_DIM};
use crate::puppet::{eval_control_point, locate_or_nearest, DeformState, Puppet};
use crate::render::{render, RasterConfig};

/// Either end of an interpolation.
#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Image(Image),
    Latent(Latent),
}

impl Endpoint {
    fn latent(&self, model: &DeformModel) -> Result<Latent> {
        match self {
            Endpoint::Image(img) => model.encode(img),
            Endpoint::Latent(z) => Ok(z.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InbetweenRequest {
    pub a: Endpoint,
    pub b: Endpoint,
    /// Frames strictly between the endpoints.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub latent: Latent,
    pub state: DeformState,
    pub image: Image,
}

/// The decoded pose for `z` rendered at `cfg`.
pub fn render_latent(model: &DeformModel, puppet: &Puppet, z: &Latent, cfg: &RasterConfig) -> Result<Frame> {
    let state = model.decode(z, puppet)?;
    let image = render(&state, puppet, cfg)?.rgba;
    Ok(Frame {
        t: 0.0,
        latent: z.clone(),
        state,
        image,
    })
}

/// The `t` of frame `k` out of `n` intermediate frames.
pub fn inbetween_t(k: usize, n: usize) -> f64 {
    k as f64 / (n + 1) as f64
}

/// `n + 2` frames at `t = k/(n+1)`, `k = 0..=n+1`, from linearly
/// interpolated latents.
pub fn inbetween(req: &InbetweenRequest, model: &DeformModel, puppet: &Puppet, cfg: &RasterConfig) -> Result<Vec<Frame>> {
    if req.n == 0 {
        return Err(Error::Invalid("inbetween needs n >= 1".into()));
    }
    model.check_puppet(puppet)?;
    let (za, zb) = (req.a.latent(model)?, req.b.latent(model)?);
    (0..=req.n + 1)
        .map(|k| {
            let t = inbetween_t(k, req.n);
            let mut f = render_latent(model, puppet, &za.lerp(&zb, t), cfg)?;
            f.t = t;
            Ok(f)
        })
        .collect()
}

/// What a drag optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DragSpace {
    /// Gradient descent on the latent code through the decoder.
    #[default]
    Latent,
    /// Gradient descent on the vertices directly, for comparison.
    Vertex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DragSession {
    pub z0: Latent,
    pub constraints: Vec<Constraint>,
    pub eta: f64,
    pub iterations: usize,
    /// Halve the step whenever it would increase the objective.
    pub line_search: bool,
    pub space: DragSpace,
    pub weights: LossWeights,
}

impl DragSession {
    pub const DEFAULT_ETA: f64 = 3e-4;
    pub const DEFAULT_ITERATIONS: usize = 5;
    pub const MAX_ITERATIONS: usize = 100;
    /// Iterations stop once the constraint loss is below this.
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(z0: Latent, constraints: Vec<Constraint>) -> Self {
        DragSession {
            z0,
            constraints,
            eta: Self::DEFAULT_ETA,
            iterations: Self::DEFAULT_ITERATIONS,
            line_search: false,
            space: DragSpace::Latent,
            weights: LossWeights::default(),
        }
    }

    pub fn validate(&self, puppet: &Puppet) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Invalid(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.iterations > Self::MAX_ITERATIONS {
            return Err(Error::Invalid(format!(
                "iterations must be at most {}, got {}",
                Self::MAX_ITERATIONS,
                self.iterations
            )));
        }
        self.weights.validate()?;
        for c in &self.constraints {
            if c.point.face >= puppet.face_count() {
                return Err(Error::Invalid(format!("control point on face {} is off the mesh", c.point.face)));
            }
            if !(c.target[0].is_finite() && c.target[1].is_finite()) {
                return Err(Error::Invalid("constraint target must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DragResult {
    pub latent: Latent,
    pub state: DeformState,
    pub image: Image,
    pub l_user_before: f64,
    pub l_user_after: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
    /// Step size in use at the end (smaller than requested after line
    /// search halvings).
    pub eta: f64,
}

/// `L_user + α1·arap + α2·joints` of `verts` and its gradient with respect to
/// `x`, where `verts` was built from `x`.
fn deform_terms(g: &mut Graph, verts: Var, puppet: &Puppet, mesh: &MeshTerms, s: &DragSession) -> Result<Var> {
    let u = user_var(g, verts, puppet, &s.constraints)?;
    let a = arap_var(g, verts, mesh)?;
    let j = joints_var(g, verts, mesh)?;
    let a = g.scale(a, s.weights.alpha1)?;
    let j = g.scale(j, s.weights.alpha2)?;
    let o = g.add(u, a)?;
    g.add(o, j)
}

struct Objective<'a> {
    model: &'a DeformModel,
    puppet: &'a Puppet,
    mesh: MeshTerms,
    session: &'a DragSession,
}

impl Objective<'_> {
    /// Value and gradient with respect to `x`: a latent (`[1,512]`) or the
    /// vertices (`[V,2]`).
    fn eval(&self, x: &[f64], grad: bool) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let verts = match self.session.space {
            DragSpace::Latent => {
                let p = self.model.bind(&mut g, false);
                let z = g.leaf(Tensor::new(vec![1, LATENT_DIM], x.to_vec())?);
                let v = self.model.decode_graph(&mut g, &p, z, &self.puppet.rest_vertices)?[0];
                (z, v)
            }
            DragSpace::Vertex => {
                let v = g.leaf(Tensor::new(vec![self.puppet.vertex_count(), 2], x.to_vec())?);
                (v, v)
            }
        };
        let o = deform_terms(&mut g, verts.1, self.puppet, &self.mesh, self.session)?;
        let value = g.value(o).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("deformation objective".into()));
        }
        if !grad {
            return Ok((value, Vec::new()));
        }
        g.backward(o)?;
        let d = g.grad(verts.0).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("deformation gradient".into()));
        }
        Ok((value, d))
    }

    fn state(&self, x: &[f64]) -> Result<DeformState> {
        match self.session.space {
            DragSpace::Latent => self.model.decode(&Latent::new(x.to_vec())?, self.puppet),
            DragSpace::Vertex => Ok(DeformState::from_flat(x)),
        }
    }
}

/// Gradient descent on the deformation objective starting from `z0`.
///
/// Runs at most `iterations` steps of `x ← x − η∇x`, stopping early once the
/// constraint loss is below [`DragSession::TOLERANCE`]. In vertex space the
/// returned latent is `z0` and the state holds the optimized vertices.
pub fn constrained_deform(
    session: &DragSession,
    model: &DeformModel,
    puppet: &Puppet,
    cfg: &RasterConfig,
) -> Result<DragResult> {
    session.validate(puppet)?;
    model.check_puppet(puppet)?;
    let obj = Objective {
        model,
        puppet,
        mesh: MeshTerms::new(puppet)?,
        session,
    };
    let start_state = model.decode(&session.z0, puppet)?;
    let mut x = match session.space {
        DragSpace::Latent => session.z0.as_slice().to_vec(),
        DragSpace::Vertex => start_state.flat(),
    };
    let l_user_before = user_loss(&start_state, puppet, &session.constraints);
    let (objective_before, _) = obj.eval(&x, false)?;
    let mut state = start_state;
    let mut value = objective_before;
    let mut eta = session.eta;
    let mut done = 0;
    while done < session.iterations && user_loss(&state, puppet, &session.constraints) >= DragSession::TOLERANCE {
        let (v, grad) = obj.eval(&x, true)?;
        let mut next: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - eta * g).collect();
        if session.line_search {
            let mut tries = 0;
            loop {
                let (nv, _) = obj.eval(&next, false)?;
                if nv <= v || tries == 30 {
                    break;
                }
                eta *= 0.5;
                tries += 1;
                next = x.iter().zip(&grad).map(|(a, g)| a - eta * g).collect();
            }
        }
        x = next;
        state = obj.state(&x)?;
        done += 1;
    }
    if done > 0 {
        value = obj.eval(&x, false)?.0;
    }
    let latent = match session.space {
        DragSpace::Latent => Latent::new(x)?,
        DragSpace::Vertex => session.z0.clone(),
    };
    let image = render(&state, puppet, cfg)?.rgba;
    Ok(DragResult {
        l_user_after: user_loss(&state, puppet, &session.constraints),
        latent,
        state,
        image,
        l_user_before,
        objective_before,
        objective_after: value,
        iterations: done,
        eta,
    })
}

/// A query mapped from one frame to another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub point: Point2,
    /// The query was off the fitted mesh and was first moved to the nearest
    /// point on it.
    pub fallback: bool,
}

/// Maps NDC points on `state_a` to `state_b` through the shared template.
pub fn correspond_states(
    puppet: &Puppet,
    state_a: &DeformState,
    state_b: &DeformState,
    queries: &[Point2],
) -> Vec<Correspondence> {
    queries
        .iter()
        .map(|&q| {
            let loc = locate_or_nearest(puppet, state_a, q);
            Correspondence {
                point: eval_control_point(state_b, puppet, &loc.point),
                fallback: loc.fallback,
            }
        })
        .collect()
}

/// Fits both frames and maps NDC `queries` from frame A to frame B.
pub fn correspond(
    img_a: &Image,
    img_b: &Image,
    queries: &[Point2],
    model: &DeformModel,
    puppet: &Puppet,
) -> Result<Vec<Correspondence>> {
    let (_, sa) = model.predict(img_a, puppet)?;
    let (_, sb) = model.predict(img_b, puppet)?;
    Ok(correspond_states(puppet, &sa, &sb, queries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub alpha: f64,
    /// `max(width, height)` in pixels.
    pub l: f64,
    pub fraction: f64,
    /// Pixel distance of each prediction from its ground truth.
    pub distances: Vec<f64>,
}

/// Fraction of predictions within `α·max(width, height)` pixels of their
/// ground truth. Points are in pixels.
pub fn pck(predicted: &[Point2], truth: &[Point2], alpha: f64, width: usize, height: usize) -> Result<PckResult> {
    if predicted.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "{} predicted points but {} ground-truth points",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Invalid("no points to score".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let l = width.max(height) as f64;
    let distances: Vec<f64> = predicted.iter().zip(truth).map(|(p, q)| geom::dist(*p, *q)).collect();
    let hits = distances.iter().filter(|&&d| d <= alpha * l).count();
    Ok(PckResult {
        alpha,
        l,
        fraction: hits as f64 / distances.len() as f64,
        distances,
    })
}

/// NDC points to pixel coordinates of a `width × height` image.
pub fn to_pixels(points: &[Point2], width: usize, height: usize) -> Vec<Point2> {
    points.iter().map(|&p| ndc_to_pixel(p, width, height)).collect()
}
