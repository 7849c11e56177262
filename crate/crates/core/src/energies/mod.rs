//! Scalar objectives on deformed puppets and rendered images.
//!
//! Every mesh term comes in two flavors: a plain function returning the
//! value (and usually its vertex gradient), and a graph node in [`ops`] that
//! plugs the same computation into an [`autodiff::Graph`](crate::autodiff::Graph).

mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Point2, Rot2};
use crate::image::Image;
use crate::puppet::{cotangent_weights, eval_control_point, ControlPoint, DeformState, EdgeWeights, Puppet};
use crate::render::{coverage_area, RasterConfig};

pub use ops::{area_var, arap_var, joints_var, masked_rec_var, rec_var, user_var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// ARAP weight during training.
    pub lambda1: f64,
    /// Joint weight during training.
    pub lambda2: f64,
    /// ARAP weight when posing by constraints.
    pub alpha1: f64,
    /// Joint weight when posing by constraints.
    pub alpha2: f64,
    pub area_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 2500.0,
            lambda2: 1e4,
            alpha1: 25.0,
            alpha2: 50.0,
            area_weight: 2e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.alpha1, self.alpha2, self.area_weight];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Pull a point on the mesh toward a target position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub point: ControlPoint,
    pub target: Point2,
}

/// Rest pose, cotangent weights and joints: the inputs every mesh term
/// needs, computed once per puppet.
#[derive(Debug, Clone)]
pub struct MeshTerms {
    pub rest: Vec<Point2>,
    pub weights: EdgeWeights,
    pub joints: Vec<[usize; 2]>,
}

impl MeshTerms {
    pub fn new(puppet: &Puppet) -> Result<Self> {
        Ok(MeshTerms {
            rest: puppet.rest_vertices.clone(),
            weights: cotangent_weights(puppet)?,
            joints: puppet.joints.clone(),
        })
    }

    pub fn arap(&self, deformed: &[Point2]) -> f64 {
        arap_energy(&self.rest, deformed, &self.weights)
    }

    pub fn joints(&self, deformed: &[Point2]) -> f64 {
        joints_loss(deformed, &self.joints)
    }
}

/// Sum of squared differences over all pixels and channels.
pub fn rec_loss(rendered: &Image, input: &Image) -> Result<f64> {
    if !rendered.same_shape(input) {
        return Err(Error::shape(
            "rec_loss",
            format!("{} vs {}", rendered.shape_string(), input.shape_string()),
        ));
    }
    Ok(rendered.data.iter().zip(&input.data).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Best-fit rotation of each vertex's one-ring from rest to deformed.
///
/// With `S = Σ_j w_ij e_ij e'_ijᵀ` (rest edge `e`, deformed edge `e'`), the
/// rotation by `θ` maximizing `tr(R S)` has `θ = atan2(S01 − S10, S00 + S11)`,
/// which always has determinant +1. A vertex with `S = 0` keeps the identity.
pub fn optimal_rotations(rest: &[Point2], deformed: &[Point2], weights: &EdgeWeights) -> Vec<Rot2> {
    (0..rest.len())
        .map(|i| {
            let mut s = [[0.0; 2]; 2];
            for &(j, w) in &weights.neighbors[i] {
                let e = geom::sub(rest[i], rest[j]);
                let d = geom::sub(deformed[i], deformed[j]);
                for a in 0..2 {
                    for b in 0..2 {
                        s[a][b] += w * e[a] * d[b];
                    }
                }
            }
            let (y, x) = (s[0][1] - s[1][0], s[0][0] + s[1][1]);
            if y == 0.0 && x == 0.0 {
                Rot2::IDENTITY
            } else {
                let r = y.hypot(x);
                Rot2 { c: x / r, s: y / r }
            }
        })
        .collect()
}

/// `Σ_i Σ_{j∈N(i)} w_ij ‖(d_i − d_j) − R_i (r_i − r_j)‖²`, each edge visited
/// from both ends.
pub fn arap_energy(rest: &[Point2], deformed: &[Point2], weights: &EdgeWeights) -> f64 {
    arap_with_gradient(rest, deformed, weights).0
}

/// ARAP energy and its gradient with respect to the deformed vertices.
///
/// The rotations minimize the energy for the current pose, so their own
/// variation contributes nothing to the first-order change and the gradient
/// is taken with them held fixed.
pub fn arap_with_gradient(rest: &[Point2], deformed: &[Point2], weights: &EdgeWeights) -> (f64, Vec<Point2>) {
    let rots = optimal_rotations(rest, deformed, weights);
    let mut e = 0.0;
    let mut g = vec![[0.0; 2]; rest.len()];
    for (i, rot) in rots.iter().enumerate() {
        for &(j, w) in &weights.neighbors[i] {
            let res = geom::sub(
                geom::sub(deformed[i], deformed[j]),
                rot.apply(geom::sub(rest[i], rest[j])),
            );
            e += w * geom::norm_sq(res);
            for k in 0..2 {
                g[i][k] += 2.0 * w * res[k];
                g[j][k] -= 2.0 * w * res[k];
            }
        }
    }
    (e, g)
}

/// `Σ ‖p − q‖²` over joint vertex pairs.
pub fn joints_loss(deformed: &[Point2], joints: &[[usize; 2]]) -> f64 {
    joints
        .iter()
        .map(|&[a, b]| geom::norm_sq(geom::sub(deformed[a], deformed[b])))
        .sum()
}

pub fn joints_gradient(deformed: &[Point2], joints: &[[usize; 2]]) -> Vec<Point2> {
    let mut g = vec![[0.0; 2]; deformed.len()];
    for &[a, b] in joints {
        let d = geom::sub(deformed[a], deformed[b]);
        for k in 0..2 {
            g[a][k] += 2.0 * d[k];
            g[b][k] -= 2.0 * d[k];
        }
    }
    g
}

/// The three training terms, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub arap: f64,
    pub joints: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.rec + w.lambda1 * self.arap + w.lambda2 * self.joints
    }
}

/// Training objective for one frame: reconstruction plus weighted ARAP and
/// joint terms.
pub fn total_loss(
    rendered: &Image,
    input: &Image,
    rest: &DeformState,
    deformed: &DeformState,
    puppet: &Puppet,
    w: &LossWeights,
) -> Result<f64> {
    let weights = cotangent_weights(puppet)?;
    let parts = LossParts {
        rec: rec_loss(rendered, input)?,
        arap: arap_energy(&rest.vertices, &deformed.vertices, &weights),
        joints: joints_loss(&deformed.vertices, &puppet.joints),
    };
    Ok(parts.total(w))
}

/// `Σ ‖p_i(v) − target_i‖²`.
pub fn user_loss(deformed: &DeformState, puppet: &Puppet, constraints: &[Constraint]) -> f64 {
    constraints
        .iter()
        .map(|c| geom::norm_sq(geom::sub(eval_control_point(deformed, puppet, &c.point), c.target)))
        .sum()
}

pub fn user_gradient(deformed: &DeformState, puppet: &Puppet, constraints: &[Constraint]) -> Vec<Point2> {
    let mut g = vec![[0.0; 2]; deformed.vertices.len()];
    for c in constraints {
        let d = geom::sub(eval_control_point(deformed, puppet, &c.point), c.target);
        for (&v, b) in puppet.faces[c.point.face].iter().zip(c.point.bary) {
            for k in 0..2 {
                g[v][k] += 2.0 * b * d[k];
            }
        }
    }
    g
}

/// Constrained posing objective: user term plus weighted ARAP and joints.
pub fn deform_objective(
    deformed: &DeformState,
    rest: &DeformState,
    puppet: &Puppet,
    constraints: &[Constraint],
    w: &LossWeights,
) -> Result<f64> {
    let weights = cotangent_weights(puppet)?;
    Ok(user_loss(deformed, puppet, constraints)
        + w.alpha1 * arap_energy(&rest.vertices, &deformed.vertices, &weights)
        + w.alpha2 * joints_loss(&deformed.vertices, &puppet.joints))
}

/// `‖input ⊙ mask − rendered‖² / Σ mask`, where `rendered` is the character
/// alone over black and `mask` has one channel.
pub fn masked_rec_loss(input: &Image, rendered: &Image, mask: &Image) -> Result<f64> {
    if !input.same_shape(rendered) || mask.width != input.width || mask.height != input.height || mask.channels != 1 {
        return Err(Error::shape(
            "masked_rec_loss",
            format!(
                "input {}, rendered {}, mask {}",
                input.shape_string(),
                rendered.shape_string(),
                mask.shape_string()
            ),
        ));
    }
    let area: f64 = mask.data.iter().sum();
    if !(area > 0.0) {
        return Err(Error::DegenerateMask);
    }
    let ch = input.channels;
    let mut num = 0.0;
    for (p, m) in mask.data.iter().enumerate() {
        for k in 0..ch {
            let d = input.data[p * ch + k] * m - rendered.data[p * ch + k];
            num += d * d;
        }
    }
    Ok(num / area)
}

/// Squared change of soft coverage relative to the rest pose.
pub fn area_loss(s: &DeformState, rest: &DeformState, puppet: &Puppet, cfg: &RasterConfig) -> Result<f64> {
    let d = coverage_area(s, puppet, cfg)? - coverage_area(rest, puppet, cfg)?;
    Ok(d * d)
}

#[cfg(test)]
mod tests;
