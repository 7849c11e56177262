use serde::{Deserialize, Serialize};

use crate::geom::{self, Point2};

use super::{ControlPoint, DeformState, Puppet, PuppetError};

const INSIDE_EPS: f64 = 1e-12;

/// Result of [`locate_or_nearest`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Located {
    pub point: ControlPoint,
    /// True when the query was outside every face and was moved to the
    /// nearest point on the mesh.
    pub fallback: bool,
    /// Distance from the query to the located point (0 when inside).
    pub distance: f64,
}

fn clean(mut b: [f64; 3]) -> [f64; 3] {
    for x in &mut b {
        *x = x.max(0.0);
    }
    let s: f64 = b.iter().sum();
    b.map(|x| x / s)
}

/// The topmost face containing `q` under the given pose. Among covering
/// faces the one with the highest layer wins, then the highest face index.
pub fn locate_point(puppet: &Puppet, state: &DeformState, q: Point2) -> Result<ControlPoint, PuppetError> {
    let layers = puppet.face_layers();
    let mut best: Option<(usize, usize, [f64; 3])> = None;
    for f in 0..puppet.face_count() {
        let [a, b, c] = puppet.triangle(&state.vertices, f);
        let Some(w) = geom::barycentric(q, a, b, c) else {
            continue;
        };
        if w.iter().all(|&x| x >= -INSIDE_EPS) && best.is_none_or(|(l, g, _)| (layers[f], f) > (l, g)) {
            best = Some((layers[f], f, w));
        }
    }
    match best {
        Some((_, face, w)) => Ok(ControlPoint { face, bary: clean(w) }),
        None => {
            let (_, distance) = nearest_on_mesh(puppet, state, q);
            Err(PuppetError::Miss { distance })
        }
    }
}

fn nearest_on_mesh(puppet: &Puppet, state: &DeformState, q: Point2) -> (ControlPoint, f64) {
    let layers = puppet.face_layers();
    let mut best = (usize::MAX, 0usize, f64::INFINITY, [1.0, 0.0, 0.0]);
    for f in 0..puppet.face_count() {
        let tri = puppet.triangle(&state.vertices, f);
        let w = geom::closest_on_triangle(q, tri);
        let d = geom::dist(q, geom::combine(tri, w));
        let better = d < best.2 || (d == best.2 && (layers[f], f) > (best.0, best.1));
        if better {
            best = (layers[f], f, d, w);
        }
    }
    (
        ControlPoint {
            face: best.1,
            bary: clean(best.3),
        },
        best.2,
    )
}

/// Like [`locate_point`], but a query outside the mesh snaps to the nearest
/// point on any face instead of failing.
pub fn locate_or_nearest(puppet: &Puppet, state: &DeformState, q: Point2) -> Located {
    match locate_point(puppet, state, q) {
        Ok(point) => Located {
            point,
            fallback: false,
            distance: 0.0,
        },
        Err(_) => {
            let (point, distance) = nearest_on_mesh(puppet, state, q);
            Located {
                point,
                fallback: true,
                distance,
            }
        }
    }
}

/// Position of a control point under a pose.
pub fn eval_control_point(state: &DeformState, puppet: &Puppet, c: &ControlPoint) -> Point2 {
    geom::combine(puppet.triangle(&state.vertices, c.face), c.bary)
}
