//! Small 2D helpers shared by the mesh, renderer and energy code.

/// A 2D point or vector, `[x, y]`. Serializes as a JSON pair.
pub type Point2 = [f64; 2];

#[inline]
pub fn sub(a: Point2, b: Point2) -> Point2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add(a: Point2, b: Point2) -> Point2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn scale(a: Point2, s: f64) -> Point2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn dot(a: Point2, b: Point2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// z-component of the 3D cross product.
#[inline]
pub fn cross(a: Point2, b: Point2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm_sq(a: Point2) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Point2) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist(a: Point2, b: Point2) -> f64 {
    norm(sub(a, b))
}

/// Twice the signed area of triangle `abc` (positive when counter-clockwise).
#[inline]
pub fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    cross(sub(b, a), sub(c, a))
}

/// Barycentric coordinates of `p` with respect to triangle `abc`, or `None`
/// for a degenerate triangle. Orientation independent.
pub fn barycentric(p: Point2, a: Point2, b: Point2, c: Point2) -> Option<[f64; 3]> {
    let area = orient(a, b, c);
    if area == 0.0 || !area.is_finite() {
        return None;
    }
    let b0 = orient(p, b, c) / area;
    let b1 = orient(a, p, c) / area;
    let b2 = 1.0 - b0 - b1;
    Some([b0, b1, b2])
}

/// Closest point to `p` on segment `ab`, returned as the segment parameter
/// `t` in `[0, 1]` and the point itself.
pub fn closest_on_segment(p: Point2, a: Point2, b: Point2) -> (f64, Point2) {
    let e = sub(b, a);
    let len2 = norm_sq(e);
    if len2 == 0.0 {
        return (0.0, a);
    }
    let t = (dot(sub(p, a), e) / len2).clamp(0.0, 1.0);
    (t, add(a, scale(e, t)))
}

/// Closest point to `p` on the closed triangle `abc`, as barycentric weights.
pub fn closest_on_triangle(p: Point2, tri: [Point2; 3]) -> [f64; 3] {
    if let Some(b) = barycentric(p, tri[0], tri[1], tri[2]) {
        if b.iter().all(|&w| w >= 0.0) {
            return b;
        }
    }
    let mut best = (f64::INFINITY, [1.0, 0.0, 0.0]);
    for k in 0..3 {
        let (i, j) = (k, (k + 1) % 3);
        let (t, q) = closest_on_segment(p, tri[i], tri[j]);
        let d = dist(p, q);
        if d < best.0 {
            let mut w = [0.0; 3];
            w[i] = 1.0 - t;
            w[j] = t;
            best = (d, w);
        }
    }
    best.1
}

/// Euclidean distance from `p` to the closed triangle `abc`.
pub fn dist_to_triangle(p: Point2, tri: [Point2; 3]) -> f64 {
    let w = closest_on_triangle(p, tri);
    dist(p, combine(tri, w))
}

#[inline]
pub fn combine(tri: [Point2; 3], w: [f64; 3]) -> Point2 {
    [
        w[0] * tri[0][0] + w[1] * tri[1][0] + w[2] * tri[2][0],
        w[0] * tri[0][1] + w[1] * tri[1][1] + w[2] * tri[2][1],
    ]
}

/// Signed polygon area by the shoelace formula.
pub fn polygon_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += cross(poly[i], poly[(i + 1) % n]);
    }
    0.5 * acc
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: Point2, poly: &[Point2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Whether closed segments `ab` and `cd` share at least one point.
pub fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: Point2, q: Point2, r: Point2| {
        r[0] >= p[0].min(q[0])
            && r[0] <= p[0].max(q[0])
            && r[1] >= p[1].min(q[1])
            && r[1] <= p[1].max(q[1])
    };
    (d1 == 0.0 && on(c, d, a))
        || (d2 == 0.0 && on(c, d, b))
        || (d3 == 0.0 && on(a, b, c))
        || (d4 == 0.0 && on(a, b, d))
}

/// 2x2 rotation stored as `(cos, sin)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot2 {
    pub c: f64,
    pub s: f64,
}

impl Rot2 {
    pub const IDENTITY: Rot2 = Rot2 { c: 1.0, s: 0.0 };

    pub fn from_angle(theta: f64) -> Self {
        Rot2 {
            c: theta.cos(),
            s: theta.sin(),
        }
    }

    pub fn angle(&self) -> f64 {
        self.s.atan2(self.c)
    }

    #[inline]
    pub fn apply(&self, v: Point2) -> Point2 {
        [self.c * v[0] - self.s * v[1], self.s * v[0] + self.c * v[1]]
    }

    pub fn det(&self) -> f64 {
        self.c * self.c + self.s * self.s
    }
}
