use crate::geom::Point2;
use crate::image::Image;

/// A bilinear texture lookup and its derivatives with respect to `u`, `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexSample {
    pub value: [f64; 4],
    pub d_du: [f64; 4],
    pub d_dv: [f64; 4],
}

/// Samples an RGBA texture at `uv` with bilinear filtering and clamp-to-edge
/// addressing. `u` runs along columns and `v` along rows, both from 0 at the
/// top-left corner to 1 at the bottom-right; texel centers sit at
/// `(i + ½)/width`.
pub fn sample(tex: &Image, uv: Point2) -> TexSample {
    let (w, h) = (tex.width, tex.height);
    let axis = |c: f64, n: usize| -> (usize, usize, f64, f64) {
        let x = c * n as f64 - 0.5;
        if n == 1 || x <= 0.0 {
            return (0, 0, 0.0, 0.0);
        }
        if x >= (n - 1) as f64 {
            return (n - 1, n - 1, 0.0, 0.0);
        }
        let i = x.floor() as usize;
        (i, i + 1, x - i as f64, n as f64)
    };
    let (x0, x1, fx, sx) = axis(uv[0], w);
    let (y0, y1, fy, sy) = axis(uv[1], h);
    let (p00, p10, p01, p11) = (tex.pixel(x0, y0), tex.pixel(x1, y0), tex.pixel(x0, y1), tex.pixel(x1, y1));
    let mut out = TexSample {
        value: [0.0; 4],
        d_du: [0.0; 4],
        d_dv: [0.0; 4],
    };
    let nc = tex.channels.min(4);
    for k in 0..nc {
        let top = p00[k] + (p10[k] - p00[k]) * fx;
        let bot = p01[k] + (p11[k] - p01[k]) * fx;
        out.value[k] = top + (bot - top) * fy;
        out.d_du[k] = sx * ((p10[k] - p00[k]) * (1.0 - fy) + (p11[k] - p01[k]) * fy);
        out.d_dv[k] = sy * (bot - top);
    }
    if nc < 4 {
        out.value[3] = 1.0;
    }
    out
}
