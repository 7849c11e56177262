use super::{CustomOp, Graph, Op, Tensor, Var};
use crate::error::{Error, Result};

/// `c = op(a)·op(b) + beta·c` for row-major `a` (`m×k` after the
/// optional transpose), `b` (`k×n`) and `c` (`m×n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable through the
    // given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same length")
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Visits `(col_row, col_offset, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, cin) = (self.k, self.cin);
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * cin;
                            f(row, (ky * k + kx) * cin, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let cin = self.cin;
        let mut cols = vec![0.0; self.rows() * patch];
        self.for_each_tap(|row, off, src| {
            cols[row * patch + off..row * patch + off + cin].copy_from_slice(&x[src..src + cin]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let patch = self.patch();
        let cin = self.cin;
        self.for_each_tap(|row, off, src| {
            for c in 0..cin {
                dx[src + c] += cols[row * patch + off + c];
            }
        });
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (n, h, wd, cin) = match *x.shape() {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(Error::shape("conv2d", format!("input {:?} is not HWC or NHWC", x.shape()))),
    };
    let [k, k2, wc, cout] = *w.shape() else {
        return Err(Error::shape("conv2d", format!("kernel {:?} is not KxKxCinxCout", w.shape())));
    };
    if k != k2 || wc != cin || stride == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} vs kernel {:?} (stride {stride})", x.shape(), w.shape()),
        ));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("input {:?} smaller than kernel {k}", x.shape())));
    }
    Ok(ConvGeom {
        n,
        h,
        w: wd,
        cin,
        k,
        cout,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (wd + 2 * pad - k) / stride + 1,
        stride,
        pad,
    })
}

impl Graph {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product. One operand may be a single-element tensor,
    /// which is broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let t = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.is_scalar() {
            let s = ta.item();
            map(tb, |x| s * x)
        } else if tb.is_scalar() {
            let s = tb.item();
            map(ta, |x| s * x)
        } else {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = map(self.value(a), |x| s * x);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale(a, s), rg))
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        };
        let (m, k, k2, n) = (*m, *k, *k2, *n);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// 2D convolution (cross-correlation) in channels-last layout.
    ///
    /// `x` is `[H,W,Cin]` or `[N,H,W,Cin]`, `w` is `[K,K,Cin,Cout]`, the
    /// optional bias is `[Cout]`. Output is `[Ho,Wo,Cout]` (or batched) with
    /// `Ho = (H + 2·pad − K)/stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geo = conv_geom(tx, tw, stride, pad)?;
        let mut out = vec![0.0; geo.rows() * geo.cout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != geo.cout {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", tb.shape(), geo.cout),
                ));
            }
            for row in out.chunks_mut(geo.cout) {
                row.copy_from_slice(tb.data());
            }
        }
        let cols = geo.im2col(tx.data());
        gemm(geo.rows(), geo.patch(), geo.cout, &cols, false, tw.data(), false, &mut out, 1.0);
        let shape = if tx.shape().len() == 3 {
            vec![geo.ho, geo.wo, geo.cout]
        } else {
            vec![geo.n, geo.ho, geo.wo, geo.cout]
        };
        let t = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let t = map(self.value(a), |x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LeakyRelu(a, slope), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = map(self.value(a), f64::tanh);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Tanh(a), rg))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = map(self.value(a), |x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Clamp(a, lo, hi), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let t = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Mean(a), rg))
    }

    /// Sum of squares.
    pub fn sqnorm(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SqNorm(a), rg))
    }

    /// Sum of absolute values.
    pub fn l1(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).data().iter().map(|x| x.abs()).sum());
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::L1(a), rg))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.value(*first).shape(), t.shape()),
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let Some(&rows) = ta.shape().first() else {
            return Err(Error::shape("slice", "scalar operand"));
        };
        if start + len > rows {
            return Err(Error::shape(
                "slice",
                format!("{:?} rows {}..{}", ta.shape(), start, start + len),
            ));
        }
        let stride = ta.len() / rows.max(1);
        let mut shape = ta.shape().to_vec();
        shape[0] = len;
        let t = Tensor::new(shape, ta.data()[start * stride..(start + len) * stride].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Slice { x: a, start }, rg))
    }

    /// Records an externally computed value with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }
}

pub(super) fn backward_node(g: &mut Graph, i: usize, up: &[f64]) -> Result<()> {
    let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
    let nodes = &g.nodes;
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            out.push((*a, up.to_vec()));
            out.push((*b, up.to_vec()));
        }
        Op::Sub(a, b) => {
            out.push((*a, up.to_vec()));
            out.push((*b, up.iter().map(|x| -x).collect()));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if ta.shape() == tb.shape() {
                if rg(*a) {
                    out.push((*a, up.iter().zip(tb.data()).map(|(u, y)| u * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, up.iter().zip(ta.data()).map(|(u, x)| u * x).collect()));
                }
            } else {
                let (s, vs, arr, varr) = if ta.is_scalar() {
                    (ta.item(), *a, tb, *b)
                } else {
                    (tb.item(), *b, ta, *a)
                };
                if rg(vs) {
                    let d: f64 = up.iter().zip(arr.data()).map(|(u, x)| u * x).sum();
                    out.push((vs, vec![d]));
                }
                if rg(varr) {
                    out.push((varr, up.iter().map(|u| u * s).collect()));
                }
            }
        }
        Op::Scale(a, s) => out.push((*a, up.iter().map(|u| u * s).collect())),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if rg(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, up, false, tb.data(), true, &mut da, 0.0);
                out.push((*a, da));
            }
            if rg(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, up, false, &mut db, 0.0);
                out.push((*b, db));
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (tx, tw) = (val(*x), val(*w));
            let geo = conv_geom(tx, tw, *stride, *pad)?;
            let (rows, patch, cout) = (geo.rows(), geo.patch(), geo.cout);
            if rg(*w) {
                let cols = geo.im2col(tx.data());
                let mut dw = vec![0.0; patch * cout];
                gemm(patch, rows, cout, &cols, true, up, false, &mut dw, 0.0);
                out.push((*w, dw));
            }
            if rg(*x) {
                let mut dcols = vec![0.0; rows * patch];
                gemm(rows, cout, patch, up, false, tw.data(), true, &mut dcols, 0.0);
                let mut dx = vec![0.0; tx.len()];
                geo.col2im(&dcols, &mut dx);
                out.push((*x, dx));
            }
            if let Some(b) = b.filter(|b| rg(*b)) {
                let mut db = vec![0.0; cout];
                for row in up.chunks(cout) {
                    for (d, u) in db.iter_mut().zip(row) {
                        *d += u;
                    }
                }
                out.push((b, db));
            }
        }
        Op::LeakyRelu(a, s) => {
            let d = up
                .iter()
                .zip(val(*a).data())
                .map(|(u, &x)| if x > 0.0 { *u } else { u * s })
                .collect();
            out.push((*a, d));
        }
        Op::Tanh(a) => {
            let y = nodes[i].value.data();
            out.push((*a, up.iter().zip(y).map(|(u, y)| u * (1.0 - y * y)).collect()));
        }
        Op::Clamp(a, lo, hi) => {
            let d = up
                .iter()
                .zip(val(*a).data())
                .map(|(u, x)| if (*lo..=*hi).contains(x) { *u } else { 0.0 })
                .collect();
            out.push((*a, d));
        }
        Op::Sum(a) => out.push((*a, vec![up[0]; val(*a).len()])),
        Op::Mean(a) => {
            let n = val(*a).len();
            out.push((*a, vec![up[0] / n as f64; n]));
        }
        Op::SqNorm(a) => out.push((*a, val(*a).data().iter().map(|x| 2.0 * x * up[0]).collect())),
        Op::L1(a) => out.push((
            *a,
            val(*a)
                .data()
                .iter()
                .map(|x| if *x > 0.0 { up[0] } else if *x < 0.0 { -up[0] } else { 0.0 })
                .collect(),
        )),
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).len();
                out.push((*p, up[off..off + n].to_vec()));
                off += n;
            }
        }
        Op::Reshape(a) => out.push((*a, up.to_vec())),
        Op::Slice { x, start } => {
            let tx = val(*x);
            let stride = tx.len() / tx.shape()[0].max(1);
            let off = start * stride;
            let mut d = vec![0.0; tx.len()];
            d[off..off + up.len()].copy_from_slice(up);
            out.push((*x, d));
        }
        Op::Custom(inputs, op) => {
            let tins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
            let grads = op.backward(&tins, &nodes[i].value, up)?;
            for (v, gr) in inputs.iter().zip(grads) {
                if let Some(gr) = gr {
                    if gr.len() != val(*v).len() {
                        return Err(Error::shape(
                            "custom backward",
                            format!("{} returned {} values for {:?}", op.name(), gr.len(), val(*v).shape()),
                        ));
                    }
                    out.push((*v, gr));
                }
            }
        }
    }
    for (v, d) in out {
        g.accumulate(v, &d);
    }
    Ok(())
}
