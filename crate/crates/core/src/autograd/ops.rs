use super::{Graph, LiouSample, Op, Tensor, Var, OUT_OF_BOUNDS_SCORE};
use crate::error::{shape_err, Result};

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C = A · B` with explicit strides; `beta` scales the existing `C`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: the strides address only elements inside `a`, `b` and `c`,
    // whose lengths the callers derive from the same m, k, n.
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

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.rows() * p];
        for ci in 0..self.c_in {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, d) in row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], out: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &mut out[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sample position along one axis for align-corners-false resizing.
fn resize_coord(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(in_len - 1);
    let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
    let t = if i1 == i0 { 0.0 } else { s - i0 as f64 };
    (i0, i1, t)
}

/// Corners and weights of a zero-padded bilinear sample at `(sy, sx)`;
/// zero-weight and out-of-frame corners are omitted.
fn bilinear_taps(sy: f64, sx: f64, h: usize, w: usize) -> ([(usize, f64); 4], usize) {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let ty = sy - y0;
    let tx = sx - x0;
    let mut taps = [(0usize, 0.0f64); 4];
    let mut n = 0;
    for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
        for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
            let wgt = wy * wx;
            if wgt == 0.0 {
                continue;
            }
            let yy = y0 + dy;
            let xx = x0 + dx;
            if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                continue;
            }
            taps[n] = (yy as usize * w + xx as usize, wgt);
            n += 1;
        }
    }
    (taps, n)
}

fn check_same(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return shape_err(format!("{what}: shapes {:?} and {:?} differ", g.shape(a), g.shape(b)));
    }
    Ok(())
}

pub(crate) fn liou_terms(pred: &[f64], target: &[f64], e: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&r, &t) in pred.iter().zip(target) {
        inter += r.min(t) + e - (r.max(t) - e);
        union += r.max(t) + e - (r.min(t) - e);
    }
    (inter, union)
}

impl Graph {
    /// Cross-correlation with zero padding; `weight` is `(C_out, C_in, kh, kw)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return shape_err("stride must be >= 1");
        }
        let (n, c_in, h, w) = self.value(input).nchw()?;
        let (c_out, wc, kh, kw) = match *self.shape(weight) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return shape_err(format!("conv weight must be 4-D, got {s:?}")),
        };
        if wc != c_in {
            return shape_err(format!("conv expects {wc} input channels, got {c_in}"));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return shape_err(format!("bias has {} entries, expected {c_out}", self.value(b).len()));
            }
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err("kernel larger than padded input");
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let p = geom.positions();
        let keep_cols = self.requires_grad(weight);
        let mut out = vec![0.0; n * c_out * p];
        let mut cache = Vec::new();
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let k = geom.rows();
            for b in 0..n {
                let cols = geom.im2col(&x[b * c_in * h * w..(b + 1) * c_in * h * w]);
                let dst = &mut out[b * c_out * p..(b + 1) * c_out * p];
                gemm(c_out, k, p, wt, k as isize, 1, &cols, p as isize, 1, 0.0, dst);
                if let Some(bv) = bias {
                    let bias = self.value(bv).data();
                    for co in 0..c_out {
                        dst[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bias[co]);
                    }
                }
                if keep_cols {
                    cache.push(cols);
                }
            }
        }
        let shape =
            if self.shape(input).len() == 3 { vec![c_out, geom.oh, geom.ow] } else { vec![n, c_out, geom.oh, geom.ow] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, stride, pad, cols: cache }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape");
        self.push(value, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid_scalar(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    /// Per-pixel softmax across the channel dimension.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, h, w) = t.nchw()?;
        if c == 0 {
            return shape_err("softmax needs at least one channel");
        }
        let hw = h * w;
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mx = (0..c).map(|k| x[base + k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..c {
                    let e = (x[base + k * hw + p] - mx).exp();
                    out[base + k * hw + p] = e;
                    total += e;
                }
                for k in 0..c {
                    out[base + k * hw + p] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::SoftmaxChannels(a)))
    }

    /// Align-corners-false bilinear resize. With `scale_values`, the tensor is
    /// read as a `(dx, dy)` vector field and its components are multiplied by
    /// the horizontal and vertical scale factors.
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize, scale_values: bool) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return shape_err("resize target must be non-empty");
        }
        let t = self.value(a);
        let (n, c, h, w) = t.nchw()?;
        if scale_values && c != 2 {
            return shape_err(format!("value scaling needs a 2-channel field, got {c}"));
        }
        let scale = scale_values.then(|| (out_w as f64 / w as f64, out_h as f64 / h as f64));
        let x = t.data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for b in 0..n {
            for ch in 0..c {
                let src = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let dst = &mut out[(b * c + ch) * out_h * out_w..(b * c + ch + 1) * out_h * out_w];
                let mult = match scale {
                    Some((sx, sy)) => {
                        if ch == 0 {
                            sx
                        } else {
                            sy
                        }
                    }
                    None => 1.0,
                };
                for oy in 0..out_h {
                    let (y0, y1, ty) = resize_coord(oy, h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1, tx) = resize_coord(ox, w, out_w);
                        let mut v = 0.0;
                        for (yy, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                            for (xx, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                                let wgt = wy * wx;
                                if wgt != 0.0 {
                                    v += wgt * src[yy * w + xx];
                                }
                            }
                        }
                        dst[oy * out_w + ox] = if scale.is_some() { v * mult } else { v };
                    }
                }
            }
        }
        let shape = if t.shape().len() == 3 { vec![c, out_h, out_w] } else { vec![n, c, out_h, out_w] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Resize { input: a, scale }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concatenation of an empty list");
        };
        let (n, _, h, w) = self.value(first).nchw()?;
        let ndim = self.shape(first).len();
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).nchw()?;
            if (pn, ph, pw) != (n, h, w) || self.shape(p).len() != ndim {
                return shape_err(format!("cannot concatenate {:?} with {:?}", self.shape(first), self.shape(p)));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[ndim - 3];
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let shape = if ndim == 3 { vec![total_c, h, w] } else { vec![n, total_c, h, w] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// `out(x) = map(x + flow(x))`, bilinear, zero outside the frame. The flow
    /// holds `(dx, dy)` in pixels of the map's grid.
    pub fn backward_warp(&mut self, map: Var, flow: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(map).nchw()?;
        let (fnb, fc, fh, fw) = self.value(flow).nchw()?;
        if (fnb, fc, fh, fw) != (n, 2, h, w) {
            return shape_err(format!("flow {:?} does not match map {:?}", self.shape(flow), self.shape(map)));
        }
        let hw = h * w;
        let m = self.value(map).data();
        let f = self.value(flow).data();
        let mut out = vec![0.0; m.len()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let sx = x as f64 + f[(b * 2) * hw + p];
                    let sy = y as f64 + f[(b * 2 + 1) * hw + p];
                    let (taps, k) = bilinear_taps(sy, sx, h, w);
                    for ch in 0..c {
                        let plane = &m[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        let mut v = 0.0;
                        for &(idx, wgt) in &taps[..k] {
                            v += wgt * plane[idx];
                        }
                        out[(b * c + ch) * hw + p] = v;
                    }
                }
            }
        }
        let value = Tensor::new(self.shape(map), out)?;
        Ok(self.push(value, Op::Warp { map, flow }))
    }

    /// `out[d](x) = prev(x + d) · cur(x)` for displacements in
    /// `[-radius, radius]²`, channels ordered row-major over `(dy, dx)`.
    pub fn local_correlation(&mut self, cur: Var, prev: Var, radius: usize) -> Result<Var> {
        check_same(self, cur, prev, "correlation")?;
        if radius == 0 {
            return shape_err("correlation radius must be >= 1");
        }
        let (n, k, h, w) = self.value(cur).nchw()?;
        let d = 2 * radius + 1;
        let hw = h * w;
        let a = self.value(cur).data();
        let p = self.value(prev).data();
        let mut out = vec![OUT_OF_BOUNDS_SCORE; n * d * d * hw];
        let r = radius as isize;
        for b in 0..n {
            for dy in -r..=r {
                for dx in -r..=r {
                    let ch = ((dy + r) * d as isize + (dx + r)) as usize;
                    let dst = &mut out[(b * d * d + ch) * hw..(b * d * d + ch + 1) * hw];
                    for y in 0..h as isize {
                        let yy = y + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for x in 0..w as isize {
                            let xx = x + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let pi = (y * w as isize + x) as usize;
                            let qi = (yy * w as isize + xx) as usize;
                            let mut s = 0.0;
                            for kk in 0..k {
                                s += p[(b * k + kk) * hw + qi] * a[(b * k + kk) * hw + pi];
                            }
                            dst[pi] = s;
                        }
                    }
                }
            }
        }
        let shape = if self.shape(cur).len() == 3 { vec![d * d, h, w] } else { vec![n, d * d, h, w] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Correlation { cur, prev, radius }))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        check_same(self, a, b, what)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over elements of `−α (1 − p_t)^γ ln p_t`.
    pub fn focal_loss(&mut self, prob: Var, target: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let p = self.value(prob).data();
        if p.len() != target.len() {
            return shape_err(format!("focal loss: {} probabilities, {} targets", p.len(), target.len()));
        }
        let total: f64 = p.iter().zip(target).map(|(&p, &t)| focal_term(p, t, alpha, gamma).0).sum();
        let value = Tensor::scalar(total / p.len().max(1) as f64);
        Ok(self.push(value, Op::Focal { prob, target: target.to_vec(), alpha, gamma }))
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, input: Var, target: &[f64]) -> Result<Var> {
        let x = self.value(input).data();
        if x.len() != target.len() {
            return shape_err(format!("mse: {} values, {} targets", x.len(), target.len()));
        }
        let total: f64 = x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(total / x.len().max(1) as f64);
        Ok(self.push(value, Op::Mse { input, target: target.to_vec() }))
    }

    /// Mean over `samples` of the lane-IoU loss between `basis · coeff[pixel]`
    /// and `targets[target]`. `basis` is the row-major `N × M` eigenlane
    /// matrix; an empty sample list gives 0.
    pub fn liou_map_loss(
        &mut self,
        coeff: Var,
        basis: &[f64],
        samples: Vec<LiouSample>,
        targets: Vec<Vec<f64>>,
        half_width: f64,
    ) -> Result<Var> {
        let (c, h, w) = self.value(coeff).chw()?;
        if basis.len() % c != 0 || basis.is_empty() {
            return shape_err(format!("basis of {} values does not have {c} columns", basis.len()));
        }
        let n = basis.len() / c;
        if targets.iter().any(|t| t.len() != n) {
            return shape_err("target lanes must have one value per basis row");
        }
        if samples.iter().any(|s| s.pixel >= h * w || s.target >= targets.len()) {
            return shape_err("regression sample out of range");
        }
        let data = self.value(coeff).data();
        let mut total = 0.0;
        let mut pred = vec![0.0; n];
        for s in &samples {
            decode_at(basis, data, c, h * w, s.pixel, &mut pred);
            let (inter, union) = liou_terms(&pred, &targets[s.target], half_width);
            total += 1.0 - inter / union;
        }
        let value = Tensor::scalar(if samples.is_empty() { 0.0 } else { total / samples.len() as f64 });
        Ok(self.push(value, Op::Liou { coeff, basis: basis.to_vec(), samples, targets, half_width }))
    }

    pub(super) fn backprop(&mut self, node: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, pad, cols } => {
                self.conv_backward(node, *input, *weight, *bias, *stride, *pad, cols, grad)
            }
            Op::Relu(a) => {
                let g: Vec<f64> =
                    self.value(*a).data().iter().zip(grad).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                self.accumulate(*a, &g);
            }
            Op::Silu(a) => {
                let g: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| {
                        let s = sigmoid_scalar(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, &g);
            }
            Op::Sigmoid(a) => {
                let g: Vec<f64> =
                    self.nodes[node].value.data().iter().zip(grad).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                self.accumulate(*a, &g);
            }
            Op::SoftmaxChannels(a) => {
                let y = &self.nodes[node].value;
                let (n, c, h, w) = y.nchw().expect("checked in forward");
                let hw = h * w;
                let yd = y.data();
                let mut g = vec![0.0; yd.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|k| grad[base + k * hw + p] * yd[base + k * hw + p]).sum();
                        for k in 0..c {
                            let i = base + k * hw + p;
                            g[i] = yd[i] * (grad[i] - dot);
                        }
                    }
                }
                self.accumulate(*a, &g);
            }
            Op::Resize { input, scale } => {
                let (n, c, h, w) = self.value(*input).nchw().expect("checked");
                let (_, _, out_h, out_w) = self.nodes[node].value.nchw().expect("checked");
                let mut g = vec![0.0; n * c * h * w];
                for b in 0..n {
                    for ch in 0..c {
                        let mult = match scale {
                            Some((sx, sy)) => {
                                if ch == 0 {
                                    *sx
                                } else {
                                    *sy
                                }
                            }
                            None => 1.0,
                        };
                        let src = &grad[(b * c + ch) * out_h * out_w..(b * c + ch + 1) * out_h * out_w];
                        let dst = &mut g[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        for oy in 0..out_h {
                            let (y0, y1, ty) = resize_coord(oy, h, out_h);
                            for ox in 0..out_w {
                                let (x0, x1, tx) = resize_coord(ox, w, out_w);
                                let go = src[oy * out_w + ox] * mult;
                                for (yy, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                                    for (xx, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                                        dst[yy * w + xx] += wy * wx * go;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*input, &g);
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = self.nodes[node].value.nchw().expect("checked");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let (_, c, _, _) = self.value(p).nchw().expect("checked");
                    let mut g = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * total_c + offset) * hw;
                        g.extend_from_slice(&grad[start..start + c * hw]);
                    }
                    self.accumulate(p, &g);
                    offset += c;
                }
            }
            Op::Warp { map, flow } => self.warp_backward(*map, *flow, grad),
            Op::Correlation { cur, prev, radius } => self.correlation_backward(*cur, *prev, *radius, grad),
            Op::Add(a, b) => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = self.value(*b).data().iter().zip(grad).map(|(y, g)| y * g).collect();
                let gb: Vec<f64> = self.value(*a).data().iter().zip(grad).map(|(x, g)| x * g).collect();
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Scale(a, s) => {
                let g: Vec<f64> = grad.iter().map(|g| g * s).collect();
                self.accumulate(*a, &g);
            }
            Op::Sum(a) => {
                let g = vec![grad[0]; self.value(*a).len()];
                self.accumulate(*a, &g);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let g = vec![grad[0] / len.max(1) as f64; len];
                self.accumulate(*a, &g);
            }
            Op::Focal { prob, target, alpha, gamma } => {
                let p = self.value(*prob).data();
                let scale = grad[0] / p.len().max(1) as f64;
                let g: Vec<f64> =
                    p.iter().zip(target).map(|(&p, &t)| scale * focal_term(p, t, *alpha, *gamma).1).collect();
                self.accumulate(*prob, &g);
            }
            Op::Mse { input, target } => {
                let x = self.value(*input).data();
                let scale = 2.0 * grad[0] / x.len().max(1) as f64;
                let g: Vec<f64> = x.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                self.accumulate(*input, &g);
            }
            Op::Liou { coeff, basis, samples, targets, half_width } => {
                if samples.is_empty() {
                    return;
                }
                let (c, h, w) = self.value(*coeff).chw().expect("checked");
                let hw = h * w;
                let n = basis.len() / c;
                let data = self.value(*coeff).data();
                let mut g = vec![0.0; data.len()];
                let mut pred = vec![0.0; n];
                let scale = grad[0] / samples.len() as f64;
                for s in samples {
                    decode_at(basis, data, c, hw, s.pixel, &mut pred);
                    let target = &targets[s.target];
                    let (inter, union) = liou_terms(&pred, target, *half_width);
                    // d(1 - I/U)/dr_i = sign(r_i - t_i) (U + I) / U²
                    let k = (union + inter) / (union * union);
                    for i in 0..n {
                        let d = pred[i] - target[i];
                        let dr = if d > 0.0 {
                            k
                        } else if d < 0.0 {
                            -k
                        } else {
                            0.0
                        };
                        if dr == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            g[j * hw + s.pixel] += scale * dr * basis[i * c + j];
                        }
                    }
                }
                self.accumulate(*coeff, &g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &mut self,
        node: usize,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        cols: &[Vec<f64>],
        grad: &[f64],
    ) {
        let (n, c_in, h, w) = self.value(input).nchw().expect("checked");
        let (c_out, _, kh, kw) = match *self.shape(weight) {
            [a, b, c, d] => (a, b, c, d),
            _ => unreachable!(),
        };
        let (_, _, oh, ow) = self.nodes[node].value.nchw().expect("checked");
        let geom = ConvGeom { c_in, h, w, kh, kw, stride, pad, oh, ow };
        let p = geom.positions();
        let k = geom.rows();
        if let Some(b) = bias {
            if self.requires_grad(b) {
                let mut gb = vec![0.0; c_out];
                for bi in 0..n {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        *acc += grad[(bi * c_out + co) * p..(bi * c_out + co + 1) * p].iter().sum::<f64>();
                    }
                }
                self.accumulate(b, &gb);
            }
        }
        if self.requires_grad(weight) {
            let mut gw = vec![0.0; c_out * k];
            for (bi, col) in cols.iter().enumerate() {
                let go = &grad[bi * c_out * p..(bi + 1) * c_out * p];
                gemm(c_out, p, k, go, p as isize, 1, col, 1, p as isize, 1.0, &mut gw);
            }
            self.accumulate(weight, &gw);
        }
        if self.requires_grad(input) {
            let wt = self.value(weight).data();
            let mut gi = vec![0.0; n * c_in * h * w];
            let mut dcols = vec![0.0; k * p];
            for bi in 0..n {
                let go = &grad[bi * c_out * p..(bi + 1) * c_out * p];
                gemm(k, c_out, p, wt, 1, k as isize, go, p as isize, 1, 0.0, &mut dcols);
                geom.col2im_add(&dcols, &mut gi[bi * c_in * h * w..(bi + 1) * c_in * h * w]);
            }
            self.accumulate(input, &gi);
        }
    }

    fn warp_backward(&mut self, map: Var, flow: Var, grad: &[f64]) {
        let (n, c, h, w) = self.value(map).nchw().expect("checked");
        let hw = h * w;
        let m = self.value(map).data();
        let f = self.value(flow).data();
        let want_map = self.requires_grad(map);
        let want_flow = self.requires_grad(flow);
        let mut gm = if want_map { vec![0.0; m.len()] } else { Vec::new() };
        let mut gf = if want_flow { vec![0.0; f.len()] } else { Vec::new() };
        let sample = |plane: &[f64], yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                0.0
            } else {
                plane[yy as usize * w + xx as usize]
            }
        };
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let sx = x as f64 + f[(b * 2) * hw + p];
                    let sy = y as f64 + f[(b * 2 + 1) * hw + p];
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (tx, ty) = (sx - x0, sy - y0);
                    let (taps, k) = bilinear_taps(sy, sx, h, w);
                    let mut dsx = 0.0;
                    let mut dsy = 0.0;
                    for ch in 0..c {
                        let go = grad[(b * c + ch) * hw + p];
                        if go == 0.0 {
                            continue;
                        }
                        let off = (b * c + ch) * hw;
                        if want_map {
                            for &(idx, wgt) in &taps[..k] {
                                gm[off + idx] += wgt * go;
                            }
                        }
                        if want_flow {
                            let plane = &m[off..off + hw];
                            let v00 = sample(plane, y0, x0);
                            let v01 = sample(plane, y0, x0 + 1.0);
                            let v10 = sample(plane, y0 + 1.0, x0);
                            let v11 = sample(plane, y0 + 1.0, x0 + 1.0);
                            dsx += go * ((1.0 - ty) * (v01 - v00) + ty * (v11 - v10));
                            dsy += go * ((1.0 - tx) * (v10 - v00) + tx * (v11 - v01));
                        }
                    }
                    if want_flow {
                        gf[(b * 2) * hw + p] += dsx;
                        gf[(b * 2 + 1) * hw + p] += dsy;
                    }
                }
            }
        }
        if want_map {
            self.accumulate(map, &gm);
        }
        if want_flow {
            self.accumulate(flow, &gf);
        }
    }

    fn correlation_backward(&mut self, cur: Var, prev: Var, radius: usize, grad: &[f64]) {
        let (n, k, h, w) = self.value(cur).nchw().expect("checked");
        let d = 2 * radius + 1;
        let hw = h * w;
        let a = self.value(cur).data();
        let p = self.value(prev).data();
        let mut ga = vec![0.0; a.len()];
        let mut gp = vec![0.0; p.len()];
        let r = radius as isize;
        for b in 0..n {
            for dy in -r..=r {
                for dx in -r..=r {
                    let ch = ((dy + r) * d as isize + (dx + r)) as usize;
                    let src = &grad[(b * d * d + ch) * hw..(b * d * d + ch + 1) * hw];
                    for y in 0..h as isize {
                        let yy = y + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for x in 0..w as isize {
                            let xx = x + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let pi = (y * w as isize + x) as usize;
                            let qi = (yy * w as isize + xx) as usize;
                            let go = src[pi];
                            if go == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                ga[(b * k + kk) * hw + pi] += go * p[(b * k + kk) * hw + qi];
                                gp[(b * k + kk) * hw + qi] += go * a[(b * k + kk) * hw + pi];
                            }
                        }
                    }
                }
            }
        }
        self.accumulate(cur, &ga);
        self.accumulate(prev, &gp);
    }
}

fn decode_at(basis: &[f64], coeff: &[f64], m: usize, hw: usize, pixel: usize, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..m).map(|j| basis[i * m + j] * coeff[j * hw + pixel]).sum();
    }
}

/// Focal loss value and derivative with respect to `p` for one element.
pub(crate) fn focal_term(p: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    const EPS: f64 = 1e-12;
    let positive = target >= 0.5;
    let pt_raw = if positive { p } else { 1.0 - p };
    let pt = pt_raw.clamp(EPS, 1.0);
    let q = 1.0 - pt;
    let loss = -alpha * q.powf(gamma) * pt.ln();
    let dpt = if pt_raw < EPS {
        0.0
    } else {
        let lead = if gamma == 0.0 || q == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt.ln() };
        alpha * (lead - q.powf(gamma) / pt)
    };
    (loss, if positive { dpt } else { -dpt })
}
