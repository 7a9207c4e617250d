//! Spatial operations on `[N, C, H, W]` tensors.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::TensorError;

fn nchw(shape: &[usize], op: &str) -> Result<[usize; 4], TensorError> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(TensorError::Shape(format!(
            "{op} expects [N,C,H,W], got {shape:?}"
        ))),
    }
}

/// Geometry of one convolution, shared by forward and backward.
#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
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
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one image `[C, H, W]` into `[C·kh·kw, oh·ow]`.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let p = self.col_cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, slot) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *slot = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto an image gradient.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let p = self.col_cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation; `weight: [F, C, kh, kw]`, `bias: [F]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.shape(input), "conv2d input")?;
        let [f, wc, kh, kw] = nchw(self.shape(weight), "conv2d weight")?;
        if stride == 0 {
            return Err(TensorError::Shape("conv2d stride must be positive".into()));
        }
        if wc != c {
            return Err(TensorError::Shape(format!(
                "conv2d: input has {c} channels but weight expects {wc}"
            )));
        }
        if self.shape(bias) != [f] {
            return Err(TensorError::Shape(format!(
                "conv2d: bias shape {:?} does not match {f} filters",
                self.shape(bias)
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::Shape(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, p) = (g.col_rows(), g.col_cols());
        let xv = self.value(input).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![T::zero(); n * f * p];
        let mut cols = if g.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * p]
        };
        for b in 0..n {
            let img = &xv[b * c * h * w..(b + 1) * c * h * w];
            let dst = &mut out[b * f * p..(b + 1) * f * p];
            for (fi, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(bv[fi]);
            }
            let src = if g.pointwise() {
                img
            } else {
                g.im2col(img, &mut cols);
                &cols
            };
            T::gemm(f, rows, p, wv, false, src, false, T::one(), dst);
        }
        let value = Tensor::new(vec![n, f, g.oh, g.ow], out)?;
        Ok(self.push(value, &[input, weight, bias], move |a| {
            let gy = a.grad.data();
            let xv = a.inputs[0].data();
            let wv = a.inputs[1].data();
            let mut dx = a.needs[0].then(|| vec![T::zero(); n * c * h * w]);
            let mut dw = a.needs[1].then(|| vec![T::zero(); f * rows]);
            let mut db = a.needs[2].then(|| vec![T::zero(); f]);
            let mut cols = vec![T::zero(); rows * p];
            let mut dcols = vec![T::zero(); rows * p];
            for b in 0..n {
                let gb = &gy[b * f * p..(b + 1) * f * p];
                if let Some(db) = db.as_mut() {
                    for (fi, chunk) in gb.chunks_exact(p).enumerate() {
                        db[fi] = chunk.iter().fold(db[fi], |acc, &v| acc + v);
                    }
                }
                let img = &xv[b * c * h * w..(b + 1) * c * h * w];
                if let Some(dw) = dw.as_mut() {
                    let src = if g.pointwise() {
                        img
                    } else {
                        g.im2col(img, &mut cols);
                        &cols
                    };
                    T::gemm(f, p, rows, gb, false, src, true, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dimg = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                    if g.pointwise() {
                        T::gemm(rows, f, p, wv, true, gb, false, T::zero(), dimg);
                    } else {
                        T::gemm(rows, f, p, wv, true, gb, false, T::zero(), &mut dcols);
                        g.col2im(&dcols, dimg);
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(vec![n, c, h, w], d).expect("shape")),
                dw.map(|d| Tensor::new(vec![f, c, kh, kw], d).expect("shape")),
                db.map(|d| Tensor::new(vec![f], d).expect("shape")),
            ]
        }))
    }

    /// 2×2 max pooling with stride 2. Ties route the gradient to the first maximum in
    /// row-major window order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.shape(input), "maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Shape(format!(
                "maxpool2d needs even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let in_shape = vec![n, c, h, w];
        Ok(self.push(value, &[input], move |a| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (&src, &g) in argmax.iter().zip(a.grad.data()) {
                d[src] = d[src] + g;
            }
            vec![Some(dx)]
        }))
    }

    /// Non-overlapping `k×k` average pooling; extents must be divisible by `k`.
    pub fn avgpool2d(&mut self, input: Var, k: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.shape(input), "avgpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::Shape(format!(
                "avgpool2d window {k} does not divide {h}x{w}"
            )));
        }
        if k == 1 {
            return Ok(input);
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::lit((k * k) as f64);
        let xv = self.value(input).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    let o = (plane * oh + y / k) * ow + x / k;
                    out[o] = out[o] + xv[(plane * h + y) * w + x] * inv;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, &[input], move |a| {
            let g = a.grad.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        dx[(plane * h + y) * w + x] = g[(plane * oh + y / k) * ow + x / k] * inv;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], dx).expect("shape"))]
        }))
    }

    /// Spatial mean: `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.shape(input), "global_avg_pool")?;
        let p = h * w;
        let inv = T::one() / T::lit(p as f64);
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks_exact(p)
            .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, &[input], move |a| {
            let mut dx = Vec::with_capacity(n * c * p);
            for &g in a.grad.data() {
                dx.extend(std::iter::repeat(g * inv).take(p));
            }
            vec![Some(Tensor::new(vec![n, c, h, w], dx).expect("shape"))]
        }))
    }

    /// Keeps the top-left `out_h × out_w` window of every plane.
    pub fn crop2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.shape(input), "crop2d")?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(TensorError::Shape(format!(
                "crop2d: cannot crop {h}x{w} to {out_h}x{out_w}"
            )));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(input);
        }
        let xv = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            for y in 0..out_h {
                let row = (plane * h + y) * w;
                out.extend_from_slice(&xv[row..row + out_w]);
            }
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, &[input], move |a| {
            let g = a.grad.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                for y in 0..out_h {
                    let src = (plane * out_h + y) * out_w;
                    let dst = (plane * h + y) * w;
                    dx[dst..dst + out_w].copy_from_slice(&g[src..src + out_w]);
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], dx).expect("shape"))]
        }))
    }

    /// Per-channel batch normalization. In [`NormMode::Train`] the batch statistics are
    /// used and `stats` is updated with factor [`BN_MOMENTUM`] (unbiased variance).
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.shape(input), "batchnorm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape(format!(
                "batchnorm2d: affine params must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if stats.mean.shape() != [c] || stats.var.shape() != [c] {
            return Err(TensorError::Shape(format!(
                "batchnorm2d: running stats do not match {c} channels"
            )));
        }
        let p = h * w;
        let m = n * p;
        if mode == NormMode::Train && m < 2 {
            return Err(TensorError::Shape(format!(
                "batchnorm2d in train mode needs at least 2 values per channel, got {m}"
            )));
        }
        let eps = T::lit(BN_EPS);
        let xv = self.value(input).data();
        let (mean, var) = match mode {
            NormMode::Train => {
                let inv_m = T::one() / T::lit(m as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let plane = &xv[(b * c + ch) * p..][..p];
                        mean[ch] = plane.iter().fold(mean[ch], |acc, &v| acc + v);
                    }
                }
                mean.iter_mut().for_each(|v| *v = *v * inv_m);
                for b in 0..n {
                    for ch in 0..c {
                        let plane = &xv[(b * c + ch) * p..][..p];
                        var[ch] = plane.iter().fold(var[ch], |acc, &v| {
                            let d = v - mean[ch];
                            acc + d * d
                        });
                    }
                }
                var.iter_mut().for_each(|v| *v = *v * inv_m);
                let mom = T::lit(BN_MOMENTUM);
                let unbias = T::lit(m as f64 / (m as f64 - 1.0));
                for ch in 0..c {
                    let rm = &mut stats.mean.data_mut()[ch];
                    *rm = (T::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut stats.var.data_mut()[ch];
                    *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                }
                (mean, var)
            }
            NormMode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                for i in off..off + p {
                    let z = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = gv[ch] * z + bv[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, &[input, gamma, beta], move |a| {
            let g = a.grad.data();
            let gv = a.inputs[1].data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * p;
                    for i in off..off + p {
                        dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                        dbeta[ch] = dbeta[ch] + g[i];
                    }
                }
            }
            let dx = a.needs[0].then(|| {
                let mut dx = vec![T::zero(); g.len()];
                let inv_m = T::one() / T::lit(m as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * p;
                        let k = gv[ch] * inv_std[ch];
                        for i in off..off + p {
                            dx[i] = match mode {
                                // dgamma/dbeta double as the per-channel sums of dy·x̂ and dy.
                                NormMode::Train => {
                                    k * (g[i] - dbeta[ch] * inv_m - xhat[i] * dgamma[ch] * inv_m)
                                }
                                NormMode::Eval => k * g[i],
                            };
                        }
                    }
                }
                Tensor::new(vec![n, c, h, w], dx).expect("shape")
            });
            vec![
                dx,
                Some(Tensor::new(vec![c], dgamma).expect("shape")),
                Some(Tensor::new(vec![c], dbeta).expect("shape")),
            ]
        }))
    }

    /// Adds `v: [N, C]` to every spatial position of `x: [N, C, H, W]`.
    pub fn add_channel_vector(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.shape(x), "add_channel_vector")?;
        if self.shape(v) != [n, c] {
            return Err(TensorError::Shape(format!(
                "add_channel_vector: vector {:?} does not match [{n},{c}]",
                self.shape(v)
            )));
        }
        let p = h * w;
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for (plane, chunk) in out.chunks_exact_mut(p).enumerate() {
            chunk.iter_mut().for_each(|o| *o = *o + vv[plane]);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, &[x, v], move |a| {
            let dv: Vec<T> = a
                .grad
                .data()
                .chunks_exact(p)
                .map(|ch| ch.iter().fold(T::zero(), |acc, &g| acc + g))
                .collect();
            vec![
                Some(a.grad.clone()),
                Some(Tensor::new(vec![n, c], dv).expect("shape")),
            ]
        }))
    }

    /// `out[n, p] = Σ_c features[n, c, p] · v[n, c]`: per-position dot product with a
    /// channel vector, giving `[N, H·W]`.
    pub fn channel_dot(&mut self, features: Var, v: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.shape(features), "channel_dot")?;
        if self.shape(v) != [n, c] {
            return Err(TensorError::Shape(format!(
                "channel_dot: vector {:?} does not match [{n},{c}]",
                self.shape(v)
            )));
        }
        let p = h * w;
        let fv = self.value(features).data();
        let vv = self.value(v).data();
        let mut out = vec![T::zero(); n * p];
        for b in 0..n {
            let dst = &mut out[b * p..(b + 1) * p];
            for ch in 0..c {
                let s = vv[b * c + ch];
                for (o, &f) in dst.iter_mut().zip(&fv[(b * c + ch) * p..][..p]) {
                    *o = *o + f * s;
                }
            }
        }
        let value = Tensor::new(vec![n, p], out)?;
        Ok(self.push(value, &[features, v], move |a| {
            let g = a.grad.data();
            let (fv, vv) = (a.inputs[0].data(), a.inputs[1].data());
            let dfeat = a.needs[0].then(|| {
                let mut d = vec![T::zero(); n * c * p];
                for b in 0..n {
                    for ch in 0..c {
                        let s = vv[b * c + ch];
                        for (o, &gv) in d[(b * c + ch) * p..][..p].iter_mut().zip(&g[b * p..(b + 1) * p]) {
                            *o = gv * s;
                        }
                    }
                }
                Tensor::new(vec![n, c, h, w], d).expect("shape")
            });
            let dv = a.needs[1].then(|| {
                let mut d = vec![T::zero(); n * c];
                for b in 0..n {
                    for ch in 0..c {
                        d[b * c + ch] = fv[(b * c + ch) * p..][..p]
                            .iter()
                            .zip(&g[b * p..(b + 1) * p])
                            .fold(T::zero(), |acc, (&f, &gv)| acc + f * gv);
                    }
                }
                Tensor::new(vec![n, c], d).expect("shape")
            });
            vec![dfeat, dv]
        }))
    }

    /// `out[n, c] = Σ_p weights[n, p] · features[n, c, p]` for `features: [N, C, H, W]`
    /// and `weights: [N, H·W]`.
    pub fn spatial_weighted_sum(&mut self, features: Var, weights: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.shape(features), "spatial_weighted_sum")?;
        let p = h * w;
        if self.shape(weights) != [n, p] {
            return Err(TensorError::Shape(format!(
                "spatial_weighted_sum: weights {:?} do not match [{n},{p}]",
                self.shape(weights)
            )));
        }
        let fv = self.value(features).data();
        let wv = self.value(weights).data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let wrow = &wv[b * p..(b + 1) * p];
            for ch in 0..c {
                let plane = &fv[(b * c + ch) * p..][..p];
                out[b * c + ch] = plane
                    .iter()
                    .zip(wrow)
                    .fold(T::zero(), |acc, (&f, &a)| acc + f * a);
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, &[features, weights], move |a| {
            let g = a.grad.data();
            let (fv, wv) = (a.inputs[0].data(), a.inputs[1].data());
            let dfeat = a.needs[0].then(|| {
                let mut d = vec![T::zero(); n * c * p];
                for b in 0..n {
                    for ch in 0..c {
                        let gv = g[b * c + ch];
                        let dst = &mut d[(b * c + ch) * p..][..p];
                        for (o, &wt) in dst.iter_mut().zip(&wv[b * p..(b + 1) * p]) {
                            *o = gv * wt;
                        }
                    }
                }
                Tensor::new(vec![n, c, h, w], d).expect("shape")
            });
            let dw = a.needs[1].then(|| {
                let mut d = vec![T::zero(); n * p];
                for b in 0..n {
                    for ch in 0..c {
                        let gv = g[b * c + ch];
                        let plane = &fv[(b * c + ch) * p..][..p];
                        for (o, &f) in d[b * p..(b + 1) * p].iter_mut().zip(plane) {
                            *o = *o + gv * f;
                        }
                    }
                }
                Tensor::new(vec![n, p], d).expect("shape")
            });
            vec![dfeat, dw]
        }))
    }
}
