//! Dense and elementwise differentiable operations.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::TensorError;

fn shape_err(msg: String) -> TensorError {
    TensorError::Shape(msg)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    /// `y = x · wᵀ + b` for `x: [N, D]`, `w: [K, D]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(shape_err(format!(
                "linear expects x[N,D], w[K,D], b[K]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        if ws[1] != d {
            return Err(shape_err(format!(
                "linear: input dim {d} does not match weight dim {}",
                ws[1]
            )));
        }
        if bs[0] != k {
            return Err(shape_err(format!(
                "linear: bias length {} does not match {k} outputs",
                bs[0]
            )));
        }
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            d,
            k,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(value, &[x, w, b], move |a| {
            let g = a.grad.data();
            let (xv, wv) = (a.inputs[0].data(), a.inputs[1].data());
            let dx = a.needs[0].then(|| {
                let mut dx = vec![T::zero(); n * d];
                T::gemm(n, k, d, g, false, wv, false, T::zero(), &mut dx);
                Tensor::new(vec![n, d], dx).expect("shape")
            });
            let dw = a.needs[1].then(|| {
                let mut dw = vec![T::zero(); k * d];
                T::gemm(k, n, d, g, true, xv, false, T::zero(), &mut dw);
                Tensor::new(vec![k, d], dw).expect("shape")
            });
            let db = a.needs[2].then(|| {
                let mut db = vec![T::zero(); k];
                for row in g.chunks_exact(k) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                Tensor::new(vec![k], db).expect("shape")
            });
            vec![dx, dw, db]
        }))
    }

    /// `a · bᵀ` for `a: [N, D]`, `b: [M, D]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(shape_err(format!(
                "matmul_nt expects [N,D] and [M,D]; got {as_:?} and {bs:?}"
            )));
        }
        let (n, d, m) = (as_[0], as_[1], bs[0]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            d,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, &[a, b], move |args| {
            let g = args.grad.data();
            let (av, bv) = (args.inputs[0].data(), args.inputs[1].data());
            let da = args.needs[0].then(|| {
                let mut da = vec![T::zero(); n * d];
                T::gemm(n, m, d, g, false, bv, false, T::zero(), &mut da);
                Tensor::new(vec![n, d], da).expect("shape")
            });
            let db = args.needs[1].then(|| {
                let mut db = vec![T::zero(); m * d];
                T::gemm(m, n, d, g, true, av, false, T::zero(), &mut db);
                Tensor::new(vec![m, d], db).expect("shape")
            });
            vec![da, db]
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, &[x], |a| {
            let mut dx = a.grad.clone();
            for (g, &xv) in dx.data_mut().iter_mut().zip(a.inputs[0].data()) {
                if xv <= T::zero() {
                    *g = T::zero();
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(value, &[x], |a| {
            let mut dx = a.grad.clone();
            for (g, &y) in dx.data_mut().iter_mut().zip(a.output.data()) {
                *g = *g * y * (T::one() - y);
            }
            vec![Some(dx)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, &[a, b], |args| {
            vec![Some(args.grad.clone()), Some(args.grad.clone())]
        }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, &[x], move |a| vec![Some(a.grad.map(|g| g * s))])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), &[x], |a| {
            let g = a.grad.data()[0];
            vec![Some(Tensor::full(a.inputs[0].shape(), g))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        let orig = self.shape(x).to_vec();
        Ok(self.push(value, &[x], move |a| {
            vec![Some(a.grad.clone().reshape(&orig).expect("shape"))]
        }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(shape_err(format!(
                "softmax axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite("softmax input contains NaN".into()));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, &[x], move |a| {
            let (g, y) = (a.grad.data(), a.output.data());
            let mut dx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot = (0..len).fold(T::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(a.output.shape().to_vec(), dx).expect("shape"))]
        }))
    }

    /// Row-wise unit-norm scaling of `x: [N, D]`; rows with norm below `eps` become zero.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(shape_err(format!("l2_normalize expects [N,D], got {xs:?}")));
        }
        let d = xs[1];
        let eps = T::lit(eps);
        let src = self.value(x).data();
        let norms: Vec<T> = src
            .chunks_exact(d)
            .map(|r| r.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt())
            .collect();
        let mut out = vec![T::zero(); src.len()];
        for ((row, o), &nrm) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(&norms) {
            if nrm >= eps {
                for (ov, &v) in o.iter_mut().zip(row) {
                    *ov = v / nrm;
                }
            }
        }
        let value = Tensor::new(xs.to_vec(), out)?;
        Ok(self.push(value, &[x], move |a| {
            let (g, y) = (a.grad.data(), a.output.data());
            let mut dx = vec![T::zero(); g.len()];
            for (r, &nrm) in norms.iter().enumerate() {
                if nrm < eps {
                    continue;
                }
                let span = r * d..(r + 1) * d;
                let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                let dot = gr.iter().zip(yr).fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                for ((dv, &gv), &yv) in dx[span].iter_mut().zip(gr).zip(yr) {
                    *dv = (gv - yv * dot) / nrm;
                }
            }
            vec![Some(Tensor::new(a.output.shape().to_vec(), dx).expect("shape"))]
        }))
    }

    /// Euclidean distance between matching rows of `a, b: [N, D]`, giving `[N]`.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || as_ != bs {
            return Err(shape_err(format!(
                "row_distance expects equal [N,D] shapes; got {as_:?} and {bs:?}"
            )));
        }
        let (n, d) = (as_[0], as_[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let dist: Vec<T> = (0..n)
            .map(|r| {
                (0..d)
                    .fold(T::zero(), |acc, c| {
                        let diff = av[r * d + c] - bv[r * d + c];
                        acc + diff * diff
                    })
                    .sqrt()
            })
            .collect();
        let value = Tensor::new(vec![n], dist)?;
        Ok(self.push(value, &[a, b], move |args| {
            let (g, dist) = (args.grad.data(), args.output.data());
            let (av, bv) = (args.inputs[0].data(), args.inputs[1].data());
            let mut da = vec![T::zero(); n * d];
            for r in 0..n {
                if dist[r] <= T::zero() {
                    continue;
                }
                let s = g[r] / dist[r];
                for c in 0..d {
                    let i = r * d + c;
                    da[i] = (av[i] - bv[i]) * s;
                }
            }
            let db: Vec<T> = da.iter().map(|&v| -v).collect();
            vec![
                args.needs[0].then(|| Tensor::new(vec![n, d], da).expect("shape")),
                args.needs[1].then(|| Tensor::new(vec![n, d], db).expect("shape")),
            ]
        }))
    }

    /// `w · x + b` with single-element `w`, `b` broadcast over `x`.
    pub fn scalar_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(w).len() != 1 || self.value(b).len() != 1 {
            return Err(shape_err(format!(
                "scalar_affine needs single-element w and b; got {:?}, {:?}",
                self.shape(w),
                self.shape(b)
            )));
        }
        let (wv, bv) = (self.value(w).data()[0], self.value(b).data()[0]);
        let value = self.value(x).map(|v| wv * v + bv);
        let (ws, bs) = (self.shape(w).to_vec(), self.shape(b).to_vec());
        Ok(self.push(value, &[x, w, b], move |a| {
            let g = a.grad.data();
            let xv = a.inputs[0].data();
            let dw = g.iter().zip(xv).fold(T::zero(), |acc, (&gv, &x)| acc + gv * x);
            let db = g.iter().fold(T::zero(), |acc, &gv| acc + gv);
            vec![
                Some(a.grad.map(|gv| gv * wv)),
                Some(Tensor::full(&ws, dw)),
                Some(Tensor::full(&bs, db)),
            ]
        }))
    }

    /// Concatenates `[N, C_i]` tensors along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors".into()))?;
        let n = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err(format!(
                    "concat_cols expects [N,C] parts with N={n}; got {s:?}"
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        Ok(self.push(value, parts, move |a| {
            let g = a.grad.data();
            let mut offset = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let start = offset;
                    offset += w;
                    a.needs[i].then(|| {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        Tensor::new(vec![n, w], d).expect("shape")
                    })
                })
                .collect()
        }))
    }
}
