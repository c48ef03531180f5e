use super::{broadcast_shapes, gemm, numel, strides, Graph, Op, Real, Tensor, Var};
use crate::error::{Error, Result};

// ── broadcasting helpers ─────────────────────────────────────────────

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let own = strides(shape);
    (0..out.len())
        .map(|i| if i < offset || shape[i - offset] == 1 { 0 } else { own[i - offset] })
        .collect()
}

/// Merges adjacent axes that are contiguous in the output and in both
/// operands, so that broadcast loops run over as few axes as possible.
fn coalesce(out: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut o, mut a, mut b): (Vec<usize>, Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..out.len() {
        if out[i] == 1 {
            continue;
        }
        if let (Some(&lo), Some(&la), Some(&lb)) = (o.last(), a.last(), b.last()) {
            if la == sa[i] * out[i] && lb == sb[i] * out[i] {
                let k = o.len() - 1;
                o[k] = lo * out[i];
                a[k] = sa[i];
                b[k] = sb[i];
                continue;
            }
        }
        o.push(out[i]);
        a.push(sa[i]);
        b.push(sb[i]);
    }
    (o, a, b)
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`, in
/// row-major order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let (out, sa, sb) = coalesce(out, sa, sb);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let (len, step_a, step_b) = (out[last], sa[last], sb[last]);
    let mut idx = vec![0usize; last];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        let (mut ja, mut jb) = (ia, ib);
        for k in 0..len {
            f(o + k, ja, jb);
            ja += step_a;
            jb += step_b;
        }
        o += len;
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary {
    kind: BinaryKind,
}

impl<F: Real> Op<F> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &Tensor<F>, needs: &[bool]) -> Vec<Option<Tensor<F>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let out = output.shape();
        let g = grad.data();
        let (ad, bd) = (a.data(), b.data());
        let sa = aligned_strides(a.shape(), out);
        let sb = aligned_strides(b.shape(), out);
        let kind = self.kind;
        let ga = needs[0].then(|| {
            let mut ga = Tensor::zeros(a.shape());
            let t = ga.data_mut();
            match kind {
                BinaryKind::Add | BinaryKind::Sub => for_each_broadcast(out, &sa, &sb, |o, ia, _| t[ia] += g[o]),
                BinaryKind::Mul => for_each_broadcast(out, &sa, &sb, |o, ia, ib| t[ia] += g[o] * bd[ib]),
                BinaryKind::Div => for_each_broadcast(out, &sa, &sb, |o, ia, ib| t[ia] += g[o] / bd[ib]),
            }
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = Tensor::zeros(b.shape());
            let t = gb.data_mut();
            match kind {
                BinaryKind::Add => for_each_broadcast(out, &sa, &sb, |o, _, ib| t[ib] += g[o]),
                BinaryKind::Sub => for_each_broadcast(out, &sa, &sb, |o, _, ib| t[ib] -= g[o]),
                BinaryKind::Mul => for_each_broadcast(out, &sa, &sb, |o, ia, ib| t[ib] += g[o] * ad[ia]),
                BinaryKind::Div => {
                    for_each_broadcast(out, &sa, &sb, |o, ia, ib| t[ib] -= g[o] * ad[ia] / (bd[ib] * bd[ib]))
                }
            }
            gb
        });
        vec![ga, gb]
    }
}

// ── unary ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
enum UnaryKind<F> {
    Relu,
    Sigmoid,
    Square,
    Exp,
    Scale(F),
    AddScalar(F),
}

struct Unary<F> {
    kind: UnaryKind<F>,
}

impl<F: Real> Op<F> for Unary<F> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Square => "square",
            UnaryKind::Exp => "exp",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
        }
    }

    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &Tensor<F>, _needs: &[bool]) -> Vec<Option<Tensor<F>>> {
        let x = inputs[0].data();
        let y = output.data();
        let g = grad.data();
        let two = F::from_f64(2.0);
        let data = (0..g.len())
            .map(|i| match self.kind {
                UnaryKind::Relu => {
                    if x[i] > F::zero() {
                        g[i]
                    } else {
                        F::zero()
                    }
                }
                UnaryKind::Sigmoid => g[i] * y[i] * (F::one() - y[i]),
                UnaryKind::Square => g[i] * two * x[i],
                UnaryKind::Exp => g[i] * y[i],
                UnaryKind::Scale(c) => g[i] * c,
                UnaryKind::AddScalar(_) => g[i],
            })
            .collect();
        vec![Some(Tensor { shape: inputs[0].shape.clone(), data })]
    }
}

// ── shape ops ────────────────────────────────────────────────────────

struct Reshape;

impl<F: Real> Op<F> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>, _: &[bool]) -> Vec<Option<Tensor<F>>> {
        vec![Some(Tensor { shape: inputs[0].shape.clone(), data: grad.data.clone() })]
    }
}

/// (outer, axis extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Concat {
    axis: usize,
}

impl<F: Real> Op<F> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &Tensor<F>, needs: &[bool]) -> Vec<Option<Tensor<F>>> {
        let (outer, total, inner) = split_axis(output.shape(), self.axis);
        let g = grad.data();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let len = t.shape()[self.axis];
            if need {
                let mut data = Vec::with_capacity(t.len());
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    data.extend_from_slice(&g[start..start + len * inner]);
                }
                out.push(Some(Tensor { shape: t.shape.clone(), data }));
            } else {
                out.push(None);
            }
            offset += len;
        }
        out
    }
}

struct Slice {
    axis: usize,
    start: usize,
}

impl<F: Real> Op<F> for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &Tensor<F>, _: &[bool]) -> Vec<Option<Tensor<F>>> {
        let (outer, extent, inner) = split_axis(inputs[0].shape(), self.axis);
        let len = output.shape()[self.axis];
        let mut gx = Tensor::zeros(inputs[0].shape());
        let g = grad.data();
        for o in 0..outer {
            let dst = (o * extent + self.start) * inner;
            let src = o * len * inner;
            gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
        }
        vec![Some(gx)]
    }
}

// ── reductions ───────────────────────────────────────────────────────

struct ReduceSum {
    axis: usize,
}

impl<F: Real> Op<F> for ReduceSum {
    fn name(&self) -> &'static str {
        "reduce_sum"
    }
    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>, _: &[bool]) -> Vec<Option<Tensor<F>>> {
        let (outer, extent, inner) = split_axis(inputs[0].shape(), self.axis);
        let g = grad.data();
        let mut data = Vec::with_capacity(inputs[0].len());
        for o in 0..outer {
            for _ in 0..extent {
                data.extend_from_slice(&g[o * inner..(o + 1) * inner]);
            }
        }
        vec![Some(Tensor { shape: inputs[0].shape.clone(), data })]
    }
}

struct SumAll;

impl<F: Real> Op<F> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>, _: &[bool]) -> Vec<Option<Tensor<F>>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

struct Softmax {
    axis: usize,
}

impl<F: Real> Op<F> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, _: &[&Tensor<F>], output: &Tensor<F>, grad: &Tensor<F>, _: &[bool]) -> Vec<Option<Tensor<F>>> {
        let (outer, extent, inner) = split_axis(output.shape(), self.axis);
        let (y, g) = (output.data(), grad.data());
        let mut gx = Tensor::zeros(output.shape());
        let out = gx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut dot = F::zero();
                for k in 0..extent {
                    let idx = base + k * inner;
                    dot += g[idx] * y[idx];
                }
                for k in 0..extent {
                    let idx = base + k * inner;
                    out[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

struct L2Norm {
    axis: usize,
}

impl<F: Real> Op<F> for L2Norm {
    fn name(&self) -> &'static str {
        "l2_norm"
    }
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &Tensor<F>, _: &[bool]) -> Vec<Option<Tensor<F>>> {
        let (outer, extent, inner) = split_axis(inputs[0].shape(), self.axis);
        let (x, n, g) = (inputs[0].data(), output.data(), grad.data());
        let mut gx = Tensor::zeros(inputs[0].shape());
        let out = gx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let norm = n[o * inner + i];
                if norm == F::zero() {
                    continue; // subgradient 0 at the origin
                }
                let scale = g[o * inner + i] / norm;
                for k in 0..extent {
                    let idx = (o * extent + k) * inner + i;
                    out[idx] = scale * x[idx];
                }
            }
        }
        vec![Some(gx)]
    }
}

// ── matmul ───────────────────────────────────────────────────────────

/// Products below this many multiply-adds skip the packed GEMM kernel.
const SMALL_GEMM: usize = 512;

#[allow(clippy::too_many_arguments)]
fn small_or_gemm<F: Real>(m: usize, k: usize, n: usize, a: &[F], ta: bool, b: &[F], tb: bool, c: &mut [F]) {
    if m * k * n >= SMALL_GEMM {
        gemm(m, k, n, F::one(), a, ta, b, tb, F::one(), c);
        return;
    }
    for i in 0..m {
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == F::zero() {
                continue;
            }
            for j in 0..n {
                let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                c[i * n + j] += av * bv;
            }
        }
    }
}

struct MatmulPlan {
    batch: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape_mismatch("matmul needs rank ≥ 2", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape_mismatch("matmul inner dimensions", a, b));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shapes(ba, bb).ok_or_else(|| Error::shape_mismatch("matmul batch dimensions", a, b))?;
    // strides in units of whole matrices
    let sa = aligned_strides(ba, &batch);
    let sb = aligned_strides(bb, &batch);
    Ok(MatmulPlan { batch, sa, sb, m, k, n })
}

struct Matmul;

impl<F: Real> Op<F> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>, needs: &[bool]) -> Vec<Option<Tensor<F>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let p = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
        let (m, k, n) = (p.m, p.k, p.n);
        let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
        let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
        let g = grad.data();
        for_each_broadcast(&p.batch, &p.sa, &p.sb, |o, ia, ib| {
            let gm = &g[o * m * n..(o + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                // dA = dC · Bᵀ
                let bm = &b.data()[ib * k * n..(ib + 1) * k * n];
                small_or_gemm(m, n, k, gm, false, bm, true, &mut ga.data_mut()[ia * m * k..(ia + 1) * m * k]);
            }
            if let Some(gb) = gb.as_mut() {
                // dB = Aᵀ · dC
                let am = &a.data()[ia * m * k..(ia + 1) * m * k];
                small_or_gemm(k, m, n, am, true, gm, false, &mut gb.data_mut()[ib * k * n..(ib + 1) * k * n]);
            }
        });
        vec![ga, gb]
    }
}

// ── gather ───────────────────────────────────────────────────────────

struct SelectRows {
    indices: Vec<usize>,
}

impl<F: Real> Op<F> for SelectRows {
    fn name(&self) -> &'static str {
        "select"
    }
    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>, _: &[bool]) -> Vec<Option<Tensor<F>>> {
        let shape = inputs[0].shape();
        let (k, inner) = (shape[1], shape[2..].iter().product::<usize>());
        let mut gx = Tensor::zeros(shape);
        for (row, &idx) in self.indices.iter().enumerate() {
            let dst = (row * k + idx) * inner;
            gx.data_mut()[dst..dst + inner].copy_from_slice(&grad.data()[row * inner..(row + 1) * inner]);
        }
        vec![Some(gx)]
    }
}

// ── public graph API ─────────────────────────────────────────────────

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::usage(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl<F: Real> Graph<F> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shapes(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape_mismatch("elementwise broadcast", ta.shape(), tb.shape()))?;
        let mut data = vec![F::zero(); numel(&out_shape)];
        let sa = aligned_strides(ta.shape(), &out_shape);
        let sb = aligned_strides(tb.shape(), &out_shape);
        let (ad, bd) = (ta.data(), tb.data());
        let d = &mut data;
        match kind {
            BinaryKind::Add => for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| d[o] = ad[ia] + bd[ib]),
            BinaryKind::Sub => for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| d[o] = ad[ia] - bd[ib]),
            BinaryKind::Mul => for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| d[o] = ad[ia] * bd[ib]),
            BinaryKind::Div => for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| d[o] = ad[ia] / bd[ib]),
        }
        let out = Tensor { shape: out_shape, data };
        self.apply(Binary { kind }, &[a, b], out)
    }

    /// Elementwise `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind<F>, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| match kind {
            UnaryKind::Relu => v.max(F::zero()),
            UnaryKind::Sigmoid => F::one() / (F::one() + (-v).exp()),
            UnaryKind::Square => v * v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Scale(c) => v * c,
            UnaryKind::AddScalar(c) => v + c,
        });
        self.apply(Unary { kind }, &[x], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -F::one())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.apply(Reshape, &[x], out)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape_mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor { shape, data };
        self.apply(Concat { axis }, xs, out)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis(t.shape(), axis, "slice")?;
        if start + len > t.shape()[axis] || len == 0 {
            return Err(Error::usage(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * extent + start) * inner;
            data.extend_from_slice(&t.data()[src..src + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor { shape, data };
        self.apply(Slice { axis, start }, &[x], out)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis(t.shape(), axis, "reduce_sum")?;
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..extent {
                let row = &src[(o * extent + k) * inner..(o * extent + k + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor { shape, data };
        self.apply(ReduceSum { axis }, &[x], out)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis, "reduce_mean")?;
        let extent = self.shape(x)[axis];
        let s = self.reduce_sum(x, axis)?;
        self.scale(s, F::one() / F::from_f64(extent as f64))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.apply(SumAll, &[x], Tensor::scalar(total))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, F::one() / F::from_f64(n as f64))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis(t.shape(), axis, "softmax")?;
        let out = softmax_values(t, axis);
        self.apply(Softmax { axis }, &[x], out)
    }

    /// Euclidean norm along `axis`, which is removed from the shape.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis(t.shape(), axis, "l2_norm")?;
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = F::zero();
                for k in 0..extent {
                    let v = src[(o * extent + k) * inner + i];
                    acc += v * v;
                }
                data[o * inner + i] = acc.sqrt();
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor { shape, data };
        self.apply(L2Norm { axis }, &[x], out)
    }

    /// Matrix product over the last two axes, broadcasting leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let p = matmul_plan(ta.shape(), tb.shape())?;
        let (m, k, n) = (p.m, p.k, p.n);
        let mut shape = p.batch.clone();
        shape.extend_from_slice(&[m, n]);
        let mut data = vec![F::zero(); numel(&shape)];
        let (ad, bd) = (ta.data(), tb.data());
        for_each_broadcast(&p.batch, &p.sa, &p.sb, |o, ia, ib| {
            small_or_gemm(
                m,
                k,
                n,
                &ad[ia * m * k..(ia + 1) * m * k],
                false,
                &bd[ib * k * n..(ib + 1) * k * n],
                false,
                &mut data[o * m * n..(o + 1) * m * n],
            );
        });
        let out = Tensor { shape, data };
        self.apply(Matmul, &[a, b], out)
    }

    /// For `x` of shape `[N, K, ...]`, picks entry `indices[n]` of axis 1 in
    /// each row, giving `[N, ...]`. Unselected entries do not reach the output.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if shape.len() < 2 || shape[0] != indices.len() {
            return Err(Error::usage(format!(
                "select: {} indices for tensor of shape {shape:?}",
                indices.len()
            )));
        }
        let (k, inner) = (shape[1], shape[2..].iter().product::<usize>());
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::usage(format!("select: index {bad} out of range for axis of length {k}")));
        }
        let mut data = Vec::with_capacity(indices.len() * inner);
        for (row, &idx) in indices.iter().enumerate() {
            let src = (row * k + idx) * inner;
            data.extend_from_slice(&t.data()[src..src + inner]);
        }
        let mut out_shape = vec![shape[0]];
        out_shape.extend_from_slice(&shape[2..]);
        let out = Tensor { shape: out_shape, data };
        self.apply(SelectRows { indices: indices.to_vec() }, &[x], out)
    }
}

/// Softmax of a plain tensor along `axis` (no graph).
pub fn softmax_values<F: Real>(t: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, extent, inner) = split_axis(t.shape(), axis);
    let src = t.data();
    let mut data = vec![F::zero(); t.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = F::neg_infinity();
            for k in 0..extent {
                max = max.max(src[base + k * inner]);
            }
            let mut total = F::zero();
            for k in 0..extent {
                let e = (src[base + k * inner] - max).exp();
                data[base + k * inner] = e;
                total += e;
            }
            for k in 0..extent {
                data[base + k * inner] /= total;
            }
        }
    }
    Tensor { shape: t.shape().to_vec(), data }
}
