//! Differentiable tensor ops recorded on a [`Graph`].

use super::tensor::strides_of;
use super::{Backward, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Flat offsets into `b` for every element of `a`, where each `b` dim equals the `a`
/// dim or is 1.
fn broadcast_offsets(a: &[usize], b: &[usize]) -> Vec<usize> {
    let bs = strides_of(b);
    let eff: Vec<usize> = a
        .iter()
        .zip(b)
        .zip(&bs)
        .map(|((&da, &db), &s)| if db == 1 && da != 1 { 0 } else { s })
        .collect();
    let numel: usize = a.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; a.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for ax in (0..a.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < a[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x != y && *y != 1) {
        return Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")));
    }
    Ok(())
}

fn sum_into_broadcast<R: Real>(grad: &Tensor<R>, b_shape: &[usize]) -> Tensor<R> {
    if grad.shape() == b_shape {
        return grad.clone();
    }
    let offs = broadcast_offsets(grad.shape(), b_shape);
    let mut out = Tensor::zeros(b_shape);
    let o = out.data_mut();
    for (g, off) in grad.data().iter().zip(offs) {
        o[off] += *g;
    }
    out
}

struct AddRule {
    b_shape: Vec<usize>,
}

impl<R: Real> Backward<R> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, need: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![
            need[0].then(|| g.clone()),
            need[1].then(|| sum_into_broadcast(g, &self.b_shape)),
        ]
    }
}

/// `a + b`, with `b` broadcast over its size-1 axes.
pub fn add<R: Real>(g: &mut Graph<R>, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (g.value(a), g.value(b));
    check_broadcast("add", av.shape(), bv.shape())?;
    let mut out = av.clone();
    if av.shape() == bv.shape() {
        for (o, v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += *v;
        }
    } else {
        let offs = broadcast_offsets(av.shape(), bv.shape());
        let bd = bv.data();
        for (o, off) in out.data_mut().iter_mut().zip(offs) {
            *o += bd[off];
        }
    }
    let b_shape = bv.shape().to_vec();
    Ok(g.push(out, &[a, b], AddRule { b_shape }))
}

struct MulRule;

impl<R: Real> Backward<R> for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, need: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let same = a.shape() == b.shape();
        let offs = (!same).then(|| broadcast_offsets(a.shape(), b.shape()));
        let b_at = |i: usize| match &offs {
            Some(o) => b.data()[o[i]],
            None => b.data()[i],
        };
        let ga = need[0].then(|| {
            let data = g.data().iter().enumerate().map(|(i, gv)| *gv * b_at(i)).collect();
            Tensor::new(a.shape(), data).unwrap()
        });
        let gb = need[1].then(|| {
            let prod: Vec<R> = g.data().iter().zip(a.data()).map(|(x, y)| *x * *y).collect();
            sum_into_broadcast(&Tensor::new(a.shape(), prod).unwrap(), b.shape())
        });
        vec![ga, gb]
    }
}

/// Hadamard product `a ⊗ b`, with `b` broadcast over its size-1 axes.
pub fn mul<R: Real>(g: &mut Graph<R>, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (g.value(a), g.value(b));
    check_broadcast("mul", av.shape(), bv.shape())?;
    let mut out = av.clone();
    if av.shape() == bv.shape() {
        for (o, v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= *v;
        }
    } else {
        let offs = broadcast_offsets(av.shape(), bv.shape());
        let bd = bv.data();
        for (o, off) in out.data_mut().iter_mut().zip(offs) {
            *o *= bd[off];
        }
    }
    Ok(g.push(out, &[a, b], MulRule))
}

struct ScaleRule {
    c: f64,
}

impl<R: Real> Backward<R> for ScaleRule {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let c = R::from_f64_lossy(self.c);
        vec![Some(g.map(|v| v * c))]
    }
}

pub fn scale<R: Real>(g: &mut Graph<R>, a: Var, c: f64) -> Var {
    let cr = R::from_f64_lossy(c);
    let out = g.value(a).map(|v| v * cr);
    g.push(out, &[a], ScaleRule { c })
}

struct LinearRule {
    rows: usize,
    d_in: usize,
    d_out: usize,
}

impl<R: Real> Backward<R> for LinearRule {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, need: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (m, k, n) = (self.rows, self.d_in, self.d_out);
        let (x, w) = (inputs[0], inputs[1]);
        let gx = need[0].then(|| {
            // dx = g · wᵀ
            let mut out = Tensor::zeros(x.shape());
            R::gemm(m, n, k, R::one(), g.data(), n as isize, 1, w.data(), 1, n as isize, R::zero(), out.data_mut(), k as isize, 1);
            out
        });
        let gw = need[1].then(|| {
            // dw = xᵀ · g
            let mut out = Tensor::zeros(w.shape());
            R::gemm(k, m, n, R::one(), x.data(), 1, k as isize, g.data(), n as isize, 1, R::zero(), out.data_mut(), n as isize, 1);
            out
        });
        let mut res = vec![gx, gw];
        if inputs.len() == 3 {
            res.push(need[2].then(|| {
                let mut gb = Tensor::zeros(&[n]);
                let gbd = gb.data_mut();
                for row in g.data().chunks_exact(n) {
                    for (a, v) in gbd.iter_mut().zip(row) {
                        *a += *v;
                    }
                }
                gb
            }));
        }
        res
    }
}

/// `x · w (+ bias)` over the last axis of `x`; `w` is `(d_in, d_out)`.
pub fn linear<R: Real>(g: &mut Graph<R>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let (xv, wv) = (g.value(x), g.value(w));
    let d_in = *xv.shape().last().unwrap_or(&0);
    if wv.rank() != 2 || wv.shape()[0] != d_in {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
        ));
    }
    let d_out = wv.shape()[1];
    if let Some(b) = bias {
        if g.shape(b) != [d_out] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs weight {:?}", g.shape(b), g.value(w).shape()),
            ));
        }
    }
    let rows = xv.numel() / d_in.max(1);
    let mut shape = xv.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    let mut out = Tensor::zeros(&shape);
    if let Some(b) = bias {
        let bd = g.value(b).data();
        for row in out.data_mut().chunks_exact_mut(d_out) {
            row.copy_from_slice(bd);
        }
    }
    let (xv, wv) = (g.value(x), g.value(w));
    let beta = if bias.is_some() { R::one() } else { R::zero() };
    R::gemm(rows, d_in, d_out, R::one(), xv.data(), d_in as isize, 1, wv.data(), d_out as isize, 1, beta, out.data_mut(), d_out as isize, 1);
    let rule = LinearRule { rows, d_in, d_out };
    Ok(match bias {
        Some(b) => g.push(out, &[x, w, b], rule),
        None => g.push(out, &[x, w], rule),
    })
}

struct BmmRule {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl<R: Real> Backward<R> for BmmRule {
    fn name(&self) -> &'static str {
        "bmm"
    }

    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, need: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0], inputs[1]);
        // b viewed as k x n with strides (rb, cb)
        let (rb, cb) = if self.trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut ga = need[0].then(|| Tensor::zeros(a.shape()));
        let mut gb = need[1].then(|| Tensor::zeros(b.shape()));
        for i in 0..self.batch {
            let gs = &g.data()[i * m * n..(i + 1) * m * n];
            let bs = &b.data()[i * k * n..(i + 1) * k * n];
            let as_ = &a.data()[i * m * k..(i + 1) * m * k];
            if let Some(ga) = ga.as_mut() {
                // da = g · bᵀ  (m x n)(n x k)
                let out = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                R::gemm(m, n, k, R::one(), gs, n as isize, 1, bs, cb, rb, R::zero(), out, k as isize, 1);
            }
            if let Some(gb) = gb.as_mut() {
                // db = aᵀ · g  (k x m)(m x n), written through b's layout
                let out = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                R::gemm(k, m, n, R::one(), as_, 1, k as isize, gs, n as isize, 1, R::zero(), out, rb, cb);
            }
        }
        vec![ga, gb]
    }
}

/// Batched matrix product over the last two axes; `trans_b` multiplies by `bᵀ`.
pub fn bmm<R: Real>(g: &mut Graph<R>, a: Var, b: Var, trans_b: bool) -> Result<Var> {
    let (av, bv) = (g.value(a), g.value(b));
    let (ra, rb) = (av.rank(), bv.rank());
    if ra < 2 || ra != rb || av.shape()[..ra - 2] != bv.shape()[..rb - 2] {
        return Err(Error::shape("bmm", format!("{:?} vs {:?}", av.shape(), bv.shape())));
    }
    let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
    let (bk, n) = if trans_b {
        (bv.shape()[rb - 1], bv.shape()[rb - 2])
    } else {
        (bv.shape()[rb - 2], bv.shape()[rb - 1])
    };
    if bk != k {
        return Err(Error::shape("bmm", format!("{:?} vs {:?}", av.shape(), bv.shape())));
    }
    let batch: usize = av.shape()[..ra - 2].iter().product();
    let mut shape = av.shape()[..ra - 2].to_vec();
    shape.extend([m, n]);
    let mut out = Tensor::zeros(&shape);
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    for i in 0..batch {
        R::gemm(
            m,
            k,
            n,
            R::one(),
            &av.data()[i * m * k..(i + 1) * m * k],
            k as isize,
            1,
            &bv.data()[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            R::zero(),
            &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
    Ok(g.push(out, &[a, b], BmmRule { batch, m, k, n, trans_b }))
}

struct ReshapeRule {
    from: Vec<usize>,
}

impl<R: Real> Backward<R> for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(g.clone().reshape(&self.from).unwrap())]
    }
}

pub fn reshape<R: Real>(g: &mut Graph<R>, a: Var, shape: &[usize]) -> Result<Var> {
    let from = g.shape(a).to_vec();
    let out = g.value(a).clone().reshape(shape)?;
    Ok(g.push(out, &[a], ReshapeRule { from }))
}

struct PermuteRule {
    inverse: Vec<usize>,
}

impl<R: Real> Backward<R> for PermuteRule {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(g.permute(&self.inverse).unwrap())]
    }
}

pub fn permute<R: Real>(g: &mut Graph<R>, a: Var, axes: &[usize]) -> Result<Var> {
    let out = g.value(a).permute(axes)?;
    let mut inverse = vec![0; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    Ok(g.push(out, &[a], PermuteRule { inverse }))
}

/// (outer, axis, inner) factorisation of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct SumAxisRule {
    in_shape: Vec<usize>,
    axis: usize,
    scale: f64,
}

impl<R: Real> Backward<R> for SumAxisRule {
    fn name(&self) -> &'static str {
        "sum_axis"
    }

    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (outer, len, inner) = split_axis(&self.in_shape, self.axis);
        let s = R::from_f64_lossy(self.scale);
        let mut out = Tensor::zeros(&self.in_shape);
        let od = out.data_mut();
        let gd = g.data();
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    od[(o * len + j) * inner + i] = gd[o * inner + i] * s;
                }
            }
        }
        vec![Some(out)]
    }
}

fn reduce_axis<R: Real>(g: &mut Graph<R>, a: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
    let av = g.value(a);
    if axis >= av.rank() {
        return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {:?}", av.shape())));
    }
    let in_shape = av.shape().to_vec();
    let (outer, len, inner) = split_axis(&in_shape, axis);
    if len == 0 {
        return Err(Error::shape("sum_axis", "reduction over an empty axis"));
    }
    let mut out_data = vec![R::zero(); outer * inner];
    let ad = av.data();
    for o in 0..outer {
        for j in 0..len {
            let src = &ad[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, s) in out_data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += *s;
            }
        }
    }
    let scale = if mean { 1.0 / len as f64 } else { 1.0 };
    if mean {
        let s = R::from_f64_lossy(scale);
        out_data.iter_mut().for_each(|v| *v *= s);
    }
    let mut shape = in_shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    let out = Tensor::new(&shape, out_data)?;
    Ok(g.push(out, &[a], SumAxisRule { in_shape, axis, scale }))
}

pub fn sum_axis<R: Real>(g: &mut Graph<R>, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
    reduce_axis(g, a, axis, keepdim, false)
}

pub fn mean_axis<R: Real>(g: &mut Graph<R>, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
    reduce_axis(g, a, axis, keepdim, true)
}

struct CrossEntropyRule {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl<R: Real> Backward<R> for CrossEntropyRule {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let b = self.labels.len();
        let scale = g.item().as_f64() / b as f64;
        let mut grad = self.probs.clone();
        for (i, &l) in self.labels.iter().enumerate() {
            grad[i * self.classes + l] -= 1.0;
        }
        let data = grad.into_iter().map(|v| R::from_f64_lossy(v * scale)).collect();
        vec![Some(Tensor::new(inputs[0].shape(), data).unwrap())]
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`; logits `(B, K)`.
pub fn cross_entropy<R: Real>(g: &mut Graph<R>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lv = g.value(logits);
    if lv.rank() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs {} labels", lv.shape(), labels.len()),
        ));
    }
    let classes = lv.shape()[1];
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
    }
    let mut probs = Vec::with_capacity(lv.numel());
    let mut loss = 0.0f64;
    for (row, &label) in lv.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].as_f64() - max);
        probs.extend(exps.iter().map(|e| e / z));
    }
    loss /= labels.len() as f64;
    let out = Tensor::scalar(R::from_f64_lossy(loss));
    Ok(g.push(
        out,
        &[logits],
        CrossEntropyRule {
            probs,
            labels: labels.to_vec(),
            classes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1., 0.]));
        let w = g.constant(t(&[2, 1], &[1., 1.]));
        let y = linear(&mut g, x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);

        let x = g.constant(t(&[1, 2], &[0., 0.]));
        let w = g.constant(t(&[2, 1], &[0.3, -7.0]));
        let y = linear(&mut g, x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);

        let x = g.constant(t(&[1, 2], &[1., 2.]));
        let w = g.constant(t(&[2, 1], &[3., 4.]));
        let y = linear(&mut g, x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn linear_shape_error_names_operands() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[1., 0., 0.]));
        let w = g.constant(t(&[2, 1], &[1., 1.]));
        let err = linear(&mut g, x, w, None).unwrap_err().to_string();
        assert!(err.contains("linear") && err.contains("[1, 3]") && err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn backward_examples() {
        // loss = sum(w·x) → grad(w) = x
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[3, 1], &[0.1, 0.2, 0.3]));
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[2., -1., 5.]));
        let wv = g.param(&store, w);
        let y = linear(&mut g, x, wv, None).unwrap();
        let l = sum_axis(&mut g, y, 1, false).unwrap();
        let l = sum_axis(&mut g, l, 0, false).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[2., -1., 5.]);

        // additivity: a second backward doubles
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[4., -2., 10.]);

        // loss = (w - 3)^2 at w = 5 → 4
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[1], &[5.]));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let neg3 = g.constant(t(&[1], &[-3.]));
        let d = add(&mut g, wv, neg3).unwrap();
        let sq = mul(&mut g, d, d).unwrap();
        let l = reshape(&mut g, sq, &[]).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2], &[1., 2.]));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let s = scale(&mut g, wv, 2.0);
        assert!(matches!(g.backward(s, &mut store), Err(Error::Shape { .. })));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(g.backward(c, &mut store).is_err());
    }

    #[test]
    fn broadcast_add_and_mul() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[1, 1, 3], &[10., 20., 30.]));
        let s = add(&mut g, a, b).unwrap();
        assert_eq!(g.value(s).data(), &[11., 22., 33., 14., 25., 36.]);
        let m = mul(&mut g, a, b).unwrap();
        assert_eq!(g.value(m).data(), &[10., 40., 90., 40., 100., 180.]);
        let bad = g.constant(t(&[1, 3, 1], &[1., 1., 1.]));
        assert!(add(&mut g, a, bad).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 10]));
        let ce = cross_entropy(&mut g, l, &[3]).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);

        let l = g.constant(t(&[1, 2], &[1., 2.]));
        let ce = cross_entropy(&mut g, l, &[1]).unwrap();
        // -ln(e^2 / (e + e^2)) = ln(1 + e^-1)
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(ce).item() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);

        let l = g.constant(t(&[1, 2], &[0., 60.]));
        let ce = cross_entropy(&mut g, l, &[1]).unwrap();
        assert!(g.value(ce).item() < 1e-20);

        let l = g.constant(t(&[1, 2], &[0., 0.]));
        assert!(cross_entropy(&mut g, l, &[2]).is_err());
    }
}
