//! Forward and vector-Jacobian rules for every kernel the head records.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
#[cfg(test)]
use super::linalg::dot;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Every operation the engine can record, with its attributes.
///
/// Elementwise binary kernels (`Add`, `Sub`, `Mul`) accept two equal shapes,
/// or a right operand whose shape equals a trailing suffix of the left
/// operand's shape (it is then repeated over the leading axes).
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    /// Constant leaf.
    Input,
    /// Leaf bound to a parameter path.
    Param,
    /// `[m,k]×[k,n]` or batched `[b,m,k]×[b,k,n]`.
    MatMul,
    Add,
    Sub,
    Mul,
    /// Multiplication by a constant.
    Scale(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
    /// Repeats an extent-1 axis `extent` times.
    Expand { axis: usize, extent: usize },
    Relu,
    Gelu,
    Sigmoid,
    Softmax { axis: usize },
    /// Normalizes along `axis`; when `affine`, takes `gamma` and `beta` of the
    /// axis extent as the second and third inputs.
    LayerNorm { axis: usize, eps: f64, affine: bool },
    /// 3×3 kernel, zero padding 1. Input `[b,h,w,cin]`, weight `[3,3,cin,cout]`.
    Conv2d { stride: usize },
    /// Mean over one axis, or over everything into shape `[1]`.
    Mean { axis: Option<usize> },
    Sum { axis: Option<usize> },
    /// Minimum over an axis; ties resolve to the lowest index.
    Min { axis: usize },
    Max { axis: usize },
    /// Mean softmax cross-entropy of `[n,c]` logits against class labels.
    CrossEntropyWithSoftmax { labels: Vec<usize> },
    /// `Σ w·|a−b| / Σ w` over two equally shaped inputs; unit weights if `None`.
    L1 { weights: Option<Vec<f64>> },
    /// Mean binary cross-entropy of logits against constant targets in [0,1].
    BceWithLogits { targets: Vec<f64> },
    /// Bilinear sampling of a `[b,h,w,c]` map at `[n,k,2]` (x, y) points,
    /// candidate `i` reading image `batch_index[i]`. Coordinates are clamped
    /// to the map; output `[n,k,c]`.
    BilinearSample { batch_index: Vec<usize> },
    /// Mean `1 − GIoU` of `[n,4]` xyxy boxes against constant boxes.
    GiouLoss { targets: Vec<[f64; 4]> },
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Input => "input",
            Kernel::Param => "param",
            Kernel::MatMul => "matmul",
            Kernel::Add => "add",
            Kernel::Sub => "sub",
            Kernel::Mul => "mul",
            Kernel::Scale(_) => "scale",
            Kernel::Concat { .. } => "concat",
            Kernel::Slice { .. } => "slice",
            Kernel::Reshape { .. } => "reshape",
            Kernel::Permute { .. } => "permute",
            Kernel::Expand { .. } => "expand",
            Kernel::Relu => "relu",
            Kernel::Gelu => "gelu",
            Kernel::Sigmoid => "sigmoid",
            Kernel::Softmax { .. } => "softmax",
            Kernel::LayerNorm { .. } => "layernorm",
            Kernel::Conv2d { .. } => "conv2d",
            Kernel::Mean { .. } => "mean",
            Kernel::Sum { .. } => "sum",
            Kernel::Min { .. } => "min",
            Kernel::Max { .. } => "max",
            Kernel::CrossEntropyWithSoftmax { .. } => "cross_entropy_with_softmax",
            Kernel::L1 { .. } => "l1",
            Kernel::BceWithLogits { .. } => "bce_with_logits",
            Kernel::BilinearSample { .. } => "bilinear_sample",
            Kernel::GiouLoss { .. } => "giou_loss",
        }
    }

    fn arity(&self) -> Option<usize> {
        Some(match self {
            Kernel::Input | Kernel::Param => 0,
            Kernel::Concat { .. } => return None,
            Kernel::LayerNorm { affine, .. } => {
                if *affine {
                    3
                } else {
                    1
                }
            }
            Kernel::MatMul
            | Kernel::Add
            | Kernel::Sub
            | Kernel::Mul
            | Kernel::Conv2d { .. }
            | Kernel::L1 { .. }
            | Kernel::BilinearSample { .. } => 2,
            _ => 1,
        })
    }

    pub(crate) fn forward(&self, xs: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        if let Some(n) = self.arity() {
            if xs.len() != n {
                return Err(Error::shape(
                    name,
                    format!("expects {n} inputs, got {}", xs.len()),
                ));
            }
        } else if xs.is_empty() {
            return Err(Error::shape(name, "expects at least one input"));
        }
        let out = match self {
            Kernel::Input | Kernel::Param => {
                return Err(Error::contract("leaf kernels are not applied"))
            }
            Kernel::MatMul => matmul_fwd(xs[0], xs[1])?,
            Kernel::Add => binary_fwd(name, xs[0], xs[1], |a, b| a + b)?,
            Kernel::Sub => binary_fwd(name, xs[0], xs[1], |a, b| a - b)?,
            Kernel::Mul => binary_fwd(name, xs[0], xs[1], |a, b| a * b)?,
            Kernel::Scale(c) => xs[0].map(|v| v * c),
            Kernel::Concat { axis } => concat_fwd(xs, *axis)?,
            Kernel::Slice { axis, start, end } => slice_fwd(xs[0], *axis, *start, *end)?,
            Kernel::Reshape { shape } => xs[0].reshape(shape)?,
            Kernel::Permute { perm } => permute_fwd(xs[0], perm)?,
            Kernel::Expand { axis, extent } => expand_fwd(xs[0], *axis, *extent)?,
            Kernel::Relu => xs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
            Kernel::Gelu => xs[0].map(gelu),
            Kernel::Sigmoid => xs[0].map(math::sigmoid),
            Kernel::Softmax { axis } => softmax_fwd(xs[0], *axis)?,
            Kernel::LayerNorm { axis, eps, affine } => {
                layernorm_fwd(xs[0], *axis, *eps, if *affine { Some((xs[1], xs[2])) } else { None })?
            }
            Kernel::Conv2d { stride } => conv2d_fwd(xs[0], xs[1], *stride)?,
            Kernel::Mean { axis } => reduce_sum_fwd(name, xs[0], *axis, true)?,
            Kernel::Sum { axis } => reduce_sum_fwd(name, xs[0], *axis, false)?,
            Kernel::Min { axis } => extremum_fwd(name, xs[0], *axis, false)?.0,
            Kernel::Max { axis } => extremum_fwd(name, xs[0], *axis, true)?.0,
            Kernel::CrossEntropyWithSoftmax { labels } => cross_entropy_fwd(xs[0], labels)?,
            Kernel::L1 { weights } => l1_fwd(xs[0], xs[1], weights.as_deref())?,
            Kernel::BceWithLogits { targets } => bce_fwd(xs[0], targets)?,
            Kernel::BilinearSample { batch_index } => bilinear_fwd(xs[0], xs[1], batch_index)?,
            Kernel::GiouLoss { targets } => giou_fwd(xs[0], targets)?,
        };
        if !out.all_finite() {
            return Err(Error::numeric(name));
        }
        Ok(out)
    }

    /// Vector-Jacobian products for the inputs flagged in `needs`.
    pub(crate) fn backward(
        &self,
        xs: &[&Tensor],
        y: &Tensor,
        dy: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut out: Vec<Option<Tensor>> = vec![None; xs.len()];
        match self {
            Kernel::Input | Kernel::Param => {}
            Kernel::MatMul => {
                let (da, db) = matmul_bwd(xs[0], xs[1], dy, needs[0], needs[1]);
                out[0] = da;
                out[1] = db;
            }
            Kernel::Add => {
                if needs[0] {
                    out[0] = Some(dy.clone());
                }
                if needs[1] {
                    out[1] = Some(reduce_to_suffix(dy, xs[1].shape()));
                }
            }
            Kernel::Sub => {
                if needs[0] {
                    out[0] = Some(dy.clone());
                }
                if needs[1] {
                    out[1] = Some(reduce_to_suffix(dy, xs[1].shape()).map(|v| -v));
                }
            }
            Kernel::Mul => {
                let (a, b) = (xs[0], xs[1]);
                let m = b.len();
                if needs[0] {
                    let mut g = dy.clone();
                    for (i, v) in g.data_mut().iter_mut().enumerate() {
                        *v *= b.data()[i % m];
                    }
                    out[0] = Some(g);
                }
                if needs[1] {
                    let mut prod = dy.clone();
                    for (v, &av) in prod.data_mut().iter_mut().zip(a.data()) {
                        *v *= av;
                    }
                    out[1] = Some(reduce_to_suffix(&prod, b.shape()));
                }
            }
            Kernel::Scale(c) => out[0] = Some(dy.map(|v| v * c)),
            Kernel::Concat { axis } => {
                let (outer, total, inner) = dy.split_axis(*axis);
                let mut offset = 0;
                for (i, x) in xs.iter().enumerate() {
                    let n = x.shape()[*axis];
                    if needs[i] {
                        let mut g = Vec::with_capacity(x.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&dy.data()[base..base + n * inner]);
                        }
                        out[i] = Some(Tensor::from_raw(x.shape().to_vec(), g));
                    }
                    offset += n;
                }
            }
            Kernel::Slice { axis, start, end } => {
                let x = xs[0];
                let (outer, n, inner) = x.split_axis(*axis);
                let w = end - start;
                let mut g = vec![0.0; x.len()];
                for o in 0..outer {
                    let src = &dy.data()[o * w * inner..(o + 1) * w * inner];
                    let dst = (o * n + start) * inner;
                    g[dst..dst + w * inner].copy_from_slice(src);
                }
                out[0] = Some(Tensor::from_raw(x.shape().to_vec(), g));
            }
            Kernel::Reshape { .. } => out[0] = Some(dy.reshape(xs[0].shape())?),
            Kernel::Permute { perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out[0] = Some(permute_fwd(dy, &inv)?);
            }
            Kernel::Expand { axis, .. } => {
                let (outer, n, inner) = dy.split_axis(*axis);
                let mut g = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &dy.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, s) in g[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                out[0] = Some(Tensor::from_raw(xs[0].shape().to_vec(), g));
            }
            Kernel::Relu => {
                let mut g = dy.clone();
                for (v, &x) in g.data_mut().iter_mut().zip(xs[0].data()) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                out[0] = Some(g);
            }
            Kernel::Gelu => {
                let mut g = dy.clone();
                for (v, &x) in g.data_mut().iter_mut().zip(xs[0].data()) {
                    *v *= gelu_grad(x);
                }
                out[0] = Some(g);
            }
            Kernel::Sigmoid => {
                let mut g = dy.clone();
                for (v, &s) in g.data_mut().iter_mut().zip(y.data()) {
                    *v *= s * (1.0 - s);
                }
                out[0] = Some(g);
            }
            Kernel::Softmax { axis } => out[0] = Some(softmax_bwd(y, dy, *axis)),
            Kernel::LayerNorm { axis, eps, affine } => {
                let gb = if *affine { Some(xs[1]) } else { None };
                let (dx, dgamma, dbeta) = layernorm_bwd(xs[0], gb, dy, *axis, *eps);
                if needs[0] {
                    out[0] = Some(dx);
                }
                if *affine {
                    if needs[1] {
                        out[1] = Some(dgamma);
                    }
                    if needs[2] {
                        out[2] = Some(dbeta);
                    }
                }
            }
            Kernel::Conv2d { stride } => {
                let (dx, dw) = conv2d_bwd(xs[0], xs[1], dy, *stride, needs[0], needs[1]);
                out[0] = dx;
                out[1] = dw;
            }
            Kernel::Mean { axis } | Kernel::Sum { axis } => {
                let mean = matches!(self, Kernel::Mean { .. });
                out[0] = Some(reduce_sum_bwd(xs[0], dy, *axis, mean));
            }
            Kernel::Min { axis } | Kernel::Max { axis } => {
                let is_max = matches!(self, Kernel::Max { .. });
                let (_, arg) = extremum_fwd(self.name(), xs[0], *axis, is_max)?;
                let (outer, n, inner) = xs[0].split_axis(*axis);
                let mut g = vec![0.0; xs[0].len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        g[(o * n + arg[r]) * inner + i] = dy.data()[r];
                    }
                }
                out[0] = Some(Tensor::from_raw(xs[0].shape().to_vec(), g));
            }
            Kernel::CrossEntropyWithSoftmax { labels } => {
                let x = xs[0];
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let p = softmax_fwd(x, 1)?;
                let scale = dy.item() / n as f64;
                let mut g = p.into_data();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * c + l] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                out[0] = Some(Tensor::from_raw(x.shape().to_vec(), g));
            }
            Kernel::L1 { weights } => {
                let (a, b) = (xs[0], xs[1]);
                let total: f64 = weights.as_ref().map_or(a.len() as f64, |w| w.iter().sum());
                let scale = dy.item() / total;
                let g: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .enumerate()
                    .map(|(i, (&av, &bv))| {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        w * scale * sign(av - bv)
                    })
                    .collect();
                if needs[1] {
                    out[1] = Some(Tensor::from_raw(b.shape().to_vec(), g.iter().map(|v| -v).collect()));
                }
                if needs[0] {
                    out[0] = Some(Tensor::from_raw(a.shape().to_vec(), g));
                }
            }
            Kernel::BceWithLogits { targets } => {
                let x = xs[0];
                let scale = dy.item() / x.len() as f64;
                let g = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&l, &t)| scale * (math::sigmoid(l) - t))
                    .collect();
                out[0] = Some(Tensor::from_raw(x.shape().to_vec(), g));
            }
            Kernel::BilinearSample { batch_index } => {
                let (dm, dp) = bilinear_bwd(xs[0], xs[1], batch_index, dy, needs[0], needs[1]);
                out[0] = dm;
                out[1] = dp;
            }
            Kernel::GiouLoss { targets } => out[0] = Some(giou_bwd(xs[0], targets, dy.item())),
        }
        Ok(out)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * math::exp(-0.5 * x * x);
    cdf + x * pdf
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    match (sa.len(), sb.len()) {
        (2, 2) if sa[1] == sb[0] => Ok((1, sa[0], sa[1], sb[1])),
        (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => Ok((sa[0], sa[1], sa[2], sb[2])),
        _ => Err(Error::shape(
            "matmul",
            format!("incompatible operands {sa:?} and {sb:?}"),
        )),
    }
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n) = matmul_dims(a, b)?;
    let mut c = vec![0.0; batch * m * n];
    for t in 0..batch {
        gemm_nn(
            m,
            k,
            n,
            &a.data()[t * m * k..(t + 1) * m * k],
            &b.data()[t * k * n..(t + 1) * k * n],
            &mut c[t * m * n..(t + 1) * m * n],
        );
    }
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
    Ok(Tensor::from_raw(shape, c))
}

fn matmul_bwd(
    a: &Tensor,
    b: &Tensor,
    dc: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (batch, m, k, n) = matmul_dims(a, b).expect("validated in forward");
    let mut da = need_a.then(|| vec![0.0; a.len()]);
    let mut db = need_b.then(|| vec![0.0; b.len()]);
    for t in 0..batch {
        let dct = &dc.data()[t * m * n..(t + 1) * m * n];
        if let Some(da) = da.as_mut() {
            gemm_nt(m, n, k, dct, &b.data()[t * k * n..(t + 1) * k * n], &mut da[t * m * k..(t + 1) * m * k]);
        }
        if let Some(db) = db.as_mut() {
            gemm_tn(m, k, n, &a.data()[t * m * k..(t + 1) * m * k], dct, &mut db[t * k * n..(t + 1) * k * n]);
        }
    }
    (
        da.map(|d| Tensor::from_raw(a.shape().to_vec(), d)),
        db.map(|d| Tensor::from_raw(b.shape().to_vec(), d)),
    )
}

fn binary_fwd(name: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !a.shape().ends_with(b.shape()) {
        return Err(Error::shape(
            name,
            format!("right operand {:?} is not a suffix of {:?}", b.shape(), a.shape()),
        ));
    }
    let m = b.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &av)| f(av, b.data()[i % m]))
        .collect();
    Ok(Tensor::from_raw(a.shape().to_vec(), data))
}

fn reduce_to_suffix(g: &Tensor, shape: &[usize]) -> Tensor {
    let m: usize = shape.iter().product();
    let mut out = vec![0.0; m];
    for chunk in g.data().chunks(m) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_raw(shape.to_vec(), out)
}

fn check_axis(name: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::shape(
            name,
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn concat_fwd(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    check_axis("concat", xs[0], axis)?;
    let base = xs[0].shape();
    let mut total = 0;
    for x in xs {
        let s = x.shape();
        if s.len() != base.len()
            || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::shape(
                "concat",
                format!("{s:?} does not match {base:?} off axis {axis}"),
            ));
        }
        total += s[axis];
    }
    let (outer, _, inner) = xs[0].split_axis(axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.shape()[axis];
            data.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = base.to_vec();
    shape[axis] = total;
    Ok(Tensor::from_raw(shape, data))
}

fn slice_fwd(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", x, axis)?;
    let (outer, n, inner) = x.split_axis(axis);
    if start >= end || end > n {
        return Err(Error::shape(
            "slice",
            format!("range {start}..{end} invalid for extent {n}"),
        ));
    }
    let w = end - start;
    let mut data = Vec::with_capacity(outer * w * inner);
    for o in 0..outer {
        let s = (o * n + start) * inner;
        data.extend_from_slice(&x.data()[s..s + w * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = w;
    Ok(Tensor::from_raw(shape, data))
}

fn permute_fwd(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || core::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of rank {r}"),
        ));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1; r];
    for i in (0..r - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    // Innermost output axis is copied in a tight loop.
    let last = r - 1;
    let (n_last, s_last) = (out_shape[last], strides[last]);
    let mut data = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    loop {
        let src = x.data();
        for j in 0..n_last {
            data.push(src[base + j * s_last]);
        }
        // advance the outer multi-index
        let mut ax = last;
        loop {
            if ax == 0 {
                return Ok(Tensor::from_raw(out_shape, data));
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn expand_fwd(x: &Tensor, axis: usize, extent: usize) -> Result<Tensor> {
    check_axis("expand", x, axis)?;
    if x.shape()[axis] != 1 || extent == 0 {
        return Err(Error::shape(
            "expand",
            format!("axis {axis} of {:?} must have extent 1", x.shape()),
        ));
    }
    let (outer, _, inner) = x.split_axis(axis);
    let mut data = Vec::with_capacity(outer * extent * inner);
    for o in 0..outer {
        let src = &x.data()[o * inner..(o + 1) * inner];
        for _ in 0..extent {
            data.extend_from_slice(src);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = extent;
    Ok(Tensor::from_raw(shape, data))
}

fn softmax_fwd(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    let (outer, n, inner) = x.split_axis(axis);
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(src[at(j)]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = math::exp(src[at(j)] - m);
                out[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                out[at(j)] /= s;
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

fn softmax_bwd(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = y.split_axis(axis);
    let mut g = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut s = 0.0;
            for j in 0..n {
                s += dy.data()[at(j)] * y.data()[at(j)];
            }
            for j in 0..n {
                g[at(j)] = y.data()[at(j)] * (dy.data()[at(j)] - s);
            }
        }
    }
    Tensor::from_raw(y.shape().to_vec(), g)
}

fn layernorm_fwd(x: &Tensor, axis: usize, eps: f64, affine: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    check_axis("layernorm", x, axis)?;
    let (outer, n, inner) = x.split_axis(axis);
    if let Some((g, b)) = affine {
        if g.shape() != [n] || b.shape() != [n] {
            return Err(Error::shape(
                "layernorm",
                format!("affine parameters {:?}/{:?} must be [{n}]", g.shape(), b.shape()),
            ));
        }
    }
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|j| { let d = src[at(j)] - mean; d * d }).sum::<f64>() / n as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            for j in 0..n {
                let xhat = (src[at(j)] - mean) * inv;
                out[at(j)] = match affine {
                    Some((g, b)) => xhat * g.data()[j] + b.data()[j],
                    None => xhat,
                };
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

fn layernorm_bwd(x: &Tensor, gamma: Option<&Tensor>, dy: &Tensor, axis: usize, eps: f64) -> (Tensor, Tensor, Tensor) {
    let (outer, n, inner) = x.split_axis(axis);
    let src = x.data();
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    let mut xhat = vec![0.0; n];
    let mut dxhat = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|j| { let d = src[at(j)] - mean; d * d }).sum::<f64>() / n as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            for j in 0..n {
                xhat[j] = (src[at(j)] - mean) * inv;
                let d = dy.data()[at(j)];
                dgamma[j] += d * xhat[j];
                dbeta[j] += d;
                dxhat[j] = gamma.map_or(d, |g| d * g.data()[j]);
            }
            let m1 = dxhat.iter().sum::<f64>() / n as f64;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            for j in 0..n {
                dx[at(j)] = inv * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
    }
    (
        Tensor::from_raw(x.shape().to_vec(), dx),
        Tensor::from_raw(vec![n], dgamma),
        Tensor::from_raw(vec![n], dbeta),
    )
}

struct ConvDims {
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor, stride: usize) -> Result<ConvDims> {
    let (sx, sw) = (x.shape(), w.shape());
    if !(stride == 1 || stride == 2) {
        return Err(Error::shape("conv2d", format!("stride {stride} not in {{1,2}}")));
    }
    if sx.len() != 4 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[3] {
        return Err(Error::shape(
            "conv2d",
            format!("input {sx:?} and weight {sw:?} must be [b,h,w,c] and [3,3,c,cout]"),
        ));
    }
    Ok(ConvDims {
        b: sx[0],
        h: sx[1],
        w: sx[2],
        ci: sx[3],
        co: sw[3],
        ho: (sx[1] - 1) / stride + 1,
        wo: (sx[2] - 1) / stride + 1,
    })
}

fn conv2d_fwd(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let d = conv_dims(x, w, stride)?;
    let mut out = vec![0.0; d.b * d.ho * d.wo * d.co];
    for b in 0..d.b {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let o = ((b * d.ho + oy) * d.wo + ox) * d.co;
                let acc = &mut out[o..o + d.co];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let xi = ((b * d.h + iy as usize) * d.w + ix as usize) * d.ci;
                        let wblock = (ky * 3 + kx) * d.ci * d.co;
                        gemm_nn(
                            1,
                            d.ci,
                            d.co,
                            &x.data()[xi..xi + d.ci],
                            &w.data()[wblock..wblock + d.ci * d.co],
                            acc,
                        );
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![d.b, d.ho, d.wo, d.co], out))
}

fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = conv_dims(x, w, stride).expect("validated in forward");
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    for b in 0..d.b {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let o = ((b * d.ho + oy) * d.wo + ox) * d.co;
                let g = &dy.data()[o..o + d.co];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let xi = ((b * d.h + iy as usize) * d.w + ix as usize) * d.ci;
                        let wblock = (ky * 3 + kx) * d.ci * d.co;
                        if let Some(dw) = dw.as_mut() {
                            gemm_tn(
                                1,
                                d.ci,
                                d.co,
                                &x.data()[xi..xi + d.ci],
                                g,
                                &mut dw[wblock..wblock + d.ci * d.co],
                            );
                        }
                        if let Some(dx) = dx.as_mut() {
                            gemm_nt(
                                1,
                                d.co,
                                d.ci,
                                g,
                                &w.data()[wblock..wblock + d.ci * d.co],
                                &mut dx[xi..xi + d.ci],
                            );
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|v| Tensor::from_raw(x.shape().to_vec(), v)),
        dw.map(|v| Tensor::from_raw(w.shape().to_vec(), v)),
    )
}

fn reduced_shape(x: &Tensor, axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = x.shape().to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn reduce_sum_fwd(name: &'static str, x: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    match axis {
        None => {
            let s: f64 = x.data().iter().sum();
            Ok(Tensor::from_raw(vec![1], vec![if mean { s / x.len() as f64 } else { s }]))
        }
        Some(axis) => {
            check_axis(name, x, axis)?;
            let (outer, n, inner) = x.split_axis(axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let src = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= n as f64);
            }
            Ok(Tensor::from_raw(reduced_shape(x, axis), out))
        }
    }
}

fn reduce_sum_bwd(x: &Tensor, dy: &Tensor, axis: Option<usize>, mean: bool) -> Tensor {
    match axis {
        None => {
            let v = if mean { dy.item() / x.len() as f64 } else { dy.item() };
            Tensor::from_raw(x.shape().to_vec(), vec![v; x.len()])
        }
        Some(axis) => {
            let (outer, n, inner) = x.split_axis(axis);
            let k = if mean { 1.0 / n as f64 } else { 1.0 };
            let mut g = Vec::with_capacity(x.len());
            for o in 0..outer {
                for _ in 0..n {
                    g.extend(dy.data()[o * inner..(o + 1) * inner].iter().map(|v| v * k));
                }
            }
            Tensor::from_raw(x.shape().to_vec(), g)
        }
    }
}

fn extremum_fwd(name: &'static str, x: &Tensor, axis: usize, is_max: bool) -> Result<(Tensor, Vec<usize>)> {
    check_axis(name, x, axis)?;
    let (outer, n, inner) = x.split_axis(axis);
    let mut vals = vec![0.0; outer * inner];
    let mut args = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| x.data()[(o * n + j) * inner + i];
            let mut best = at(0);
            let mut arg = 0;
            for j in 1..n {
                let v = at(j);
                if (is_max && v > best) || (!is_max && v < best) {
                    best = v;
                    arg = j;
                }
            }
            vals[o * inner + i] = best;
            args[o * inner + i] = arg;
        }
    }
    Ok((Tensor::from_raw(reduced_shape(x, axis), vals), args))
}

fn cross_entropy_fwd(x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy_with_softmax",
            format!("logits {:?} vs {} labels", x.shape(), labels.len()),
        ));
    }
    let c = x.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape(
            "cross_entropy_with_softmax",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = &x.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + math::ln(row.iter().map(|v| math::exp(v - m)).sum::<f64>());
        total += lse - row[l];
    }
    Ok(Tensor::scalar(total / labels.len() as f64))
}

fn l1_fwd(a: &Tensor, b: &Tensor, weights: Option<&[f64]>) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "l1",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let total = match weights {
        Some(w) => {
            if w.len() != a.len() || w.iter().any(|&v| v < 0.0) {
                return Err(Error::shape("l1", "weights must be non-negative, one per element"));
            }
            w.iter().sum::<f64>()
        }
        None => a.len() as f64,
    };
    if total <= 0.0 {
        return Err(Error::contract("l1 weights sum to zero"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (x, y))| weights.map_or(1.0, |w| w[i]) * (x - y).abs())
        .sum();
    Ok(Tensor::scalar(s / total))
}

fn bce_fwd(x: &Tensor, targets: &[f64]) -> Result<Tensor> {
    if x.len() != targets.len() {
        return Err(Error::shape(
            "bce_with_logits",
            format!("{} logits vs {} targets", x.len(), targets.len()),
        ));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(targets)
        .map(|(&l, &t)| l.max(0.0) - l * t + math::ln_1p(math::exp(-l.abs())))
        .sum();
    Ok(Tensor::scalar(s / x.len() as f64))
}

/// Clamped bilinear read of one channel vector. Returns the four corner
/// offsets and the interpolation weights so callers can differentiate.
pub(crate) struct BilinearTap {
    pub(crate) corners: [usize; 4],
    pub(crate) weights: [f64; 4],
    /// Local fractions inside the cell.
    pub(crate) fx: f64,
    pub(crate) fy: f64,
    /// Whether each coordinate was inside the map (clamped ones have zero slope).
    pub(crate) inside_x: bool,
    pub(crate) inside_y: bool,
}

/// Corners are ordered (y0,x0), (y0,x1), (y1,x0), (y1,x1) and expressed as
/// pixel indices `row * w + col`.
pub(crate) fn bilinear_tap(h: usize, w: usize, x: f64, y: f64) -> BilinearTap {
    let xmax = (w - 1) as f64;
    let ymax = (h - 1) as f64;
    let inside_x = (0.0..=xmax).contains(&x);
    let inside_y = (0.0..=ymax).contains(&y);
    let xc = x.clamp(0.0, xmax);
    let yc = y.clamp(0.0, ymax);
    let x0 = (math::floor(xc) as usize).min(w - 2);
    let y0 = (math::floor(yc) as usize).min(h - 2);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    BilinearTap {
        corners: [y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1],
        weights: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        fx,
        fy,
        inside_x,
        inside_y,
    }
}

fn bilinear_dims(map: &Tensor, pts: &Tensor, batch_index: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (sm, sp) = (map.shape(), pts.shape());
    if sm.len() != 4 || sp.len() != 3 || sp[2] != 2 {
        return Err(Error::shape(
            "bilinear_sample",
            format!("map {sm:?} must be [b,h,w,c], points {sp:?} must be [n,k,2]"),
        ));
    }
    if sm[1] < 2 || sm[2] < 2 {
        return Err(Error::shape("bilinear_sample", format!("map {sm:?} needs h, w >= 2")));
    }
    if batch_index.len() != sp[0] || batch_index.iter().any(|&b| b >= sm[0]) {
        return Err(Error::shape(
            "bilinear_sample",
            format!("batch index {batch_index:?} invalid for {} points rows and {} maps", sp[0], sm[0]),
        ));
    }
    Ok((sm[0], sm[1], sm[2], sm[3], sp[0], sp[1]))
}

fn bilinear_fwd(map: &Tensor, pts: &Tensor, batch_index: &[usize]) -> Result<Tensor> {
    let (_, h, w, c, n, k) = bilinear_dims(map, pts, batch_index)?;
    let mut out = vec![0.0; n * k * c];
    for i in 0..n {
        let base = batch_index[i] * h * w;
        for j in 0..k {
            let p = (i * k + j) * 2;
            let tap = bilinear_tap(h, w, pts.data()[p], pts.data()[p + 1]);
            let dst = &mut out[(i * k + j) * c..(i * k + j + 1) * c];
            for (corner, wt) in tap.corners.iter().zip(tap.weights) {
                if wt == 0.0 {
                    continue;
                }
                let src = &map.data()[(base + corner) * c..(base + corner + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![n, k, c], out))
}

fn bilinear_bwd(
    map: &Tensor,
    pts: &Tensor,
    batch_index: &[usize],
    dy: &Tensor,
    need_map: bool,
    need_pts: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (_, h, w, c, n, k) = bilinear_dims(map, pts, batch_index).expect("validated in forward");
    let mut dmap = need_map.then(|| vec![0.0; map.len()]);
    let mut dpts = need_pts.then(|| vec![0.0; pts.len()]);
    for i in 0..n {
        let base = batch_index[i] * h * w;
        for j in 0..k {
            let p = (i * k + j) * 2;
            let tap = bilinear_tap(h, w, pts.data()[p], pts.data()[p + 1]);
            let g = &dy.data()[(i * k + j) * c..(i * k + j + 1) * c];
            if let Some(dm) = dmap.as_mut() {
                for (corner, wt) in tap.corners.iter().zip(tap.weights) {
                    let dst = &mut dm[(base + corner) * c..(base + corner + 1) * c];
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += wt * s;
                    }
                }
            }
            if let Some(dp) = dpts.as_mut() {
                let f = |q: usize| &map.data()[(base + tap.corners[q]) * c..(base + tap.corners[q] + 1) * c];
                let (f00, f01, f10, f11) = (f(0), f(1), f(2), f(3));
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ch in 0..c {
                    let dvdx = (1.0 - tap.fy) * (f01[ch] - f00[ch]) + tap.fy * (f11[ch] - f10[ch]);
                    let dvdy = (1.0 - tap.fx) * (f10[ch] - f00[ch]) + tap.fx * (f11[ch] - f01[ch]);
                    gx += g[ch] * dvdx;
                    gy += g[ch] * dvdy;
                }
                if tap.inside_x {
                    dp[p] += gx;
                }
                if tap.inside_y {
                    dp[p + 1] += gy;
                }
            }
        }
    }
    (
        dmap.map(|v| Tensor::from_raw(map.shape().to_vec(), v)),
        dpts.map(|v| Tensor::from_raw(pts.shape().to_vec(), v)),
    )
}

fn giou_check(x: &Tensor, targets: &[[f64; 4]]) -> Result<usize> {
    if x.rank() != 2 || x.shape()[1] != 4 || x.shape()[0] != targets.len() {
        return Err(Error::shape(
            "giou_loss",
            format!("boxes {:?} vs {} targets", x.shape(), targets.len()),
        ));
    }
    Ok(targets.len())
}

/// Returns `(loss, d loss / d box)` for one xyxy box against a constant one.
fn giou_single(a: [f64; 4], b: [f64; 4]) -> (f64, [f64; 4]) {
    let (wa, ha) = (a[2] - a[0], a[3] - a[1]);
    let area_a = wa * ha;
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let union = area_a + area_b - inter;
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let hull = cw * ch;
    let loss = 2.0 - inter / union - union / hull;

    let d_area = [-ha, -wa, ha, wa];
    let mut d_inter = [0.0; 4];
    if overlap {
        if a[0] >= b[0] {
            d_inter[0] = -ih;
        }
        if a[1] >= b[1] {
            d_inter[1] = -iw;
        }
        if a[2] <= b[2] {
            d_inter[2] = ih;
        }
        if a[3] <= b[3] {
            d_inter[3] = iw;
        }
    }
    let mut d_hull = [0.0; 4];
    if a[0] <= b[0] {
        d_hull[0] = -ch;
    }
    if a[1] <= b[1] {
        d_hull[1] = -cw;
    }
    if a[2] >= b[2] {
        d_hull[2] = ch;
    }
    if a[3] >= b[3] {
        d_hull[3] = cw;
    }
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * hull - union * d_hull[i]) / (hull * hull);
        grad[i] = -d_iou - d_ratio;
    }
    (loss, grad)
}

fn giou_fwd(x: &Tensor, targets: &[[f64; 4]]) -> Result<Tensor> {
    let n = giou_check(x, targets)?;
    let mut s = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let d = &x.data()[r * 4..r * 4 + 4];
        s += giou_single([d[0], d[1], d[2], d[3]], *t).0;
    }
    Ok(Tensor::scalar(s / n as f64))
}

fn giou_bwd(x: &Tensor, targets: &[[f64; 4]], dy: f64) -> Tensor {
    let n = targets.len();
    let mut g = vec![0.0; x.len()];
    for (r, t) in targets.iter().enumerate() {
        let d = &x.data()[r * 4..r * 4 + 4];
        let (_, gr) = giou_single([d[0], d[1], d[2], d[3]], *t);
        for i in 0..4 {
            g[r * 4 + i] = dy * gr[i] / n as f64;
        }
    }
    Tensor::from_raw(x.shape().to_vec(), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_tails() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(dot(&a, &a), 140.0);
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let y = permute_fwd(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.data()[(c * 2 + a) * 3 + b], x.data()[(a * 3 + b) * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn giou_of_identical_boxes_is_zero_loss() {
        let (l, _) = giou_single([0.0, 0.0, 2.0, 3.0], [0.0, 0.0, 2.0, 3.0]);
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn conv_output_extent() {
        let x = Tensor::zeros(&[1, 32, 32, 3]);
        let w = Tensor::zeros(&[3, 3, 3, 5]);
        assert_eq!(conv2d_fwd(&x, &w, 2).unwrap().shape(), &[1, 16, 16, 5]);
        assert_eq!(conv2d_fwd(&x, &w, 1).unwrap().shape(), &[1, 32, 32, 5]);
        assert!(conv2d_fwd(&x, &w, 3).is_err());
    }
}
