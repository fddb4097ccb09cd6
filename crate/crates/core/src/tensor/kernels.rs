// Forward values and vector-Jacobian products for every op kind.
//
// Shape rules:
//   add/sub/mul   equal shapes, or rhs shape is a trailing suffix of lhs shape
//                 (rhs repeats along lhs's leading axes: bias add, scalar scale)
//   matmul        [.., m, k] x [.., k, n] with identical leading axes, or
//                 [.., m, k] x [k, n] with the rhs shared across leading axes
//   permute       any axis permutation
//   reshape       same element count
//   concat        equal shapes except along the concat axis
//   gather_rows   input viewed as [rows, ..]; output [indices.len(), ..]
//   mean/sum      over one axis (removed from the shape) or over everything (-> [])
//   softmax, log_softmax, l2_normalize, standardize  act on the last axis

use super::graph::OpKind;
use super::{numel, Scalar, Tensor, TensorError, TensorResult};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
pub(crate) const NORM_FLOOR: f64 = 1e-12;

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_K) * (x + S::of(GELU_C) * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_K) * (x + S::of(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = S::of(GELU_K) * (S::one() + S::of(3.0 * GELU_C) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

/// Size of the repeating rhs block for elementwise binaries.
fn broadcast_period(op: &'static str, a: &[usize], b: &[usize]) -> TensorResult<usize> {
    if a == b || (b.len() < a.len() && a[a.len() - b.len()..] == *b) {
        Ok(numel(b))
    } else {
        Err(mismatch(op, a, b))
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> TensorResult<(MatmulDims, Vec<usize>)> {
    let (ra, rb) = (a.len(), b.len());
    if ra < 2 || rb < 2 || a[ra - 1] != b[rb - 2] {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k, n) = (a[ra - 2], a[ra - 1], b[rb - 1]);
    let shared_rhs = rb == 2;
    if !shared_rhs && a[..ra - 2] != b[..rb - 2] {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = a[..ra - 2].to_vec();
    out.extend([m, n]);
    Ok((
        MatmulDims {
            batch: numel(&a[..ra - 2]),
            m,
            k,
            n,
            shared_rhs,
        },
        out,
    ))
}

/// out[m,n] += a[m,k] * b[k,n]
fn mm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn mm_a_bt_acc<S: Scalar>(g: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: S = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn mm_at_b_acc<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

fn check_perm(perm: &[usize], rank: usize) -> TensorResult<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(invalid(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn last_axis(op: &'static str, shape: &[usize]) -> TensorResult<(usize, usize)> {
    match shape.last() {
        Some(&w) => Ok((numel(shape) / w, w)),
        None => Err(invalid(op, "needs at least one axis")),
    }
}

fn unary_map<S: Scalar>(x: &Tensor<S>, f: impl Fn(S) -> S) -> Vec<S> {
    x.data().iter().map(|&v| f(v)).collect()
}

fn expect_arity(op: &'static str, inputs: usize, want: usize) -> TensorResult<()> {
    if inputs == want {
        Ok(())
    } else {
        Err(invalid(
            op,
            format!("expects {want} input(s), got {inputs}"),
        ))
    }
}

pub(crate) fn forward<S: Scalar>(kind: &OpKind, inputs: &[&Tensor<S>]) -> TensorResult<Tensor<S>> {
    let op = kind.name();
    match kind {
        OpKind::Concat { .. } => {
            if inputs.is_empty() {
                return Err(invalid(op, "expects at least one input"));
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Matmul => {
            expect_arity(op, inputs.len(), 2)?
        }
        _ => expect_arity(op, inputs.len(), 1)?,
    }
    let x = inputs[0];
    let (shape, data) = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let y = inputs[1];
            let period = broadcast_period(op, x.shape(), y.shape())?;
            let yd = y.data();
            let f: fn(S, S) -> S = match kind {
                OpKind::Add => |a, b| a + b,
                OpKind::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, yd[i % period]))
                .collect();
            (x.shape().to_vec(), data)
        }
        OpKind::Scale(c) => {
            let c = S::of(*c);
            (x.shape().to_vec(), unary_map(x, |v| v * c))
        }
        OpKind::Matmul => {
            let y = inputs[1];
            let (d, out_shape) = matmul_dims(x.shape(), y.shape())?;
            let mut out = vec![S::zero(); numel(&out_shape)];
            if d.shared_rhs {
                mm_acc(x.data(), y.data(), &mut out, d.batch * d.m, d.k, d.n);
            } else {
                let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for b in 0..d.batch {
                    mm_acc(
                        &x.data()[b * sa..(b + 1) * sa],
                        &y.data()[b * sb..(b + 1) * sb],
                        &mut out[b * so..(b + 1) * so],
                        d.m,
                        d.k,
                        d.n,
                    );
                }
            }
            (out_shape, out)
        }
        OpKind::Permute(perm) => {
            check_perm(perm, x.rank())?;
            let (data, shape) = permute_data(x.data(), x.shape(), perm);
            (shape, data)
        }
        OpKind::Reshape(shape) => {
            if numel(shape) != x.numel() || shape.contains(&0) {
                return Err(mismatch(op, x.shape(), shape));
            }
            (shape.clone(), x.data().to_vec())
        }
        OpKind::Concat { axis } => {
            let axis = *axis;
            if axis >= x.rank() {
                return Err(invalid(
                    op,
                    format!("axis {axis} out of range for {:?}", x.shape()),
                ));
            }
            let mut out_shape = x.shape().to_vec();
            out_shape[axis] = 0;
            for t in inputs {
                let s = t.shape();
                let compatible = s.len() == x.rank()
                    && s.iter()
                        .zip(x.shape())
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(mismatch(op, x.shape(), s));
                }
                out_shape[axis] += s[axis];
            }
            let outer = numel(&x.shape()[..axis]);
            let mut out = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.numel() / outer;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            (out_shape, out)
        }
        OpKind::GatherRows(indices) => {
            let rows = *x
                .shape()
                .first()
                .ok_or_else(|| invalid(op, "needs at least one axis"))?;
            if indices.is_empty() {
                return Err(invalid(op, "empty index list"));
            }
            let width = x.numel() / rows;
            let mut out = Vec::with_capacity(indices.len() * width);
            for &r in indices {
                if r >= rows {
                    return Err(invalid(op, format!("row {r} out of range for {rows} rows")));
                }
                out.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            (shape, out)
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let mean = matches!(kind, OpKind::Mean { .. });
            match axis {
                None => {
                    let total: S = x.data().iter().copied().sum();
                    let v = if mean {
                        total / S::of(x.numel() as f64)
                    } else {
                        total
                    };
                    (Vec::new(), vec![v])
                }
                Some(axis) => {
                    let axis = *axis;
                    if axis >= x.rank() {
                        return Err(invalid(
                            op,
                            format!("axis {axis} out of range for {:?}", x.shape()),
                        ));
                    }
                    let (outer, len, inner) = axis_split(x.shape(), axis);
                    let mut out = vec![S::zero(); outer * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                    if mean {
                        let inv = S::one() / S::of(len as f64);
                        out.iter_mut().for_each(|v| *v = *v * inv);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(axis);
                    (shape, out)
                }
            }
        }
        OpKind::Exp => (x.shape().to_vec(), unary_map(x, |v| v.exp())),
        OpKind::Log => (x.shape().to_vec(), unary_map(x, |v| v.ln())),
        OpKind::Sqrt => (x.shape().to_vec(), unary_map(x, |v| v.sqrt())),
        OpKind::Abs => (x.shape().to_vec(), unary_map(x, |v| v.abs())),
        OpKind::Gelu => (x.shape().to_vec(), unary_map(x, gelu)),
        OpKind::Softmax | OpKind::LogSoftmax => {
            let (rows, w) = last_axis(op, x.shape())?;
            let log = matches!(kind, OpKind::LogSoftmax);
            let mut out = Vec::with_capacity(x.numel());
            for r in 0..rows {
                let row = &x.data()[r * w..(r + 1) * w];
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let denom: S = row.iter().map(|&v| (v - max).exp()).sum();
                if log {
                    let lse = denom.ln();
                    out.extend(row.iter().map(|&v| v - max - lse));
                } else {
                    out.extend(row.iter().map(|&v| (v - max).exp() / denom));
                }
            }
            (x.shape().to_vec(), out)
        }
        OpKind::L2Normalize => {
            let (rows, w) = last_axis(op, x.shape())?;
            let mut out = Vec::with_capacity(x.numel());
            for r in 0..rows {
                let row = &x.data()[r * w..(r + 1) * w];
                let n = row_norm(row);
                out.extend(row.iter().map(|&v| v / n));
            }
            (x.shape().to_vec(), out)
        }
        OpKind::Standardize { eps } => {
            let (rows, w) = last_axis(op, x.shape())?;
            let mut out = Vec::with_capacity(x.numel());
            for r in 0..rows {
                let row = &x.data()[r * w..(r + 1) * w];
                let (mean, inv) = moments(row, *eps);
                out.extend(row.iter().map(|&v| (v - mean) * inv));
            }
            (x.shape().to_vec(), out)
        }
    };
    Tensor::new(shape, data)
}

fn row_norm<S: Scalar>(row: &[S]) -> S {
    let sq: S = row.iter().map(|&v| v * v).sum();
    sq.sqrt().max(S::of(NORM_FLOOR))
}

/// Mean and inverse standard deviation (biased variance) of a row.
fn moments<S: Scalar>(row: &[S], eps: f64) -> (S, S) {
    let w = S::of(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / w;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / w;
    (mean, S::one() / (var + S::of(eps)).sqrt())
}

/// Gradients with respect to each input, given the upstream gradient `g` of
/// the output.
pub(crate) fn backward<S: Scalar>(
    kind: &OpKind,
    inputs: &[&Tensor<S>],
    output: &Tensor<S>,
    g: &[S],
) -> Vec<Vec<S>> {
    let x = inputs[0];
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let y = inputs[1];
            let period = y.numel();
            let mut gx = g.to_vec();
            let mut gy = vec![S::zero(); period];
            match kind {
                OpKind::Add | OpKind::Sub => {
                    let sign = if matches!(kind, OpKind::Sub) {
                        -S::one()
                    } else {
                        S::one()
                    };
                    for (i, &gv) in g.iter().enumerate() {
                        gy[i % period] = gy[i % period] + sign * gv;
                    }
                }
                _ => {
                    let (xd, yd) = (x.data(), y.data());
                    for (i, &gv) in g.iter().enumerate() {
                        gx[i] = gv * yd[i % period];
                        gy[i % period] = gy[i % period] + gv * xd[i];
                    }
                }
            }
            vec![gx, gy]
        }
        OpKind::Scale(c) => {
            let c = S::of(*c);
            vec![g.iter().map(|&v| v * c).collect()]
        }
        OpKind::Matmul => {
            let y = inputs[1];
            let (d, _) = matmul_dims(x.shape(), y.shape()).expect("validated in forward");
            let mut gx = vec![S::zero(); x.numel()];
            let mut gy = vec![S::zero(); y.numel()];
            if d.shared_rhs {
                let rows = d.batch * d.m;
                mm_a_bt_acc(g, y.data(), &mut gx, rows, d.k, d.n);
                mm_at_b_acc(x.data(), g, &mut gy, rows, d.k, d.n);
            } else {
                let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for b in 0..d.batch {
                    let gb = &g[b * so..(b + 1) * so];
                    mm_a_bt_acc(
                        gb,
                        &y.data()[b * sb..(b + 1) * sb],
                        &mut gx[b * sa..(b + 1) * sa],
                        d.m,
                        d.k,
                        d.n,
                    );
                    mm_at_b_acc(
                        &x.data()[b * sa..(b + 1) * sa],
                        gb,
                        &mut gy[b * sb..(b + 1) * sb],
                        d.m,
                        d.k,
                        d.n,
                    );
                }
            }
            vec![gx, gy]
        }
        OpKind::Permute(perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![permute_data(g, output.shape(), &inverse).0]
        }
        OpKind::Reshape(_) => vec![g.to_vec()],
        OpKind::Concat { axis } => {
            let outer = numel(&x.shape()[..*axis]);
            let mut grads: Vec<Vec<S>> = inputs
                .iter()
                .map(|t| Vec::with_capacity(t.numel()))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (t, gi) in inputs.iter().zip(grads.iter_mut()) {
                    let chunk = t.numel() / outer;
                    gi.extend_from_slice(&g[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            grads
        }
        OpKind::GatherRows(indices) => {
            let width = x.numel() / x.shape()[0];
            let mut gx = vec![S::zero(); x.numel()];
            for (j, &r) in indices.iter().enumerate() {
                for (d, &s) in gx[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(&g[j * width..(j + 1) * width])
                {
                    *d = *d + s;
                }
            }
            vec![gx]
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let mean = matches!(kind, OpKind::Mean { .. });
            match axis {
                None => {
                    let scale = if mean {
                        S::one() / S::of(x.numel() as f64)
                    } else {
                        S::one()
                    };
                    vec![vec![g[0] * scale; x.numel()]]
                }
                Some(axis) => {
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    let scale = if mean {
                        S::one() / S::of(len as f64)
                    } else {
                        S::one()
                    };
                    let mut gx = Vec::with_capacity(x.numel());
                    for o in 0..outer {
                        for _ in 0..len {
                            gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                        }
                    }
                    vec![gx]
                }
            }
        }
        OpKind::Exp => vec![g
            .iter()
            .zip(output.data())
            .map(|(&gv, &y)| gv * y)
            .collect()],
        OpKind::Log => vec![g.iter().zip(x.data()).map(|(&gv, &v)| gv / v).collect()],
        OpKind::Sqrt => {
            let two = S::of(2.0);
            vec![g
                .iter()
                .zip(output.data())
                .map(|(&gv, &y)| gv / (two * y))
                .collect()]
        }
        OpKind::Abs => vec![g
            .iter()
            .zip(x.data())
            .map(|(&gv, &v)| {
                if v > S::zero() {
                    gv
                } else if v < S::zero() {
                    -gv
                } else {
                    S::zero()
                }
            })
            .collect()],
        OpKind::Gelu => vec![g
            .iter()
            .zip(x.data())
            .map(|(&gv, &v)| gv * gelu_grad(v))
            .collect()],
        OpKind::Softmax => {
            let w = *x.shape().last().expect("validated in forward");
            let y = output.data();
            let mut gx = Vec::with_capacity(x.numel());
            for (grow, yrow) in g.chunks(w).zip(y.chunks(w)) {
                let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                gx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
            }
            vec![gx]
        }
        OpKind::LogSoftmax => {
            let w = *x.shape().last().expect("validated in forward");
            let y = output.data();
            let mut gx = Vec::with_capacity(x.numel());
            for (grow, yrow) in g.chunks(w).zip(y.chunks(w)) {
                let total: S = grow.iter().copied().sum();
                gx.extend(
                    grow.iter()
                        .zip(yrow)
                        .map(|(&gv, &yv)| gv - yv.exp() * total),
                );
            }
            vec![gx]
        }
        OpKind::L2Normalize => {
            let w = *x.shape().last().expect("validated in forward");
            let mut gx = Vec::with_capacity(x.numel());
            for ((grow, yrow), xrow) in g
                .chunks(w)
                .zip(output.data().chunks(w))
                .zip(x.data().chunks(w))
            {
                let n = row_norm(xrow);
                let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                gx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| (gv - yv * dot) / n));
            }
            vec![gx]
        }
        OpKind::Standardize { eps } => {
            let w = *x.shape().last().expect("validated in forward");
            let wf = S::of(w as f64);
            let mut gx = Vec::with_capacity(x.numel());
            for ((grow, yrow), xrow) in g
                .chunks(w)
                .zip(output.data().chunks(w))
                .zip(x.data().chunks(w))
            {
                let (_, inv) = moments(xrow, *eps);
                let gmean = grow.iter().copied().sum::<S>() / wf;
                let gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<S>() / wf;
                gx.extend(
                    grow.iter()
                        .zip(yrow)
                        .map(|(&gv, &yv)| inv * (gv - gmean - yv * gy)),
                );
            }
            vec![gx]
        }
    }
}
