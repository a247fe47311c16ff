//! Differentiable tensor operations recorded on the tape.

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{strides, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `b_shape` broadcast against it. `b_shape` must have the same rank with
/// every extent equal or 1.
fn broadcast_map(out_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if out_shape.len() != b_shape.len()
        || out_shape
            .iter()
            .zip(b_shape)
            .any(|(&o, &b)| b != o && b != 1)
    {
        return None;
    }
    let b_strides = strides(b_shape);
    let eff: Vec<usize> = b_shape
        .iter()
        .zip(&b_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

/// Permutes a row-major buffer: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let outer = n / inner;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let f = move |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let n = a.numel() as u64;
        if a.shape() == b.shape() {
            let out: Vec<T> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            let out = Tensor::from_parts(a.shape().to_vec(), out);
            return Ok(self.tape().record(out, &[self, other], n, move |g| {
                let ga = match kind {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => {
                        Tensor::from_parts(g.shape().to_vec(), mul_slices(g.data(), b.data()))
                    }
                };
                let gb = match kind {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.map(|v| -v),
                    Binary::Mul => {
                        Tensor::from_parts(g.shape().to_vec(), mul_slices(g.data(), a.data()))
                    }
                };
                vec![Some(ga), Some(gb)]
            }));
        }
        let map = if b.numel() == 1 && b.rank() == 0 {
            vec![0; a.numel()]
        } else {
            broadcast_map(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?
        };
        let out: Vec<T> = a
            .data()
            .iter()
            .zip(&map)
            .map(|(&x, &j)| f(x, b.data()[j]))
            .collect();
        let out = Tensor::from_parts(a.shape().to_vec(), out);
        Ok(self.tape().record(out, &[self, other], n, move |g| {
            let gd = g.data();
            let ga = match kind {
                Binary::Add | Binary::Sub => g.clone(),
                Binary::Mul => Tensor::from_parts(
                    g.shape().to_vec(),
                    gd.iter()
                        .zip(&map)
                        .map(|(&gv, &j)| gv * b.data()[j])
                        .collect(),
                ),
            };
            let mut gb = vec![T::zero(); b.numel()];
            for (i, (&gv, &j)) in gd.iter().zip(&map).enumerate() {
                gb[j] = gb[j]
                    + match kind {
                        Binary::Add => gv,
                        Binary::Sub => -gv,
                        Binary::Mul => gv * a.data()[i],
                    };
            }
            vec![Some(ga), Some(Tensor::from_parts(b.shape().to_vec(), gb))]
        }))
    }

    /// Elementwise sum. `other` may be a rank-0 scalar or broadcast along
    /// unit axes of the same rank.
    #[allow(clippy::should_implement_trait)] // fallible, so not `std::ops::Add`
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v * factor);
        self.tape()
            .record(out, &[self], x.numel() as u64, move |g| {
                vec![Some(g.map(|v| v * factor))]
            })
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v + c);
        self.tape()
            .record(out, &[self], x.numel() as u64, |g| vec![Some(g.clone())])
    }

    /// Pointwise map with derivative `df(x, y)` expressed through the input
    /// and the output.
    fn unary(
        self,
        flops_per: u64,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let saved = y.clone();
        let n = x.numel() as u64;
        self.tape().record(y, &[self], flops_per * n, move |g| {
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(x.data().iter().zip(saved.data()))
                .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
        })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            1,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(4, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(
            4,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(2, |v| v.exp(), |_, y| y)
    }

    /// Gaussian error linear unit, exact erf form: x·Φ(x).
    pub fn gelu(self) -> Var<'t, T> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi =
            T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
        self.unary(
            8,
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    /// Batched matrix product over the last two axes. `other` is either rank
    /// 2 (shared by every batch entry) or has the same leading batch axes.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape("matmul", ash, bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let batch_dims = &ash[..ash.len() - 2];
        let shared_b = bsh.len() == 2;
        if k != k2 || (!shared_b && &bsh[..bsh.len() - 2] != batch_dims) {
            return Err(Error::shape("matmul", ash, bsh));
        }
        let batch: usize = batch_dims.iter().product();
        let b_step = if shared_b { 0 } else { k * n };
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
                &b.data()[bi * b_step..bi * b_step + k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        let flops = 2 * (batch * m * k * n) as u64;
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.tape().record(out, &[self, other], flops, move |g| {
            let gd = g.data();
            // dA = dC · Bᵀ
            let mut ga = vec![T::zero(); batch * m * k];
            // dB = Aᵀ · dC (summed over batch when B is shared)
            let mut gb = vec![T::zero(); b.numel()];
            for bi in 0..batch {
                let gslice = &gd[bi * m * n..(bi + 1) * m * n];
                let bslice = &b.data()[bi * b_step..bi * b_step + k * n];
                T::gemm(
                    m,
                    n,
                    k,
                    gslice,
                    n as isize,
                    1,
                    bslice,
                    1,
                    n as isize,
                    T::zero(),
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                    k as isize,
                    1,
                );
                let beta = if shared_b && bi > 0 {
                    T::one()
                } else {
                    T::zero()
                };
                T::gemm(
                    k,
                    m,
                    n,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    1,
                    k as isize,
                    gslice,
                    n as isize,
                    1,
                    beta,
                    &mut gb[bi * b_step..bi * b_step + k * n],
                    n as isize,
                    1,
                );
            }
            vec![
                Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                Some(Tensor::from_parts(b.shape().to_vec(), gb)),
            ]
        }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis("softmax", axis, shape.len())?;
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut y = vec![T::zero(); x.numel()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(xd[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xd[base + j * inner] - max).exp();
                    y[base + j * inner] = e;
                    sum = sum + e;
                }
                let inv = T::one() / sum;
                for j in 0..len {
                    y[base + j * inner] = y[base + j * inner] * inv;
                }
            }
        }
        let y = Tensor::from_parts(shape, y);
        let saved = y.clone();
        let flops = 4 * x.numel() as u64;
        Ok(self.tape().record(y, &[self], flops, move |g| {
            // dx = y ⊙ (g − Σ g·y)
            let (gd, yd) = (g.data(), saved.data());
            let mut dx = vec![T::zero(); gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot = dot + gd[base + j * inner] * yd[base + j * inner];
                    }
                    for j in 0..len {
                        let p = base + j * inner;
                        dx[p] = yd[p] * (gd[p] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.reshaped(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record(out, &[self], 0, move |g| {
            vec![Some(g.reshaped(&in_shape).expect("reshape backward"))]
        }))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank {
            return Err(Error::shape("permute", x.shape(), perm));
        }
        for &p in perm {
            check_axis("permute", p, rank)?;
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::shape("permute", x.shape(), perm));
            }
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let out = Tensor::from_parts(out_shape.clone(), permute_data(x.data(), x.shape(), perm));
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape().record(out, &[self], 0, move |g| {
            let back = permute_data(g.data(), &out_shape, &inverse);
            let in_shape: Vec<usize> = inverse.iter().map(|&i| out_shape[i]).collect();
            vec![Some(Tensor::from_parts(in_shape, back))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Splits along `axis` into pieces of the given extents.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t, T>>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis("split", axis, shape.len())?;
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape("split", &shape, sizes));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut pieces = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &size in sizes {
            let mut piece_shape = shape.clone();
            piece_shape[axis] = size;
            let chunk = size * inner;
            let row = shape[axis] * inner;
            let mut data = Vec::with_capacity(outer * chunk);
            for o in 0..outer {
                let from = o * row + start * inner;
                data.extend_from_slice(&x.data()[from..from + chunk]);
            }
            let in_shape = shape.clone();
            let offset = start;
            let piece = Tensor::from_parts(piece_shape, data);
            pieces.push(self.tape().record(piece, &[self], 0, move |g| {
                let mut full = vec![T::zero(); in_shape.iter().product()];
                for o in 0..outer {
                    let to = o * row + offset * inner;
                    full[to..to + chunk].copy_from_slice(&g.data()[o * chunk..(o + 1) * chunk]);
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), full))]
            }));
            start += size;
        }
        Ok(pieces)
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape()
            .record(out, &[self], x.numel() as u64, move |g| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = T::of(self.numel() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis("sum_axis", axis, shape.len())?;
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::from_parts(out_shape, out);
        Ok(self
            .tape()
            .record(out, &[self], x.numel() as u64, move |g| {
                let mut full = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        full.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), full))]
            }))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", axis, base.len())?;
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &base, s));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &s) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let out = Tensor::from_parts(out_shape, out);
    let tape = first.tape();
    Ok(tape.record(out, parts, 0, move |g| {
        let mut grads: Vec<Vec<T>> = sizes
            .iter()
            .map(|&s| Vec::with_capacity(outer * s * inner))
            .collect();
        let mut pos = 0;
        for _ in 0..outer {
            for (gv, &s) in grads.iter_mut().zip(&sizes) {
                gv.extend_from_slice(&g.data()[pos..pos + s * inner]);
                pos += s * inner;
            }
        }
        grads
            .into_iter()
            .zip(&sizes)
            .map(|(gv, &s)| {
                let mut sh = base.clone();
                sh[axis] = s;
                Some(Tensor::from_parts(sh, gv))
            })
            .collect()
    }))
}

fn mul_slices<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_vectors() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_one_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let one = tape.constant(Tensor::scalar(1.0));
        assert_eq!(x.mul(one).unwrap().value(), x.value());
        assert_eq!(x.scale(1.0).value(), x.value());
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[1], &[2.0]));
        let b = tape.leaf(t(&[1], &[3.0]));
        let loss = a.mul(b).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let loss = a.mul(b).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(eye.matmul(x).unwrap().value(), x.value());
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
        assert!(x.matmul(x).is_err());
    }

    #[test]
    fn softmax_basics() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let a = tape.constant(t(&[2], &[1.0, 3.0]));
        let b = tape.constant(t(&[2], &[101.0, 103.0]));
        let (sa, sb) = (a.softmax(0).unwrap().value(), b.softmax(0).unwrap().value());
        assert!(sa.max_abs_diff(&sb) < 1e-15);
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn reshape_round_trip_and_count_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let back = x.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(back.value(), x.value());
        assert!(matches!(x.reshape(&[5]), Err(Error::ElementCount { .. })));
    }

    #[test]
    fn split_concat_inverse() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 3], |i| i as f64));
        let parts = x.split(1, &[2, 2]).unwrap();
        assert_eq!(concat(&parts, 1).unwrap().value(), x.value());
        assert!(x.split(1, &[1, 2]).is_err());
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .permute(&[2, 0, 1])
            .unwrap()
            .value();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.get(&[c, a, b]), x.get(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn sum_axis_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(x.sum_axis(1).unwrap().value().data(), &[3.0, 12.0]);
    }

    #[test]
    fn linear_loss_gradient_and_fan_out() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.1, 0.2, 0.3]));
        let x = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let loss = w.mul(x).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), x.value().data());

        let tape = Tape::new();
        let w = tape.leaf(t(&[1], &[1.5]));
        let loss = w.add(w).unwrap().sum_all();
        assert_eq!(tape.backward(loss).unwrap().get(w).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, -2.0]));
        let loss = w.mul(w).unwrap().sum_all();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(w).unwrap(), g2.get(w).unwrap());
        assert_eq!(g1.get(w).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn gelu_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 10.0]));
        let y = x.gelu().value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-4);
    }
}
