//! Fused CPU kernels with hand-written backward passes.
//!
//! candle composes SiLU and group normalization out of many broadcast and
//! reduction ops, whose backward passes dominate a training step on CPU.
//! These kernels do each in one or two passes over contiguous memory.

use std::ops::{Add, AddAssign, Div, Mul, Sub};

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor};

pub(crate) trait Element:
    Copy
    + Default
    + PartialOrd
    + AddAssign
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn storage(v: Vec<Self>) -> CpuStorage;
    fn slice(s: &CpuStorage) -> Option<&[Self]>;

    /// `c = a * b + beta * c` for row/column-strided matrices; with
    /// `beta = 0` the previous contents of `c` are never read.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        beta: Self,
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! element {
    ($t:ty, $variant:ident, $gemm:path) => {
        impl Element for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn storage(v: Vec<Self>) -> CpuStorage {
                CpuStorage::$variant(v)
            }
            fn slice(s: &CpuStorage) -> Option<&[Self]> {
                match s {
                    CpuStorage::$variant(v) => Some(v),
                    _ => None,
                }
            }
            unsafe fn gemm(
                beta: Self,
                m: usize,
                k: usize,
                n: usize,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

element!(f32, F32, matrixmultiply::sgemm);
element!(f64, F64, matrixmultiply::dgemm);

pub(crate) fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("{what} must be contiguous"),
    }
}

fn operand<'a, T: Element>(s: &'a CpuStorage, l: &Layout, what: &str) -> Result<&'a [T]> {
    match T::slice(s) {
        Some(v) => contiguous(v, l, what),
        None => bail!("{what}: only f32/f64 operands of one dtype are supported"),
    }
}

/// Kernels generic over the element type; the `cpu*` helpers dispatch on dtype.
pub(crate) trait Kernel1 {
    fn run<T: Element>(&self, x: &[T], l: &Layout) -> Result<(Vec<T>, Shape)>;
}

pub(crate) trait Kernel2 {
    fn run<T: Element>(&self, a: &[T], la: &Layout, b: &[T], lb: &Layout) -> Result<(Vec<T>, Shape)>;
}

pub(crate) trait Kernel3 {
    #[allow(clippy::too_many_arguments)]
    fn run<T: Element>(
        &self,
        a: &[T],
        la: &Layout,
        b: &[T],
        lb: &Layout,
        c: &[T],
        lc: &Layout,
    ) -> Result<(Vec<T>, Shape)>;
}

pub(crate) fn cpu1<K: Kernel1>(k: &K, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
    fn go<T: Element, K: Kernel1>(k: &K, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (v, shape) = k.run(operand::<T>(s, l, "arg")?, l)?;
        Ok((T::storage(v), shape))
    }
    match s {
        CpuStorage::F32(_) => go::<f32, K>(k, s, l),
        CpuStorage::F64(_) => go::<f64, K>(k, s, l),
        _ => bail!("only f32/f64 tensors are supported"),
    }
}

pub(crate) fn cpu2<K: Kernel2>(
    k: &K,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> Result<(CpuStorage, Shape)> {
    fn go<T: Element, K: Kernel2>(
        k: &K,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (v, shape) = k.run(operand::<T>(s1, l1, "lhs")?, l1, operand::<T>(s2, l2, "rhs")?, l2)?;
        Ok((T::storage(v), shape))
    }
    match s1 {
        CpuStorage::F32(_) => go::<f32, K>(k, s1, l1, s2, l2),
        CpuStorage::F64(_) => go::<f64, K>(k, s1, l1, s2, l2),
        _ => bail!("only f32/f64 tensors are supported"),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn cpu3<K: Kernel3>(
    k: &K,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> Result<(CpuStorage, Shape)> {
    #[allow(clippy::too_many_arguments)]
    fn go<T: Element, K: Kernel3>(
        k: &K,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (v, shape) = k.run(
            operand::<T>(s1, l1, "arg1")?,
            l1,
            operand::<T>(s2, l2, "arg2")?,
            l2,
            operand::<T>(s3, l3, "arg3")?,
            l3,
        )?;
        Ok((T::storage(v), shape))
    }
    match s1 {
        CpuStorage::F32(_) => go::<f32, K>(k, s1, l1, s2, l2, s3, l3),
        CpuStorage::F64(_) => go::<f64, K>(k, s1, l1, s2, l2, s3, l3),
        _ => bail!("only f32/f64 tensors are supported"),
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    let one = T::from_f64(1.0);
    one / (one + (T::default() - x).exp())
}

struct Silu;

impl Kernel1 for Silu {
    fn run<T: Element>(&self, x: &[T], l: &Layout) -> Result<(Vec<T>, Shape)> {
        Ok((x.iter().map(|&v| v * sigmoid(v)).collect(), l.shape().clone()))
    }
}

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu-fused"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        cpu1(self, s, l)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &SiluGrad)?))
    }
}

struct SiluGrad;

impl Kernel2 for SiluGrad {
    fn run<T: Element>(&self, x: &[T], l: &Layout, g: &[T], _: &Layout) -> Result<(Vec<T>, Shape)> {
        let one = T::from_f64(1.0);
        let out = x
            .iter()
            .zip(g)
            .map(|(&v, &gv)| {
                let s = sigmoid(v);
                gv * s * (one + v * (one - s))
            })
            .collect();
        Ok((out, l.shape().clone()))
    }
}

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "silu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        cpu2(self, s1, l1, s2, l2)
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

/// Group normalization with a per-channel affine transform.
#[derive(Debug, Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

impl GroupNormOp {
    fn geometry(&self, l: &Layout) -> Result<(usize, usize, usize)> {
        let dims = l.shape().dims();
        if dims.len() < 2 || dims[1] % self.groups != 0 {
            bail!("group_norm: input {dims:?} incompatible with {} groups", self.groups)
        }
        let spatial: usize = dims[2..].iter().product();
        Ok((dims[0], dims[1], spatial))
    }

    /// Mean and reciprocal standard deviation of each `(batch, group)` slab.
    fn stats<T: Element>(&self, slab: &[T]) -> (f64, f64) {
        let n = slab.len() as f64;
        let mean = slab.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let var = slab.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
        (mean, 1.0 / (var + self.eps).sqrt())
    }
}

impl Kernel3 for GroupNormOp {
    fn run<T: Element>(
        &self,
        x: &[T],
        lx: &Layout,
        w: &[T],
        _: &Layout,
        b: &[T],
        _: &Layout,
    ) -> Result<(Vec<T>, Shape)> {
        let (batch, channels, spatial) = self.geometry(lx)?;
        if w.len() != channels || b.len() != channels {
            bail!("group_norm: affine parameters must have {channels} elements")
        }
        let per_group = channels / self.groups;
        let slab = per_group * spatial;
        let mut out = vec![T::default(); x.len()];
        for n in 0..batch {
            for g in 0..self.groups {
                let start = (n * self.groups + g) * slab;
                let (mean, rstd) = self.stats(&x[start..start + slab]);
                for cl in 0..per_group {
                    let c = g * per_group + cl;
                    let scale = w[c].to_f64() * rstd;
                    let shift = b[c].to_f64() - mean * scale;
                    let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
                    let off = start + cl * spatial;
                    for (o, &v) in out[off..off + spatial].iter_mut().zip(&x[off..off + spatial]) {
                        *o = v * scale + shift;
                    }
                }
            }
        }
        Ok((out, lx.shape().clone()))
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        cpu3(self, s1, l1, s2, l2, s3, l3)
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(w, &grad.contiguous()?, &GroupNormGrad(*self))?;
        let n = x.elem_count();
        let c = w.elem_count();
        let gx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let gw = packed.narrow(0, n, c)?;
        let gb = packed.narrow(0, n + c, c)?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Returns `[grad_x (flattened), grad_weight, grad_bias]` packed in one vector.
struct GroupNormGrad(GroupNormOp);

impl Kernel3 for GroupNormGrad {
    fn run<T: Element>(
        &self,
        x: &[T],
        lx: &Layout,
        w: &[T],
        _: &Layout,
        gy: &[T],
        _: &Layout,
    ) -> Result<(Vec<T>, Shape)> {
        let op = self.0;
        let (batch, channels, spatial) = op.geometry(lx)?;
        let per_group = channels / op.groups;
        let slab = per_group * spatial;
        let mut out = vec![T::default(); x.len() + 2 * channels];
        let mut gw = vec![0f64; channels];
        let mut gb = vec![0f64; channels];
        for n in 0..batch {
            for g in 0..op.groups {
                let start = (n * op.groups + g) * slab;
                let (mean, rstd) = op.stats(&x[start..start + slab]);
                // Sums of dxhat and dxhat * xhat over the slab.
                let (mut s1, mut s2) = (0f64, 0f64);
                for cl in 0..per_group {
                    let c = g * per_group + cl;
                    let wc = w[c].to_f64();
                    let off = start + cl * spatial;
                    let (mut sw, mut sb) = (0f64, 0f64);
                    for i in off..off + spatial {
                        let xhat = (x[i].to_f64() - mean) * rstd;
                        let dy = gy[i].to_f64();
                        sw += dy * xhat;
                        sb += dy;
                    }
                    gw[c] += sw;
                    gb[c] += sb;
                    s1 += sb * wc;
                    s2 += sw * wc;
                }
                let (m1, m2) = (s1 / slab as f64, s2 / slab as f64);
                for cl in 0..per_group {
                    let c = g * per_group + cl;
                    let wc = w[c].to_f64();
                    let off = start + cl * spatial;
                    for i in off..off + spatial {
                        let xhat = (x[i].to_f64() - mean) * rstd;
                        let dxhat = gy[i].to_f64() * wc;
                        out[i] = T::from_f64(rstd * (dxhat - m1 - xhat * m2));
                    }
                }
            }
        }
        for c in 0..channels {
            out[x.len() + c] = T::from_f64(gw[c]);
            out[x.len() + channels + c] = T::from_f64(gb[c]);
        }
        let len = out.len();
        Ok((out, Shape::from(len)))
    }
}

impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "group-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        cpu3(self, s1, l1, s2, l2, s3, l3)
    }
}

/// Group normalization of `[B, C, ...]` with affine `weight`/`bias` of length `C`.
pub fn group_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op3(
        &weight.contiguous()?,
        &bias.contiguous()?,
        GroupNormOp { groups, eps },
    )
}

/// Adds a per-sample, per-channel offset: `x [B,C,...] + t [B,C]`.
struct AddChannelBias;

impl Kernel2 for AddChannelBias {
    fn run<T: Element>(&self, x: &[T], lx: &Layout, t: &[T], _: &Layout) -> Result<(Vec<T>, Shape)> {
        let dims = lx.shape().dims();
        if dims.len() < 2 || t.len() != dims[0] * dims[1] {
            bail!("add_channel_bias: offsets do not match input {dims:?}")
        }
        let spatial: usize = dims[2..].iter().product();
        let mut out = x.to_vec();
        for (chunk, &tv) in out.chunks_mut(spatial.max(1)).zip(t) {
            for v in chunk {
                *v += tv;
            }
        }
        Ok((out, lx.shape().clone()))
    }
}

impl CustomOp2 for AddChannelBias {
    fn name(&self) -> &'static str {
        "add-channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        cpu2(self, s1, l1, s2, l2)
    }

    fn bwd(&self, _x: &Tensor, t: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let gt = grad.contiguous()?.apply_op1_no_bwd(&SpatialSum)?.reshape(t.shape())?;
        Ok((Some(grad.clone()), Some(gt)))
    }
}

/// `[B,C,...] -> [B*C]` sums over the trailing dimensions.
struct SpatialSum;

impl Kernel1 for SpatialSum {
    fn run<T: Element>(&self, x: &[T], l: &Layout) -> Result<(Vec<T>, Shape)> {
        let dims = l.shape().dims();
        let spatial: usize = dims[2..].iter().product::<usize>().max(1);
        let out: Vec<T> = x
            .chunks(spatial)
            .map(|c| {
                let mut acc = T::default();
                for &v in c {
                    acc += v;
                }
                acc
            })
            .collect();
        let n = out.len();
        Ok((out, Shape::from(n)))
    }
}

impl CustomOp1 for SpatialSum {
    fn name(&self) -> &'static str {
        "spatial-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        cpu1(self, s, l)
    }
}

/// `x [B,C,H,W] + t[b,c]` broadcast over the spatial dimensions.
pub fn add_channel_bias(x: &Tensor, t: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&t.contiguous()?, AddChannelBias)
}
