//! 2-D convolution as a custom tensor op.
//!
//! The forward pass lowers each image to a column matrix (im2col) and runs a
//! single GEMM; the backward pass does the transposed GEMMs and scatters the
//! input gradient back with col2im. Only square kernels and symmetric zero
//! padding are supported, which covers every convolution in this crate.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor};

use super::ops::{cpu1, cpu2, cpu3, Element, Kernel1, Kernel2, Kernel3};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_height: usize,
    out_width: usize,
}

impl Geometry {
    fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            bail!("conv2d: input {height}x{width} smaller than kernel {kernel} with padding {padding}")
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_pixels(&self) -> usize {
        self.height * self.width
    }

    /// A 1x1 unit-stride convolution reads the image itself as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Calls `f(col_offset, image_offset, len)` for every maximal run of
    /// in-bounds taps along an output row. Consecutive column entries map to
    /// image entries `stride` apart.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for ci in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    // Valid ox satisfy 0 <= ox * s + kj - p < width.
                    let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
                    let hi = if self.width + p > kj {
                        ((self.width + p - kj - 1) / s + 1).min(self.out_width)
                    } else {
                        0
                    };
                    if lo >= hi {
                        continue;
                    }
                    let row_base = ((ci * k + ki) * k + kj) * self.out_pixels();
                    for oy in 0..self.out_height {
                        let iy = oy * s + ki;
                        if iy < p || iy - p >= self.height {
                            continue;
                        }
                        let image = ci * self.in_pixels() + (iy - p) * self.width + lo * s + kj - p;
                        f(row_base + oy * self.out_width + lo, image, hi - lo);
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, image: &[T], col: &mut [T]) {
        // Without padding every column entry is written below.
        if self.padding > 0 {
            col.fill(T::default());
        }
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            if s == 1 {
                col[dst..dst + len].copy_from_slice(&image[src..src + len]);
            } else {
                for (i, c) in col[dst..dst + len].iter_mut().enumerate() {
                    *c = image[src + i * s];
                }
            }
        });
    }

    fn col2im<T: Element>(&self, col: &[T], image: &mut [T]) {
        let s = self.stride;
        self.for_each_run(|src, dst, len| {
            for (i, &c) in col[src..src + len].iter().enumerate() {
                image[dst + i * s] += c;
            }
        });
    }
}

fn dims4(layout: &Layout, what: &str) -> Result<(usize, usize, usize, usize)> {
    match layout.shape().dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => bail!("conv2d: {what} must be rank 4, got {other:?}"),
    }
}

/// Forward convolution:
/// `(input [B,C,H,W], weight [O,C,K,K], bias [O]) -> [B,O,Ho,Wo]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
}

impl Kernel3 for Conv2dOp {
    fn run<T: Element>(
        &self,
        x: &[T],
        xl: &Layout,
        w: &[T],
        wl: &Layout,
        bias: &[T],
        _: &Layout,
    ) -> Result<(Vec<T>, Shape)> {
        let (b, c, h, wd) = dims4(xl, "input")?;
        let (o, wc, kh, kw) = dims4(wl, "weight")?;
        if wc != c || kh != kw || bias.len() != o {
            bail!("conv2d: weight {:?} incompatible with input {:?}", wl.shape(), xl.shape())
        }
        let g = Geometry::new(c, h, wd, kh, self.stride, self.padding)?;
        let (rows, px) = (g.col_rows(), g.out_pixels());
        let mut out = vec![T::default(); b * o * px];
        for (chunk, &bv) in out.chunks_mut(px).zip(bias.iter().cycle()) {
            chunk.fill(bv);
        }
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::default(); rows * px]
        };
        for bi in 0..b {
            let image = &x[bi * c * h * wd..(bi + 1) * c * h * wd];
            let col_ref: &[T] = if g.is_pointwise() {
                image
            } else {
                g.im2col(image, &mut col);
                &col
            };
            let dst = &mut out[bi * o * px..(bi + 1) * o * px];
            // out[o, px] += W[o, rows] * col[rows, px]
            unsafe {
                T::gemm(
                    T::from_f64(1.0),
                    o,
                    rows,
                    px,
                    w.as_ptr(),
                    rows as isize,
                    1,
                    col_ref.as_ptr(),
                    px as isize,
                    1,
                    dst.as_mut_ptr(),
                    px as isize,
                    1,
                );
            }
        }
        Ok((out, Shape::from((b, o, g.out_height, g.out_width))))
    }
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
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
        input: &Tensor,
        weight: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, w) = input.dims4()?;
        let grad_input = grad.apply_op2_no_bwd(
            weight,
            &Conv2dInputGrad {
                stride: self.stride,
                padding: self.padding,
                height: h,
                width: w,
            },
        )?;
        let grad_weight = input.apply_op2_no_bwd(
            &grad,
            &Conv2dWeightGrad {
                stride: self.stride,
                padding: self.padding,
                kernel: weight.dim(2)?,
            },
        )?;
        let grad_bias = grad.apply_op1_no_bwd(&BiasGrad)?;
        Ok((Some(grad_input), Some(grad_weight), Some(grad_bias)))
    }
}

/// `(grad_out [B,O,Ho,Wo], weight [O,C,K,K]) -> grad_in [B,C,H,W]`.
#[derive(Debug, Clone, Copy)]
struct Conv2dInputGrad {
    stride: usize,
    padding: usize,
    height: usize,
    width: usize,
}

impl Kernel2 for Conv2dInputGrad {
    fn run<T: Element>(&self, gy: &[T], gl: &Layout, w: &[T], wl: &Layout) -> Result<(Vec<T>, Shape)> {
        let (b, o, _, _) = dims4(gl, "grad")?;
        let (_, c, k, _) = dims4(wl, "weight")?;
        let g = Geometry::new(c, self.height, self.width, k, self.stride, self.padding)?;
        let (rows, px, ipx) = (g.col_rows(), g.out_pixels(), g.in_pixels());
        let mut out = vec![T::default(); b * c * ipx];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::default(); rows * px]
        };
        for bi in 0..b {
            let gyb = &gy[bi * o * px..(bi + 1) * o * px];
            let dst = &mut out[bi * c * ipx..(bi + 1) * c * ipx];
            let target: &mut [T] = if g.is_pointwise() { dst } else { &mut col };
            // col[rows, px] = W^T[rows, o] * gy[o, px]
            unsafe {
                T::gemm(
                    T::default(),
                    rows,
                    o,
                    px,
                    w.as_ptr(),
                    1,
                    rows as isize,
                    gyb.as_ptr(),
                    px as isize,
                    1,
                    target.as_mut_ptr(),
                    px as isize,
                    1,
                );
            }
            if !g.is_pointwise() {
                g.col2im(&col, &mut out[bi * c * ipx..(bi + 1) * c * ipx]);
            }
        }
        Ok((out, Shape::from((b, c, self.height, self.width))))
    }
}

impl CustomOp2 for Conv2dInputGrad {
    fn name(&self) -> &'static str {
        "conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        cpu2(self, s1, l1, s2, l2)
    }
}

/// `(input [B,C,H,W], grad_out [B,O,Ho,Wo]) -> grad_weight [O,C,K,K]`.
#[derive(Debug, Clone, Copy)]
struct Conv2dWeightGrad {
    stride: usize,
    padding: usize,
    kernel: usize,
}

impl Kernel2 for Conv2dWeightGrad {
    fn run<T: Element>(&self, x: &[T], xl: &Layout, gy: &[T], gl: &Layout) -> Result<(Vec<T>, Shape)> {
        let (b, c, h, w) = dims4(xl, "input")?;
        let (_, o, _, _) = dims4(gl, "grad")?;
        let g = Geometry::new(c, h, w, self.kernel, self.stride, self.padding)?;
        let (rows, px) = (g.col_rows(), g.out_pixels());
        let mut out = vec![T::default(); o * rows];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::default(); rows * px]
        };
        for bi in 0..b {
            let image = &x[bi * c * h * w..(bi + 1) * c * h * w];
            let col_ref: &[T] = if g.is_pointwise() {
                image
            } else {
                g.im2col(image, &mut col);
                &col
            };
            let gyb = &gy[bi * o * px..(bi + 1) * o * px];
            // dW[o, rows] += gy[o, px] * col^T[px, rows]
            unsafe {
                T::gemm(
                    T::from_f64(1.0),
                    o,
                    px,
                    rows,
                    gyb.as_ptr(),
                    px as isize,
                    1,
                    col_ref.as_ptr(),
                    1,
                    px as isize,
                    out.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
        }
        Ok((out, Shape::from((o, c, self.kernel, self.kernel))))
    }
}

impl CustomOp2 for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        cpu2(self, s1, l1, s2, l2)
    }
}

/// `grad_out [B,O,Ho,Wo] -> grad_bias [O]`.
struct BiasGrad;

impl Kernel1 for BiasGrad {
    fn run<T: Element>(&self, gy: &[T], l: &Layout) -> Result<(Vec<T>, Shape)> {
        let (_, o, h, w) = dims4(l, "grad")?;
        let mut out = vec![T::default(); o];
        for (i, chunk) in gy.chunks(h * w).enumerate() {
            let mut acc = T::default();
            for &v in chunk {
                acc += v;
            }
            out[i % o] += acc;
        }
        Ok((out, Shape::from(o)))
    }
}

impl CustomOp1 for BiasGrad {
    fn name(&self) -> &'static str {
        "conv2d-bias-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        cpu1(self, s, l)
    }
}

/// Differentiable 2-D convolution; a missing bias means zero bias.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if stride == 0 {
        bail!("conv2d: stride must be positive")
    }
    let bias = match bias {
        Some(b) => b.contiguous()?,
        None => Tensor::zeros(weight.dim(0)?, weight.dtype(), weight.device())?,
    };
    input
        .contiguous()?
        .apply_op3(&weight.contiguous()?, &bias, Conv2dOp { stride, padding })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn det(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0)
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    const CASES: [(usize, usize, usize); 6] = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 2, 3), (1, 2, 0), (3, 3, 2)];

    #[test]
    fn matches_candle_builtin() {
        for &(k, s, p) in &CASES {
            let x = det(&[2, 3, 9, 10], 1);
            let w = det(&[4, 3, k, k], 2);
            let b = det(&[4], 3);
            let ours = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let reference = x
                .conv2d(&w, p, s, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let diff = max_diff(&ours, &reference);
            assert!(diff < 1e-12, "k{k} s{s} p{p}: {diff}");
        }
    }

    #[test]
    fn gradients_match_candle_builtin() {
        // candle's own conv backward mis-sizes the input gradient for some
        // stride/padding combinations; those are covered by the test below.
        for &(k, s, p) in &CASES[..5] {
            let x = Var::from_tensor(&det(&[2, 3, 8, 8], 3)).unwrap();
            let w = Var::from_tensor(&det(&[5, 3, k, k], 4)).unwrap();
            let b = Var::from_tensor(&det(&[5], 6)).unwrap();
            let out = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let probe = det(out.dims(), 5);
            let g1 = out.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
            let theirs = x
                .conv2d(&w, p, s, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            let g2 = theirs.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [x.as_tensor(), w.as_tensor(), b.as_tensor()] {
                let diff = max_diff(g1.get(v).unwrap(), g2.get(v).unwrap());
                assert!(diff < 1e-10, "k{k} s{s} p{p}: {diff}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // The probe loss is linear in each argument, so central differences
        // are exact up to rounding.
        for &(k, s, p) in &CASES {
            let x = Var::from_tensor(&det(&[1, 2, 5, 6], 7)).unwrap();
            let w = Var::from_tensor(&det(&[2, 2, k, k], 8)).unwrap();
            let b = Var::from_tensor(&det(&[2], 9)).unwrap();
            let out = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let probe = det(out.dims(), 10);
            let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
                conv2d(x, w, Some(b), s, p).unwrap().mul(&probe).unwrap().sum_all().unwrap().to_scalar().unwrap()
            };
            let grads = out.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
            for which in 0..3 {
                let var = [&x, &w, &b][which];
                let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
                let analytic: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                for i in 0..base.len() {
                    let eval = |delta: f64| {
                        let mut v = base.clone();
                        v[i] += delta;
                        let t = Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap();
                        let mut args = [x.as_tensor().clone(), w.as_tensor().clone(), b.as_tensor().clone()];
                        args[which] = t;
                        loss(&args[0], &args[1], &args[2])
                    };
                    let fd = (eval(0.5) - eval(-0.5)) / 1.0;
                    assert!((fd - analytic[i]).abs() < 1e-9, "k{k} s{s} p{p} arg{which}[{i}]: {fd} vs {}", analytic[i]);
                }
            }
        }
    }

    #[test]
    fn f32_supported() {
        let x = det(&[1, 2, 4, 4], 1).to_dtype(DType::F32).unwrap();
        let w = det(&[3, 2, 3, 3], 1).to_dtype(DType::F32).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 1).unwrap().dims(), &[1, 3, 4, 4]);
    }
}
