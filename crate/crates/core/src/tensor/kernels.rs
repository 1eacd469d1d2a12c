use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{dim_err, Result};
use crate::real::Real;

/// `C (+)= op(A) op(B)` for contiguous row-major operands. `op(A)` is `m×k`
/// and `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
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

/// `op(a) · op(b)` for rank-2 tensors, where `op` optionally transposes.
pub fn matmul_t<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(dim_err!("matmul expects matrices, got {:?} and {:?}", a.shape, b.shape));
    }
    let (m, ka) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (kb, n) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    if ka != kb {
        return Err(dim_err!(
            "matmul inner dimensions differ: {:?}{} x {:?}{}",
            a.shape,
            if ta { "^T" } else { "" },
            b.shape,
            if tb { "^T" } else { "" }
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(ta, tb, m, n, ka, &a.data, &b.data, &mut out, false);
    Tensor::checked(vec![m, n], out, "matmul")
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [c, h, w] = input;
        let [o, kc, kh, kw] = kernel;
        if kc != c {
            return Err(dim_err!("kernel expects {} input channels, input has {}", kc, c));
        }
        if stride == 0 {
            return Err(dim_err!("stride must be positive"));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(dim_err!(
                "kernel {}x{} does not fit padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom {
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }

    fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ol = g.out_len();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ol = g.out_len();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn batch_dims(shape: &[usize], what: &str) -> Result<(usize, [usize; 3])> {
    match shape {
        [n, c, h, w] => Ok((*n, [*c, *h, *w])),
        _ => Err(dim_err!("{} must be [N,C,H,W], got {:?}", what, shape)),
    }
}

fn kernel_dims(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [o, c, kh, kw] => Ok([*o, *c, *kh, *kw]),
        _ => Err(dim_err!("conv kernel must be [O,C,kh,kw], got {:?}", shape)),
    }
}

/// Batched cross-correlation: `[N,C,H,W] ⋆ [O,C,kh,kw] → [N,O,H',W']`.
pub fn conv2d_batch<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, chw) = batch_dims(&x.shape, "conv2d input")?;
    let g = ConvGeom::new(chw, kernel_dims(&kernel.shape)?, stride, padding)?;
    conv2d_geom(x, kernel, &g, n)
}

pub(crate) fn conv2d_geom<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeom,
    n: usize,
) -> Result<Tensor<T>> {
    let (pl, ol, il) = (g.patch_len(), g.out_len(), g.in_len());
    let mut cols = vec![T::zero(); pl * ol];
    let mut out = vec![T::zero(); n * g.out_channels * ol];
    for s in 0..n {
        im2col(&x.data[s * il..(s + 1) * il], g, &mut cols);
        let dst = &mut out[s * g.out_channels * ol..(s + 1) * g.out_channels * ol];
        gemm(false, false, g.out_channels, ol, pl, &kernel.data, &cols, dst, false);
    }
    let [o, oh, ow] = g.output_shape();
    Tensor::checked(vec![n, o, oh, ow], out, "conv2d")
}

/// Adjoint of the convolution with respect to its input.
pub fn conv2d_input_grad<T: Real>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeom,
) -> Result<Tensor<T>> {
    let (n, ochw) = batch_dims(&grad_out.shape, "conv output gradient")?;
    if ochw != g.output_shape() || kernel.shape != g.kernel_shape() {
        return Err(dim_err!(
            "conv input-gradient operands {:?}, {:?} disagree with geometry",
            grad_out.shape,
            kernel.shape
        ));
    }
    let (pl, ol, il) = (g.patch_len(), g.out_len(), g.in_len());
    let mut cols = vec![T::zero(); pl * ol];
    let mut out = vec![T::zero(); n * il];
    for s in 0..n {
        let gy = &grad_out.data[s * g.out_channels * ol..(s + 1) * g.out_channels * ol];
        gemm(true, false, pl, ol, g.out_channels, &kernel.data, gy, &mut cols, false);
        col2im_add(&cols, g, &mut out[s * il..(s + 1) * il]);
    }
    Tensor::checked(vec![n, g.in_channels, g.height, g.width], out, "conv2d_input_grad")
}

/// Adjoint of the convolution with respect to its kernel.
pub fn conv2d_weight_grad<T: Real>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
) -> Result<Tensor<T>> {
    let (n, chw) = batch_dims(&x.shape, "conv input")?;
    let (n2, ochw) = batch_dims(&grad_out.shape, "conv output gradient")?;
    if n != n2 || chw != [g.in_channels, g.height, g.width] || ochw != g.output_shape() {
        return Err(dim_err!(
            "conv weight-gradient operands {:?}, {:?} disagree with geometry",
            x.shape,
            grad_out.shape
        ));
    }
    let (pl, ol, il) = (g.patch_len(), g.out_len(), g.in_len());
    let mut cols = vec![T::zero(); pl * ol];
    let mut out = vec![T::zero(); g.out_channels * pl];
    for s in 0..n {
        im2col(&x.data[s * il..(s + 1) * il], g, &mut cols);
        let gy = &grad_out.data[s * g.out_channels * ol..(s + 1) * g.out_channels * ol];
        gemm(false, true, g.out_channels, pl, ol, gy, &cols, &mut out, true);
    }
    Tensor::checked(g.kernel_shape().to_vec(), out, "conv2d_weight_grad")
}

/// Adds `bias[o]` to every element of channel `o` of an `[N,O,...]` tensor.
pub fn channel_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 || bias.shape != [x.shape[1]] {
        return Err(dim_err!("channel bias {:?} for input {:?}", bias.shape, x.shape));
    }
    let plane: usize = x.shape[2..].iter().product();
    let mut out = x.data.clone();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias.data[i % x.shape[1]];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::checked(x.shape.clone(), out, "channel_bias")
}

/// Sums an `[N,O,...]` tensor down to `[O]`.
pub fn channel_sum<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(dim_err!("channel_sum needs rank >= 2, got {:?}", x.shape));
    }
    let o = x.shape[1];
    let plane: usize = x.shape[2..].iter().product();
    let mut out = vec![T::zero(); o];
    for (i, chunk) in x.data.chunks(plane.max(1)).enumerate() {
        out[i % o] += chunk.iter().copied().sum::<T>();
    }
    Tensor::checked(vec![o], out, "channel_sum")
}

pub(crate) fn channel_broadcast<T: Real>(b: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    channel_bias(&Tensor::zeros(shape.to_vec()), b)
}

/// Non-overlapping `size×size` average pooling over `[N,C,H,W]`; trailing
/// rows/columns that do not fill a window are dropped.
pub fn avg_pool<T: Real>(x: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (n, [c, h, w]) = batch_dims(&x.shape, "avg_pool input")?;
    if size == 0 || h < size || w < size {
        return Err(dim_err!("pool window {} does not fit {}x{}", size, h, w));
    }
    let (oh, ow) = (h / size, w / size);
    let inv = T::one() / T::cast_from((size * size) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for i in 0..size {
                    let r = &src[(oy * size + i) * w + ox * size..][..size];
                    acc += r.iter().copied().sum::<T>();
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::checked(vec![n, c, oh, ow], out, "avg_pool")
}

/// Adjoint of [`avg_pool`], spreading each gradient evenly over its window.
pub fn avg_pool_grad<T: Real>(
    grad_out: &Tensor<T>,
    size: usize,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (n, [c, h, w]) = batch_dims(input_shape, "avg_pool input")?;
    let (oh, ow) = (h / size, w / size);
    if grad_out.shape != [n, c, oh, ow] {
        return Err(dim_err!("avg_pool gradient {:?} for input {:?}", grad_out.shape, input_shape));
    }
    let inv = T::one() / T::cast_from((size * size) as f64);
    let mut out = vec![T::zero(); n * c * h * w];
    for (p, dst) in out.chunks_mut(h * w).enumerate() {
        let src = &grad_out.data[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * inv;
                for i in 0..size {
                    dst[(oy * size + i) * w + ox * size..][..size]
                        .iter_mut()
                        .for_each(|d| *d = v);
                }
            }
        }
    }
    Tensor::checked(input_shape.to_vec(), out, "avg_pool_grad")
}

fn last_axis<T: Real>(x: &Tensor<T>) -> Result<usize> {
    match x.shape.last() {
        Some(&k) if k > 0 => Ok(k),
        _ => Err(dim_err!("softmax needs a non-empty last axis, got {:?}", x.shape)),
    }
}

/// Numerically stable log-softmax over the last axis.
pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = last_axis(x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::checked(x.shape.clone(), out, "log_softmax")
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = last_axis(x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let z: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::checked(x.shape.clone(), out, "softmax")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new([m, n], out).unwrap()
    }

    #[allow(clippy::too_many_arguments)]
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let [o, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.data()[(ic * h + iy as usize) * w + ix as usize]
                                        * k.data()[((oc * c + ic) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        Tensor::new([o, oh, ow], out).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        // Summation order may differ inside the blocked kernel.
        if cfg!(feature = "std") {
            // Runtime-detected FMA kernels round each multiply-add once.
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-15);
        } else {
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[4, 6], &mut rng);
        let b = random(&[6, 5], &mut rng);
        let at = Tensor::new([6, 4], (0..24).map(|i| a.data()[(i % 4) * 6 + i / 4]).collect())
            .unwrap();
        let bt = Tensor::new([5, 6], (0..30).map(|i| b.data()[(i % 6) * 5 + i / 6]).collect())
            .unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y, ta, tb) in [(&at, &b, true, false), (&a, &bt, false, true), (&at, &bt, true, true)]
        {
            assert!(matmul_t(x, y, ta, tb).unwrap().max_abs_diff(&want).unwrap() < 1e-14);
        }
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let x = random(&[3, 9, 8], &mut rng);
            let k = random(&[4, 3, 3, 2], &mut rng);
            let fast = x.conv2d(&k, stride, pad).unwrap();
            let slow = naive_conv(&x, &k, stride, pad);
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_adjoints_satisfy_dot_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 7, 6], &mut rng);
        let k = random(&[5, 3, 3, 3], &mut rng);
        let g = ConvGeom::new([3, 7, 6], [5, 3, 3, 3], 2, 1).unwrap();
        let y = conv2d_geom(&x, &k, &g, 2).unwrap();
        let gy = random(y.shape(), &mut rng);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
        };
        let gx = conv2d_input_grad(&gy, &k, &g).unwrap();
        let gk = conv2d_weight_grad(&x, &gy, &g).unwrap();
        assert!((dot(&y, &gy) - dot(&x, &gx)).abs() < 1e-10);
        assert!((dot(&y, &gy) - dot(&k, &gk)).abs() < 1e-10);
    }

    #[test]
    fn pool_adjoint_and_values() {
        let x = Tensor::<f64>::new([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        let g = avg_pool_grad(&Tensor::<f64>::ones([1, 1, 2, 2]), 2, &[1, 1, 4, 4]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random(&[3, 6], &mut rng);
        let shifted = v.add(&Tensor::scalar(17.25)).unwrap();
        let d = softmax_rows(&v).unwrap().max_abs_diff(&softmax_rows(&shifted).unwrap());
        assert!(d.unwrap() <= 1e-12);
    }
}
