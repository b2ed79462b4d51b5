//! 2-d convolution kernels (im2col + GEMM) on `[C, N, H, W]` activations.

use crate::real::Real;
use crate::tensor::Tensor;

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Stride-1 convolution whose output keeps the input's spatial size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    /// 3x3 stride-2 convolution halving even spatial sizes.
    pub fn down2() -> Self {
        Self {
            kernel: 3,
            stride: 2,
            padding: 1,
            dilation: 1,
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (input + 2 * self.padding - span) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c (m x n) = a (m x k) * b (k x n)`, optionally transposing stored operands
/// and optionally accumulating into `c`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_transposed: bool,
    b: &[F],
    b_transposed: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: lengths asserted above; `c` is a distinct mutable borrow.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
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

fn im2col<F: Real>(x: &Tensor<F>, g: ConvGeom) -> (Vec<F>, usize, usize) {
    let (c, n, h, w) = x.dims4();
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let np = n * ho * wo;
    let mut cols = vec![F::zero(); c * k * k * np];
    let xd = x.data();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for b in 0..n {
                    let src = &xd[(ci * n + b) * h * w..(ci * n + b + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im<F: Real>(cols: &[F], dims: (usize, usize, usize, usize), g: ConvGeom) -> Tensor<F> {
    let (c, n, h, w) = dims;
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let np = n * ho * wo;
    let mut out = Tensor::zeros(&[c, n, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * np..(row + 1) * np];
                for b in 0..n {
                    let dst = &mut od[(ci * n + b) * h * w..(ci * n + b + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward convolution. `weight` is `[out, in, k, k]`, `bias` is `[out]`.
pub fn conv2d_forward<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    g: ConvGeom,
) -> Tensor<F> {
    let (c, n, h, w) = x.dims4();
    let o = weight.shape()[0];
    assert_eq!(weight.shape(), &[o, c, g.kernel, g.kernel], "conv weight shape");
    let ck = c * g.kernel * g.kernel;
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let np = n * ho * wo;
    let mut out = Tensor::zeros(&[o, n, ho, wo]);
    if g.is_pointwise() {
        matmul(o, ck, np, weight.data(), false, x.data(), false, out.data_mut(), false);
    } else {
        let (cols, _, _) = im2col(x, g);
        matmul(o, ck, np, weight.data(), false, &cols, false, out.data_mut(), false);
    }
    if let Some(b) = bias {
        let od = out.data_mut();
        for (oc, &bv) in b.data().iter().enumerate() {
            for v in &mut od[oc * np..(oc + 1) * np] {
                *v += bv;
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<F> {
    pub input: Option<Tensor<F>>,
    pub weight: Option<Tensor<F>>,
    pub bias: Option<Tensor<F>>,
}

pub fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    g: ConvGeom,
    grad_out: &Tensor<F>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<F> {
    let (c, n, h, w) = x.dims4();
    let o = weight.shape()[0];
    let ck = c * g.kernel * g.kernel;
    let (_, _, ho, wo) = grad_out.dims4();
    let np = n * ho * wo;
    let gd = grad_out.data();

    let owned_cols;
    let cols: &[F] = if !need_weight {
        &[]
    } else if g.is_pointwise() {
        x.data()
    } else {
        owned_cols = im2col(x, g).0;
        &owned_cols
    };

    let weight_grad = need_weight.then(|| {
        let mut dw = Tensor::zeros(weight.shape());
        matmul(o, np, ck, gd, false, cols, true, dw.data_mut(), false);
        dw
    });

    let bias_grad = need_bias.then(|| {
        let data = (0..o).map(|oc| gd[oc * np..(oc + 1) * np].iter().copied().sum()).collect();
        Tensor::from_vec(&[o], data).expect("bias grad shape")
    });

    let input_grad = need_input.then(|| {
        let mut dcols = vec![F::zero(); ck * np];
        matmul(ck, o, np, weight.data(), true, gd, false, &mut dcols, false);
        if g.is_pointwise() {
            Tensor::from_vec(&[c, n, h, w], dcols).expect("input grad shape")
        } else {
            col2im(&dcols, (c, n, h, w), g)
        }
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}
