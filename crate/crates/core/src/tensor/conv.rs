use super::{Result, Tensor, TensorError};

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`.
///
/// `a` and `b` are addressed through explicit row/column strides so that
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe matrices lying inside `a`, `b` and `c`;
    // every call site derives them from the slice shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Unfolds `h x w x c` patches into an `(oh*ow) x (k*k*c)` matrix, zero padded.
///
/// Column layout is `(ky, kx, c)` row-major, which matches a row-major
/// `k x k x c_in x c_out` kernel viewed as a `(k*k*c_in) x c_out` matrix.
pub fn im2col(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let g = ConvGeom { h, w, cin, k, stride, pad, oh, ow };
    (im2col_geom(x, &g), oh, ow)
}

fn im2col_geom(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncol = g.cols();
    let mut cols = vec![0.0; g.oh * g.ow * ncol];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * ncol..(oy * g.ow + ox + 1) * ncol];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncol = g.cols();
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * ncol..(oy * g.ow + ox + 1) * ncol];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    x[dst..dst + g.cin]
                        .iter_mut()
                        .zip(&row[src..src + g.cin])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation of an `h x w x c_in` input with a
/// `k x k x c_in x c_out` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let &[h, w, cin] = input.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: format!("input must be h x w x c_in, got {:?}", input.shape()),
        });
    };
    let &[kh, kw, kc, cout] = kernel.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: format!("kernel must be k x k x c_in x c_out, got {:?}", kernel.shape()),
        });
    };
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::Shape {
            op: "conv2d",
            axes: "kernel axes 0,1 (must be equal and odd)".into(),
            expected: vec![kh, kh],
            found: vec![kh, kw],
        });
    }
    if kc != cin {
        return Err(TensorError::Shape {
            op: "conv2d",
            axes: "input axis 2 vs kernel axis 2 (c_in)".into(),
            expected: vec![cin],
            found: vec![kc],
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: "stride must be positive".into(),
        });
    }
    let k = kh;
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(TensorError::Shape {
            op: "conv2d",
            axes: "input axes 0,1 (too small for kernel)".into(),
            expected: vec![k, k],
            found: vec![h + 2 * padding, w + 2 * padding],
        });
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let g = ConvGeom { h, w, cin, k, stride, pad: padding, oh, ow };
    let ncol = g.cols();
    let cols = im2col_geom(input.data(), &g);
    let m = oh * ow;
    let mut out = vec![0.0; m * cout];
    gemm(m, ncol, cout, &cols, ncol as isize, 1, kernel.data(), cout as isize, 1, &mut out, 0.0);

    Ok(Tensor::from_op(
        "conv2d",
        vec![oh, ow, cout],
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |gout, p, _| {
            let gx = p[0].requires_grad().then(|| {
                // dcols = gout [m,cout] * K^T [cout,ncol]
                let mut dcols = vec![0.0; m * ncol];
                gemm(m, cout, ncol, gout, cout as isize, 1, p[1].data(), 1, cout as isize, &mut dcols, 0.0);
                col2im(&dcols, &g)
            });
            let gk = p[1].requires_grad().then(|| {
                // dK = cols^T [ncol,m] * gout [m,cout]
                let mut gk = vec![0.0; ncol * cout];
                gemm(ncol, m, cout, &cols, 1, ncol as isize, gout, cout as isize, 1, &mut gk, 0.0);
                gk
            });
            vec![gx, gk]
        }),
    ))
}
