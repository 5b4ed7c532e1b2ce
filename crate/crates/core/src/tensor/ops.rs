//! Elementwise, reduction, reshaping and normalization operations.

use super::{gemm, Result, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            axes: "all".into(),
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("rank >= 1")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        "sub",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, p, _| {
            let ga = g.iter().zip(p[1].data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(p[0].data()).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_op(
        "scale",
        a.shape().to_vec(),
        a.data().iter().map(|v| v * s).collect(),
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * s).collect())]),
    )
}

pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_op(
        "add_scalar",
        a.shape().to_vec(),
        a.data().iter().map(|v| v + s).collect(),
        vec![a.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec())]),
    )
}

/// Adds a length-`c` bias to every row of the trailing axis.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = last_dim(x);
    if bias.shape() != [c] {
        return Err(TensorError::Shape {
            op: "add_bias",
            axes: "bias vs last axis".into(),
            expected: vec![c],
            found: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks_exact(c)
        .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
        .collect();
    Ok(Tensor::from_op(
        "add_bias",
        x.shape().to_vec(),
        data,
        vec![x.clone(), bias.clone()],
        Box::new(move |g, _, _| {
            let mut gb = vec![0.0; c];
            for row in g.chunks_exact(c) {
                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            vec![Some(g.to_vec()), Some(gb)]
        }),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_op(
        "relu",
        x.shape().to_vec(),
        x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        vec![x.clone()],
        Box::new(|g, p, _| {
            let gx = g
                .iter()
                .zip(p[0].data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(gx)]
        }),
    )
}

pub fn sum(x: &Tensor) -> Tensor {
    let n = x.numel();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![x.data().iter().sum()],
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel();
    let inv = 1.0 / n as f64;
    Tensor::from_op(
        "mean",
        vec![1],
        vec![x.data().iter().sum::<f64>() * inv],
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(vec![g[0] * inv; n])]),
    )
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(TensorError::InvalidArgument {
            op: "matmul",
            reason: format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
        });
    };
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            axes: "inner (lhs axis 1, rhs axis 0)".into(),
            expected: vec![k],
            found: vec![k2],
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut out, 0.0);
    Ok(Tensor::from_op(
        "matmul",
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, p, _| {
            let (a, b) = (p[0].data(), p[1].data());
            let ga = p[0].requires_grad().then(|| {
                // g [m,n] * b^T [n,k]
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, n as isize, 1, b, 1, n as isize, &mut ga, 0.0);
                ga
            });
            let gb = p[1].requires_grad().then(|| {
                // a^T [k,m] * g [m,n]
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a, 1, k as isize, g, n as isize, 1, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        }),
    ))
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.numel() || shape.contains(&0) {
        return Err(TensorError::Shape {
            op: "reshape",
            axes: "element count".into(),
            expected: x.shape().to_vec(),
            found: shape.to_vec(),
        });
    }
    Ok(Tensor::from_op(
        "reshape",
        shape.to_vec(),
        x.data().to_vec(),
        vec![x.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec())]),
    ))
}

/// Concatenates along the trailing axis; leading axes must agree.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb) = (a.shape().len(), b.shape().len());
    if ra != rb || a.shape()[..ra - 1] != b.shape()[..rb - 1] {
        return Err(TensorError::Shape {
            op: "concat_last",
            axes: "leading axes".into(),
            expected: a.shape()[..ra - 1].to_vec(),
            found: b.shape()[..rb.saturating_sub(1)].to_vec(),
        });
    }
    let (ca, cb) = (last_dim(a), last_dim(b));
    let rows = a.numel() / ca;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    let mut shape = a.shape().to_vec();
    shape[ra - 1] = ca + cb;
    Ok(Tensor::from_op(
        "concat_last",
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, _| {
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for row in g.chunks_exact(ca + cb) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Nearest-neighbour resize of an `h x w x c` tensor to `out_h x out_w x c`.
pub fn upsample_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w, c] = x.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "upsample_nearest",
            reason: format!("expected h x w x c, got {:?}", x.shape()),
        });
    };
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "upsample_nearest",
            reason: "output dims must be positive".into(),
        });
    }
    let src: Vec<usize> = (0..out_h)
        .flat_map(|y| (0..out_w).map(move |x| (y * h / out_h) * w + x * w / out_w))
        .collect();
    let xd = x.data();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &s in &src {
        data.extend_from_slice(&xd[s * c..(s + 1) * c]);
    }
    Ok(Tensor::from_op(
        "upsample_nearest",
        vec![out_h, out_w, c],
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = vec![0.0; h * w * c];
            for (o, &s) in src.iter().enumerate() {
                for k in 0..c {
                    gx[s * c + k] += g[o * c + k];
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Divides every trailing-axis vector by `sqrt(|v|^2 + eps)`.
///
/// Zero vectors stay zero.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Tensor {
    let d = last_dim(x);
    let mut norms = Vec::with_capacity(x.numel() / d);
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        norms.push(n);
        data.extend(row.iter().map(|v| v / n));
    }
    Tensor::from_op(
        "l2_normalize",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, _, y| {
            let mut gx = Vec::with_capacity(y.len());
            for ((yr, gr), n) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(&norms) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                gx.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / n));
            }
            vec![Some(gx)]
        }),
    )
}

pub fn softmax(x: &Tensor) -> Tensor {
    let d = last_dim(x);
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|v| (v - m).exp()));
        let z: f64 = data[start..].iter().sum();
        data[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_op(
        "softmax",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, _, s| {
            let mut gx = Vec::with_capacity(s.len());
            for (sr, gr) in s.chunks_exact(d).zip(g.chunks_exact(d)) {
                let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                gx.extend(sr.iter().zip(gr).map(|(s, g)| s * (g - dot)));
            }
            vec![Some(gx)]
        }),
    )
}

pub fn log_softmax(x: &Tensor) -> Tensor {
    let d = last_dim(x);
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|v| v - lse));
    }
    Tensor::from_op(
        "log_softmax",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, _, y| {
            let mut gx = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks_exact(d).zip(g.chunks_exact(d)) {
                let gs: f64 = gr.iter().sum();
                gx.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * gs));
            }
            vec![Some(gx)]
        }),
    )
}

/// Gathers elements by flat index into a 1-D tensor.
pub fn take(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let n = x.numel();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(TensorError::InvalidArgument {
            op: "take",
            reason: format!("index {bad} out of range for {n} elements"),
        });
    }
    if indices.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "take",
            reason: "empty index set".into(),
        });
    }
    let idx = indices.to_vec();
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::from_op(
        "take",
        vec![idx.len()],
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = vec![0.0; n];
            for (&i, gv) in idx.iter().zip(g) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Windowed inner products between two `h x w x d` maps.
///
/// Output channel `k` of pixel `(y, x)` holds `<a[y, x], b[y + s*oy, x + s*ox]>`
/// for the `k`-th offset `(oy, ox)` of the `(2r+1) x (2r+1)` window, enumerated
/// row-major from `(-r, -r)`. Indices falling off the grid are clamped to the
/// nearest edge cell.
pub fn window_correlation(a: &Tensor, b: &Tensor, radius: usize, stride: usize) -> Result<Tensor> {
    same_shape("window_correlation", a, b)?;
    let &[h, w, d] = a.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "window_correlation",
            reason: format!("expected h x w x d, got {:?}", a.shape()),
        });
    };
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "window_correlation",
            reason: "stride must be positive".into(),
        });
    }
    let offsets = window_offsets(radius, stride);
    let nk = offsets.len();
    let partner = move |y: usize, x: usize, (oy, ox): (isize, isize)| -> usize {
        let py = (y as isize + oy).clamp(0, h as isize - 1) as usize;
        let px = (x as isize + ox).clamp(0, w as isize - 1) as usize;
        py * w + px
    };
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(h * w * nk);
    for y in 0..h {
        for x in 0..w {
            let ai = &ad[(y * w + x) * d..(y * w + x + 1) * d];
            for &o in &offsets {
                let j = partner(y, x, o);
                let bj = &bd[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(p, q)| p * q).sum());
            }
        }
    }
    Ok(Tensor::from_op(
        "window_correlation",
        vec![h, w, nk],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, p, _| {
            let (ad, bd) = (p[0].data(), p[1].data());
            let mut ga = vec![0.0; h * w * d];
            let mut gb = vec![0.0; h * w * d];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    for (k, &o) in offsets.iter().enumerate() {
                        let gv = g[i * nk + k];
                        if gv == 0.0 {
                            continue;
                        }
                        let j = partner(y, x, o);
                        for c in 0..d {
                            ga[i * d + c] += gv * bd[j * d + c];
                            gb[j * d + c] += gv * ad[i * d + c];
                        }
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// `(dy, dx)` offsets of a dilated `(2r+1) x (2r+1)` window, row-major.
pub fn window_offsets(radius: usize, stride: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let s = stride as isize;
    (-r..=r)
        .flat_map(|oy| (-r..=r).map(move |ox| (oy * s, ox * s)))
        .collect()
}
