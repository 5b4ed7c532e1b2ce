use super::{Result, Tensor, TensorError};

/// How samples outside the grid are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Replicate the nearest border cell.
    #[default]
    Clamp,
    /// Treat every cell outside the grid as zero.
    Zeros,
}

#[derive(Clone, Copy)]
struct Corner {
    idx: Option<usize>,
    weight: f64,
}

/// The four bilinear corners of a fractional location, in the order
/// (y0,x0), (y0,x1), (y1,x0), (y1,x1), plus the fractional parts.
fn corners(h: usize, w: usize, x: f64, y: f64, padding: Padding) -> ([Corner; 4], f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    // saturating: infinite locations must yield NaN weights, not overflow
    let (x0, y0) = (x0 as i64, y0 as i64);
    let (x1, y1) = (x0.saturating_add(1), y0.saturating_add(1));
    let cell = |cy: i64, cx: i64| -> Option<usize> {
        match padding {
            Padding::Clamp => {
                let cy = cy.clamp(0, h as i64 - 1) as usize;
                let cx = cx.clamp(0, w as i64 - 1) as usize;
                Some(cy * w + cx)
            }
            Padding::Zeros => {
                (cy >= 0 && cx >= 0 && cy < h as i64 && cx < w as i64)
                    .then(|| cy as usize * w + cx as usize)
            }
        }
    };
    (
        [
            Corner { idx: cell(y0, x0), weight: (1.0 - fx) * (1.0 - fy) },
            Corner { idx: cell(y0, x1), weight: fx * (1.0 - fy) },
            Corner { idx: cell(y1, x0), weight: (1.0 - fx) * fy },
            Corner { idx: cell(y1, x1), weight: fx * fy },
        ],
        fx,
        fy,
    )
}

/// Bilinearly samples an `h x w x d` grid at `m` fractional `(x, y)` locations.
///
/// Differentiable with respect to both the grid values and the locations.
/// Integer locations reproduce grid values exactly.
pub fn bilinear_sample(grid: &Tensor, locations: &Tensor, padding: Padding) -> Result<Tensor> {
    let &[h, w, d] = grid.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_sample",
            reason: format!("grid must be h x w x d, got {:?}", grid.shape()),
        });
    };
    let &[m, two] = locations.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_sample",
            reason: format!("locations must be m x 2, got {:?}", locations.shape()),
        });
    };
    if two != 2 {
        return Err(TensorError::Shape {
            op: "bilinear_sample",
            axes: "locations axis 1".into(),
            expected: vec![2],
            found: vec![two],
        });
    }
    let gd = grid.data();
    let ld = locations.data();
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let (cs, _, _) = corners(h, w, ld[2 * i], ld[2 * i + 1], padding);
        let row = &mut out[i * d..(i + 1) * d];
        for c in cs {
            if let Some(idx) = c.idx {
                let src = &gd[idx * d..(idx + 1) * d];
                row.iter_mut().zip(src).for_each(|(o, v)| *o += c.weight * v);
            }
        }
    }
    Ok(Tensor::from_op(
        "bilinear_sample",
        vec![m, d],
        out,
        vec![grid.clone(), locations.clone()],
        Box::new(move |g, p, _| {
            let gd = p[0].data();
            let ld = p[1].data();
            let want_grid = p[0].requires_grad();
            let want_loc = p[1].requires_grad();
            let mut ggrid = want_grid.then(|| vec![0.0; h * w * d]);
            let mut gloc = want_loc.then(|| vec![0.0; m * 2]);
            let zero = vec![0.0; d];
            for i in 0..m {
                let gi = &g[i * d..(i + 1) * d];
                let (cs, fx, fy) = corners(h, w, ld[2 * i], ld[2 * i + 1], padding);
                if let Some(gg) = ggrid.as_mut() {
                    for c in cs {
                        if let Some(idx) = c.idx {
                            gg[idx * d..(idx + 1) * d]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(a, b)| *a += c.weight * b);
                        }
                    }
                }
                if let Some(gl) = gloc.as_mut() {
                    let v = |c: Corner| c.idx.map_or(&zero[..], |idx| &gd[idx * d..(idx + 1) * d]);
                    let (v00, v01, v10, v11) = (v(cs[0]), v(cs[1]), v(cs[2]), v(cs[3]));
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for c in 0..d {
                        dx += gi[c] * ((1.0 - fy) * (v01[c] - v00[c]) + fy * (v11[c] - v10[c]));
                        dy += gi[c] * ((1.0 - fx) * (v10[c] - v00[c]) + fx * (v11[c] - v01[c]));
                    }
                    gl[2 * i] = dx;
                    gl[2 * i + 1] = dy;
                }
            }
            vec![ggrid, gloc]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, mul, sum};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_grid() -> Tensor {
        // 4 x 5 x 2 grid with value (10*y + x, -x)
        let mut d = Vec::new();
        for y in 0..4 {
            for x in 0..5 {
                d.push(10.0 * y as f64 + x as f64);
                d.push(-(x as f64));
            }
        }
        Tensor::new(&[4, 5, 2], d).unwrap()
    }

    #[test]
    fn lattice_point_is_exact() {
        let g = ramp_grid();
        let loc = Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap();
        let s = bilinear_sample(&g, &loc, Padding::Clamp).unwrap();
        assert_eq!(s.data(), &[32.0, -2.0]);
    }

    #[test]
    fn non_finite_locations_give_nan() {
        let g = ramp_grid();
        for v in [f64::INFINITY, f64::NEG_INFINITY, f64::NAN] {
            let loc = Tensor::new(&[1, 2], vec![v, 1.0]).unwrap();
            let s = bilinear_sample(&g, &loc, Padding::Clamp).unwrap();
            assert!(s.data().iter().all(|x| x.is_nan()));
        }
    }

    #[test]
    fn midpoint_averages() {
        let g = ramp_grid();
        let loc = Tensor::new(&[1, 2], vec![0.5, 0.0]).unwrap();
        let s = bilinear_sample(&g, &loc, Padding::Clamp).unwrap();
        assert_eq!(s.data(), &[0.5, -0.5]);
    }

    #[test]
    fn out_of_bounds_clamps_or_zeros() {
        let g = ramp_grid();
        let loc = Tensor::new(&[2, 2], vec![-3.0, 1.0, 10.0, 10.0]).unwrap();
        let c = bilinear_sample(&g, &loc, Padding::Clamp).unwrap();
        assert_eq!(c.data(), &[10.0, 0.0, 34.0, -4.0]);
        let z = bilinear_sample(&g, &loc, Padding::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
    }

    #[test]
    fn location_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Tensor::parameter(
            &[5, 6, 3],
            (0..90).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // keep away from integer coordinates, where bilinear is not differentiable
        let locs: Vec<f64> = (0..16)
            .map(|_| rng.gen_range(0..5) as f64 + rng.gen_range(0.1..0.9))
            .collect();
        let locs = Tensor::parameter(&[8, 2], locs).unwrap();
        let w = Tensor::new(&[8, 3], (0..24).map(|i| (i as f64).cos()).collect()).unwrap();
        for padding in [Padding::Clamp, Padding::Zeros] {
            let rep = grad_check(
                |t| Ok(sum(&mul(&bilinear_sample(&t[0], &t[1], padding)?, &w)?)),
                &[grid.clone(), locs.clone()],
                1e-6,
                None,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-5, "{padding:?}: {rep:?}");
        }
    }
}
