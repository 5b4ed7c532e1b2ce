//! Locally-varying affine transformation fields.
//!
//! Every grid pixel `i` carries a 2x3 transform `[A_i | f_i]`, stored as the
//! six parameters `[a11, a12, a21, a22, u, v]`. The pixel maps to `i + f_i`;
//! a receptive-field offset `delta` around it maps to `i + f_i + A_i delta`.
//!
//! Coordinates: `x` grows rightward, `y` downward, origin at the centre of
//! the top-left pixel.

use crate::data::Image;
use crate::tensor::{self, bilinear_sample, Padding, Tensor, TensorError};

pub const FIELD_CHANNELS: usize = 6;

/// Fractional pixel location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone)]
pub struct AffineField {
    params: Tensor,
}

#[derive(Debug, Clone)]
pub struct FlowField {
    vectors: Tensor,
}

fn dims3(t: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize), TensorError> {
    match *t.shape() {
        [h, w, c] if c == channels => Ok((h, w)),
        _ => Err(TensorError::Shape {
            op,
            axes: "h x w x channels".into(),
            expected: vec![channels],
            found: t.shape().to_vec(),
        }),
    }
}

impl AffineField {
    pub fn from_params(params: Tensor) -> Result<Self, TensorError> {
        dims3(&params, FIELD_CHANNELS, "AffineField")?;
        Ok(Self { params })
    }

    /// `A = I`, `f = 0` at every pixel.
    pub fn identity(h: usize, w: usize) -> Self {
        let data = (0..h * w).flat_map(|_| [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).collect();
        Self::from_params(Tensor::new(&[h, w, FIELD_CHANNELS], data).expect("positive dims"))
            .expect("six channels")
    }

    /// All-zero parameters; the neutral element of [`AffineField::add_residual`].
    pub fn zeros(h: usize, w: usize) -> Self {
        Self::from_params(Tensor::zeros(&[h, w, FIELD_CHANNELS])).expect("six channels")
    }

    /// Constant field with the given linear part and translation.
    pub fn uniform(h: usize, w: usize, a: [[f64; 2]; 2], f: [f64; 2]) -> Self {
        let p = [a[0][0], a[0][1], a[1][0], a[1][1], f[0], f[1]];
        let data = (0..h * w).flat_map(|_| p).collect();
        Self::from_params(Tensor::new(&[h, w, FIELD_CHANNELS], data).expect("positive dims"))
            .expect("six channels")
    }

    pub fn height(&self) -> usize {
        self.params.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.params.shape()[1]
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    /// `[a11, a12, a21, a22, u, v]` at integer pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> [f64; 6] {
        let o = (y * self.width() + x) * FIELD_CHANNELS;
        self.params.data()[o..o + FIELD_CHANNELS].try_into().expect("six")
    }

    /// Element-wise sum of parameters, `T^k = T^{k-1} + residual`.
    pub fn add_residual(&self, residual: &AffineField) -> Result<AffineField, TensorError> {
        Ok(Self { params: tensor::add(&self.params, &residual.params)? })
    }

    /// The translation part `f_i` as a flow field.
    pub fn flow(&self) -> FlowField {
        let data = self.params.data().chunks_exact(FIELD_CHANNELS).flat_map(|p| [p[4], p[5]]).collect();
        FlowField::new(self.height(), self.width(), data).expect("dims from field")
    }

    /// `i + f_i + A_i * delta` for grid pixel `i`.
    pub fn transform_offset(&self, i: (usize, usize), delta: [f64; 2]) -> PixelCoord {
        let [a11, a12, a21, a22, u, v] = self.at(i.0, i.1);
        PixelCoord {
            x: i.0 as f64 + u + a11 * delta[0] + a12 * delta[1],
            y: i.1 as f64 + v + a21 * delta[0] + a22 * delta[1],
        }
    }

    /// Constant copy cut from any gradient graph.
    pub fn detach(&self) -> AffineField {
        Self { params: self.params.detach() }
    }

    /// Resamples the field onto a `target_h x target_w` grid.
    ///
    /// Output pixel `X` reads the source grid at `X * w / target_w` (bilinear,
    /// edge-clamped); translations are multiplied by the grid-size ratio so
    /// they stay in output-pixel units. The linear part is unitless.
    pub fn upsample(&self, target_h: usize, target_w: usize) -> AffineField {
        let (h, w) = (self.height(), self.width());
        let sx = w as f64 / target_w as f64;
        let sy = h as f64 / target_h as f64;
        let locs: Vec<f64> = (0..target_h)
            .flat_map(|y| (0..target_w).flat_map(move |x| [x as f64 * sx, y as f64 * sy]))
            .collect();
        let locs = Tensor::new(&[target_h * target_w, 2], locs).expect("positive dims");
        let sampled = bilinear_sample(&self.params.detach(), &locs, Padding::Clamp)
            .expect("field is h x w x 6");
        let mut data = sampled.data().to_vec();
        for p in data.chunks_exact_mut(FIELD_CHANNELS) {
            p[4] /= sx;
            p[5] /= sy;
        }
        Self::from_params(Tensor::new(&[target_h, target_w, FIELD_CHANNELS], data).expect("dims"))
            .expect("six channels")
    }
}

/// Offsets `delta = (dx, dy)` of a `(2r+1) x (2r+1)` lattice, row-major in
/// `(dy, dx)`; matches the `(ky, kx)` column order of a convolution kernel.
pub fn lattice_offsets(radius: usize) -> Vec<[f64; 2]> {
    let r = radius as i64;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| [dx as f64, dy as f64]))
        .collect()
}

/// Differentiable `i + f_i + A_i * delta` for every pixel and every offset.
///
/// Returns an `(h * w * n) x 2` tensor of `(x, y)` locations, pixel-major.
pub fn sampling_locations(field: &AffineField, offsets: &[[f64; 2]]) -> Tensor {
    let (h, w) = (field.height(), field.width());
    let n = offsets.len();
    let pd = field.params.data();
    let mut locs = Vec::with_capacity(h * w * n * 2);
    for y in 0..h {
        for x in 0..w {
            let p = &pd[(y * w + x) * FIELD_CHANNELS..(y * w + x + 1) * FIELD_CHANNELS];
            for d in offsets {
                locs.push(x as f64 + p[4] + p[0] * d[0] + p[1] * d[1]);
                locs.push(y as f64 + p[5] + p[2] * d[0] + p[3] * d[1]);
            }
        }
    }
    let offsets = offsets.to_vec();
    Tensor::from_op(
        "sampling_locations",
        vec![h * w * n, 2],
        locs,
        vec![field.params.clone()],
        Box::new(move |g, _, _| {
            let mut gp = vec![0.0; h * w * FIELD_CHANNELS];
            for (pix, gp) in gp.chunks_exact_mut(FIELD_CHANNELS).enumerate() {
                for (k, d) in offsets.iter().enumerate() {
                    let gx = g[(pix * n + k) * 2];
                    let gy = g[(pix * n + k) * 2 + 1];
                    gp[0] += gx * d[0];
                    gp[1] += gx * d[1];
                    gp[2] += gy * d[0];
                    gp[3] += gy * d[1];
                    gp[4] += gx;
                    gp[5] += gy;
                }
            }
            vec![Some(gp)]
        }),
    )
}

impl FlowField {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Ok(Self { vectors: Tensor::new(&[h, w, 2], data)? })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { vectors: Tensor::zeros(&[h, w, 2]) }
    }

    pub fn height(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn data(&self) -> &[f64] {
        self.vectors.data()
    }

    /// `(u, v)` at integer pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        let o = (y * self.width() + x) * 2;
        [self.vectors.data()[o], self.vectors.data()[o + 1]]
    }

    /// Bilinear, edge-clamped flow at a fractional location.
    pub fn sample(&self, p: PixelCoord) -> [f64; 2] {
        let loc = Tensor::new(&[1, 2], vec![p.x, p.y]).expect("1 x 2");
        let s = bilinear_sample(&self.vectors, &loc, Padding::Clamp).expect("h x w x 2");
        [s.data()[0], s.data()[1]]
    }
}

/// Inverse warp: output pixel `i` takes the bilinearly sampled (edge-clamped)
/// source value at `i + f_i`, so the result lines up with the grid on which
/// the flow is defined.
pub fn warp_image(source: &Image, flow: &FlowField) -> Result<Image, TensorError> {
    let (h, w) = (source.height(), source.width());
    if flow.height() != h || flow.width() != w {
        return Err(TensorError::Shape {
            op: "warp_image",
            axes: "flow grid vs image grid".into(),
            expected: vec![h, w],
            found: vec![flow.height(), flow.width()],
        });
    }
    let fd = flow.data();
    let locs: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .flat_map(|(x, y)| {
            let o = (y * w + x) * 2;
            [x as f64 + fd[o], y as f64 + fd[o + 1]]
        })
        .collect();
    let locs = Tensor::new(&[h * w, 2], locs)?;
    let s = bilinear_sample(&source.to_tensor(), &locs, Padding::Clamp)?;
    Ok(Image::new(h, w, s.data().to_vec()).expect("dims preserved"))
}
