//! Shared-weight convolutional descriptors and geometry-aligned extraction.
//!
//! The backbone is split in two stages. [`FeatureNet::penultimate`] runs every
//! layer except the last over the whole image. The last layer is a 3x3
//! convolution; [`FeatureNet::finalize`] applies it as usual, while
//! [`FeatureNet::transformed`] first gathers the 3x3 receptive field of every
//! pixel `i` at `i + f_i + A_i delta` (bilinear, zero outside the grid) and
//! only then contracts it with the same kernel. With the identity field the
//! gather reproduces the convolution's own im2col matrix exactly.

use crate::data::Image;
use crate::geometry::{lattice_offsets, sampling_locations, AffineField};
use crate::tensor::{self, Padding, Tensor, TensorError};
use rand::Rng;

pub const NORM_EPS: f64 = 1e-12;

/// He-uniform bound multiplier: kernels are drawn from `U(-b, b)` with
/// `b = INIT_GAIN / sqrt(fan_in)`.
pub const INIT_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

/// `h x w x d` map of unit-norm descriptors.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self, TensorError> {
        if t.shape().len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "FeatureMap",
                reason: format!("expected h x w x d, got {:?}", t.shape()),
            });
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn descriptor(&self, x: usize, y: usize) -> &[f64] {
        let d = self.depth();
        let o = (y * self.width() + x) * d;
        &self.0.data()[o..o + d]
    }
}

/// One 3x3 convolution with bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvLayer {
    pub fn random(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = 9 * cin;
        let b = INIT_GAIN / (fan_in as f64).sqrt();
        let k = (0..fan_in * cout).map(|_| rng.gen_range(-b..b)).collect();
        Self {
            kernel: Tensor::parameter(&[3, 3, cin, cout], k).expect("dims"),
            bias: Tensor::parameter(&[cout], vec![0.0; cout]).expect("dims"),
            stride,
        }
    }

    pub fn zeroed(cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            kernel: Tensor::parameter(&[3, 3, cin, cout], vec![0.0; 9 * cin * cout]).expect("dims"),
            bias: Tensor::parameter(&[cout], vec![0.0; cout]).expect("dims"),
            stride,
        }
    }

    pub fn cin(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn cout(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        tensor::add_bias(&tensor::conv2d(x, &self.kernel, self.stride, 1)?, &self.bias)
    }

    pub fn forward_relu(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        Ok(tensor::relu(&self.forward(x)?))
    }
}

/// Backbone parameters shared between source and target.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub layers: Vec<ConvLayer>,
}

/// `(c_in, c_out, stride)` per layer; the last entry is the final
/// (transformable) layer.
pub const DEFAULT_BACKBONE: [(usize, usize, usize); 4] =
    [(3, 16, 1), (16, 32, 2), (32, 32, 2), (32, 32, 1)];

impl FeatureNet {
    pub fn new(arch: &[(usize, usize, usize)], rng: &mut impl Rng) -> Self {
        assert!(arch.len() >= 2, "need at least one stage before the final layer");
        let last = arch.last().expect("non-empty");
        assert_eq!(last.2, 1, "final layer must have stride 1");
        Self {
            layers: arch.iter().map(|&(i, o, s)| ConvLayer::random(i, o, s, rng)).collect(),
        }
    }

    pub fn default_arch(rng: &mut impl Rng) -> Self {
        Self::new(&DEFAULT_BACKBONE, rng)
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn depth(&self) -> usize {
        self.layers.last().expect("layers").cout()
    }

    /// Feature-grid size produced for an image of size `(h, w)`.
    pub fn grid_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.layers.iter().fold((h, w), |(h, w), l| ((h - 1) / l.stride + 1, (w - 1) / l.stride + 1))
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("features.{i}.kernel"), l.kernel.clone()),
                    (format!("features.{i}.bias"), l.bias.clone()),
                ]
            })
            .collect()
    }

    /// Image tensor fed to the first layer: channel values shifted to zero mean.
    pub fn input(image: &Image) -> Tensor {
        tensor::add_scalar(&image.to_tensor(), -0.5)
    }

    /// Activations entering the final layer.
    pub fn penultimate(&self, image: &Image) -> Result<Tensor, TensorError> {
        let (_, body) = self.layers.split_last().expect("layers");
        let mut x = Self::input(image);
        for l in body {
            x = l.forward_relu(&x)?;
        }
        Ok(x)
    }

    /// Final convolution plus L2 normalization.
    pub fn finalize(&self, penultimate: &Tensor) -> Result<FeatureMap, TensorError> {
        let last = self.layers.last().expect("layers");
        FeatureMap::new(tensor::l2_normalize(&last.forward(penultimate)?, NORM_EPS))
    }

    pub fn extract(&self, image: &Image) -> Result<FeatureMap, TensorError> {
        self.finalize(&self.penultimate(image)?)
    }

    /// `D(T_i)`: final layer applied to penultimate activations gathered at
    /// `i + f_i + A_i delta` for the kernel's 3x3 offsets.
    pub fn transformed(
        &self,
        penultimate: &Tensor,
        field: &AffineField,
    ) -> Result<FeatureMap, TensorError> {
        let &[h, w, c] = penultimate.shape() else {
            return Err(TensorError::InvalidArgument {
                op: "extract_transformed",
                reason: format!("penultimate must be h x w x c, got {:?}", penultimate.shape()),
            });
        };
        if (field.height(), field.width()) != (h, w) {
            return Err(TensorError::Shape {
                op: "extract_transformed",
                axes: "field grid vs penultimate grid".into(),
                expected: vec![h, w],
                found: vec![field.height(), field.width()],
            });
        }
        let last = self.layers.last().expect("layers");
        let offsets = lattice_offsets(1);
        let locs = sampling_locations(field, &offsets);
        let gathered = tensor::bilinear_sample(penultimate, &locs, Padding::Zeros)?;
        let cols = tensor::reshape(&gathered, &[h * w, offsets.len() * c])?;
        let kmat = tensor::reshape(&last.kernel, &[offsets.len() * c, last.cout()])?;
        let out = tensor::reshape(&tensor::matmul(&cols, &kmat)?, &[h, w, last.cout()])?;
        let out = tensor::add_bias(&out, &last.bias)?;
        FeatureMap::new(tensor::l2_normalize(&out, NORM_EPS))
    }

    pub fn extract_transformed(
        &self,
        image: &Image,
        field: &AffineField,
    ) -> Result<FeatureMap, TensorError> {
        self.transformed(&self.penultimate(image)?, field)
    }
}
