//! Recurrent geometric matching.
//!
//! Each iteration correlates source descriptors with target descriptors that
//! were re-extracted under the current field, feeds the window-normalized
//! correlation volume to an encoder-decoder, and adds the predicted residual
//! to the field. The field lives on the source feature grid and maps into the
//! target: `D^s_i` is compared against `D^t(T_i)`.

use crate::data::Image;
use crate::features::{ConvLayer, FeatureMap, FeatureNet, NORM_EPS};
use crate::geometry::{AffineField, FIELD_CHANNELS};
use crate::tensor::{self, Tensor, TensorError};
use rand::Rng;

/// Dilated `(2r+1) x (2r+1)` search window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub radius: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(radius: usize, stride: usize) -> Result<Self, TensorError> {
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "WindowSpec",
                reason: "dilation stride must be >= 1".into(),
            });
        }
        Ok(Self { radius, stride })
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Channel index of the `(0, 0)` offset.
    pub fn center(&self) -> usize {
        self.len() / 2
    }
}

/// `h x w x |N|` window-normalized cosine similarities.
#[derive(Debug, Clone)]
pub struct CorrelationVolume {
    values: Tensor,
    window: WindowSpec,
}

impl CorrelationVolume {
    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let (w, n) = (self.values.shape()[1], self.window.len());
        let o = (y * w + x) * n;
        &self.values.data()[o..o + n]
    }
}

fn same_grid(a: &FeatureMap, b: &FeatureMap, op: &'static str) -> Result<(), TensorError> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(TensorError::Shape {
            op,
            axes: "source vs transformed target features".into(),
            expected: a.tensor().shape().to_vec(),
            found: b.tensor().shape().to_vec(),
        });
    }
    Ok(())
}

/// Raw similarities `<D^s_i, D^t(T_{i + s o})>` over the window, then each
/// pixel's window vector divided by `sqrt(sum of squares + eps)`.
pub fn correlation(
    source: &FeatureMap,
    target_transformed: &FeatureMap,
    window: WindowSpec,
) -> Result<CorrelationVolume, TensorError> {
    same_grid(source, target_transformed, "correlation")?;
    let raw = tensor::window_correlation(
        source.tensor(),
        target_transformed.tensor(),
        window.radius,
        window.stride,
    )?;
    Ok(CorrelationVolume { values: tensor::l2_normalize(&raw, NORM_EPS), window })
}

/// Encoder-decoder predicting a per-pixel affine residual from a correlation
/// volume.
///
/// Two stride-2 stages down (`|N| -> 64 -> 128 -> 128`), two nearest-neighbour
/// stages back up with skip concatenation (`-> 64 -> 32`), then a zero
/// initialized 3x3 head to six channels. Any spatial size is accepted.
#[derive(Debug, Clone)]
pub struct MatcherNet {
    pub enc0: ConvLayer,
    pub enc1: ConvLayer,
    pub enc2: ConvLayer,
    pub dec1: ConvLayer,
    pub dec0: ConvLayer,
    pub head: ConvLayer,
}

impl MatcherNet {
    pub fn new(window: usize, rng: &mut impl Rng) -> Self {
        Self {
            enc0: ConvLayer::random(window, 64, 1, rng),
            enc1: ConvLayer::random(64, 128, 2, rng),
            enc2: ConvLayer::random(128, 128, 2, rng),
            dec1: ConvLayer::random(128 + 128, 64, 1, rng),
            dec0: ConvLayer::random(64 + 64, 32, 1, rng),
            head: ConvLayer::zeroed(32, FIELD_CHANNELS, 1),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.enc0.cin()
    }

    pub fn layers(&self) -> [(&'static str, &ConvLayer); 6] {
        [
            ("enc0", &self.enc0),
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("dec1", &self.dec1),
            ("dec0", &self.dec0),
            ("head", &self.head),
        ]
    }

    pub fn layers_mut(&mut self) -> [(&'static str, &mut ConvLayer); 6] {
        [
            ("enc0", &mut self.enc0),
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("dec1", &mut self.dec1),
            ("dec0", &mut self.dec0),
            ("head", &mut self.head),
        ]
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(n, l)| {
                [
                    (format!("matcher.{n}.kernel"), l.kernel.clone()),
                    (format!("matcher.{n}.bias"), l.bias.clone()),
                ]
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let c = x.shape().get(2).copied().unwrap_or(0);
        if x.shape().len() != 3 || c != self.input_channels() {
            return Err(TensorError::Shape {
                op: "estimate_residual",
                axes: "volume axis 2 (window size)".into(),
                expected: vec![self.input_channels()],
                found: vec![c],
            });
        }
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let e0 = self.enc0.forward_relu(x)?;
        let e1 = self.enc1.forward_relu(&e0)?;
        let e2 = self.enc2.forward_relu(&e1)?;
        let (h1, w1) = (e1.shape()[0], e1.shape()[1]);
        let u1 = tensor::upsample_nearest(&e2, h1, w1)?;
        let d1 = self.dec1.forward_relu(&tensor::concat_last(&u1, &e1)?)?;
        let u0 = tensor::upsample_nearest(&d1, h, w)?;
        let d0 = self.dec0.forward_relu(&tensor::concat_last(&u0, &e0)?)?;
        self.head.forward(&d0)
    }
}

/// Raw network output as a residual field.
pub fn estimate_residual(
    volume: &CorrelationVolume,
    matcher: &MatcherNet,
) -> Result<AffineField, TensorError> {
    AffineField::from_params(matcher.forward(volume.tensor())?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecurrenceConfig {
    pub radius: usize,
    /// Dilation stride per iteration; its length is the iteration count.
    pub dilation_schedule: Vec<usize>,
}

impl Default for RecurrenceConfig {
    fn default() -> Self {
        Self { radius: 2, dilation_schedule: vec![4, 2, 1, 1] }
    }
}

impl RecurrenceConfig {
    /// `[4, 2, 1, 1, ...]` truncated or padded with 1 to `k_max` entries.
    pub fn with_iterations(radius: usize, k_max: usize) -> Self {
        let dilation_schedule = (0..k_max).map(|k| [4, 2].get(k).copied().unwrap_or(1)).collect();
        Self { radius, dilation_schedule }
    }

    pub fn k_max(&self) -> usize {
        self.dilation_schedule.len()
    }

    pub fn window_len(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |reason: String| Err(TensorError::InvalidArgument { op: "RecurrenceConfig", reason });
        if self.dilation_schedule.is_empty() {
            return bad("at least one iteration is required".into());
        }
        if self.dilation_schedule.contains(&0) {
            return bad("dilation strides must be >= 1".into());
        }
        if self.dilation_schedule.windows(2).any(|p| p[1] > p[0]) {
            return bad(format!("schedule {:?} must be non-increasing", self.dilation_schedule));
        }
        Ok(())
    }
}

/// Everything computed by one recurrent pass.
#[derive(Debug, Clone)]
pub struct Recurrence {
    pub source_features: FeatureMap,
    pub target_penultimate: Tensor,
    /// `T^0 ..= T^K`.
    pub fields: Vec<AffineField>,
    /// `D^t(T^0) ..= D^t(T^K)`.
    pub target_features: Vec<FeatureMap>,
    /// One volume per iteration.
    pub volumes: Vec<CorrelationVolume>,
}

impl Recurrence {
    pub fn final_field(&self) -> &AffineField {
        self.fields.last().expect("T^0 always present")
    }

    /// `T^1 ..= T^K`.
    pub fn trajectory(&self) -> &[AffineField] {
        &self.fields[1..]
    }
}

/// Multiplies the translation channels by the current dilation stride, so the
/// shared network predicts translations in window-offset units.
fn scale_translation(residual: &AffineField, stride: usize) -> Result<AffineField, TensorError> {
    if stride == 1 {
        return Ok(residual.clone());
    }
    let s = stride as f64;
    let n = residual.height() * residual.width();
    let factors = (0..n).flat_map(|_| [1.0, 1.0, 1.0, 1.0, s, s]).collect();
    let factors = Tensor::new(residual.params().shape(), factors)?;
    AffineField::from_params(tensor::mul(residual.params(), &factors)?)
}

/// `T = T^0 + sum_k F(C(D^s, D^t(T^{k-1})))` with `T^0` the identity.
///
/// The returned field is on the source feature grid; `source(i)` is matched
/// to `target(i + f_i)`.
pub fn run_recurrence(
    source: &Image,
    target: &Image,
    features: &FeatureNet,
    matcher: &MatcherNet,
    cfg: &RecurrenceConfig,
) -> Result<Recurrence, TensorError> {
    cfg.validate()?;
    if (source.height(), source.width()) != (target.height(), target.width()) {
        return Err(TensorError::Shape {
            op: "run_recurrence",
            axes: "source vs target image".into(),
            expected: vec![source.height(), source.width()],
            found: vec![target.height(), target.width()],
        });
    }
    if matcher.input_channels() != cfg.window_len() {
        return Err(TensorError::Shape {
            op: "run_recurrence",
            axes: "matcher input channels vs window size".into(),
            expected: vec![cfg.window_len()],
            found: vec![matcher.input_channels()],
        });
    }
    let source_features = features.extract(source)?;
    let target_penultimate = features.penultimate(target)?;
    let (h, w) = (target_penultimate.shape()[0], target_penultimate.shape()[1]);

    let mut fields = vec![AffineField::identity(h, w)];
    let mut target_features = Vec::with_capacity(cfg.k_max() + 1);
    let mut volumes = Vec::with_capacity(cfg.k_max());
    for &stride in &cfg.dilation_schedule {
        let current = fields.last().expect("non-empty");
        let moved = features.transformed(&target_penultimate, current)?;
        let volume = correlation(&source_features, &moved, WindowSpec::new(cfg.radius, stride)?)?;
        let residual = scale_translation(&estimate_residual(&volume, matcher)?, stride)?;
        let next = current.add_residual(&residual)?;
        target_features.push(moved);
        volumes.push(volume);
        fields.push(next);
    }
    target_features.push(features.transformed(&target_penultimate, fields.last().expect("K >= 1"))?);
    Ok(Recurrence { source_features, target_penultimate, fields, target_features, volumes })
}
