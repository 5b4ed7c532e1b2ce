//! Finite-difference checks of every differentiable op and of the full
//! training loss on a small synthetic pair.

use crate::data::{gen_pair, SynthConfig};
use crate::features::NORM_EPS;
use crate::geometry::{lattice_offsets, sampling_locations, AffineField};
use crate::loss::{interior_pixels, recurrence_loss, LossConfig};
use crate::matching::RecurrenceConfig;
use crate::tensor::{self, grad_check, GradCheckReport, Padding, Tensor, TensorError};
use crate::train::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;

type Check = (&'static str, GradCheckReport);

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of `eps`.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        })
        .collect()
}

fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::parameter(shape, data).expect("shape matches data")
}

/// Reduces an op output to a scalar with fixed random weights, so every
/// output element contributes a distinct amount.
fn weighted(out: Tensor, seed: u64) -> Result<Tensor, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(out.shape(), rand_vec(&mut rng, out.numel(), -1.0, 1.0))?;
    Ok(tensor::sum(&tensor::mul(&out, &w)?))
}

fn check(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&[Tensor]) -> Result<Tensor, TensorError>,
) -> Result<Check, TensorError> {
    let report = grad_check(|x| weighted(f(x)?, 99), &inputs, EPS, None)?;
    Ok((name, report))
}

/// One check per differentiable operation.
pub fn op_checks(seed: u64) -> Result<Vec<Check>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let a = param(&[3, 4], rand_vec(r, 12, -1.0, 1.0));
    let b = param(&[3, 4], rand_vec(r, 12, -1.0, 1.0));
    out.push(check("add", vec![a.clone(), b.clone()], |x| tensor::add(&x[0], &x[1]))?);
    out.push(check("sub", vec![a.clone(), b.clone()], |x| tensor::sub(&x[0], &x[1]))?);
    out.push(check("mul", vec![a.clone(), b.clone()], |x| tensor::mul(&x[0], &x[1]))?);
    out.push(check("scale", vec![a.clone()], |x| Ok(tensor::scale(&x[0], -2.5)))?);
    out.push(check("add_scalar", vec![a.clone()], |x| Ok(tensor::add_scalar(&x[0], 0.7)))?);
    let bias = param(&[4], rand_vec(r, 4, -1.0, 1.0));
    out.push(check("add_bias", vec![a.clone(), bias], |x| tensor::add_bias(&x[0], &x[1]))?);
    out.push(check("relu", vec![param(&[3, 4], off_zero(r, 12))], |x| Ok(tensor::relu(&x[0])))?);
    out.push(check("sum", vec![a.clone()], |x| Ok(tensor::sum(&x[0])))?);
    out.push(check("mean", vec![a.clone()], |x| Ok(tensor::mean(&x[0])))?);
    let m = param(&[4, 5], rand_vec(r, 20, -1.0, 1.0));
    out.push(check("matmul", vec![a.clone(), m], |x| tensor::matmul(&x[0], &x[1]))?);
    out.push(check("reshape", vec![a.clone()], |x| tensor::reshape(&x[0], &[2, 6]))?);
    let c = param(&[3, 2], rand_vec(r, 6, -1.0, 1.0));
    out.push(check("concat_last", vec![a.clone(), c], |x| tensor::concat_last(&x[0], &x[1]))?);
    let g = param(&[3, 2, 2], rand_vec(r, 12, -1.0, 1.0));
    out.push(check("upsample_nearest", vec![g], |x| tensor::upsample_nearest(&x[0], 5, 4))?);
    out.push(check("l2_normalize", vec![a.clone()], |x| Ok(tensor::l2_normalize(&x[0], NORM_EPS)))?);
    out.push(check("softmax", vec![a.clone()], |x| Ok(tensor::softmax(&x[0])))?);
    out.push(check("log_softmax", vec![a.clone()], |x| Ok(tensor::log_softmax(&x[0])))?);
    out.push(check("take", vec![a], |x| tensor::take(&x[0], &[0, 5, 5, 11]))?);

    let fa = param(&[5, 6, 3], rand_vec(r, 90, -1.0, 1.0));
    let fb = param(&[5, 6, 3], rand_vec(r, 90, -1.0, 1.0));
    out.push(check("window_correlation", vec![fa, fb], |x| {
        tensor::window_correlation(&x[0], &x[1], 1, 2)
    })?);

    let img = param(&[7, 6, 2], rand_vec(r, 84, -1.0, 1.0));
    let k = param(&[3, 3, 2, 3], rand_vec(r, 54, -0.5, 0.5));
    out.push(check("conv2d", vec![img.clone(), k.clone()], |x| tensor::conv2d(&x[0], &x[1], 1, 1))?);
    out.push(check("conv2d_stride2", vec![img, k], |x| tensor::conv2d(&x[0], &x[1], 2, 1))?);

    let grid = param(&[4, 5, 2], rand_vec(r, 40, -1.0, 1.0));
    // fractional locations, some outside the grid
    let locs: Vec<f64> = (0..12)
        .flat_map(|i| {
            let fx = i as f64 * 0.5 - 1.3 + r.gen_range(0.1..0.4);
            let fy = (i % 5) as f64 * 0.9 - 0.7 + r.gen_range(0.1..0.4);
            [fx, fy]
        })
        .collect();
    let locs = param(&[12, 2], locs);
    for (name, pad) in [("bilinear_sample_clamp", Padding::Clamp), ("bilinear_sample_zeros", Padding::Zeros)] {
        out.push(check(name, vec![grid.clone(), locs.clone()], move |x| {
            tensor::bilinear_sample(&x[0], &x[1], pad)
        })?);
    }

    let mut fp = AffineField::identity(3, 4).params().data().to_vec();
    fp.iter_mut().for_each(|v| *v += r.gen_range(-0.4..0.4));
    let offsets = lattice_offsets(1);
    out.push(check("sampling_locations", vec![param(&[3, 4, 6], fp)], move |x| {
        Ok(sampling_locations(&AffineField::from_params(x[0].clone())?, &offsets))
    })?);
    Ok(out)
}

/// Small pair and model for the full-loss check: 16x16 images give a 4x4
/// feature grid, so the loss window has radius 1 and the recurrence runs two
/// iterations with dilation 2 then 1.
pub fn full_loss_setup(seed: u64) -> Result<(Model, crate::data::SyntheticPair, LossConfig), TensorError> {
    let recurrence = RecurrenceConfig { radius: 1, dilation_schedule: vec![2, 1] };
    let model = Model::new(recurrence, seed);
    // a non-zero head keeps field offsets away from integer lattice points
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let values = model
        .params()
        .iter()
        .map(|(name, t)| {
            if name.starts_with("matcher.head") {
                rand_vec(&mut rng, t.numel(), -0.05, 0.05)
            } else {
                t.data().to_vec()
            }
        })
        .collect();
    let model = model.with_param_values(values)?;
    let pair = gen_pair(seed, &SynthConfig { size: 16, ..SynthConfig::default() })
        .map_err(|e| TensorError::InvalidArgument { op: "full_loss_setup", reason: e.to_string() })?;
    let loss = LossConfig { radius: 1, pixels: None, per_iteration: true, window_normalized: false };
    Ok((model, pair, loss))
}

/// Checks `probes_per_tensor` random entries of every model parameter
/// against central differences of the full recurrent loss.
pub fn full_loss_check(seed: u64, probes_per_tensor: usize) -> Result<GradCheckReport, TensorError> {
    let (model, pair, cfg) = full_loss_setup(seed)?;
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            (0..probes_per_tensor.min(t.numel())).map(|_| (i, rng.gen_range(0..t.numel()))).collect::<Vec<_>>()
        })
        .collect();
    let (h, w) = model.features.grid_size(pair.target.height(), pair.target.width());
    let pixels = interior_pixels(h, w, cfg.radius);
    grad_check(
        |x| {
            let m = model.with_param_tensors(x.to_vec())?;
            let rec = m.run(&pair.source, &pair.target)?;
            recurrence_loss(&rec, &pixels, &cfg)
        },
        &params,
        EPS,
        Some(&probes),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for (name, rep) in op_checks(1).unwrap() {
            assert!(rep.max_rel_error < 1e-6, "{name}: {rep:?}");
            assert!(rep.checked > 0, "{name}");
        }
    }

    #[test]
    fn full_loss_passes() {
        let rep = full_loss_check(7, 2).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        assert_eq!(rep.checked, 2 * 2 * 10);
    }
}
