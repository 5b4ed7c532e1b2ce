//! Weakly supervised classification loss over transformation candidates.
//!
//! For every sampled source pixel the candidates are the transformed target
//! descriptors in a stride-1 window around it. Only the window center is a
//! positive, so the loss is the negative log softmax probability of the
//! center.

use crate::features::{FeatureMap, NORM_EPS};
use crate::matching::Recurrence;
use crate::tensor::{self, Tensor, TensorError};
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossConfig {
    pub radius: usize,
    /// Pixels sampled per pair; `None` uses every interior pixel.
    pub pixels: Option<usize>,
    /// Average the loss over `T^1..T^K` instead of using only the final field.
    pub per_iteration: bool,
    /// Divide candidate similarities by their window norm before the softmax.
    pub window_normalized: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { radius: 2, pixels: Some(256), per_iteration: false, window_normalized: false }
    }
}

impl LossConfig {
    pub fn window_len(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    pub fn center(&self) -> usize {
        self.window_len() / 2
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.pixels == Some(0) {
            return Err(TensorError::InvalidArgument {
                op: "LossConfig",
                reason: "pixel sample count must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Flat indices of pixels whose whole window lies on the grid.
pub fn interior_pixels(h: usize, w: usize, radius: usize) -> Vec<usize> {
    let (ys, xs) = (radius..h.saturating_sub(radius), radius..w.saturating_sub(radius));
    ys.flat_map(|y| xs.clone().map(move |x| y * w + x)).collect()
}

/// Uniform sample without replacement from the interior, in ascending order.
pub fn sample_pixels(h: usize, w: usize, cfg: &LossConfig, rng: &mut impl Rng) -> Vec<usize> {
    let all = interior_pixels(h, w, cfg.radius);
    match cfg.pixels {
        Some(n) if n < all.len() => {
            let mut picked: Vec<usize> =
                rand::seq::index::sample(rng, all.len(), n).into_iter().map(|k| all[k]).collect();
            picked.sort_unstable();
            picked
        }
        _ => all,
    }
}

/// `h x w x |M|` candidate similarities between `D^s_i` and `D^t(T)_j`.
pub fn candidate_logits(
    source: &FeatureMap,
    target_transformed: &FeatureMap,
    cfg: &LossConfig,
) -> Result<Tensor, TensorError> {
    if source.tensor().shape() != target_transformed.tensor().shape() {
        return Err(TensorError::Shape {
            op: "classification_loss",
            axes: "source vs transformed target features".into(),
            expected: source.tensor().shape().to_vec(),
            found: target_transformed.tensor().shape().to_vec(),
        });
    }
    let raw = tensor::window_correlation(source.tensor(), target_transformed.tensor(), cfg.radius, 1)?;
    Ok(if cfg.window_normalized { tensor::l2_normalize(&raw, NORM_EPS) } else { raw })
}

/// Softmax over the window of pixel `(x, y)`.
pub fn match_probability(
    source: &FeatureMap,
    target_transformed: &FeatureMap,
    x: usize,
    y: usize,
    cfg: &LossConfig,
) -> Result<Vec<f64>, TensorError> {
    let logits = candidate_logits(source, target_transformed, cfg)?;
    let (h, w, n) = (logits.shape()[0], logits.shape()[1], cfg.window_len());
    if x >= w || y >= h {
        return Err(TensorError::InvalidArgument {
            op: "match_probability",
            reason: format!("pixel ({x}, {y}) outside {h}x{w} grid"),
        });
    }
    let o = (y * w + x) * n;
    let row = Tensor::new(&[n], logits.data()[o..o + n].to_vec())?;
    Ok(tensor::softmax(&row).data().to_vec())
}

/// `-mean_i log softmax(logits_i)[center]` over the given flat pixel indices.
pub fn center_nll(logits: &Tensor, pixels: &[usize], center: usize) -> Result<Tensor, TensorError> {
    if pixels.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "classification_loss",
            reason: "empty pixel set".into(),
        });
    }
    let n = *logits.shape().last().unwrap_or(&0);
    let logp = tensor::log_softmax(logits);
    let picked = tensor::take(&logp, &pixels.iter().map(|p| p * n + center).collect::<Vec<_>>())?;
    Ok(tensor::scale(&tensor::mean(&picked), -1.0))
}

pub fn classification_loss(
    source: &FeatureMap,
    target_transformed: &FeatureMap,
    pixels: &[usize],
    cfg: &LossConfig,
) -> Result<Tensor, TensorError> {
    center_nll(&candidate_logits(source, target_transformed, cfg)?, pixels, cfg.center())
}

/// Loss of a recurrent pass: the final field, or the mean over all iterations
/// when `per_iteration` is set.
pub fn recurrence_loss(
    rec: &Recurrence,
    pixels: &[usize],
    cfg: &LossConfig,
) -> Result<Tensor, TensorError> {
    let finals = &rec.target_features[1..];
    let used = if cfg.per_iteration { finals } else { &finals[finals.len() - 1..] };
    let mut total: Option<Tensor> = None;
    for dt in used {
        let l = classification_loss(&rec.source_features, dt, pixels, cfg)?;
        total = Some(match total {
            Some(t) => tensor::add(&t, &l)?,
            None => l,
        });
    }
    let total = total.expect("at least one iteration");
    Ok(tensor::scale(&total, 1.0 / used.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_pair, SynthConfig};
    use crate::features::FeatureNet;
    use crate::geometry::AffineField;
    use crate::matching::{run_recurrence, MatcherNet, RecurrenceConfig};
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, d: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> FeatureMap {
        let data = (0..h * w).flat_map(|i| f(i % w, i / w)).collect::<Vec<_>>();
        assert_eq!(data.len(), h * w * d);
        FeatureMap::new(Tensor::new(&[h, w, d], data).unwrap()).unwrap()
    }

    #[test]
    fn uniform_similarities_give_log_window_size() {
        let s = map(7, 7, 2, |_, _| vec![0.6, 0.8]);
        let cfg = LossConfig { pixels: None, ..LossConfig::default() };
        let px = interior_pixels(7, 7, 2);
        assert_eq!(px.len(), 9);
        let l = classification_loss(&s, &s, &px, &cfg).unwrap();
        assert!((l.item() - 25f64.ln()).abs() < 1e-9, "{}", l.item());
        let p = match_probability(&s, &s, 3, 3, &cfg).unwrap();
        assert!(p.iter().all(|v| (v - 0.04).abs() < 1e-12));
    }

    #[test]
    fn center_one_others_minus_one() {
        let s = map(5, 5, 2, |_, _| vec![1.0, 0.0]);
        let t = map(5, 5, 2, |x, y| if (x, y) == (2, 2) { vec![1.0, 0.0] } else { vec![-1.0, 0.0] });
        let p = match_probability(&s, &t, 2, 2, &LossConfig::default()).unwrap();
        let e = std::f64::consts::E;
        let want = e / (e + 24.0 / e);
        assert!((p[12] - want).abs() < 1e-12);
        let l = classification_loss(&s, &t, &[12], &LossConfig::default()).unwrap();
        assert!((l.item() + want.ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = map(6, 6, 3, |_, _| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let t = map(6, 6, 3, |_, _| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            for normalized in [false, true] {
                let cfg = LossConfig { window_normalized: normalized, ..LossConfig::default() };
                let p = match_probability(&s, &t, rng.gen_range(0..6), rng.gen_range(0..6), &cfg).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn confident_center_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for scale in [1.0, 2.0, 4.0, 8.0] {
            let logits: Vec<f64> = (0..25).map(|k| if k == 12 { scale } else { -scale }).collect();
            let l = center_nll(&Tensor::new(&[1, 1, 25], logits).unwrap(), &[0], 12).unwrap().item();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn raising_center_similarity_lowers_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let mut logits: Vec<f64> = (0..2 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let before = center_nll(&Tensor::new(&[1, 2, 25], logits.clone()).unwrap(), &[0, 1], 12)
                .unwrap()
                .item();
            logits[12] += rng.gen_range(1e-3..0.5);
            let after =
                center_nll(&Tensor::new(&[1, 2, 25], logits).unwrap(), &[0, 1], 12).unwrap().item();
            assert!(after < before, "{after} !< {before}");
        }
    }

    #[test]
    fn empty_pixels_rejected() {
        let s = map(5, 5, 2, |_, _| vec![1.0, 0.0]);
        assert!(classification_loss(&s, &s, &[], &LossConfig::default()).is_err());
        assert!(LossConfig { pixels: Some(0), ..LossConfig::default() }.validate().is_err());
    }

    #[test]
    fn sampling_stays_inside_and_is_reproducible() {
        let cfg = LossConfig { pixels: Some(10), ..LossConfig::default() };
        let a = sample_pixels(12, 9, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_pixels(12, 9, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for p in a {
            let (x, y) = (p % 9, p / 9);
            assert!((2..7).contains(&x) && (2..10).contains(&y));
        }
        let all = sample_pixels(6, 6, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(all, vec![14, 15, 20, 21]);
        assert!(interior_pixels(4, 4, 2).is_empty());
    }

    #[test]
    fn field_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = FeatureNet::default_arch(&mut rng);
        let p = gen_pair(4, &SynthConfig { size: 32, ..SynthConfig::default() }).unwrap();
        let ds = net.extract(&p.target).unwrap();
        let pen = net.penultimate(&p.source).unwrap();
        let (h, w) = (8, 8);
        let mut params = AffineField::identity(h, w).params().data().to_vec();
        for v in params.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let field = Tensor::parameter(&[h, w, 6], params).unwrap();
        let cfg = LossConfig { pixels: None, ..LossConfig::default() };
        let px = interior_pixels(h, w, 2);
        let rep = grad_check(
            |inp| {
                let f = AffineField::from_params(inp[0].clone())?;
                classification_loss(&ds, &net.transformed(&pen, &f)?, &px, &cfg)
            },
            &[field],
            1e-6,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn gradient_reaches_features_and_matcher() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = FeatureNet::default_arch(&mut rng);
        let mut m = MatcherNet::new(25, &mut rng);
        let k = m.head.kernel.shape().to_vec();
        m.head.kernel = Tensor::parameter(
            &k,
            (0..k.iter().product()).map(|_| rng.gen_range(-0.02..0.02)).collect(),
        )
        .unwrap();
        let p = gen_pair(5, &SynthConfig { size: 48, ..SynthConfig::default() }).unwrap();
        let rec = run_recurrence(&p.target, &p.source, &net, &m, &RecurrenceConfig::default()).unwrap();
        let cfg = LossConfig { pixels: None, ..LossConfig::default() };
        let px = interior_pixels(12, 12, 2);
        for per_iteration in [false, true] {
            let cfg = LossConfig { per_iteration, ..cfg.clone() };
            let l = recurrence_loss(&rec, &px, &cfg).unwrap();
            let watch = [rec.source_features.tensor().clone(), rec.target_features.last().unwrap().tensor().clone()];
            let g = l.gradients_watching(true, &watch).unwrap();
            let norm = |t: &Tensor| g.get(t).map_or(0.0, |v| v.iter().map(|x| x * x).sum::<f64>());
            assert!(norm(rec.source_features.tensor()) > 0.0);
            assert!(norm(rec.target_features.last().unwrap().tensor()) > 0.0);
            assert!(norm(&net.layers[0].kernel) > 0.0);
            for (name, t) in m.params() {
                assert!(norm(&t) > 0.0, "{name}");
            }
        }
    }
}
