//! Flow endpoint accuracy, PCK and the CSV metric report.

use crate::data::{Keypoint, KeypointSet, Mask};
use crate::geometry::{FlowField, PixelCoord};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid eval config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Endpoint threshold in pixels after rescaling to `norm_dim`.
    pub threshold: f64,
    pub norm_dim: f64,
    pub alphas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 5.0, norm_dim: 100.0, alphas: vec![0.05, 0.1, 0.15] }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.threshold > 0.0 && self.norm_dim > 0.0) {
            return Err(EvalError::Config("threshold and normalization must be positive".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(EvalError::Config(format!("alpha {a} outside (0, 1)")));
        }
        Ok(())
    }

    /// `sigma = norm_dim / max(h, w)`.
    pub fn scale_for(&self, h: usize, w: usize) -> f64 {
        self.norm_dim / h.max(w) as f64
    }
}

fn check_grids(flow: &FlowField, gt: &FlowField, mask: &Mask) -> Result<(), EvalError> {
    let dims = |h, w| format!("{h}x{w}");
    let (a, b, c) = (
        dims(flow.height(), flow.width()),
        dims(gt.height(), gt.width()),
        dims(mask.height(), mask.width()),
    );
    if a != b || a != c {
        return Err(EvalError::Data(format!("grid mismatch: flow {a}, gt {b}, mask {c}")));
    }
    if mask.count() == 0 {
        return Err(EvalError::UndefinedMetric("empty foreground mask".into()));
    }
    Ok(())
}

fn endpoint_errors<'a>(
    flow: &'a FlowField,
    gt: &'a FlowField,
    mask: &'a Mask,
) -> impl Iterator<Item = f64> + 'a {
    mask.data().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| {
        let (p, q) = (&flow.data()[2 * i..2 * i + 2], &gt.data()[2 * i..2 * i + 2]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    })
}

/// Fraction of mask pixels with `sigma * |f - f*| < threshold`.
pub fn endpoint_accuracy(
    flow: &FlowField,
    gt: &FlowField,
    mask: &Mask,
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    check_grids(flow, gt, mask)?;
    let sigma = cfg.scale_for(flow.height(), flow.width());
    let good = endpoint_errors(flow, gt, mask).filter(|e| sigma * e < cfg.threshold).count();
    Ok(good as f64 / mask.count() as f64)
}

/// Mean endpoint error over the mask, in image pixels.
pub fn mean_endpoint_error(flow: &FlowField, gt: &FlowField, mask: &Mask) -> Result<f64, EvalError> {
    check_grids(flow, gt, mask)?;
    Ok(endpoint_errors(flow, gt, mask).sum::<f64>() / mask.count() as f64)
}

/// Moves every point `p` to `p + f(p)`, interpolating the flow bilinearly.
pub fn transport_keypoints(points: &KeypointSet, flow: &FlowField) -> KeypointSet {
    let moved = points
        .points()
        .iter()
        .map(|k| {
            let [u, v] = flow.sample(PixelCoord { x: k.x, y: k.y });
            Keypoint { id: k.id, x: k.x + u, y: k.y + v }
        })
        .collect();
    KeypointSet::new(moved).expect("ids unchanged")
}

/// Fraction of predicted points within `alpha * ref_dim` (inclusive) of the
/// ground-truth point with the same id. Both sets must carry the same ids.
pub fn pck(pred: &KeypointSet, gt: &KeypointSet, ref_dim: f64, alpha: f64) -> Result<f64, EvalError> {
    if pred.is_empty() {
        return Err(EvalError::Data("no keypoints".into()));
    }
    if pred.len() != gt.len() {
        return Err(EvalError::Data(format!(
            "keypoint count mismatch: {} predicted, {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let bound = alpha * ref_dim;
    let mut good = 0;
    for p in pred.points() {
        let q = gt.get(p.id).ok_or_else(|| EvalError::Data(format!("id {} missing from ground truth", p.id)))?;
        if (p.x - q.x).hypot(p.y - q.y) <= bound {
            good += 1;
        }
    }
    Ok(good as f64 / pred.len() as f64)
}

/// One report row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub pair_id: String,
    pub metric: String,
    pub value: f64,
}

pub const CSV_HEADER: &str = "pair_id,metric,value";

/// Values are written in shortest round-trip form, so parsing recovers them
/// exactly.
pub fn write_report(rows: &[MetricRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.pair_id, r.metric, r.value));
    }
    out
}

pub fn parse_report(text: &str) -> Result<Vec<MetricRow>, EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(EvalError::Data(format!("report must start with `{CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let bad = || EvalError::Data(format!("report line {}: `{l}`", n + 2));
            let mut f = l.split(',');
            let (Some(id), Some(metric), Some(value), None) = (f.next(), f.next(), f.next(), f.next())
            else {
                return Err(bad());
            };
            let value = value.parse().map_err(|_| bad())?;
            Ok(MetricRow { pair_id: id.into(), metric: metric.into(), value })
        })
        .collect()
}

/// Mean of each metric over the rows, summed in row order.
pub fn summarize(rows: &[MetricRow]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.metric.clone()).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
