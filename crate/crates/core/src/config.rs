//! Run configuration file: `[section]` headers and `key = value` lines.
//!
//! Every key is optional and falls back to its default; unknown sections,
//! unknown keys and repeated keys are errors. `#` starts a comment line.

use crate::data::{SynthConfig, TextureKind};
use crate::eval::EvalConfig;
use crate::train::TrainConfig;
use std::fmt::Write;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("config line {line}: {reason}")]
pub struct ConfigError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub held_out_count: usize,
    pub held_out_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            held_out_count: 20,
            held_out_size: 96,
        }
    }
}

const SECTIONS: [&str; 5] = ["train", "recurrence", "loss", "data", "eval"];

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

fn pair(v: &str) -> Result<(f64, f64), String> {
    match list::<f64>(v)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(format!("expected `lo, hi`, found `{v}`")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn set(cfg: &mut RunConfig, section: &str, key: &str, v: &str) -> Result<(), String> {
    let t = &mut cfg.train;
    match (section, key) {
        ("train", "steps") => t.steps = num(v)?,
        ("train", "batch") => t.batch = num(v)?,
        ("train", "lr") => t.lr = num(v)?,
        ("train", "momentum") => t.momentum = num(v)?,
        ("train", "clip") => t.clip = num(v)?,
        ("train", "seed") => t.seed = num(v)?,
        ("train", "checkpoint_every") => t.checkpoint_every = num(v)?,
        ("train", "threads") => t.threads = num(v)?,
        ("recurrence", "radius") => t.recurrence.radius = num(v)?,
        ("recurrence", "schedule") => t.recurrence.dilation_schedule = list(v)?,
        ("loss", "radius") => t.loss.radius = num(v)?,
        ("loss", "pixels") => t.loss.pixels = if v == "all" { None } else { Some(num(v)?) },
        ("loss", "per_iteration") => t.loss.per_iteration = num(v)?,
        ("loss", "window_normalized") => t.loss.window_normalized = num(v)?,
        ("data", "size") => t.data.size = num(v)?,
        ("data", "scale") => t.data.scale_range = pair(v)?,
        ("data", "rotation") => t.data.rot_range = pair(v)?,
        ("data", "trans_x") => t.data.trans_x = pair(v)?,
        ("data", "trans_y") => t.data.trans_y = pair(v)?,
        ("data", "trans_max") => t.data.trans_max = num(v)?,
        ("data", "local_warp_amp") => t.data.local_warp_amp = num(v)?,
        ("data", "local_warp_smoothness") => t.data.local_warp_smoothness = num(v)?,
        ("data", "texture") => {
            t.data.texture = TextureKind::parse(v).ok_or_else(|| format!("unknown texture `{v}`"))?
        }
        ("eval", "threshold") => cfg.eval.threshold = num(v)?,
        ("eval", "norm_dim") => cfg.eval.norm_dim = num(v)?,
        ("eval", "alphas") => cfg.eval.alphas = list(v)?,
        ("eval", "held_out_count") => cfg.held_out_count = num(v)?,
        ("eval", "held_out_size") => cfg.held_out_size = num(v)?,
        _ => return Err(format!("unknown key `{key}` in [{section}]")),
    }
    Ok(())
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut section: Option<&str> = None;
    let mut seen = std::collections::HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let err = |reason: String| ConfigError { line: n + 1, reason };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            let known = SECTIONS.iter().find(|s| **s == name);
            section = Some(*known.ok_or_else(|| err(format!("unknown section [{name}]")))?);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(format!("expected `key = value`, found `{line}`")));
        };
        let sec = section.ok_or_else(|| err("key outside any [section]".into()))?;
        let key = key.trim();
        if !seen.insert((sec, key.to_string())) {
            return Err(err(format!("repeated key `{key}` in [{sec}]")));
        }
        set(&mut cfg, sec, key, value.trim()).map_err(err)?;
    }
    Ok(cfg)
}

/// Writes every key; `parse(&serialize(c)) == c`.
pub fn serialize(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let d: &SynthConfig = &t.data;
    let mut s = String::new();
    let _ = write!(
        s,
        "[train]\nsteps = {}\nbatch = {}\nlr = {}\nmomentum = {}\nclip = {}\nseed = {}\n\
         checkpoint_every = {}\nthreads = {}\n\n",
        t.steps, t.batch, t.lr, t.momentum, t.clip, t.seed, t.checkpoint_every, t.threads
    );
    let _ = write!(
        s,
        "[recurrence]\nradius = {}\nschedule = {}\n\n",
        t.recurrence.radius,
        join(&t.recurrence.dilation_schedule)
    );
    let pixels = t.loss.pixels.map_or("all".to_string(), |p| p.to_string());
    let _ = write!(
        s,
        "[loss]\nradius = {}\npixels = {pixels}\nper_iteration = {}\nwindow_normalized = {}\n\n",
        t.loss.radius, t.loss.per_iteration, t.loss.window_normalized
    );
    let _ = write!(
        s,
        "[data]\nsize = {}\nscale = {}, {}\nrotation = {}, {}\ntrans_x = {}, {}\ntrans_y = {}, {}\n\
         trans_max = {}\nlocal_warp_amp = {}\nlocal_warp_smoothness = {}\ntexture = {}\n\n",
        d.size,
        d.scale_range.0,
        d.scale_range.1,
        d.rot_range.0,
        d.rot_range.1,
        d.trans_x.0,
        d.trans_x.1,
        d.trans_y.0,
        d.trans_y.1,
        d.trans_max,
        d.local_warp_amp,
        d.local_warp_smoothness,
        d.texture.name()
    );
    let _ = write!(
        s,
        "[eval]\nthreshold = {}\nnorm_dim = {}\nalphas = {}\nheld_out_count = {}\nheld_out_size = {}\n",
        cfg.eval.threshold,
        cfg.eval.norm_dim,
        join(&cfg.eval.alphas),
        cfg.held_out_count,
        cfg.held_out_size
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
        assert_eq!(parse("# nothing\n\n[train]\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips() {
        let text = serialize(&RunConfig::default());
        assert_eq!(parse(&text).unwrap(), RunConfig::default());
        assert_eq!(serialize(&parse(&text).unwrap()), text);
    }

    #[test]
    fn reads_values() {
        let c = parse("[train]\nsteps=10\nlr = 0.5\n[recurrence]\nschedule = 2, 1\n[loss]\npixels = all\n[data]\ntexture = checker\nscale = 1, 1.2\n").unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.train.recurrence.dilation_schedule, vec![2, 1]);
        assert_eq!(c.train.loss.pixels, None);
        assert_eq!(c.train.data.texture, TextureKind::Checker);
        assert_eq!(c.train.data.scale_range, (1.0, 1.2));
    }

    #[test]
    fn rejects_typos_and_junk() {
        let e = parse("[train]\nstep = 10\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.reason.contains("unknown key"));
        assert!(parse("[trian]\n").is_err());
        assert!(parse("steps = 1\n").is_err());
        assert!(parse("[train]\nsteps\n").is_err());
        assert!(parse("[train]\nsteps = ten\n").is_err());
        assert!(parse("[train]\nsteps = 1\nsteps = 2\n").is_err());
        assert!(parse("[data]\nscale = 1\n").is_err());
        assert!(parse("[data]\ntexture = plaid\n").is_err());
    }

    proptest! {
        #[test]
        fn serialize_parse_is_a_fixed_point(
            steps in 1usize..100_000,
            lr in 0.0f64..1.0,
            seed in any::<u64>(),
            sched in proptest::collection::vec(1usize..9, 1..6),
            pixels in proptest::option::of(1usize..5000),
            flags in any::<(bool, bool)>(),
            scale in (0.5f64..1.0, 1.0f64..2.0),
            alphas in proptest::collection::vec(0.001f64..0.999, 1..5),
        ) {
            let mut c = RunConfig::default();
            c.train.steps = steps;
            c.train.lr = lr;
            c.train.seed = seed;
            c.train.recurrence.dilation_schedule = sched;
            c.train.loss.pixels = pixels;
            (c.train.loss.per_iteration, c.train.loss.window_normalized) = flags;
            c.train.data.scale_range = scale;
            c.eval.alphas = alphas;
            let text = serialize(&c);
            let back = parse(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(serialize(&back), text);
        }
    }
}
