use crate::visual::flow_to_image;
use crate::{AblateArgs, CliError, Command, EvalArgs, GenArgs, GradcheckArgs, TrainArgs, WarpArgs};
use rtn_core::checkpoint::Checkpoint;
use rtn_core::config::{self, RunConfig};
use rtn_core::data::{
    load_flow, load_image, load_keypoints, load_mask, save_flow, save_image, save_keypoints,
    save_mask, Image, SynthConfig,
};
use rtn_core::eval::{summarize, write_report, MetricRow};
use rtn_core::geometry::warp_image;
use rtn_core::matching::RecurrenceConfig;
use rtn_core::selfcheck;
use rtn_core::tensor::GRAD_CHECK_FLOOR;
use rtn_core::train::{
    evaluate, held_out_set, metric, synthetic_eval_pair, train, EvalPair, TrainError,
    HELD_OUT_SEED_BASE,
};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    config::parse(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn validated(rc: &RunConfig) -> Result<(), CliError> {
    rc.train.validate().map_err(|e| CliError::data(e.to_string()))?;
    rc.eval.validate()?;
    Ok(())
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains with `rc`, writing checkpoints, `loss.csv` and `config.ini` under
/// `out`. A non-finite loss leaves `diagnostic.txt` behind.
fn train_to_dir(rc: &RunConfig, out: &Path, log_every: usize) -> Result<rtn_core::train::Model, CliError> {
    validated(rc)?;
    create_dir(out)?;
    write(&out.join("config.ini"), &config::serialize(rc))?;
    let steps = rc.train.steps;
    let every = rc.train.checkpoint_every;
    let mut losses = Vec::with_capacity(steps);
    let t0 = Instant::now();
    let result = train(&rc.train, None, |r, model| {
        losses.push(r.loss);
        let done = r.step + 1;
        if log_every > 0 && done % log_every == 0 {
            let tail = &losses[losses.len().saturating_sub(log_every)..];
            println!(
                "step {done} loss {:.5} grad_norm {:.4} elapsed {:.1}s",
                mean(tail),
                r.grad_norm,
                t0.elapsed().as_secs_f64()
            );
        }
        if every > 0 && done % every == 0 && done != steps {
            Checkpoint::from_model(model, rc, done as u64)
                .save(&out.join(format!("checkpoint_{done:06}.ckpt")))
                .map_err(|e| TrainError::Config(e.to_string()))?;
        }
        Ok(())
    });
    write(&out.join("loss.csv"), &loss_csv(&losses))?;
    let outcome = match result {
        Ok(o) => o,
        Err(e @ TrainError::NonFinite { .. }) => {
            write(&out.join("diagnostic.txt"), &format!("{e}\n"))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    Checkpoint::from_model(&outcome.model, rc, steps as u64).save(&out.join("model.ckpt"))?;
    let n = losses.len().min(100);
    println!(
        "trained {steps} steps in {:.1}s; mean loss first {n}: {:.5}, last {n}: {:.5}",
        t0.elapsed().as_secs_f64(),
        mean(&losses[..n]),
        mean(&losses[losses.len() - n..])
    );
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(outcome.model)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut rc = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(s) = a.steps {
        rc.train.steps = s;
    }
    if let Some(t) = a.threads {
        rc.train.threads = t;
    }
    train_to_dir(&rc, &a.out, a.log_every).map(|_| ())
}

fn optional<T>(path: PathBuf, load: impl Fn(&Path) -> Result<T, rtn_core::data::DataError>) -> Result<Option<T>, CliError> {
    if path.exists() {
        Ok(Some(load(&path)?))
    } else {
        Ok(None)
    }
}

fn load_pair_dir(dir: &Path, id: String) -> Result<EvalPair, CliError> {
    Ok(EvalPair {
        id,
        source: load_image(&dir.join("source.ppm"))?,
        target: load_image(&dir.join("target.ppm"))?,
        gt_flow: optional(dir.join("flow.flo"), load_flow)?,
        mask: optional(dir.join("mask.pgm"), load_mask)?,
        source_keypoints: optional(dir.join("source_keypoints.txt"), load_keypoints)?,
        target_keypoints: optional(dir.join("target_keypoints.txt"), load_keypoints)?,
    })
}

/// Pairs from `dir`: either one pair directory, or a directory whose
/// subdirectories (sorted by name) each hold `source.ppm` and `target.ppm`.
pub fn load_eval_set(dir: &Path) -> Result<Vec<EvalPair>, CliError> {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.join("source.ppm").exists() {
        return Ok(vec![load_pair_dir(dir, name(dir))?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("source.ppm").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(CliError::data(format!("{}: no pairs found", dir.display())));
    }
    subdirs.iter().map(|d| load_pair_dir(d, name(d))).collect()
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let items = match (&a.set, a.synthetic) {
        (Some(dir), _) => load_eval_set(dir)?,
        (None, Some(n)) => {
            let size = a.size.unwrap_or(ck.config.held_out_size);
            held_out_set(n, size, &ck.config.train.data)?
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let rows = evaluate(&model, &items, &ck.config.eval)?;
    write(&a.report, &write_report(&rows))?;
    print_summary(&rows);
    Ok(())
}

fn print_summary(rows: &[MetricRow]) {
    for (k, v) in summarize(rows) {
        println!("{k} {v}");
    }
}

fn cmd_warp(a: WarpArgs) -> Result<(), CliError> {
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let source = load_image(&a.source)?;
    let target = load_image(&a.target)?;
    if (source.height(), source.width()) != (target.height(), target.width()) {
        return Err(CliError::data(format!(
            "source is {}x{} but target is {}x{}",
            source.height(),
            source.width(),
            target.height(),
            target.width()
        )));
    }
    create_dir(&a.out)?;
    let flows = model.estimate_flows(&source, &target)?;
    let mut panel = vec![source.clone(), target.clone()];
    for (k, f) in flows.iter().enumerate() {
        let w = warp_image(&source, f)?;
        save_image(&w, &a.out.join(format!("iter_{}.ppm", k + 1)))?;
        panel.push(w);
    }
    let flow = flows.last().expect("at least one iteration");
    save_image(&warp_image(&source, flow)?, &a.out.join("warped.ppm"))?;
    save_flow(flow, &a.out.join("flow.flo"))?;
    save_image(&flow_to_image(flow), &a.out.join("flow.ppm"))?;
    save_image(&Image::hstack(&panel)?, &a.out.join("panel.ppm"))?;
    println!("wrote warped.ppm, flow.flo, flow.ppm, panel.ppm and {} iteration warps to {}", flows.len(), a.out.display());
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let rc = load_config(a.config.as_deref())?;
    let cfg = SynthConfig { size: a.size.unwrap_or(rc.held_out_size), ..rc.train.data.clone() };
    cfg.validate()?;
    let base = a.seed.unwrap_or(HELD_OUT_SEED_BASE);
    create_dir(&a.out)?;
    for i in 0..a.count {
        let id = format!("pair_{i:04}");
        let p = synthetic_eval_pair(id.clone(), base + i as u64, &cfg)?;
        let dir = a.out.join(&id);
        create_dir(&dir)?;
        save_image(&p.source, &dir.join("source.ppm"))?;
        save_image(&p.target, &dir.join("target.ppm"))?;
        save_flow(p.gt_flow.as_ref().expect("synthetic"), &dir.join("flow.flo"))?;
        save_mask(p.mask.as_ref().expect("synthetic"), &dir.join("mask.pgm"))?;
        save_keypoints(p.source_keypoints.as_ref().expect("synthetic"), &dir.join("source_keypoints.txt"))?;
        save_keypoints(p.target_keypoints.as_ref().expect("synthetic"), &dir.join("target_keypoints.txt"))?;
    }
    println!("wrote {} pairs to {}", a.count, a.out.display());
    Ok(())
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for (name, rep) in selfcheck::op_checks(a.seed)? {
        println!("op {name} max_rel_error {:.3e} checked {}", rep.max_rel_error, rep.checked);
        worst = worst.max(rep.max_rel_error);
    }
    let rep = selfcheck::full_loss_check(a.seed, a.probes)?;
    println!("full_loss max_rel_error {:.3e} checked {}", rep.max_rel_error, rep.checked);
    worst = worst.max(rep.max_rel_error);
    println!(
        "max relative error {worst:.3e} (floor {GRAD_CHECK_FLOOR}) in {:.1}s",
        t0.elapsed().as_secs_f64()
    );
    if worst < GRADCHECK_TOLERANCE {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::numerical(format!("max relative error {worst:e} >= {GRADCHECK_TOLERANCE}")))
    }
}

fn cmd_ablate(a: AblateArgs) -> Result<(), CliError> {
    let mut rc = load_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        rc.train.steps = s;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(t) = a.threads {
        rc.train.threads = t;
    }
    if let Some(w) = a.windows.iter().find(|w| **w < 3 || **w % 2 == 0) {
        return Err(CliError::usage(format!("window side {w} must be odd and >= 3")));
    }
    if a.iterations.is_empty() || a.iterations.contains(&0) {
        return Err(CliError::usage("iteration counts must be >= 1"));
    }
    let k_max = *a.iterations.iter().max().expect("non-empty");
    create_dir(&a.out)?;
    let items = held_out_set(rc.held_out_count, rc.held_out_size, &rc.train.data)?;
    let mut csv = String::from("window,iterations,endpoint_acc,mean_epe\n");
    for &w in &a.windows {
        let r = (w - 1) / 2;
        let mut cfg = rc.clone();
        cfg.train.recurrence = RecurrenceConfig::with_iterations(r, k_max);
        cfg.train.loss.radius = r;
        println!("window {w}x{w}: training {} steps with {k_max} iterations", cfg.train.steps);
        let model = train_to_dir(&cfg, &a.out.join(format!("window_{w}")), 0)?;
        let s = summarize(&evaluate(&model, &items, &cfg.eval)?);
        for &k in &a.iterations {
            let acc = s[&metric::endpoint_acc_at(k)];
            let epe = s[&metric::mean_epe_at(k)];
            println!("window {w} iterations {k} endpoint_acc {acc:.4} mean_epe {epe:.4}");
            csv.push_str(&format!("{w},{k},{acc},{epe}\n"));
        }
    }
    write(&a.out.join("ablation.csv"), &csv)?;
    println!("wrote {}", a.out.join("ablation.csv").display());
    Ok(())
}
