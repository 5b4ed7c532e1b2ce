use rtn_core::eval::{parse_report, summarize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

fn rtn(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rtn")).args(args).output().expect("spawn rtn");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small, fast configuration; `extra` lines are appended to `[train]`.
fn tiny_config(dir: &Path, steps: usize, extra: &str) -> std::path::PathBuf {
    let path = dir.join("tiny.ini");
    let text = format!(
        "[train]\nsteps = {steps}\nbatch = 1\ncheckpoint_every = 0\n{extra}\n\
         [data]\nsize = 32\n\n[eval]\nheld_out_count = 2\nheld_out_size = 32\n"
    );
    fs::write(&path, text).unwrap();
    path
}

fn printed_summary(stdout: &str) -> BTreeMap<String, f64> {
    stdout
        .lines()
        .filter_map(|l| l.split_once(' '))
        .filter_map(|(k, v)| v.parse().ok().map(|v| (k.to_string(), v)))
        .collect()
}

#[test]
fn help_and_version_exit_zero() {
    let (code, out, _) = rtn(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("train") && out.contains("gradcheck"));
    assert_eq!(rtn(&["--version"]).0, 0);
}

#[test]
fn usage_errors_exit_one() {
    let (code, _, err) = rtn(&["train", "--bogus-flag"]);
    assert_eq!(code, 1);
    assert!(err.contains("kind=usage"), "{err}");
    assert_eq!(rtn(&["frobnicate"]).0, 1);
    // eval needs exactly one of --set / --synthetic
    assert_eq!(rtn(&["eval", "--checkpoint", "x", "--report", "y"]).0, 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = rtn(&["eval", "--checkpoint", p(&dir.path().join("none.ckpt")), "--synthetic", "1", "--report", "r.csv"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error: kind=data code=2"), "{err}");

    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "[train]\nlearning_speed = 3\n").unwrap();
    let (code, _, err) = rtn(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code, 2);
    assert!(err.contains("learning_speed"), "{err}");

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let (code, _, _) = rtn(&["eval", "--checkpoint", p(&garbage), "--synthetic", "1", "--report", "r.csv"]);
    assert_eq!(code, 2);
}

#[test]
fn divergence_exits_three_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 5, "lr = 1e300\nclip = 1e300");
    let out = dir.path().join("run");
    let (code, _, err) = rtn(&["train", "--config", p(&cfg), "--out", p(&out), "--log-every", "0"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("kind=numerical"), "{err}");
    let diag = fs::read_to_string(out.join("diagnostic.txt")).unwrap();
    assert!(diag.contains("step"), "{diag}");
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn gradcheck_passes() {
    let (code, out, err) = rtn(&["gradcheck", "--seed", "7", "--probes", "1"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("op conv2d "));
    assert!(out.contains("full_loss "));
    assert_eq!(out.lines().last(), Some("PASS"));
}

#[test]
fn train_gen_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, 2, "");
    let run = d.join("run");
    let (code, out, err) = rtn(&["train", "--config", p(&cfg), "--out", p(&run), "--log-every", "1"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("step 2 loss"));
    let losses = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);
    assert!(losses.starts_with("step,loss\n"));
    let saved = rtn_core::config::parse(&fs::read_to_string(run.join("config.ini")).unwrap()).unwrap();
    assert_eq!(saved.train.steps, 2);

    let set = d.join("set");
    let (code, _, err) = rtn(&["gen", "--config", p(&cfg), "--out", p(&set), "--count", "2"]);
    assert_eq!(code, 0, "{err}");
    for f in ["source.ppm", "target.ppm", "flow.flo", "mask.pgm", "source_keypoints.txt", "target_keypoints.txt"] {
        assert!(set.join("pair_0001").join(f).exists(), "{f}");
    }

    let ck = run.join("model.ckpt");
    for (flag, value, name) in [("--set", p(&set), "set.csv"), ("--synthetic", "2", "syn.csv")] {
        let report = d.join(name);
        let (code, out, err) = rtn(&["eval", "--checkpoint", p(&ck), flag, value, "--report", p(&report)]);
        assert_eq!(code, 0, "{err}");
        let rows = parse_report(&fs::read_to_string(&report).unwrap()).unwrap();
        assert!(rows.iter().any(|r| r.pair_id == "pair_0001" && r.metric == "endpoint_acc"));
        assert!(rows.iter().any(|r| r.metric == "pck@0.1"));
        assert_eq!(summarize(&rows), printed_summary(&out));
    }
}

#[test]
fn untrained_warp_reproduces_source() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // lr = 0 keeps the zero matcher head, so the predicted flow is exactly zero
    let cfg = tiny_config(d, 1, "lr = 0");
    let run = d.join("run");
    assert_eq!(rtn(&["train", "--config", p(&cfg), "--out", p(&run), "--log-every", "0"]).0, 0);
    let set = d.join("set");
    assert_eq!(rtn(&["gen", "--config", p(&cfg), "--out", p(&set), "--count", "1"]).0, 0);
    let pair = set.join("pair_0000");
    let out = d.join("warp");
    let (code, _, err) = rtn(&[
        "warp",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--source",
        p(&pair.join("source.ppm")),
        "--target",
        p(&pair.join("target.ppm")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read(out.join("warped.ppm")).unwrap(), fs::read(pair.join("source.ppm")).unwrap());
    for f in ["iter_1.ppm", "iter_4.ppm", "flow.flo", "flow.ppm", "panel.ppm"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let flow = rtn_core::data::load_flow(&out.join("flow.flo")).unwrap();
    assert!(flow.data().iter().all(|&v| v == 0.0));
}

#[test]
fn warp_rejects_mismatched_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, 1, "lr = 0");
    assert_eq!(rtn(&["train", "--config", p(&cfg), "--out", p(&d.join("run")), "--log-every", "0"]).0, 0);
    let a = rtn_core::data::Image::filled(32, 32, [0.5; 3]);
    let b = rtn_core::data::Image::filled(24, 32, [0.5; 3]);
    rtn_core::data::save_image(&a, &d.join("a.ppm")).unwrap();
    rtn_core::data::save_image(&b, &d.join("b.ppm")).unwrap();
    let (code, _, _) = rtn(&[
        "warp",
        "--checkpoint",
        p(&d.join("run/model.ckpt")),
        "--source",
        p(&d.join("a.ppm")),
        "--target",
        p(&d.join("b.ppm")),
        "--out",
        p(&d.join("w")),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, 2, "");
    let out = d.join("abl");
    let (code, _, err) = rtn(&["ablate", "--config", p(&cfg), "--iterations", "1,2", "--windows", "3,5", "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "window,iterations,endpoint_acc,mean_epe");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("3,1,") && lines[4].starts_with("5,2,"));
    assert!(out.join("window_5/model.ckpt").exists());

    assert_eq!(rtn(&["ablate", "--windows", "4", "--out", p(&out)]).0, 1);
}
