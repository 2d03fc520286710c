use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use hnse_cli::{CliConfig, EvalReport};
use hnse_core::renderer::RenderedImage;
use tempfile::TempDir;

fn hnse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hnse")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hnse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    hnse(args).status.code().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, seed: &str) {
    ok(&[
        "--seed",
        seed,
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--train-frames",
        "3",
        "--eval-frames",
        "2",
        "--width",
        "24",
        "--height",
        "24",
    ]);
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_byte_deterministic() {
    let t = TempDir::new().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    synth(&a, "7");
    synth(&b, "7");
    synth(&c, "8");
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    // 3 + 2 frames with masks, plus body, cameras, two pose files, manifest
    assert_eq!(ta.len(), 15, "{:?}", ta.keys().collect::<Vec<_>>());
    let tc = tree(&c);
    assert_ne!(ta["poses_eval.json"], tc["poses_eval.json"]);
}

#[test]
fn report_params_prints_the_closed_form_counts() {
    let out = ok(&["report-params"]);
    // 63 -> 256 (x5), skip (256 + 63) -> 256, 256 -> 256 (x2), 256 -> 4
    let appearance = 64 * 256 + 4 * 257 * 256 + 320 * 256 + 2 * 257 * 256 + 257 * 4;
    assert_eq!(appearance, 494_084);
    // (4 joints + 1 + 3) -> 128, 128 -> 128 (x2), 128 -> 3
    let refine = 9 * 128 + 2 * 129 * 128 + 129 * 3;
    assert_eq!(refine, 34_563);
    assert!(out.contains(&format!("appearance {appearance}\n")), "{out}");
    assert!(out.contains(&format!("refine {refine}\n")), "{out}");
    assert!(out.contains("kernel 0\n"), "{out}");
    assert!(out.contains(&format!("total {}\n", appearance + refine)), "{out}");
}

#[test]
fn dump_config_round_trips_and_applies_overrides() {
    let t = TempDir::new().unwrap();
    let text = ok(&["dump-config"]);
    let parsed: CliConfig = toml::from_str(&text).unwrap();
    assert_eq!(parsed, CliConfig::default());

    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nn_samples = 40\n").unwrap();
    let text = ok(&["--config", s(&cfg), "--seed", "11", "dump-config"]);
    let parsed: CliConfig = toml::from_str(&text).unwrap();
    assert_eq!(parsed.train.n_samples, 40);
    assert_eq!(parsed.train.seed, 11);

    let desk = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let parsed: CliConfig = toml::from_str(&ok(&["--config", desk, "dump-config"])).unwrap();
    assert_eq!(parsed.train.appearance_width, 128);
}

#[test]
fn exit_codes() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["render", "--frame", "x"]), 1);

    let bad = t.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbogus = 1\n").unwrap();
    assert_eq!(code(&["--config", s(&bad), "dump-config"]), 1);
    std::fs::write(&bad, "[train]\nrays_per_batch = 0\n").unwrap();
    assert_eq!(code(&["--config", s(&bad), "report-params"]), 1);

    let missing = t.path().join("nope.json");
    let out = t.path().join("o.ckpt");
    assert_eq!(code(&["train", "--manifest", s(&missing), "--out", s(&out)]), 2);

    let junk = t.path().join("junk.ckpt");
    std::fs::write(&junk, b"HNSECKPTgarbage").unwrap();
    assert_eq!(code(&["report-params", "--checkpoint", s(&junk)]), 2);
}

#[test]
fn init_checkpoint_renders_animates_and_evaluates() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    synth(&data, "5");
    let manifest = data.join("manifest.json");
    let ckpt = t.path().join("init.ckpt");
    let log = t.path().join("loss.jsonl");
    let cfg = t.path().join("small.toml");
    std::fs::write(
        &cfg,
        "[train]\nappearance_width = 16\nappearance_depth = 3\nrefine_width = 8\nrefine_layers = 2\n\
         rays_per_batch = 64\npatch_count = 1\npatch_size = 8\nn_samples = 16\neval_samples = 16\n",
    )
    .unwrap();
    let c = s(&cfg);
    ok(&["--config", c, "train", "--manifest", s(&manifest), "--out", s(&ckpt), "--iterations", "0"]);
    let counts = ok(&["report-params", "--checkpoint", s(&ckpt)]);
    assert!(counts.contains("refine "), "{counts}");

    let frames = t.path().join("frames");
    let args = |sub: &'static str| {
        vec![
            sub.to_string(),
            "--checkpoint".into(),
            s(&ckpt).into(),
            "--body".into(),
            s(&data.join("body.json")).into(),
            "--poses".into(),
            s(&data.join("poses_eval.json")).into(),
            "--cameras".into(),
            s(&data.join("cameras.json")).into(),
            "--out".into(),
            s(&frames).into(),
            "--alpha-dump".into(),
        ]
    };
    let mut r = args("render");
    r.extend(["--frame".into(), "1".into()]);
    let r: Vec<&str> = r.iter().map(String::as_str).collect();
    ok(&r);
    let img = RenderedImage::load_png(&frames.join("frame_0001.png"), None).unwrap();
    assert_eq!((img.width, img.height), (24, 24));
    let (w, h, alpha) = RenderedImage::read_alpha_dump(&frames.join("frame_0001.alpha")).unwrap();
    assert_eq!((w, h, alpha.len()), (24, 24, 576));
    assert!(alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    // the corners see only empty space
    assert_eq!(alpha[0], 0.0);

    let a = args("animate");
    let a: Vec<&str> = a.iter().map(String::as_str).collect();
    ok(&a);
    assert!(frames.join("frame_0000.png").exists());

    // training continues from the checkpoint and logs one line per step
    let resumed = t.path().join("resumed.ckpt");
    ok(&[
        "--config",
        c,
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&resumed),
        "--iterations",
        "4",
        "--resume",
        s(&ckpt),
        "--loss-log",
        s(&log),
    ]);
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["iteration"], 1);

    let report = t.path().join("eval.json");
    ok(&["eval", "--checkpoint", s(&resumed), "--manifest", s(&manifest), "--out", s(&report)]);
    let rep: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep.iteration, Some(4));
    assert_eq!(rep.metrics.frames.len(), 2);
    assert!(rep.pose_similarity.is_some());
}

#[test]
fn targets_scored_against_themselves_are_perfect() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    synth(&data, "2");
    let report = t.path().join("eval.json");
    ok(&[
        "eval",
        "--predictions",
        s(&data),
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&report),
    ]);
    let rep: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep.metrics.mean_psnr, 99.0);
    assert!((rep.metrics.mean_ssim - 1.0).abs() < 1e-12);
}
