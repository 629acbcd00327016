use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpcc_core::evaluation::{compute_bpp, save_rd_csv, RdRow};
use dpcc_core::geometry::{load_pointcloud, save_pointcloud};
use dpcc_core::{fixtures, CodecModel, DType, RunConfig};

fn dpcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpcc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config() -> RunConfig {
    RunConfig {
        channels: 12,
        hyper_channels: 4,
        tokens: 8,
        heads: 2,
        diffusion_steps: 8,
        points_per_cloud: 64,
        steps: 4,
        batch: 2,
        log_every: 2,
        ..RunConfig::desk()
    }
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn model(&self, cfg: RunConfig) -> PathBuf {
        let path = self.path("model.ckpt");
        CodecModel::new(cfg, DType::F32, 5).unwrap().save(&path).unwrap();
        path
    }

    fn data(&self, points: usize) -> PathBuf {
        let dir = self.path("data");
        std::fs::create_dir_all(&dir).unwrap();
        for (i, cloud) in fixtures::shape_set(points, 3).unwrap().iter().enumerate() {
            save_pointcloud(cloud, dir.join(format!("shape_{i}.ply"))).unwrap();
        }
        dir
    }
}

fn field(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("no {key} in output:\n{out}"))
        .to_string()
}

#[test]
fn encode_decode_round_trip() {
    let ws = Workspace::new();
    let model = ws.model(tiny_config());
    let data = ws.data(100);
    let input = data.join("shape_2.ply");
    let container = ws.path("a.dpcc");
    let out = dpcc(&["encode", "--input", s(&input), "--model", s(&model), "--output", s(&container), "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let bytes = std::fs::read(&container).unwrap();
    assert!(dpcc_core::entropy::unpack_container(&bytes).is_ok());
    let n: usize = field(&text, "points").parse().unwrap();
    assert_eq!(n, 100);
    let bpp: f64 = field(&text, "bpp").parse().unwrap();
    assert_eq!(bpp, compute_bpp(&bytes, n).unwrap());

    let again = ws.path("b.dpcc");
    let out = dpcc(&["encode", "--input", s(&input), "--model", s(&model), "--output", s(&again), "--seed", "4"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&again).unwrap(), bytes);

    let ply_a = ws.path("a.ply");
    let ply_b = ws.path("b.ply");
    for ply in [&ply_a, &ply_b] {
        let out = dpcc(&["decode", "--input", s(&container), "--model", s(&model), "--output", s(ply)]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(field(&stdout(&out), "points"), "100");
    }
    let decoded = load_pointcloud(&ply_a).unwrap();
    assert_eq!(decoded.len(), 100);
    assert!(decoded.points().iter().flatten().all(|v| v.is_finite()));
    assert_eq!(std::fs::read(&ply_a).unwrap(), std::fs::read(&ply_b).unwrap());
}

#[test]
fn errors_carry_a_class_prefix_and_fail() {
    let ws = Workspace::new();
    let model = ws.model(tiny_config());
    let garbage = ws.path("bad.dpcc");
    std::fs::write(&garbage, b"XXXXjunk").unwrap();
    let out = dpcc(&["decode", "--input", s(&garbage), "--model", s(&model), "--output", s(&ws.path("o.ply"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[bitstream]:"), "{}", stderr(&out));

    let out = dpcc(&["encode", "--input", s(&ws.path("missing.ply")), "--model", s(&model), "--output", s(&ws.path("o.dpcc"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[io]:"), "{}", stderr(&out));

    // A container written for one width must not decode with another.
    let data = ws.data(64);
    let container = ws.path("c.dpcc");
    assert!(dpcc(&["encode", "--input", s(&data.join("shape_0.ply")), "--model", s(&model), "--output", s(&container)]).status.success());
    let other = ws.path("other.ckpt");
    CodecModel::new(RunConfig { channels: 18, ..tiny_config() }, DType::F32, 1)
        .unwrap()
        .save(&other)
        .unwrap();
    let out = dpcc(&["decode", "--input", s(&container), "--model", s(&other), "--output", s(&ws.path("o.ply"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[shape]:"), "{}", stderr(&out));

    let out = dpcc(&["encode", "--model", s(&model)]);
    assert!(!out.status.success());
}

#[test]
fn bdmetrics_self_anchor() {
    let ws = Workspace::new();
    let rows: Vec<RdRow> = [(0.25, 0.1, 22.0), (0.5, 0.3, 27.0), (1.0, 0.7, 30.5), (2.0, 1.5, 33.0)]
        .iter()
        .map(|&(lambda, bpp, psnr_d1)| RdRow { lambda, bpp, psnr_d1, chamfer: 0.01 })
        .collect();
    let csv = ws.path("rd.csv");
    save_rd_csv(&rows, &csv).unwrap();
    let out = dpcc(&["bdmetrics", "--anchor", s(&csv), "--test", s(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "0.000 dB / 0.00 %");

    let short = ws.path("short.csv");
    save_rd_csv(&rows[..3], &short).unwrap();
    let out = dpcc(&["bdmetrics", "--anchor", s(&short), "--test", s(&csv)]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[invalid-input]:"));
}

#[test]
fn train_then_eval_feeds_bdmetrics() {
    let ws = Workspace::new();
    let cfg = tiny_config();
    let data = ws.data(cfg.points_per_cloud);
    let mut checkpoints = Vec::new();
    // Token counts differ so that the four rates spread out after a short run.
    for (i, (lambda, tokens)) in [(0.25, 4), (0.5, 8), (1.0, 12), (2.0, 16)].into_iter().enumerate() {
        let config = ws.path(&format!("run{i}.toml"));
        std::fs::write(&config, RunConfig { lambda, tokens, ..cfg.clone() }.to_toml()).unwrap();
        let out_dir = ws.path(&format!("run{i}"));
        let out = dpcc(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&out_dir)]);
        assert!(out.status.success(), "{}", stderr(&out));
        let ckpt = out_dir.join("final.ckpt");
        assert!(ckpt.exists());
        let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
        assert!(metrics.lines().count() >= 2);
        checkpoints.push(s(&ckpt).to_string());
    }
    let csv = ws.path("rd.csv");
    let out = dpcc(&["eval", "--data", s(&data), "--models", &checkpoints.join(","), "--out", s(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = dpcc_core::evaluation::load_rd_csv(&csv).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(ws.path("rd.svg").exists());
    let out = dpcc(&["bdmetrics", "--anchor", s(&csv), "--test", s(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "0.000 dB / 0.00 %");
}

#[test]
fn desk_config_smoke_train() {
    // The desk configuration with a shortened run, on the eight fixtures.
    let ws = Workspace::new();
    let cfg = RunConfig { steps: 10, log_every: 5, checkpoint_every: 5, ..RunConfig::desk() };
    let data = ws.data(cfg.points_per_cloud);
    let config = ws.path("desk.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let out_dir = ws.path("run");
    let out = dpcc(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let written: Vec<_> = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ckpt"))
        .collect();
    assert!(written.len() >= 3, "{written:?}");
    let reloaded = CodecModel::load(&out_dir.join("final.ckpt")).unwrap();
    assert_eq!(reloaded.config(), &cfg);
}
