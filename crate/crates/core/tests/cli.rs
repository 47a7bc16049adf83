use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use manhattan_rotation::app::PipelineConfig;
use manhattan_rotation::distribution::KappaSpline;
use manhattan_rotation::evaluation::Trajectory;
use manhattan_rotation::so3::exp_map;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mwrot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mwrot"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_spec(dir: &Path, frames: usize, noise: f64, seed: u64) -> PathBuf {
    let path = dir.join("spec.json");
    let spec = serde_json::json!({
        "trajectory": {"yaw_sweep": {"frames": frames, "start_deg": 5.0, "step_deg": 0.5}},
        "noise_deg": noise,
        "samples_per_frame": 2000,
        "seed": seed,
    });
    fs::write(&path, spec.to_string()).unwrap();
    path
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn synth(dir: &Path, frames: usize, noise: f64) -> PathBuf {
    let spec = write_spec(dir, frames, noise, 3);
    let out = dir.join("seq");
    let o = mwrot(&["synth", "--spec", s(&spec), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn mean_line(stdout: &[u8]) -> f64 {
    let text = String::from_utf8_lossy(stdout);
    let line = text.lines().find(|l| l.starts_with("mean ARE")).unwrap();
    line.split_whitespace().nth(2).unwrap().parse().unwrap()
}

#[test]
fn synth_writes_frames_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = synth(a.path(), 10, 2.0);
    let sb = synth(b.path(), 10, 2.0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sa.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 10);
    let nmaps = fs::read_dir(&sa)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "nmap"))
        .count();
    assert_eq!(nmaps, 10);
    for name in ["frame_00000.nmap", "frame_00009.nmap", "groundtruth.txt", "manifest.json"] {
        assert_eq!(fs::read(sa.join(name)).unwrap(), fs::read(sb.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn noise_free_sequence_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 100, 0.0);
    let cfg = write_config(dir.path(), &PipelineConfig::default());
    let (traj, csv) = (dir.path().join("est.txt"), dir.path().join("est.csv"));
    let o = mwrot(&[
        "estimate", "--manifest", s(&seq.join("manifest.json")), "--config", s(&cfg),
        "--out-traj", s(&traj), "--out-csv", s(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 101);
    let per_frame = dir.path().join("are.csv");
    let o = mwrot(&["eval", "--est", s(&traj), "--gt", s(&seq.join("groundtruth.txt")), "--csv", s(&per_frame)]);
    assert!(o.status.success());
    assert!(mean_line(&o.stdout) < 0.01);
    let rows = fs::read_to_string(&per_frame).unwrap();
    assert!(rows.starts_with("frame_index,timestamp,are_deg,up_err_deg"));
    assert_eq!(rows.lines().count(), 101);
}

#[test]
fn eval_absorbs_global_offsets_and_reports_noise() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 50, 0.0);
    let gt_path = seq.join("groundtruth.txt");
    let gt = Trajectory::read(&gt_path).unwrap();

    let o = mwrot(&["eval", "--est", s(&gt_path), "--gt", s(&gt_path)]);
    assert!(o.status.success());
    assert_eq!(mean_line(&o.stdout), 0.0);

    let roll = exp_map(&Vector3::new(7f64.to_radians(), 0.0, 0.0));
    let offset = Trajectory::new(gt.iter().map(|(t, r)| (*t, roll.compose(r))).collect()).unwrap();
    let offset_path = dir.path().join("offset.txt");
    offset.write(&offset_path).unwrap();
    let o = mwrot(&["eval", "--est", s(&offset_path), "--gt", s(&gt_path)]);
    assert!(mean_line(&o.stdout) < 0.0005);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noisy = Trajectory::new(
        gt.iter()
            .map(|(t, r)| {
                let axis = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
                (*t, r.compose(&exp_map(&(axis * 2f64.to_radians()))))
            })
            .collect(),
    )
    .unwrap();
    let noisy_path = dir.path().join("noisy.txt");
    noisy.write(&noisy_path).unwrap();
    let o = mwrot(&["eval", "--est", s(&noisy_path), "--gt", s(&gt_path)]);
    assert!((mean_line(&o.stdout) - 2.0).abs() < 0.2);
}

#[test]
fn unloadable_frames_are_dropped_or_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 20, 1.0);
    fs::write(seq.join("frame_00007.nmap"), b"garbage").unwrap();
    let manifest = seq.join("manifest.json");
    let run = |single: bool, tag: &str| {
        let cfg = write_config(dir.path(), &PipelineConfig::default());
        let traj = dir.path().join(format!("{tag}.txt"));
        let csv = dir.path().join(format!("{tag}.csv"));
        let mut args = vec![
            "estimate", "--manifest", s(&manifest), "--config", s(&cfg),
            "--out-traj", s(&traj), "--out-csv", s(&csv),
        ];
        if single {
            args.push("--single-frame");
        }
        let o = mwrot(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (Trajectory::read(&traj).unwrap(), fs::read_to_string(&csv).unwrap())
    };
    let (multi, csv) = run(false, "multi");
    assert_eq!(multi.len(), 20);
    assert!(csv.lines().nth(8).unwrap().starts_with("7,") && csv.contains(",dropped,"));
    let (single, _) = run(true, "single");
    assert_eq!(single.len(), 19);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mwrot(&["estimate"]).status.code(), Some(1));
    assert_eq!(mwrot(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mwrot(&["--help"]).status.code(), Some(0));
    let missing = dir.path().join("missing.txt");
    assert_eq!(mwrot(&["eval", "--est", s(&missing), "--gt", s(&missing)]).status.code(), Some(2));

    let bad_cfg = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::default().to_json()).unwrap();
    v["surprise"] = serde_json::json!(true);
    fs::write(&bad_cfg, v.to_string()).unwrap();
    let seq = synth(dir.path(), 3, 0.0);
    let o = mwrot(&[
        "estimate", "--manifest", s(&seq.join("manifest.json")), "--config", s(&bad_cfg),
        "--out-traj", s(&dir.path().join("t.txt")), "--out-csv", s(&dir.path().join("t.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("surprise"));

    let bad_traj = dir.path().join("bad.txt");
    fs::write(&bad_traj, "0.0 0 0 0 0 0 0 1\n1.0 0 0 0 0 0 zero 1\n").unwrap();
    let o = mwrot(&["eval", "--est", s(&bad_traj), "--gt", s(&bad_traj)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));
}

#[test]
fn fit_normalizer_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.kspl");
    assert!(mwrot(&["fit-normalizer", "--out", s(&out)]).status.success());
    let spline = KappaSpline::read(&out).unwrap();
    assert_eq!(spline, KappaSpline::fit_default().unwrap());
    assert!((spline.eval(0.0) - (4.0 * PI).ln()).abs() < 1e-9);
}

#[test]
fn segment_from_trajectory_and_from_frame() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 5, 1.0);
    let frame = seq.join("frame_00002.nmap");
    let gt = seq.join("groundtruth.txt");
    let a = dir.path().join("a.pgm");
    let o = mwrot(&[
        "segment", "--frame", s(&frame), "--traj", s(&gt), "--index", "2", "--threshold-deg", "20",
        "--out", s(&a),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(&a).unwrap();
    assert!(bytes.starts_with(b"P5\n45 45\n255\n"));
    let ground = bytes[13..].iter().filter(|b| **b == 255).count();
    // One sixth of 2000 samples see the floor.
    assert!((250..420).contains(&ground), "{ground}");

    let b = dir.path().join("b.pgm");
    let o = mwrot(&["segment", "--frame", s(&frame), "--threshold-deg", "20", "--out", s(&b)]);
    assert!(o.status.success());
    let single = fs::read(&b).unwrap();
    assert_eq!(single.len(), bytes.len());
    let agree = single.iter().zip(&bytes).filter(|(x, y)| x == y).count();
    assert!(agree as f64 > 0.99 * bytes.len() as f64);

    let o = mwrot(&[
        "segment", "--frame", s(&frame), "--traj", s(&gt), "--index", "99", "--threshold-deg", "20",
        "--out", s(&b),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
