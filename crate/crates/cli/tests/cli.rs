use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mbslam::dataset::{load_groundtruth, load_tum_dataset, parse_trajectory, write_trajectory, DEFAULT_ASSOC_TOLERANCE};
use mbslam::eval::ate_rmse;
use mbslam::lie::PoseSE3;
use nalgebra::Vector3;
use tempfile::tempdir;

fn mbslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbslam"))
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

fn value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).or_else(|| l.strip_prefix(&format!("{key}="))))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .to_string()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--output", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = mbslam(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_lists_every_flag() {
    let o = mbslam(&["run", "--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for flag in [
        "--config",
        "--output",
        "--seed",
        "--threads",
        "--n-virtual",
        "--no-blur-model",
        "--exposure",
    ] {
        assert!(text.contains(flag), "{flag} missing from\n{text}");
    }
    let top = stdout(&mbslam(&["--help"]));
    for sub in ["run", "synth", "eval"] {
        assert!(top.contains(sub));
    }
}

#[test]
fn missing_dataset_is_an_io_failure() {
    let o = mbslam(&["run", "/definitely/not/here"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).trim(), "dataset: /definitely/not/here: not found");
}

#[test]
fn config_precedence_matrix() {
    let dir = tempdir().unwrap();
    let file = dir.path().join("c.txt");
    fs::write(&file, "tracker.n_virtual = 7\nmapper.n_virtual = 7\npipeline.seed = 11\n").unwrap();
    let f = file.to_str().unwrap();
    let cases: [(&[&str], &str, &str); 6] = [
        (&[], "13", "0"),
        (&["--config", f], "7", "11"),
        (&["--n-virtual", "5"], "5", "0"),
        (&["--config", f, "--n-virtual", "5"], "5", "11"),
        (&["--config", f, "--seed", "3"], "7", "3"),
        (&["--config", f, "--no-blur-model"], "1", "11"),
    ];
    for (flags, n, seed) in cases {
        let mut args = vec!["run", "unused", "--print-config"];
        args.extend_from_slice(flags);
        let o = mbslam(&args);
        assert!(o.status.success(), "{flags:?}: {}", stderr(&o));
        let text = stdout(&o);
        assert_eq!(value(&text, "tracker.n_virtual"), n, "{flags:?}");
        assert_eq!(value(&text, "mapper.n_virtual"), n, "{flags:?}");
        assert_eq!(value(&text, "pipeline.seed"), seed, "{flags:?}");
    }
}

#[test]
fn bad_config_reports_file_and_line() {
    let dir = tempdir().unwrap();
    let file = dir.path().join("c.txt");
    fs::write(&file, "tracker.n_virtual = 7\nnonsense\n").unwrap();
    let o = mbslam(&["run", "unused", "--print-config", "--config", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("c.txt:2:"), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, &["--frames", "3", "--n-oracle", "4", "--seed", "5"]);
    synth(&b, &["--frames", "3", "--n-oracle", "4", "--seed", "5"]);
    let source = load_tum_dataset(&a, DEFAULT_ASSOC_TOLERANCE).unwrap();
    assert_eq!(source.entries.len(), 3);
    for e in &source.entries {
        for rel in [&e.rgb, &e.depth] {
            assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap());
        }
    }
    for name in ["groundtruth.txt", "groundtruth_start.txt", "groundtruth_end.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        assert_eq!(load_groundtruth(&a.join(name)).unwrap().len(), 3);
    }
}

#[test]
fn zero_exposure_writes_sharp_frames() {
    let dir = tempdir().unwrap();
    synth(dir.path(), &["--frames", "2", "--exposure", "0"]);
    let source = load_tum_dataset(dir.path(), DEFAULT_ASSOC_TOLERANCE).unwrap();
    for e in &source.entries {
        let name = e.rgb.file_name().unwrap();
        let blurry = fs::read(dir.path().join(&e.rgb)).unwrap();
        let sharp = fs::read(dir.path().join("sharp").join(name)).unwrap();
        assert_eq!(blurry, sharp);
    }
}

#[test]
fn eval_reports_ate() {
    let dir = tempdir().unwrap();
    let gt: Vec<(f64, PoseSE3)> = (0..6)
        .map(|i| {
            let t = i as f64 * 0.1;
            (t, PoseSE3::from_translation(Vector3::new(t, (3.0 * t).sin(), 0.2 * t * t)))
        })
        .collect();
    let est: Vec<(f64, PoseSE3)> = gt
        .iter()
        .enumerate()
        .map(|(i, (t, p))| {
            let wobble = if i % 2 == 0 { 0.01 } else { -0.01 };
            (*t, p.compose(&PoseSE3::from_translation(Vector3::new(0.0, 0.0, wobble))))
        })
        .collect();
    let (gt_path, est_path) = (dir.path().join("gt.txt"), dir.path().join("est.txt"));
    write_trajectory(&gt_path, &gt).unwrap();
    write_trajectory(&est_path, &est).unwrap();
    let (g, e) = (gt_path.to_str().unwrap(), est_path.to_str().unwrap());

    let same = stdout(&mbslam(&["eval", g, g]));
    assert!(value(&same, "ate.rmse").parse::<f64>().unwrap() < 1e-12);

    let o = mbslam(&["eval", e, g]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got: f64 = value(&stdout(&o), "ate.rmse").parse().unwrap();
    let gt_back = parse_trajectory(&fs::read_to_string(&gt_path).unwrap(), &gt_path).unwrap();
    let est_back = parse_trajectory(&fs::read_to_string(&est_path).unwrap(), &est_path).unwrap();
    let expected = ate_rmse(&est_back, &gt_back, DEFAULT_ASSOC_TOLERANCE, false).unwrap().rmse;
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert!(got > 0.001 && got <= 0.01);

    let shifted: Vec<(f64, PoseSE3)> = gt.iter().map(|(t, p)| (t + 0.05, *p)).collect();
    let shifted_path = dir.path().join("shifted.txt");
    write_trajectory(&shifted_path, &shifted).unwrap();
    let o = mbslam(&["eval", shifted_path.to_str().unwrap(), g, "--tolerance", "0.01"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("insufficient"), "{}", stderr(&o));
}

#[test]
fn run_writes_outputs_deterministically() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &["--frames", "3", "--n-oracle", "8"]);
    let cfg = dir.path().join("fast.txt");
    fs::write(&cfg, "mapper.iterations = 8\npipeline.init_iterations = 10\n").unwrap();
    let mut outputs = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let o = mbslam(&[
            "run",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--n-virtual",
            "3",
            "--threads",
            "1",
            "--output",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(out);
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    for name in ["trajectory_mid.txt", "trajectory_start.txt", "trajectory_end.txt", "map.ckpt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let mid = load_groundtruth(&a.join("trajectory_mid.txt")).unwrap();
    assert_eq!(mid.len(), 3);
    let report = fs::read_to_string(a.join("report.txt")).unwrap();
    assert_eq!(value(&report, "mapper.iterations"), "8");
    assert!(report.contains("ate.rmse="));
    assert!(fs::read_dir(a.join("renders")).unwrap().count() >= 1);
}
