use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
seed = 11
[sensor]
gain = 1.0
[budget]
horizon = "3ms"
frames = 3
readout = "0us"
idle_slot = IDLE
[scene]
irradiance_range = [6e-3, 7e-3]
size = 16
samples = 21
margin = 24
[motion]
max_step_angle = MOTION
[loss]
[train]
hidden = 2
kernel_side = 3
log_every = 2
"#;

fn config_text(idle: bool, motion: f64) -> String {
    BASE.replace("IDLE", &idle.to_string()).replace("MOTION", &motion.to_string())
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn exposim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exposim")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_sensor_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(true, 0.004).replace("[sensor]\ngain = 1.0\n", "");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = exposim(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("sensor"), "{}", stderr(&out));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(true, 0.004).replace("frames = 3", "frames = 3\nframe_rate = 30");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = exposim(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("frame_rate"), "{}", stderr(&out));
}

#[test]
fn infeasible_budget_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(false, 0.004).replace("readout = \"0us\"", "readout = \"1500us\"");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = exposim(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn simulate_writes_reproducible_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &config_text(true, 0.004));
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        let o = exposim(&["simulate", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = exposim(&["--seed", "12", "simulate", "--config", s(&cfg), "--out", s(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let manifest = read_json(&a.join("manifest.json"));
    let frames = manifest["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 3);
    for f in frames {
        let name = f["file"].as_str().unwrap();
        let bytes = fs::read(a.join(name)).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n1023\n"), "{name}");
        assert_eq!(bytes.len(), 14 + 2 * 16 * 16);
        assert_eq!(bytes, fs::read(b.join(name)).unwrap(), "{name}");
        assert_ne!(bytes, fs::read(c.join(name)).unwrap(), "{name}");
        assert!(f["exposure_s"].as_f64().unwrap() > 0.0);
    }
    assert!(a.join("ground_truth.pgm").exists());
}

#[test]
fn simulate_honours_the_frame_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &config_text(true, 0.004));
    let out = dir.path().join("o");
    let o = exposim(&["simulate", "--config", s(&cfg), "--frames", "5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_json(&out.join("manifest.json"))["frames"].as_array().unwrap().len(), 5);
}

#[test]
fn zero_iterations_give_the_uniform_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &config_text(false, 0.004));
    let run = dir.path().join("run");
    let o = exposim(&["train", "--config", s(&cfg), "--out", s(&run), "--iterations", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_json(&run.join("manifest.json"));
    assert_eq!(m["status"], "completed");
    for dt in m["schedule"]["dts_us"].as_array().unwrap() {
        assert!((dt.as_f64().unwrap() - 1000.0).abs() < 1e-9);
    }
}

fn progress_iterations(o: &Output) -> Vec<u64> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .filter_map(|l| l.strip_prefix("iter="))
        .map(|l| l.split_whitespace().next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &config_text(true, 0.004));
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for run in [&a, &b] {
        let o = exposim(&["train", "--config", s(&cfg), "--out", s(run), "--iterations", "6"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(progress_iterations(&o), vec![2, 4, 6]);
        let line = String::from_utf8_lossy(&o.stdout).lines().next().unwrap().to_string();
        for key in ["iter=", "loss=", "psnr=", "temperature=", "dts_us="] {
            assert!(line.contains(key), "{line}");
        }
    }
    for file in ["manifest.json", "history.csv", "model.bin"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }

    let o = exposim(&["train", "--config", s(&cfg), "--out", s(&c), "--iterations", "6", "--stop-after", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let partial = read_json(&c.join("manifest.json"));
    assert_eq!(partial["status"], "running");
    assert_eq!(partial["iterations_done"], 3);
    let o = exposim(&["train", "--resume", s(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(progress_iterations(&o), vec![4, 6]);
    for file in ["manifest.json", "history.csv", "model.bin"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(c.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn divergence_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(false, 0.0).replace("log_every = 2", "log_every = 2\nlr_model = 1e200");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let run = dir.path().join("run");
    let o = exposim(&["train", "--config", s(&cfg), "--out", s(&run), "--iterations", "30"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert_eq!(read_json(&run.join("manifest.json"))["status"], "diverged");
}

#[test]
fn oracle_reports_a_flat_static_surface() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(false, 0.0).replace("[train]", "[train]\nmerge = \"average_merge\"");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("o");
    let o = exposim(&["oracle", "--config", s(&cfg), "--resolution", "5", "--draws", "32", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut reader = csv::Reader::from_path(out.join("surface.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (loss, se) = (col("loss_mean"), col("loss_se"));
    let rows: Vec<(f64, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[loss].parse().unwrap(), r[se].parse().unwrap())
        })
        .collect();
    // compositions of 4 grid steps into 3 positive parts
    assert_eq!(rows.len(), 3);
    let argmin = read_json(&out.join("argmin.json"));
    assert_eq!(argmin["points"], 3);
    let alphas: f64 = argmin["alphas"].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).sum();
    assert!((alphas - 1.0).abs() < 1e-9);
    let best = argmin["loss_mean"].as_f64().unwrap();
    for (l, e) in rows {
        assert!(l - best <= 3.0 * e, "{l} vs best {best} (se {e})");
    }
}

#[test]
fn oracle_counts_idle_grid_points() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(true, 0.0).replace("[train]", "[train]\nmerge = \"average_merge\"");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("o");
    let o = exposim(&["oracle", "--config", s(&cfg), "--resolution", "6", "--draws", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    // three positive frame shares and a nonnegative idle share of 5 steps
    let rows = csv::Reader::from_path(out.join("surface.csv")).unwrap().records().count();
    assert_eq!(rows, 10);
    let argmin = read_json(&out.join("argmin.json"));
    let alphas = argmin["alphas"].as_array().unwrap();
    assert_eq!(alphas.len(), 4);
    let total: f64 = alphas.iter().map(|a| a.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn eval_writes_the_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &config_text(true, 0.004));
    let run = dir.path().join("run");
    let o = exposim(&["train", "--config", s(&cfg), "--out", s(&run), "--iterations", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = exposim(&["eval", "--manifest", s(&run), "--n-scenes", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("condition,psnr_mean,psnr_std,ssim_mean,ssim_std,n_scenes"));
    let conditions: Vec<&str> = lines.clone().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(conditions, ["learned", "uniform", "full_exposure"]);
    assert!(lines.all(|l| l.ends_with(",3")));

    let o = exposim(&["eval", "--manifest", s(&run), "--n-scenes", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).lines().skip(1).all(|l| l.ends_with(",2")));
}
