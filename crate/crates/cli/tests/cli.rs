use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use moepipe::{HardwareProfile, ModelSpec, Variant};
use moepipe_cli::artifacts::{read_accuracy, read_comparison, read_memory, read_metrics, read_timeline};
use moepipe_cli::config::{load_config, BatchCount};
use moepipe_cli::runner::run_point;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn moepipe(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moepipe"))
        .args(args)
        .env("MOEPIPE_OUT_DIR", out)
        .output()
        .expect("spawn moepipe")
}

fn run_ok(args: &[&str], out: &Path) -> String {
    let o = moepipe(args, out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn cfg_path(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

#[test]
fn toy_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    run_ok(&["run", &cfg_path("toy.toml")], dir.path());
    assert!(t.elapsed() < Duration::from_secs(5));
    let root = dir.path().join("toy");
    let rows = read_comparison(&root.join("comparison.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    for v in Variant::ALL {
        let d = root.join(v.name());
        for f in ["metrics.json", "timeline.json", "memory.csv", "accuracy.csv"] {
            assert!(d.join(f).is_file(), "missing {}", d.join(f).display());
        }
    }
}

#[test]
fn artifacts_round_trip_through_readers() {
    let dir = tempfile::tempdir().unwrap();
    let path = configs().join("toy.toml");
    run_ok(&["run", path.to_str().unwrap()], dir.path());
    let cfg = load_config(&path).unwrap();
    let BatchCount::Fixed(n) = cfg.workload.n else {
        panic!("toy config uses a fixed n");
    };
    let d = dir.path().join("toy").join("expert_aware");
    let p = run_point(&cfg, Variant::ExpertAware, n).unwrap();

    let m = read_metrics(&d.join("metrics.json")).unwrap();
    assert_eq!((m.variant, m.n, m.k), (Variant::ExpertAware, n, cfg.run.k));
    assert_eq!(m.metrics, p.metrics);

    let timeline = read_timeline(&d.join("timeline.json")).unwrap();
    assert_eq!(timeline.len(), p.result.events.len());
    for (a, b) in timeline.iter().zip(&p.result.events) {
        assert_eq!((a.op, a.start, a.end), (b.op, b.start, b.end));
        assert_eq!((a.stream.as_str(), a.kind.as_str()), (b.stream.name(), b.kind.name()));
    }
    assert_eq!(read_memory(&d.join("memory.csv")).unwrap(), p.result.vram_timeline);
    assert_eq!(read_accuracy(&d.join("accuracy.csv")).unwrap(), p.accuracy);
}

#[test]
fn ablation_rows_increase_in_throughput() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["run", &cfg_path("ablation.toml")], dir.path());
    let rows = read_comparison(&dir.path().join("ablation").join("comparison.csv")).unwrap();
    let order: Vec<Variant> = rows.iter().map(|r| r.variant).collect();
    assert_eq!(order, Variant::ALL.to_vec());
    for w in rows.windows(2) {
        assert!(
            w[1].throughput_tok_s > w[0].throughput_tok_s,
            "{:?} {} !> {:?} {}",
            w[1].variant,
            w[1].throughput_tok_s,
            w[0].variant,
            w[0].throughput_tok_s
        );
    }
}

#[test]
fn sweep_throughput_rises_to_a_plateau() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["sweep", &cfg_path("sweep_n.toml")], dir.path());
    let sweep = dir.path().join("sweep_n").join("sweep");
    let rows = read_comparison(&sweep.join("sweep.csv")).unwrap();
    assert!(rows.len() >= 8);
    for w in rows.windows(2) {
        assert!(w[1].n > w[0].n);
        assert!(w[1].throughput_tok_s >= w[0].throughput_tok_s * 0.99);
    }
    // gain per added batch shrinks toward the end
    let per_batch = |i: usize| {
        (rows[i].throughput_tok_s - rows[i - 1].throughput_tok_s) / (rows[i].n - rows[i - 1].n) as f64
    };
    assert!(per_batch(rows.len() - 1) < per_batch(1) / 4.0);
    assert!(sweep.join("n001-expert_aware").join("metrics.json").is_file());
}

#[test]
fn identical_configs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        run_ok(&["run", &cfg_path("toy.toml")], d.path());
    }
    for v in Variant::ALL {
        for f in ["metrics.json", "timeline.json", "memory.csv", "accuracy.csv"] {
            let x = fs::read(a.path().join("toy").join(v.name()).join(f)).unwrap();
            let y = fs::read(b.path().join("toy").join(v.name()).join(f)).unwrap();
            assert!(x == y, "{} {f} differs", v.name());
        }
    }
    let x = fs::read(a.path().join("toy").join("comparison.csv")).unwrap();
    let y = fs::read(b.path().join("toy").join("comparison.csv")).unwrap();
    assert_eq!(x, y);
}

#[test]
fn seed_flag_changes_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let toy = cfg_path("toy.toml");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    run_ok(&["trace", "gen", &toy, "-o", a.to_str().unwrap()], dir.path());
    run_ok(&["--seed", "99", "trace", "gen", &toy, "-o", b.to_str().unwrap()], dir.path());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let report = run_ok(&["trace", "inspect", a.to_str().unwrap()], dir.path());
    assert!(report.contains("2 layers"), "{report}");
    let json = run_ok(&["--format", "json", "trace", "inspect", b.to_str().unwrap()], dir.path());
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn plan_reports_binding_condition() {
    let dir = tempfile::tempdir().unwrap();
    let text = run_ok(&["plan", &cfg_path("sweep_n.toml")], dir.path());
    assert!(text.contains("binding "), "{text}");
    let json = run_ok(&["--format", "json", "plan", &cfg_path("sweep_n.toml")], dir.path());
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v["n_batches"].as_u64().unwrap() >= 1);
    assert!(v["solution"]["binding"].is_string());
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let presets = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    let text = format!(
        "include = [\"{}\", \"{}\"]\n{body}",
        presets.join("mixtral-8x7b.toml").display(),
        presets.join("env1.toml").display()
    );
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

const GOOD_BODY: &str = "\
[model]
n_layers = 2

[workload]
skew = { kind = \"uniform\" }
seed = 1
batch_size = 4
n = 2
prompt_len = 2
gen_len = 2

[run]
variants = [\"expert_aware\"]
k = 2
";

#[test]
fn bad_values_are_reported_with_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &GOOD_BODY.replace("batch_size = 4", "batch_size = 0"));
    let o = moepipe(&["run", path.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("exp.toml:8:") && err.contains("batch_size"), "{err}");

    let path = write_config(dir.path(), &GOOD_BODY.replace("k = 2", "k = 2\nmystery = 1"));
    let err = String::from_utf8_lossy(&moepipe(&["run", path.to_str().unwrap()], dir.path()).stderr).into_owned();
    assert!(err.contains("exp.toml:16:") && err.contains("mystery"), "{err}");

    let path = write_config(dir.path(), &GOOD_BODY.replace("\nn = 2", "\nn = \"lots\""));
    let err = String::from_utf8_lossy(&moepipe(&["run", path.to_str().unwrap()], dir.path()).stderr).into_owned();
    assert!(err.contains("exp.toml:9:"), "{err}");

    let path = write_config(dir.path(), &GOOD_BODY.replace("seed = 1", "seed = = 1"));
    let err = String::from_utf8_lossy(&moepipe(&["run", path.to_str().unwrap()], dir.path()).stderr).into_owned();
    assert!(err.contains("exp.toml:7:"), "{err}");
}

#[test]
fn infeasible_memory_cites_the_deficit() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{GOOD_BODY}\n[hardware]\nvram_capacity = 1000000000\n");
    let path = write_config(dir.path(), &body);
    let o = moepipe(&["run", path.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("vram") && err.contains("short"), "{err}");
}

#[test]
fn out_dir_flag_beats_the_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    run_ok(
        &["--out-dir", flag_dir.path().to_str().unwrap(), "run", &cfg_path("toy.toml")],
        env_dir.path(),
    );
    assert!(flag_dir.path().join("toy").join("comparison.csv").is_file());
    assert!(!env_dir.path().join("toy").exists());
}

#[test]
fn presets_match_library_profiles() {
    let presets = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    let read = |name: &str| fs::read_to_string(presets.join(name)).unwrap();
    #[derive(serde::Deserialize)]
    struct M {
        model: ModelSpec,
    }
    #[derive(serde::Deserialize)]
    struct H {
        hardware: HardwareProfile,
    }
    let m: M = toml::from_str(&read("mixtral-8x7b.toml")).unwrap();
    assert_eq!(m.model, ModelSpec::mixtral_8x7b());
    let m: M = toml::from_str(&read("mixtral-8x22b.toml")).unwrap();
    assert_eq!(m.model, ModelSpec::mixtral_8x22b());
    let h: H = toml::from_str(&read("env1.toml")).unwrap();
    assert_eq!(h.hardware, HardwareProfile::env1());
    let h: H = toml::from_str(&read("env2.toml")).unwrap();
    assert_eq!(h.hardware, HardwareProfile::env2());
}

#[test]
fn every_bundled_config_loads() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        load_config(&path).unwrap_or_else(|e| panic!("{e}"));
    }
}
