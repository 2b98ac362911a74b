use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "generator": {"image_size": 32, "frames_per_video": 4, "fully_labeled": 2, "weakly_labeled": 4,
                "validation": 2, "test": 2, "target_sigma": [1.5, 2.5], "seed": 11},
  "detector": {"channels1": 3, "channels2": 4},
  "training": {"epochs_burn_in": 2, "epochs_mutual": 1, "batch_size": 4, "frames_per_video": 3}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_weakvid"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn weakvid")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
    data: String,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let data = root.join("data");
        let f = Self { _dir: dir, root, config: config.display().to_string(), data: data.display().to_string() };
        let out = run(&["--config", &f.config, "generate", "--out", &f.data]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn generate_writes_manifests_and_refuses_to_overwrite() {
    let f = Fixture::new();
    let data = Path::new(&f.data);
    let counts: Vec<usize> = ["fully_labeled", "weakly_labeled", "validation", "test"]
        .iter()
        .map(|s| read_json(&data.join(s).join("manifest.json"))["videos"].as_array().unwrap().len())
        .collect();
    assert_eq!(counts, vec![2, 4, 2, 2]);
    let before = fs::read(data.join("test/manifest.json")).unwrap();

    let again = run(&["--config", &f.config, "generate", "--out", &f.data]);
    assert_eq!(code(&again), 2);
    let forced = run(&["--config", &f.config, "generate", "--out", &f.data, "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(fs::read(data.join("test/manifest.json")).unwrap(), before);
    assert_eq!(fs::read(data.join("test/annotations.jsonl")).unwrap().len() > 0, true);
}

#[test]
fn generate_creates_missing_parent_directories() {
    let f = Fixture::new();
    let nested = f.path("a/b/c");
    assert_eq!(code(&run(&["--config", &f.config, "generate", "--out", &nested])), 0);
    assert!(Path::new(&nested).join("weakly_labeled/manifest.json").exists());
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let f = Fixture::new();
    let out = f.path("t");
    let bad = run(&["--config", &f.config, "train", "--data", &f.data, "--out", &out, "--variant", "+strong"]);
    assert_eq!(code(&bad), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    let missing = run(&["--config", &f.config, "burn-in", "--data", &f.path("nowhere"), "--out", &out]);
    assert_eq!(code(&missing), 3);
    let bad_beta = run(&["--config", &f.config, "burn-in", "--data", &f.data, "--out", &out, "--beta", "1.5"]);
    assert_eq!(code(&bad_beta), 2);
}

#[test]
fn burn_in_mutual_and_evaluate() {
    let f = Fixture::new();
    let burn = f.path("burn");
    let out = run(&["--config", &f.config, "burn-in", "--data", &f.data, "--out", &burn, "--alpha-e-burn-in", "0.5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = read_json(&Path::new(&burn).join("config.json"));
    assert_eq!(cfg["tsmr"]["alpha_e_burn_in"], 0.5);
    let curves = fs::read_to_string(Path::new(&burn).join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3);

    let init = Path::new(&burn).join("checkpoints/final.theta_epoch").display().to_string();
    let mutual = f.path("mutual");
    let out = run(&["--config", &f.config, "mutual-learn", "--data", &f.data, "--init", &init, "--out", &mutual, "--n-fpv", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&mutual).join("schedule.csv").exists());
    assert!(Path::new(&mutual).join("pseudo_labels").exists());

    let not_mutual = run(&["--config", &f.config, "mutual-learn", "--data", &f.data, "--init", &init, "--out", &f.path("m2"), "--variant", "full"]);
    assert_eq!(code(&not_mutual), 2);

    let eval = f.path("eval");
    let teacher = Path::new(&mutual).join("checkpoints/final.theta_epoch").display().to_string();
    let out = run(&["--config", &f.config, "evaluate", "--data", &f.data, "--params", &teacher, "--out", &eval]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&Path::new(&eval).join("eval.json"));
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert!(fs::read_to_string(Path::new(&eval).join("pr_curve.csv")).unwrap().starts_with("confidence,recall,precision"));
}

#[test]
fn train_summary_matches_per_seed_results() {
    let f = Fixture::new();
    let out = f.path("train");
    let res = run(&["--config", &f.config, "train", "--data", &f.data, "--out", &out, "--variant", "+weak", "--seeds", "1,2", "--repeats", "2"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let s = read_json(&Path::new(&out).join("summary.json"));
    let vals: Vec<f64> = s["runs"].as_array().unwrap().iter().map(|r| r["test_map"].as_f64().unwrap()).collect();
    assert_eq!(vals.len(), 2);
    let mean = vals.iter().sum::<f64>() / 2.0;
    let std = ((vals[0] - mean).powi(2) + (vals[1] - mean).powi(2)).sqrt();
    assert!((s["summary"][0]["test_mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((s["summary"][0]["test_std"].as_f64().unwrap() - std).abs() < 1e-12);
    assert!(Path::new(&out).join("pweak/seed_2/curves.csv").exists());
    assert!(Path::new(&out).join("burn_in/seed_1/checkpoints/final.theta").exists());

    // the burn-in-only variant runs no mutual stage
    let full = f.path("full");
    assert_eq!(code(&run(&["--config", &f.config, "train", "--data", &f.data, "--out", &full, "--variant", "full", "--repeats", "1"])), 0);
    let sched = fs::read_to_string(Path::new(&full).join("full/seed_0/schedule.csv")).unwrap();
    assert!(sched.lines().count() <= 1);

    let plots = f.path("plots");
    let p = run(&["plot", &out, "--out", &plots]);
    assert_eq!(code(&p), 0, "{}", String::from_utf8_lossy(&p.stderr));
    assert!(Path::new(&plots).join("learning_curves.svg").exists());
    let single = run(&["plot", &full, "--out", &plots]);
    assert_eq!(code(&single), 0);
    assert!(String::from_utf8_lossy(&single.stderr).contains("warning"));
}

#[test]
fn plot_rejects_empty_curves() {
    let f = Fixture::new();
    let dir = f.root.join("empty");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("curves.csv"), "").unwrap();
    let out = run(&["plot", &dir.display().to_string(), "--out", &f.path("p")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ablation_grid_has_thirteen_rows_per_repeat() {
    let f = Fixture::new();
    let out = f.path("ablate");
    let res = run(&["--config", &f.config, "ablate", "--data", &f.data, "--out", &out, "--repeats", "1", "--epochs-burn-in", "1"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(Path::new(&out).join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 13);
    let results = fs::read_to_string(Path::new(&out).join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 13);
    let md = fs::read_to_string(Path::new(&out).join("ablation.md")).unwrap();
    assert!(md.contains("fraction=0.5") && md.contains("alpha_e=adaptive"));

    let plots = f.path("plots");
    assert_eq!(code(&run(&["plot", &out, "--out", &plots])), 0);
    assert!(Path::new(&plots).join("fraction.svg").exists());
}
