use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
    "synth": {"stimuli": 40, "voxels": 9, "noiseless_voxels": [0, 4],
              "extractor": {"image_size": 32, "patch": 8, "channels": 3}},
    "encoder": {"hidden": 6, "query_out": 3},
    "train": {"max_epochs": 8},
    "tune": {"budget": 2},
    "cam": {"limit": 3}
}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// A config file plus a synthetic dataset and a trained checkpoint.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
        let f = Fixture { dir };
        assert_eq!(f.run(&["synth", "--out", &f.p("data")]), 0);
        assert_eq!(f.run(&["train", "--dataset", &f.p("data"), "--out", &f.p("train")]), 0);
        f
    }

    fn p(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> i32 {
        let cfg = self.p("cfg.json");
        let mut full = vec!["visenc", "--config", &cfg];
        full.extend_from_slice(args);
        visenc_cli::run(full)
    }

    fn summary(&self, out: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.path(out).join("summary.json")).unwrap()).unwrap()
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.clone(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn help_version_and_parse_errors() {
    assert_eq!(visenc_cli::run(["visenc", "--help"]), 0);
    assert_eq!(visenc_cli::run(["visenc", "--version"]), 0);
    assert_eq!(visenc_cli::run(["visenc", "train", "--help"]), 0);
    assert_eq!(visenc_cli::run(["visenc"]), 1);
    assert_eq!(visenc_cli::run(["visenc", "frobnicate"]), 1);
    assert_eq!(visenc_cli::run(["visenc", "train", "--seed", "minus-one"]), 1);
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let missing = dir.path().join("missing");
    let missing = missing.to_str().unwrap();
    assert_eq!(visenc_cli::run(["visenc", "train", "--out", out]), 1);
    assert_eq!(visenc_cli::run(["visenc", "train", "--dataset", missing, "--out", out]), 1);
    assert_eq!(visenc_cli::run(["visenc", "kl", "--out", out]), 1);
    assert_eq!(visenc_cli::run(["visenc", "eval", "--config", missing, "--out", out]), 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    assert_eq!(visenc_cli::run(["visenc", "synth", "--config", bad.to_str().unwrap(), "--out", out]), 1);
    assert_eq!(visenc_cli::run(["visenc", "synth", "--threads", "0", "--out", out]), 1);
    assert!(!dir.path().join("o/summary.json").exists());
}

#[test]
fn pipeline_artifacts_and_summaries() {
    let f = Fixture::new();
    let data = f.p("data");
    let ckpt = format!("{}/checkpoint", f.p("train"));
    let split = format!("{}/split.json", f.p("train"));
    let before = snapshot(&f.path("data"));

    let synth = f.summary("data");
    assert_eq!(synth["schema_version"], 1);
    assert_eq!(synth["command"], "synth");
    assert_eq!(synth["result"]["nc_max"], 100.0);
    assert!(synth["result"]["regions"].as_object().unwrap().len() >= 3);

    let train = f.summary("train");
    assert_eq!(train["result"]["split"]["train"], 32);
    for name in ["split.json", "train_report.json", "checkpoint/manifest.json"] {
        assert!(f.path("train").join(name).exists(), "{name}");
    }

    let common = ["--dataset", data.as_str(), "--checkpoint", ckpt.as_str(), "--split", split.as_str()];
    let with = |cmd: &str, out: &str| {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        args.extend_from_slice(&["--out", out]);
        f.run(&args)
    };
    assert_eq!(with("eval", &f.p("eval")), 0);
    let eval = f.summary("eval");
    assert_eq!(eval["result"]["partition"], "test");
    assert_eq!(eval["result"]["n_stimuli"], 4);
    let regions = eval["result"]["accuracy"]["regions"].as_object().unwrap();
    assert_eq!(regions.keys().collect::<Vec<_>>(), ["V1v", "V3v", "hV4"]);
    assert!(fs::read_to_string(f.path("eval/accuracy.csv")).unwrap().starts_with("region,n_voxels,accuracy\nall,"));

    assert_eq!(with("cam", &f.p("cam")), 0);
    let maps = format!("{}/maps", f.p("cam"));
    for region in ["hV4", "V3v", "V1v"] {
        for id in ["syn0000", "syn0001", "syn0002"] {
            assert!(Path::new(&maps).join(region).join(format!("{id}.visf")).exists());
            let pgm = fs::read(Path::new(&maps).join(region).join(format!("{id}.pgm"))).unwrap();
            assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
        }
    }

    assert_eq!(f.run(&["kl", "--maps", &maps, "--out", &f.p("kl")]), 0);
    let kl = f.summary("kl")["result"].clone();
    assert_eq!((kl["anchor"].as_str(), kl["near"].as_str(), kl["far"].as_str()), (Some("hV4"), Some("V3v"), Some("V1v")));
    for pair in kl["pairs"].as_array().unwrap() {
        let (ab, ba, j) = (pair["kl_ab"].as_f64().unwrap(), pair["kl_ba"].as_f64().unwrap(), pair["j"].as_f64().unwrap());
        assert!((j - 0.5 * (ab + ba)).abs() < 1e-12);
    }
    assert!(kl.get("ratio").is_some());

    assert_eq!(f.run(&["pf", "--maps", &maps, "--dataset", &data, "--out", &f.p("pf")]), 0);
    let pf = f.summary("pf")["result"].clone();
    assert_eq!(pf["per_image"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(f.path("pf/pf.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    assert_eq!(with("embed", &f.p("embed")), 0);
    let embed = f.summary("embed")["result"].clone();
    assert_eq!(embed["n_points"], 40);
    assert!(fs::read_to_string(f.path("embed/embedding.svg")).unwrap().starts_with("<svg"));

    // Nothing above touched the dataset.
    assert_eq!(snapshot(&f.path("data")), before);

    // No absolute paths leak into results.
    let root = f.dir.path().to_str().unwrap();
    for out in ["data", "train", "eval", "cam", "kl", "pf", "embed"] {
        assert!(!f.summary(out)["result"].to_string().contains(root), "{out}");
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out_cfg = dir.path().join("from-config");
    fs::write(
        &cfg,
        format!(
            r#"{{"seed": 5, "out": {:?}, "synth": {{"stimuli": 12, "voxels": 3, "extractor": {{"image_size": 16, "patch": 8, "channels": 3}}}}}}"#,
            out_cfg
        ),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(visenc_cli::run(["visenc", "synth", "--config", cfg]), 0);
    let s: Value = serde_json::from_str(&fs::read_to_string(out_cfg.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["seed"], 5);

    let out_flag = dir.path().join("from-flag");
    assert_eq!(
        visenc_cli::run(["visenc", "synth", "--config", cfg, "--seed", "6", "--out", out_flag.to_str().unwrap()]),
        0
    );
    let s: Value = serde_json::from_str(&fs::read_to_string(out_flag.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["seed"], 6);
    assert_ne!(
        fs::read(out_cfg.join("responses.visf")).unwrap(),
        fs::read(out_flag.join("responses.visf")).unwrap()
    );
}

#[test]
fn synth_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        assert_eq!(visenc_cli::run(["visenc", "synth", "--config", cfg, "--out", out.to_str().unwrap()]), 0);
        fs::remove_file(out.join("summary.json")).unwrap();
    }
    let strip = |d: &str| -> Vec<(PathBuf, Vec<u8>)> {
        let root = dir.path().join(d);
        snapshot(&root)
            .into_iter()
            .map(|(p, b)| (p.strip_prefix(&root).unwrap().to_path_buf(), b))
            .collect()
    };
    assert_eq!(strip("a"), strip("b"));
}

#[test]
fn tune_resumes_from_its_log() {
    let f = Fixture::new();
    let data = f.p("data");
    let out = f.p("tune");
    assert_eq!(f.run(&["tune", "--dataset", &data, "--out", &out]), 0);
    let log = f.path("tune/trials.jsonl");
    let first = fs::read_to_string(&log).unwrap();
    assert_eq!(first.lines().count(), 2);

    let bigger = f.path("cfg3.json");
    fs::write(&bigger, SMALL.replace(r#""budget": 2"#, r#""budget": 3"#)).unwrap();
    let code = visenc_cli::run(["visenc", "--config", bigger.to_str().unwrap(), "tune", "--dataset", &data, "--out", &out]);
    assert_eq!(code, 0);
    let second = fs::read_to_string(&log).unwrap();
    assert_eq!(second.lines().count(), 3);
    assert!(second.starts_with(&first));
    let summary = f.summary("tune");
    assert_eq!(summary["result"]["resumed_from"], 2);
    assert!(f.path("tune/best.json").exists());
}

#[test]
fn tune_rejects_unknown_dimensions() {
    let f = Fixture::new();
    let cfg = f.path("unknown.json");
    fs::write(
        &cfg,
        r#"{"tune": {"space": [{"name": "dropout", "kind": "continuous", "low": 0.0, "high": 0.5, "log": false}]}}"#,
    )
    .unwrap();
    let code = visenc_cli::run(["visenc", "--config", cfg.to_str().unwrap(), "tune", "--dataset", &f.p("data"), "--out", &f.p("t")]);
    assert_eq!(code, 1);
}

#[test]
fn cam_refuses_external_features() {
    let f = Fixture::new();
    let stimuli = f.path("data/stimuli.json");
    let mut index: Value = serde_json::from_str(&fs::read_to_string(&stimuli).unwrap()).unwrap();
    index["extractor"] = serde_json::json!({"kind": "external", "model": "some-vit", "layer": "last"});
    let external = f.path("external.json");
    fs::write(&external, index.to_string()).unwrap();

    let cfg = f.path("ext-cfg.json");
    fs::write(
        &cfg,
        format!(r#"{{"dataset": {:?}, "paths": {{"stimuli": {:?}}}}}"#, f.path("data"), external),
    )
    .unwrap();
    let ckpt = format!("{}/checkpoint", f.p("train"));
    let code = visenc_cli::run(["visenc", "--config", cfg.to_str().unwrap(), "cam", "--checkpoint", &ckpt, "--out", &f.p("c")]);
    assert_eq!(code, 1);
    // Other commands still work on such a dataset.
    let code = visenc_cli::run(["visenc", "--config", cfg.to_str().unwrap(), "eval", "--checkpoint", &ckpt, "--out", &f.p("e")]);
    assert_eq!(code, 0);
}

#[test]
fn mismatched_checkpoint_is_invalid() {
    let f = Fixture::new();
    let other = f.path("other.json");
    fs::write(&other, SMALL.replace(r#""voxels": 9"#, r#""voxels": 6"#)).unwrap();
    let other = other.to_str().unwrap();
    assert_eq!(visenc_cli::run(["visenc", "--config", other, "synth", "--out", &f.p("data6")]), 0);
    let ckpt = format!("{}/checkpoint", f.p("train"));
    let code = visenc_cli::run(["visenc", "--config", other, "eval", "--dataset", &f.p("data6"), "--checkpoint", &ckpt, "--out", &f.p("e")]);
    assert_eq!(code, 1);
}
