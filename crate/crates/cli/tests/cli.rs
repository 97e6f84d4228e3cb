use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvad_core::cloud::PointLabels;
use mvad_core::encoder::{save_features, FeatureDims, MockEncoder};
use mvad_core::learning::HISTORY_HEADER;
use mvad_core::manifest::{load_manifest, save_manifest, Split};
use mvad_core::render::{render_views, ViewConfig};
use mvad_core::scoring::encode_views;
use mvad_core::synthetic::{synthetic_dataset, write_dataset, SyntheticConfig};

const CONFIG: &str = r#"
workers = 2

[views]
views = 3
height = 64
width = 64
grid_h = 8
grid_w = 8
splat_radius = 0

[provider]
kind = "mock"
dim = 16
seed = 1

[optimizer]
epochs = 4
"#;

fn mvad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvad"))
        .args(args)
        .env_remove("MVAD_CONFIG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    manifest: PathBuf,
    config: PathBuf,
}

fn fixture(train: usize, test: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        points: 400,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let tr = synthetic_dataset("tr", train, &cfg);
    let te = synthetic_dataset("te", test, &SyntheticConfig { seed: 4, ..cfg });
    let manifest = write_dataset(&dir.path().join("data"), &tr, &te).unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, CONFIG).unwrap();
    Fixture { dir, manifest, config }
}

impl Fixture {
    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, cmd: &str, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec![cmd, "--config", s(&self.config), "--manifest", s(&self.manifest), "--out", s(out)];
        args.extend_from_slice(extra);
        mvad(&args)
    }
}

#[test]
fn selftest_passes() {
    let o = mvad(&["selftest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("[PASS]")).count() >= 6, "{text}");
    assert!(!text.contains("[FAIL]"));
}

#[test]
fn render_writes_view_directories() {
    let f = fixture(1, 1);
    let out = f.out("render");
    let o = f.run("render", &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for id in ["tr000", "te000"] {
        for k in 0..3 {
            let v = out.join("renders").join(id).join(format!("view_{k:02}"));
            for file in ["image.pgm", "gt_mask.pgm", "pixel_map.csv", "vis_mask.txt", "depth.f32", "view.json"] {
                assert!(v.join(file).is_file(), "missing {}", v.join(file).display());
            }
        }
        assert!(!out.join("renders").join(id).join("view_03").exists());
    }
    assert!(out.join("config.toml").is_file());

    // rerun is byte-identical
    let again = f.out("render2");
    assert!(f.run("render", &again, &[]).status.success());
    let a = fs::read(out.join("renders/te000/view_01/pixel_map.csv")).unwrap();
    let b = fs::read(again.join("renders/te000/view_01/pixel_map.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(out.join("renders/tr000/view_02/image.pgm")).unwrap(),
        fs::read(again.join("renders/tr000/view_02/image.pgm")).unwrap()
    );
}

#[test]
fn missing_train_labels_fail_before_rendering() {
    let f = fixture(1, 1);
    fs::remove_file(f.manifest.parent().unwrap().join("tr000.labels")).unwrap();
    let out = f.out("render");
    let o = f.run("render", &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("tr000"));
    assert!(!out.join("renders").exists());
}

#[test]
fn train_infer_eval_with_mock_provider() {
    let f = fixture(6, 6);
    let train = f.out("train");
    let o = f.run("train", &train, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = train.join("checkpoint");
    assert!(ckpt.join("normal.padf").is_file() && ckpt.join("abnormal.padf").is_file());

    let history = fs::read_to_string(train.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some(HISTORY_HEADER));
    let totals: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 4);
    assert!(totals[3] < totals[0], "{totals:?}");

    let infer = f.out("infer");
    let o = f.run("infer", &infer, &["--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = infer.join("scores");
    let globals = fs::read_to_string(scores.join("global_scores.csv")).unwrap();
    assert_eq!(globals.lines().count(), 7);
    for line in globals.lines().skip(1) {
        let g: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&g));
        assert!(line.ends_with(','), "no fused score without RGB features: {line}");
    }
    let cloud = scores.join("te000");
    for file in ["points.csv", "summary.json", "view_00.pgm", "view_02.f32"] {
        assert!(cloud.join(file).is_file(), "{file}");
    }
    assert!(!cloud.join("fused_points.csv").exists());
    let points = fs::read_to_string(cloud.join("points.csv")).unwrap();
    assert_eq!(points.lines().next(), Some("index,a,b,c,score"));
    assert_eq!(points.lines().count(), 401);
    // coordinates are written in the input frame
    let raw = fs::read_to_string(f.manifest.parent().unwrap().join("te000.xyz")).unwrap();
    let first_raw: Vec<f64> = raw.lines().next().unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    let first_out: Vec<f64> = points.lines().nth(1).unwrap().split(',').skip(1).take(3).map(|v| v.parse().unwrap()).collect();
    assert_eq!(first_raw, first_out);

    let o = f.run("eval", &infer, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(infer.join("metrics.json")).unwrap()).unwrap();
    for key in ["i_auroc", "ap", "p_auroc", "aupro"] {
        let v = json[key].as_f64().unwrap_or_else(|| panic!("{key} missing in {json}"));
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(json.get("multimodal").is_none_or(|v| v.is_null()));
}

#[test]
fn seed_flag_and_config_env() {
    let f = fixture(3, 1);
    let run = |name: &str, seed: &str| {
        let out = f.out(name);
        let o = Command::new(env!("CARGO_BIN_EXE_mvad"))
            .args(["train", "--manifest", s(&f.manifest), "--out", s(&out), "--seed", seed])
            .env("MVAD_CONFIG", &f.config)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("checkpoint/abnormal.padf")).unwrap()
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
    let echoed = fs::read_to_string(f.out("a").join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 5"), "{echoed}");
    assert!(echoed.contains("views = 3"), "config file from the environment was not used");
}

#[test]
fn validation_errors_exit_2() {
    let f = fixture(1, 1);
    fs::write(&f.config, "[views]\nviewz = 3\n").unwrap();
    let o = f.run("render", &f.out("x"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("viewz"), "{}", stderr(&o));

    let o = mvad(&["render", "--manifest", s(&f.manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("out"));

    let o = mvad(&["train", "--provider", "clip", "--manifest", s(&f.manifest), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_io_error() {
    let f = fixture(1, 1);
    let o = f.run("infer", &f.out("infer"), &["--checkpoint", s(&f.out("nowhere"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn eval_names_cloud_with_missing_scores() {
    let f = fixture(2, 2);
    let train = f.out("train");
    assert!(f.run("train", &train, &[]).status.success());
    let infer = f.out("infer");
    assert!(f.run("infer", &infer, &["--checkpoint", s(&train.join("checkpoint"))]).status.success());
    fs::remove_file(infer.join("scores/te001/points.csv")).unwrap();
    let o = f.run("eval", &infer, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("te001"), "{}", stderr(&o));
}

#[test]
fn files_provider_reports_inconsistent_feature_width() {
    let f = fixture(1, 0);
    let feats = f.dir.path().join("feats");
    let m = load_manifest(&f.manifest).unwrap();
    let entry = m.split(Split::Train).next().unwrap();
    let cloud = mvad_core::cloud::load_point_cloud(m.resolve(&entry.cloud)).unwrap().normalized();
    let labels = PointLabels::zeros(cloud.len());
    let vcfg = ViewConfig {
        views: 3,
        height: 64,
        width: 64,
        grid_h: 8,
        grid_w: 8,
        splat_radius: 0,
        ..ViewConfig::default()
    };
    let views = render_views(&cloud, &labels, &vcfg.angles().unwrap(), &vcfg);
    fs::create_dir_all(feats.join(&entry.id)).unwrap();
    for (k, v) in views.iter().enumerate() {
        // view 2 uses a different width
        let d = if k == 2 { 12 } else { 16 };
        let enc = MockEncoder::new(FeatureDims { h: 8, w: 8, d }, 0);
        let f = encode_views(std::slice::from_ref(v), &entry.id, &enc).unwrap();
        save_features(feats.join(&entry.id).join(format!("view_{k:02}.padf")), &f[0]).unwrap();
    }
    let mut text = CONFIG.replace("kind = \"mock\"", "kind = \"files\"");
    text.push_str(&format!("\n[paths]\nmanifest = {:?}\n", s(&f.manifest)));
    text = text.replace("[provider]", &format!("[provider]\ndir = {:?}", s(&feats)));
    fs::write(&f.config, text).unwrap();
    let o = mvad(&["train", "--config", s(&f.config), "--out", s(&f.out("train"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("dimension mismatch") && err.contains("view_02.padf"), "{err}");
}

#[test]
fn rgb_features_produce_fused_outputs() {
    let f = fixture(2, 2);
    let data = f.manifest.parent().unwrap();
    let mut m = load_manifest(&f.manifest).unwrap();
    let vcfg = ViewConfig {
        views: 3,
        height: 64,
        width: 64,
        grid_h: 8,
        grid_w: 8,
        splat_radius: 0,
        ..ViewConfig::default()
    };
    let enc = MockEncoder::new(FeatureDims { h: 8, w: 8, d: 16 }, 99);
    for e in m.entries.iter_mut().filter(|e| e.split == Split::Test) {
        let cloud = mvad_core::cloud::load_point_cloud(data.join(&e.cloud)).unwrap().normalized();
        let views = render_views(&cloud, &PointLabels::zeros(cloud.len()), &vcfg.angles().unwrap(), &vcfg);
        let rel = PathBuf::from("rgb").join(&e.id);
        fs::create_dir_all(data.join(&rel)).unwrap();
        for (k, feat) in encode_views(&views, &e.id, &enc).unwrap().iter().enumerate() {
            save_features(data.join(&rel).join(format!("view_{k:02}.padf")), feat).unwrap();
        }
        e.rgb_features = Some(rel);
    }
    save_manifest(&f.manifest, &m).unwrap();

    let train = f.out("train");
    assert!(f.run("train", &train, &[]).status.success());
    let infer = f.out("infer");
    let o = f.run("infer", &infer, &["--checkpoint", s(&train.join("checkpoint"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    for id in ["te000", "te001"] {
        let dir = infer.join("scores").join(id);
        assert!(dir.join("points.csv").is_file() && dir.join("fused_points.csv").is_file());
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
        let fused = summary["fused_global_score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&fused));
    }
    let o = f.run("eval", &infer, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(infer.join("metrics.json")).unwrap()).unwrap();
    assert!(json["multimodal"].is_object(), "{json}");
}
