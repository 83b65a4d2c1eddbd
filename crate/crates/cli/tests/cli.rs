use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kerl::data::synthetic::{gen_synthetic, SyntheticConfig};
use kerl::graph::{build_graph, load_graph, Normalization};
use tempfile::TempDir;

const SMALL: &str = r#"
epochs = 2
batch_size = 8
seed = 5

[sgd]
lr = 0.05

[model.backbone]
input_size = 32

[model.sketch]
c = 32

[model.fusion]
l2_normalize = true
"#;

fn kerl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kerl"))
        .args(args)
        .env_remove("KERL_DATA")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kerl(args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Small synthetic dataset and a fast training config in a temp dir.
    fn new(seed: u64) -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        ok(&[
            "gen-synthetic",
            "--out",
            s(&f.data()),
            "--seed",
            &seed.to_string(),
            "--categories",
            "4",
            "--attributes",
            "8",
            "--train-per-class",
            "6",
            "--test-per-class",
            "3",
            "--image-size",
            "32",
        ]);
        fs::write(f.config(), SMALL).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn config(&self) -> PathBuf {
        self.path("small.toml")
    }

    fn pretrain(&self) {
        ok(&[
            "pretrain",
            "--data",
            s(&self.data()),
            "--config",
            s(&self.config()),
            "--out",
            s(&self.path("base.ckpt")),
            "--scores",
            s(&self.path("base.scores")),
        ]);
    }

    fn graph(&self) {
        ok(&["build-graph", "--data", s(&self.data()), "--out", s(&self.path("g.graph"))]);
    }
}

#[test]
fn build_graph_matches_generator_incidence() {
    let f = Fixture::new(11);
    let out = ok(&["build-graph", "--data", s(&f.data()), "--out", s(&f.path("g.graph")), "--dot"]);
    assert!(out.contains("4 categories, 8 attributes, 12 nodes"), "{out}");
    assert!(f.path("g.dot").exists());

    let data = gen_synthetic(&SyntheticConfig {
        categories: 4,
        attributes: 8,
        train_per_class: 6,
        test_per_class: 3,
        image_size: 32,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let (want, _) = build_graph(&data.train.instances(), data.train.registry.clone(), Normalization::Global).unwrap();
    let got = load_graph(&f.path("g.graph")).unwrap();
    assert_eq!(got.registry().attributes(), want.registry().attributes());
    for (a, b) in got.registry().categories().iter().zip(want.registry().categories()) {
        assert!(a.ends_with(b.as_str()), "{a} vs {b}");
    }
    for (a, b) in got.confidence().iter().zip(want.confidence()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn missing_data_dir_is_an_io_error_with_message() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere");
    let out = kerl(&["build-graph", "--data", s(&missing), "--out", s(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(kerl(&["build-graph", "--data", "x", "--out", "y", "--bogus"]).status.code(), Some(2));
    assert_eq!(kerl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(kerl(&["train", "--out", "y"]).status.code(), Some(2));
    assert_eq!(kerl(&[]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_tight_tolerance_is_a_numeric_failure() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("max relative error"), "{out}");
    assert_eq!(kerl(&["gradcheck", "--tol", "0"]).status.code(), Some(4));
}

#[test]
fn unknown_config_key_is_a_parse_error_with_line() {
    let f = Fixture::new(1);
    let bad = f.path("bad.toml");
    fs::write(&bad, "epochs = 2\nlearning_rate = 3\n").unwrap();
    let out = kerl(&[
        "train",
        "--variant",
        "baseline",
        "--data",
        s(&f.data()),
        "--config",
        s(&bad),
        "--out",
        s(&f.path("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("bad.toml:2"), "{err}");

    let bad_value = f.path("neg.toml");
    fs::write(&bad_value, "[sgd]\nlr = -1.0\n").unwrap();
    let out = kerl(&["pretrain", "--data", s(&f.data()), "--config", s(&bad_value), "--out", s(&f.path("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn baseline_trains_without_graph_and_repeats_bit_identically() {
    let f = Fixture::new(2);
    let run = |name: &str| {
        ok(&[
            "train",
            "--variant",
            "baseline",
            "--data",
            s(&f.data()),
            "--config",
            s(&f.config()),
            "--out",
            s(&f.path(name)),
        ]);
        fs::read(f.path(name).with_extension("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a.ckpt"), run("b.ckpt"));
    assert_eq!(a, b);
    assert_eq!(fs::read(f.path("a.ckpt")).unwrap(), fs::read(f.path("b.ckpt")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("# sgd.lr=0.05"), "{text}");
    assert!(text.contains("# epochs=2"), "{text}");
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3);

    let out = kerl(&[
        "train",
        "--variant",
        "baseline",
        "--data",
        s(&f.data()),
        "--config",
        s(&f.config()),
        "--seed",
        "6",
        "--out",
        s(&f.path("c.ckpt")),
    ]);
    assert!(out.status.success());
    assert_ne!(fs::read(f.path("c.metrics.csv")).unwrap(), fs::read(f.path("a.metrics.csv")).unwrap());
}

#[test]
fn kerl_needs_graph_and_scores() {
    let f = Fixture::new(3);
    f.graph();
    let (data, config) = (f.data(), f.config());
    let common = ["--data", s(&data), "--config", s(&config)];
    let out_path = f.path("k.ckpt");

    let mut no_graph = vec!["train", "--variant", "kerl", "--out", s(&out_path)];
    no_graph.extend(common);
    let out = kerl(&no_graph);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("build-graph"));

    let graph = f.path("g.graph");
    let mut no_scores = vec!["train", "--variant", "kerl", "--graph", s(&graph), "--out", s(&out_path)];
    no_scores.extend(common);
    let out = kerl(&no_scores);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));
    assert!(!out_path.exists());
}

#[test]
fn full_pipeline_eval_and_visualize() {
    let f = Fixture::new(4);
    f.graph();
    f.pretrain();
    let ckpt = f.path("k.ckpt");
    ok(&[
        "train",
        "--variant",
        "kerl",
        "--data",
        s(&f.data()),
        "--config",
        s(&f.config()),
        "--graph",
        s(&f.path("g.graph")),
        "--scores",
        s(&f.path("base.scores")),
        "--region-epochs",
        "2",
        "--out",
        s(&ckpt),
    ]);

    let no_scores = kerl(&["eval", "--data", s(&f.data()), "--checkpoint", s(&ckpt)]);
    assert_eq!(no_scores.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&no_scores.stderr).contains("pretrain"));

    let (data, scores) = (f.data(), f.path("base.scores"));
    let report = |extra: &[&str]| {
        let mut args = vec!["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--scores", s(&scores)];
        args.extend(extra);
        ok(&args)
    };
    let plain = report(&[]);
    assert!(plain.contains("accuracy") && plain.contains("/12)") && plain.contains("gate_mass"), "{plain}");
    assert_eq!(plain, report(&[]));
    let hr = report(&["--with-regions"]);
    assert!(hr.contains("accuracy"), "{hr}");

    let vis = f.path("vis");
    ok(&[
        "visualize",
        "--data",
        s(&f.data()),
        "--checkpoint",
        s(&ckpt),
        "--scores",
        s(&f.path("base.scores")),
        "--out-dir",
        s(&vis),
        "--limit",
        "3",
        "--upsample",
        "2",
    ]);
    let index = fs::read_to_string(vis.join("index.txt")).unwrap();
    let rows: Vec<&str> = index.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let fields: Vec<&str> = row.split_whitespace().collect();
        let (hw, hh, _) = read_pgm(&vis.join(fields[4]));
        let (gw, gh, _) = read_pgm(&vis.join(fields[5]));
        assert_eq!((hw, hh), (gw, gh));
        assert_eq!(hw % 2, 0);
    }
    assert!(!fs::read_to_string(vis.join("regions.txt")).unwrap().is_empty());
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    let body = bytes[pos + 1..].to_vec();
    assert_eq!(body.len(), w * h);
    (w, h, body)
}

#[test]
fn heatmap_matches_feature_map_and_top_cell_beats_chance() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-synthetic", "--out", s(&data), "--seed", "0", "--train-per-class", "20", "--test-per-class", "10"]);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "epochs = 20\nseed = 0\n[sgd]\nlr = 0.05\n[model.sketch]\nc = 64\n[model.fusion]\nl2_normalize = true\n").unwrap();
    let ckpt = dir.path().join("b.ckpt");
    ok(&["train", "--variant", "baseline", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    let vis = dir.path().join("vis");
    ok(&["visualize", "--data", s(&data), "--checkpoint", s(&ckpt), "--out-dir", s(&vis)]);

    let (model, _) = kerl::checkpoint::load_checkpoint(&ckpt).unwrap();
    let test = kerl::data::cub::load_cub(
        &data,
        &kerl::data::cub::CubOptions {
            split: kerl::data::Split::Test,
            ..Default::default()
        },
    )
    .unwrap();
    let trace = model.forward(&test.samples[0], None, false).unwrap();
    let (rows, cols, _) = trace.saliency_source().dim();

    let index = fs::read_to_string(vis.join("index.txt")).unwrap();
    let first = index.lines().find(|l| !l.starts_with('#')).unwrap();
    let (w, h, _) = read_pgm(&vis.join(first.split_whitespace().nth(4).unwrap()));
    assert_eq!((h, w), (rows, cols));

    let summary = index.lines().last().unwrap();
    let nums: Vec<f64> = summary
        .split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .filter_map(|t| t.parse().ok())
        .collect();
    let (hit, chance) = (nums[0], nums[1]);
    assert!(summary.contains("top cell inside a mask"), "{summary}");
    assert!(hit > chance, "{summary}");
}

#[test]
fn zero_feature_map_gives_black_heatmap() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("z.pgm");
    let scores = kerl::regions::location_scores(&ndarray::Array3::zeros((3, 5, 4)));
    kerl::data::image::save_pgm(&kerl::regions::normalize_unit(&scores), &path).unwrap();
    let (w, h, body) = read_pgm(&path);
    assert_eq!((w, h), (5, 3));
    assert!(body.iter().all(|&b| b == 0));
}
