use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mpmae::cli::{ExperimentConfig, RESOLVED_CONFIG, VERSION_FILE};

const BIN: &str = env!("CARGO_BIN_EXE_mpmae");

const TINY: &str = r#"{
  "gen": {"world": {"raster_size": 32, "world_size": 96, "samples_total": 40}, "downstream": {"samples": 60}},
  "pretrain": {"epochs": 1, "effective_batch": 8, "batch_size": 8, "warmup_epochs": 0, "crop_size": 32,
    "model": {"encoder": {"in_channels": 12, "depths": [1,1,1,1], "widths": [8,8,16,16], "image_size": 32, "patch_size": 8, "stem": "modified"},
              "decoder": {"width": 8, "blocks": 1}}},
  "eval": {"seeds": [0, 1], "fractions": [0.2, 0.5, 1.0], "probe": {"epochs": 2, "batch_size": 8, "effective_batch": 8,
     "segmentation": {"batch_size": 8, "frozen_epochs": 1, "full_epochs": 1}}}
}"#;

fn mpmae(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").env_remove("MPMAE_SEED").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// One generated dataset and two pretrained checkpoints shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let c = s(&config);
        ok(&mpmae(&["gen", "--config", c, "--out", s(&root.join("data"))]));
        let data = root.join("data/pretrain");
        ok(&mpmae(&["pretrain", "--config", c, "--data", s(&data), "--out", s(&root.join("all"))]));
        ok(&mpmae(&[
            "pretrain", "--config", c, "--data", s(&data), "--out", s(&root.join("s2")), "--tasks", "s2", "--loss", "equal",
        ]));
        Fixture { _dir: dir, root, config }
    })
}

fn resolved(dir: &Path) -> ExperimentConfig {
    serde_json::from_str(&fs::read_to_string(dir.join(RESOLVED_CONFIG)).unwrap()).unwrap()
}

#[test]
fn gen_counts_strata_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("g");
    let args = |force: bool| {
        let mut a = vec!["gen", "--samples", "100", "--biomes", "1", "--raster", "16", "--downstream-samples", "0", "--out"];
        a.push(s(&out));
        if force {
            a.push("--force");
        }
        a.into_iter().map(String::from).collect::<Vec<_>>()
    };
    let run = |force| Command::new(BIN).args(args(force)).env("MPMAE_SEED", "3").output().unwrap();
    let first = ok(&run(false));
    assert!(first.contains("wrote 100 samples"));
    let biome_rows: Vec<&str> = first.lines().skip_while(|l| *l != "biome,samples").skip(1).take_while(|l| !l.starts_with("dataset")).collect();
    assert_eq!(biome_rows, vec!["0,100"]);
    let hash = |t: &str| t.lines().find(|l| l.starts_with("dataset hash")).unwrap().to_string();

    let refused = run(false);
    assert_eq!(refused.status.code(), Some(2));
    let second = ok(&run(true));
    assert_eq!(hash(&first), hash(&second));

    let cfg = resolved(&out);
    assert_eq!(cfg.seed, Some(3));
    assert_eq!(cfg.gen.world.seed, 3);
    assert!(fs::read_to_string(out.join(VERSION_FILE)).unwrap().starts_with("mpmae "));
}

#[test]
fn pretrain_task_subsets_and_loss_modes() {
    let f = fixture();
    let all = resolved(&f.path("all"));
    let s2 = resolved(&f.path("s2"));
    assert_eq!(all.pretrain.tasks, "all");
    assert_eq!(s2.pretrain.tasks, "s2");
    assert_eq!(format!("{:?}", all.pretrain.loss_mode), "Uncertainty");
    assert_eq!(format!("{:?}", s2.pretrain.loss_mode), "Equal");
    for (dir, t) in [("all", 12), ("s2", 1)] {
        let (_, trainer, _) = mpmae::cli::load_pretrainer(s(&f.path(&format!("{dir}/checkpoint.ckpt")))).unwrap();
        assert_eq!(trainer.model.decoders.len(), t);
        assert!(f.path(dir).join("train_log.csv").exists());
        assert!(f.path(dir).join(VERSION_FILE).exists());
    }
}

#[test]
fn unknown_task_lists_valid_ones() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let out = mpmae(&[
        "pretrain", "--config", s(&f.config), "--data", s(&f.path("data/pretrain")), "--out", s(d.path()), "--tasks", "nope",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope") && err.contains("sentinel2") && err.contains("climate"), "{err}");
}

#[test]
fn eval_modes_write_expected_rows() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let c = s(&f.config);
    let data = f.path("data/downstream");
    let ck = f.path("all/checkpoint.ckpt");
    let out = d.path().join("lp");
    ok(&mpmae(&[
        "eval", "--config", c, "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&out), "--tasks", "multi-class",
    ]));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    // one row per seed
    assert_eq!(csv.lines().count(), 1 + 2);

    let out = d.path().join("sweep");
    ok(&mpmae(&[
        "eval", "--config", c, "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&out), "--tasks", "multi-class", "--sweep",
        "--jobs", "2",
    ]));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);

    let out = d.path().join("seg");
    ok(&mpmae(&["eval", "--config", c, "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&out), "--mode", "ft-seg"]));
    let archived = fs::read_dir(out.join("segmenters")).unwrap().count();
    assert_eq!(archived, 2 * 2);
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.contains(",seg-frozen,") && csv.contains(",seg-ft,"));
    assert!(out.join(RESOLVED_CONFIG).exists());
}

#[test]
fn eval_rejects_incompatible_data() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    // 16-pixel rasters cannot feed a 32-pixel encoder
    let small = d.path().join("small");
    ok(&mpmae(&["gen", "--samples", "20", "--raster", "16", "--downstream-samples", "30", "--out", s(&small)]));
    let out = mpmae(&[
        "eval",
        "--checkpoint",
        s(&f.path("all/checkpoint.ckpt")),
        "--data",
        s(&small.join("downstream")),
        "--out",
        s(&d.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape mismatch"));
}

#[test]
fn report_grid_curves_and_images() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let c = s(&f.config);
    let data = f.path("data/downstream");
    let results = d.path().join("results");
    let cks = [s(&f.path("all/checkpoint.ckpt")).to_string(), s(&f.path("s2/checkpoint.ckpt")).to_string()];
    ok(&mpmae(&[
        "eval", "--config", c, "--checkpoint", &cks[0], "--checkpoint", &cks[1], "--data", s(&data), "--out", s(&results),
    ]));
    let out = d.path().join("report");
    let text = ok(&mpmae(&["report", "--config", c, "--results", s(&results), "--out", s(&out)]));
    assert!(text.contains("curves omitted"));
    let grid: Vec<&str> = text.lines().filter(|l| l.starts_with("| ")).collect();
    assert_eq!(grid.len(), 3);
    assert_eq!(grid[0], "| checkpoint | multi-class FT | multi-class LP | multi-label FT | multi-label LP |");
    for row in &grid[1..] {
        assert_eq!(row.matches('—').count(), 2, "{row}");
    }

    ok(&mpmae(&[
        "eval", "--config", c, "--checkpoint", &cks[0], "--checkpoint", &cks[1], "--data", s(&data), "--out", s(&results),
        "--sweep", "--tasks", "multi-class",
    ]));
    let out = d.path().join("report2");
    ok(&mpmae(&[
        "report", "--config", c, "--results", s(&results), "--out", s(&out), "--checkpoint", &cks[0], "--data",
        s(&f.path("data/pretrain")),
    ]));
    for name in ["label_efficiency_multi-class.svg", "uncertainty_all.svg", "reconstruction_all.png", "report.md", VERSION_FILE] {
        assert!(out.join(name).exists(), "{name}");
    }
    let png = fs::read(out.join("reconstruction_all.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

#[test]
fn config_errors_exit_two_and_missing_data_three() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    fs::write(&bad, r#"{"pretrain": {"epochz": 3}}"#).unwrap();
    let out = mpmae(&["gen", "--config", s(&bad), "--out", s(&d.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    let out = mpmae(&["pretrain", "--data", s(&d.path().join("missing")), "--out", s(&d.path().join("y"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = Command::new(BIN).args(["gen", "--out", s(&d.path().join("z"))]).env("MPMAE_SEED", "abc").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
