use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protodist::ood::{auroc, read_fused_scores, EvalReport};
use protodist::{load_checkpoint, save_checkpoint, Checkpoint, Model, TrainConfig};
use serde_json::json;
use tempfile::TempDir;

fn write_idx(dir: &Path, name: &str, images: &[Vec<u8>], labels: &[u8], side: usize) -> String {
    let img_path = dir.join(format!("{name}-images"));
    let lbl_path = dir.join(format!("{name}-labels"));
    let mut bytes = Vec::new();
    for v in [0x0803u32, images.len() as u32, side as u32, side as u32] {
        bytes.extend(v.to_be_bytes());
    }
    for img in images {
        bytes.extend(img);
    }
    fs::write(&img_path, bytes).unwrap();
    let mut bytes = Vec::new();
    for v in [0x0801u32, labels.len() as u32] {
        bytes.extend(v.to_be_bytes());
    }
    bytes.extend(labels);
    fs::write(&lbl_path, bytes).unwrap();
    format!("idx:{}:{}", img_path.display(), lbl_path.display())
}

/// Two-class 8×8 toy digits: a bright upper-left or lower-right square with
/// pixel jitter. The OOD set is uniform noise.
struct Toy {
    _dir: TempDir,
    root: PathBuf,
    train: String,
    test: String,
    ood: String,
}

fn lcg(state: &mut u64) -> u8 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*state >> 56) as u8
}

fn toy_images(n: usize, seed: u64) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut s = seed;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = (i % 2) as u8;
        let mut img = vec![0u8; 64];
        let (r0, c0) = if label == 0 { (1, 1) } else { (4, 4) };
        for r in r0..r0 + 3 {
            for c in c0..c0 + 3 {
                img[r * 8 + c] = 180 + lcg(&mut s) % 75;
            }
        }
        for p in &mut img {
            *p = p.saturating_add(lcg(&mut s) % 20);
        }
        images.push(img);
        labels.push(label);
    }
    (images, labels)
}

fn toy() -> Toy {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let (img, lbl) = toy_images(120, 1);
    let train = write_idx(&root, "train", &img, &lbl, 8);
    let (img, lbl) = toy_images(40, 2);
    let test = write_idx(&root, "test", &img, &lbl, 8);
    let mut s = 3;
    let noise: Vec<Vec<u8>> = (0..40).map(|_| (0..64).map(|_| lcg(&mut s)).collect()).collect();
    let ood = write_idx(&root, "ood", &noise, &[0; 40], 8);
    Toy {
        _dir: dir,
        root,
        train,
        test,
        ood,
    }
}

impl Toy {
    fn config(&self, extra: serde_json::Value) -> PathBuf {
        let mut cfg = json!({
            "model.num_classes": 2,
            "model.latent_dim": 4,
            "model.image_shape": {"channels": 1, "height": 8, "width": 8},
            "model.encoder_widths": [4, 4, 4, 4, 4],
            "model.decoder_widths": [4, 4, 4, 4, 4],
            "train.epochs": 2,
            "train.batch_size": 16,
            "data.train": self.train,
            "data.test": self.test,
            "data.val_fraction": 0.25,
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        let path = self.root.join(format!("config-{}.json", fs::read_dir(&self.root).unwrap().count()));
        fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        path
    }

    /// Trains into `<root>/<name>` and returns the run directory.
    fn trained(&self, name: &str) -> PathBuf {
        let out = self.root.join(name);
        let cfg = self.config(json!({}));
        let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert_ok(&o);
        out
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protodist")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

fn echoed_artifacts(o: &Output) -> Vec<PathBuf> {
    stdout(o)
        .lines()
        .filter_map(|l| l.strip_prefix("wrote "))
        .map(PathBuf::from)
        .collect()
}

fn log_totals(run_dir: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(run_dir.join("train_log.csv")).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "total").unwrap();
    r.records().map(|rec| rec.unwrap()[col].to_string()).collect()
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let toy = toy();
    let out = toy.root.join("run");
    let o = run(&["train", "--config", s(&toy.config(json!({}))), "--out", s(&out)]);
    assert_ok(&o);
    let artifacts = echoed_artifacts(&o);
    assert_eq!(artifacts.len(), 3);
    assert!(artifacts.iter().all(|p| p.exists()), "{artifacts:?}");
    assert!(out.join("checkpoint/meta.json").exists());
    assert_eq!(log_totals(&out).len(), 2);
    let ckpt = load_checkpoint(&out.join("checkpoint")).unwrap();
    assert!(ckpt.pipeline.is_fitted());
    assert_eq!(ckpt.epoch, 2);
}

#[test]
fn missing_training_source_names_the_key() {
    let toy = toy();
    let cfg = toy.root.join("nodata.json");
    fs::write(&cfg, r#"{"model.num_classes": 2, "train.epochs": 1}"#).unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&toy.root.join("r"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("data.train"), "{}", stderr(&o));

    let missing = format!("idx:{}:{}", toy.root.join("nope").display(), toy.root.join("nope2").display());
    let o = run(&[
        "train",
        "--config",
        s(&toy.config(json!({"data.train": missing}))),
        "--out",
        s(&toy.root.join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.train"), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_key_and_exit_with_usage_code() {
    let toy = toy();
    let o = run(&[
        "train",
        "--config",
        s(&toy.config(json!({"train.learning_rat": 0.1}))),
        "--out",
        s(&toy.root.join("r")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.learning_rat"));

    let o = run(&["train", "--config", s(&toy.config(json!({}))), "--out", s(&toy.root.join("r")), "--train.batch_size", "zero"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.batch_size"));

    let o = run(&["report", "x.json", "--train.epochs", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_final_loss() {
    let toy = toy();
    let a = toy.trained("a");
    let b = toy.trained("b");
    let (ta, tb) = (log_totals(&a), log_totals(&b));
    assert_eq!(ta, tb);
    assert!(ta.last().unwrap().parse::<f64>().unwrap().is_finite());
}

#[test]
fn overrides_and_resume_continue_the_run() {
    let toy = toy();
    let out = toy.root.join("run");
    let cfg = toy.config(json!({}));
    assert_ok(&run(&["train", "--config", s(&cfg), "--out", s(&out), "--train.epochs", "1"]));
    assert_eq!(log_totals(&out).len(), 1);
    assert_ok(&run(&["train", "--config", s(&cfg), "--out", s(&out), "--train.epochs=3", "--resume"]));
    assert_eq!(log_totals(&out).len(), 3);
    let ckpt = load_checkpoint(&out.join("checkpoint")).unwrap();
    assert_eq!(ckpt.epoch, 3);

    let fresh = toy.root.join("fresh");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&fresh), "--resume"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_ood_report_and_csv_agree() {
    let toy = toy();
    let run_dir = toy.trained("run");
    let ckpt = run_dir.join("checkpoint");
    let ev = toy.root.join("eval");
    let o = run(&["eval-ood", "--checkpoint", s(&ckpt), "--id", &toy.test, "--ood", &toy.ood, "--out", s(&ev)]);
    assert_ok(&o);
    assert!(echoed_artifacts(&o).iter().all(|p| p.exists()));
    assert!(stdout(&o).contains("auroc"));
    let report = EvalReport::read_json(&ev.join("report.json")).unwrap();
    assert!((0.0..=1.0).contains(&report.auroc));
    assert!((0.0..=1.0).contains(&report.id_accuracy));
    assert_eq!((report.n_id, report.n_ood), (40, 40));

    let rows = read_fused_scores(&ev.join("scores.csv")).unwrap();
    let id: Vec<f64> = rows.iter().filter(|r| !r.1).map(|r| r.0).collect();
    let ood: Vec<f64> = rows.iter().filter(|r| r.1).map(|r| r.0).collect();
    assert_eq!(auroc(&id, &ood).unwrap(), report.auroc);

    // Explicit default flags reproduce the default pipeline.
    let ev2 = toy.root.join("eval2");
    let o = run(&[
        "eval-ood", "--checkpoint", s(&ckpt), "--id", &toy.test, "--ood", &toy.ood, "--out", s(&ev2),
        "--p", "inf", "--distance-score", "dist_ratio", "--recon-score", "perceptual",
    ]);
    assert_ok(&o);
    let again = EvalReport::read_json(&ev2.join("report.json")).unwrap();
    assert_eq!(again.auroc, report.auroc);
    assert_eq!(again.config_fingerprint, report.config_fingerprint);

    // Scoring the ID test set against itself cannot separate anything.
    let ev3 = toy.root.join("eval3");
    assert_ok(&run(&["eval-ood", "--checkpoint", s(&ckpt), "--id", &toy.test, "--ood", &toy.test, "--out", s(&ev3)]));
    let same = EvalReport::read_json(&ev3.join("report.json")).unwrap();
    assert!((same.auroc - 0.5).abs() <= 0.02, "{}", same.auroc);
}

#[test]
fn eval_ood_refuses_unfitted_normalizers() {
    let toy = toy();
    let dir = toy.root.join("unfitted");
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(toy.config(json!({}))).unwrap()).unwrap();
    let exp = protodist::ExperimentConfig::from_flat(cfg.as_object().unwrap()).unwrap();
    let model = Model::<f32>::new(exp.model).unwrap();
    save_checkpoint(&Checkpoint::new(model, TrainConfig::default()), &dir).unwrap();
    let o = run(&["eval-ood", "--checkpoint", s(&dir), "--id", &toy.test, "--ood", &toy.ood, "--out", s(&toy.root.join("e"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("rerun"), "{}", stderr(&o));
}

#[test]
fn reconstruct_writes_two_row_grid_deterministically() {
    let toy = toy();
    let ckpt = toy.trained("run").join("checkpoint");
    let out = toy.root.join("recon");
    let o = run(&["reconstruct", "--checkpoint", s(&ckpt), "--data", &toy.test, "--count", "8", "--out", s(&out)]);
    assert_ok(&o);
    let artifacts = echoed_artifacts(&o);
    assert_eq!(artifacts, vec![out.join("reconstructions.png")]);
    let first = fs::read(&artifacts[0]).unwrap();
    let img = image::open(&artifacts[0]).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (8 * 8, 2 * 8));
    // Top row is the quantized input.
    let input = toy_images(1, 2).0.remove(0);
    assert_eq!(img.get_pixel(2, 2)[0], input[2 * 8 + 2]);

    assert_ok(&run(&["reconstruct", "--checkpoint", s(&ckpt), "--data", &toy.test, "--count", "8", "--out", s(&out)]));
    assert_eq!(fs::read(&artifacts[0]).unwrap(), first);

    let o = run(&["reconstruct", "--checkpoint", s(&ckpt), "--prototypes", "--out", s(&out)]);
    assert_ok(&o);
    let protos = image::open(out.join("prototypes.png")).unwrap().to_luma8();
    assert_eq!(protos.dimensions(), (8, 2 * 8));

    let o = run(&["reconstruct", "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn project_exports_samples_and_prototypes() {
    let toy = toy();
    let ckpt_dir = toy.trained("run").join("checkpoint");
    let out = toy.root.join("proj/latent.csv");
    let o = run(&[
        "project", "--checkpoint", s(&ckpt_dir), "--id", &toy.test, "--ood", &toy.ood, "--limit", "10", "--out", s(&out),
    ]);
    assert_ok(&o);
    let mut r = csv::Reader::from_path(&out).unwrap();
    let headers: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["id", "source", "label", "z0", "z1", "z2", "z3"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let ckpt = load_checkpoint(&ckpt_dir).unwrap();
    let phi = ckpt.model.prototypes();
    assert_eq!(rows.len(), 10 + 10 + phi.dim().0 * phi.dim().1);
    let protos: Vec<_> = rows.iter().filter(|r| &r[1] == "prototype").collect();
    assert_eq!(protos.len(), 2);
    for (k, row) in protos.iter().enumerate() {
        assert_eq!(row[2].parse::<usize>().unwrap(), k);
        for l in 0..4 {
            assert_eq!(row[3 + l].parse::<f32>().unwrap(), phi[[k, 0, l]]);
        }
    }
    assert_eq!(rows.iter().filter(|r| &r[1] == "ood").count(), 10);
}

#[test]
fn report_sorts_runs_and_rejects_bad_files() {
    let toy = toy();
    let ckpt = toy.trained("run").join("checkpoint");
    let mut paths = Vec::new();
    for (name, ood) in [("noise", &toy.ood), ("self", &toy.test)] {
        let dir = toy.root.join(name);
        assert_ok(&run(&["eval-ood", "--checkpoint", s(&ckpt), "--id", &toy.test, "--ood", ood, "--out", s(&dir)]));
        paths.push(dir.join("report.json"));
    }

    let o = run(&["report", s(&paths[1])]);
    assert_ok(&o);
    let rows: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("| ") && !l.starts_with("| run")).map(String::from).collect();
    assert_eq!(rows.len(), 1);

    let table = toy.root.join("table.md");
    let o = run(&["report", s(&paths[1]), s(&paths[0]), "--out", s(&table)]);
    assert_ok(&o);
    let text = fs::read_to_string(&table).unwrap();
    let names: Vec<&str> = text.lines().skip(2).map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    let a = EvalReport::read_json(&paths[0]).unwrap().auroc;
    let b = EvalReport::read_json(&paths[1]).unwrap().auroc;
    let expected = if a >= b { ["noise", "self"] } else { ["self", "noise"] };
    assert_eq!(names, expected);

    let broken = toy.root.join("broken.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&paths[0]).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("auroc");
    fs::write(&broken, v.to_string()).unwrap();
    let o = run(&["report", s(&paths[0]), s(&broken)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("broken.json"), "{}", stderr(&o));
}
