//! End-to-end command-line tests against the built binary.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_n2uq"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("n2uq-cli-{tag}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &std::path::Path) -> PathBuf {
    let path = dir.join("train.cfg");
    fs::write(
        &path,
        "epochs=4\nbatch_size=32\nlr=0.01\nseed=7\nhidden=16,16\n\
         dataset=synthetic\nsynth_train=300\nsynth_eval=300\nsynth_dim=8\nsynth_sep=6.0\n",
    )
    .unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn accuracy_of(out: &Output) -> f64 {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix("accuracy,").map(|v| v.parse().unwrap()))
        .expect("eval prints an accuracy line")
}

#[test]
fn train_eval_export_packed_round_trip() {
    let dir = workdir("pipeline");
    let cfg = write_config(&dir);
    let ckpt = dir.join("model.ckpt");
    let metrics = dir.join("metrics.csv");
    let pack = dir.join("model.pack");

    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&ckpt)
        .args(["--metrics-out"])
        .arg(&metrics)
        .output()
        .unwrap();
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("epoch,train_loss,eval_acc\n"));
    assert_eq!(csv.lines().count(), 5);

    let eval_out = bin().args(["eval", "--checkpoint"]).arg(&ckpt).output().unwrap();
    assert!(eval_out.status.success());
    let direct = accuracy_of(&eval_out);

    let export_out = bin()
        .args(["export", "--checkpoint"])
        .arg(&ckpt)
        .args(["--out"])
        .arg(&pack)
        .output()
        .unwrap();
    assert!(export_out.status.success());
    let header = fs::read(&pack).unwrap();
    assert_eq!(&header[0..8], b"N2UQPACK");

    let packed_out = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--packed"])
        .arg(&pack)
        .output()
        .unwrap();
    assert!(packed_out.status.success());
    let via_packed = accuracy_of(&packed_out);
    assert!(
        (direct - via_packed).abs() <= 1e-6,
        "packed eval drifted: {direct} vs {via_packed}"
    );
}

#[test]
fn train_is_deterministic_for_a_fixed_seed() {
    let dir = workdir("determinism");
    let cfg = write_config(&dir);
    let run = |tag: &str| {
        let ckpt = dir.join(format!("{tag}.ckpt"));
        let metrics = dir.join(format!("{tag}.csv"));
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--out"])
            .arg(&ckpt)
            .args(["--metrics-out"])
            .arg(&metrics)
            .output()
            .unwrap();
        assert!(out.status.success());
        (fs::read(&ckpt).unwrap(), fs::read(&metrics).unwrap())
    };
    let (ck_a, m_a) = run("a");
    let (ck_b, m_b) = run("b");
    assert_eq!(m_a, m_b, "metrics differ between identical runs");
    assert_eq!(ck_a, ck_b, "checkpoints differ between identical runs");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = workdir("override");
    let cfg = write_config(&dir);
    let run = |extra: &[&str], tag: &str| {
        let ckpt = dir.join(format!("{tag}.ckpt"));
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--out"])
            .arg(&ckpt)
            .args(["--metrics-out"])
            .arg(dir.join(format!("{tag}.csv")))
            .args(extra)
            .output()
            .unwrap();
        assert!(out.status.success());
        fs::read(&ckpt).unwrap()
    };
    let base = run(&[], "base");
    let other = run(&["--seed", "99"], "other");
    assert_ne!(base, other);
}

#[test]
fn inspect_emits_parseable_csv() {
    let dir = workdir("inspect");
    let cfg = write_config(&dir);
    let ckpt = dir.join("model.ckpt");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&ckpt)
        .args(["--metrics-out"])
        .arg(dir.join("m.csv"))
        .output()
        .unwrap()
        .status
        .success());

    for extra in [&[][..], &["--weights"][..]] {
        let out = bin().args(["inspect", "--checkpoint"]).arg(&ckpt).args(extra).output().unwrap();
        assert!(out.status.success());
        let text = stdout(&out);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("layer,field,index,value"));
        let mut rows = 0;
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4, "bad row '{line}'");
            fields[0].parse::<usize>().unwrap();
            fields[2].parse::<usize>().unwrap();
            fields[3].parse::<f64>().unwrap();
            rows += 1;
        }
        assert!(rows > 0, "inspect produced no rows for {extra:?}");
    }

    // the quantized layer reports one width and one cut per interval
    let out = bin().args(["inspect", "--checkpoint"]).arg(&ckpt).output().unwrap();
    let text = stdout(&out);
    assert_eq!(text.matches(",width,").count(), 3);
    assert_eq!(text.matches(",cut,").count(), 3);
}

#[test]
fn conv_pipeline_trains_from_idx_fixtures() {
    let dir = workdir("conv");
    // two classes of 6x6 images: bright top-left vs bright bottom-right
    let (count, h, w) = (16usize, 6usize, 6usize);
    let mut pixels = Vec::with_capacity(count * h * w);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i % 2) as u8;
        for y in 0..h {
            for x in 0..w {
                let lit = if class == 0 { y < 3 && x < 3 } else { y >= 3 && x >= 3 };
                pixels.push(if lit { 230 } else { 25 });
            }
        }
        labels.push(class);
    }
    let write_pair = |tag: &str| {
        let img = dir.join(format!("{tag}-images.idx"));
        let lbl = dir.join(format!("{tag}-labels.idx"));
        n2uq_core::nn::data::write_idx_images(&img, &pixels, count, h, w).unwrap();
        n2uq_core::nn::data::write_idx_labels(&lbl, &labels).unwrap();
        (img, lbl)
    };
    let (train_img, train_lbl) = write_pair("train");
    let (test_img, test_lbl) = write_pair("test");
    let cfg = dir.join("conv.cfg");
    fs::write(
        &cfg,
        format!(
            "epochs=6\nbatch_size=8\nlr=0.02\nseed=3\narch=conv\nhidden=4,4\ndataset=idx\n\
             train_images={}\ntrain_labels={}\ntest_images={}\ntest_labels={}\n",
            train_img.display(),
            train_lbl.display(),
            test_img.display(),
            test_lbl.display()
        ),
    )
    .unwrap();
    let ckpt = dir.join("conv.ckpt");
    let pack = dir.join("conv.pack");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&ckpt)
        .args(["--metrics-out"])
        .arg(dir.join("conv.csv"))
        .output()
        .unwrap();
    assert!(out.status.success(), "conv train failed: {}", String::from_utf8_lossy(&out.stderr));

    let direct = accuracy_of(&bin().args(["eval", "--checkpoint"]).arg(&ckpt).output().unwrap());
    assert!(direct >= 0.9, "conv accuracy {direct}");
    assert!(bin()
        .args(["export", "--checkpoint"])
        .arg(&ckpt)
        .args(["--out"])
        .arg(&pack)
        .output()
        .unwrap()
        .status
        .success());
    let packed = accuracy_of(
        &bin()
            .args(["eval", "--checkpoint"])
            .arg(&ckpt)
            .args(["--packed"])
            .arg(&pack)
            .output()
            .unwrap(),
    );
    assert!((direct - packed).abs() <= 1e-6, "conv packed drift: {direct} vs {packed}");
}

#[test]
fn missing_config_file_exits_one_with_message() {
    let out = bin().args(["train", "--config", "/nonexistent/missing.cfg"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("No such file"), "stderr: {err}");
}

#[test]
fn bit_width_flags_override_config() {
    let dir = workdir("bits");
    let cfg = write_config(&dir);
    let ckpt = dir.join("model.ckpt");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--bits-a", "3", "--bits-w", "3", "--out"])
        .arg(&ckpt)
        .args(["--metrics-out"])
        .arg(dir.join("m.csv"))
        .output()
        .unwrap()
        .status
        .success());
    let out = bin().args(["inspect", "--checkpoint"]).arg(&ckpt).output().unwrap();
    let text = stdout(&out);
    // 3-bit quantizer: 2^3 - 1 = 7 interval widths per quantized layer
    assert_eq!(text.matches(",width,").count(), 7);
}

#[test]
fn unknown_flags_and_verbs_exit_one() {
    let out = bin().args(["train", "--bogus", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selfcheck_passes_and_reports_deviations() {
    let out = bin().args(["selfcheck", "--seed", "11"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("oracle overall:"));
    assert!(text.contains("bitwise overall:"));
    assert_eq!(text.matches("PASS").count(), 2);
    // one max-deviation line per quantizer configuration
    assert_eq!(text.matches("oracle n=").count(), 9);
}

#[test]
fn eval_respects_worker_thread_env() {
    let dir = workdir("threads");
    let cfg = write_config(&dir);
    let ckpt = dir.join("model.ckpt");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&ckpt)
        .args(["--metrics-out"])
        .arg(dir.join("m.csv"))
        .output()
        .unwrap()
        .status
        .success());
    let single = accuracy_of(&bin().args(["eval", "--checkpoint"]).arg(&ckpt).output().unwrap());
    let multi = accuracy_of(
        &bin()
            .args(["eval", "--checkpoint"])
            .arg(&ckpt)
            .env("N2UQ_THREADS", "4")
            .output()
            .unwrap(),
    );
    assert_eq!(single, multi);
}
