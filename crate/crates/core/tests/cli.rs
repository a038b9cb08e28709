use std::fs;
use std::path::Path;
use std::process::Command;

use vat_core::cli;
use vat_core::data::{decode_pgm, read_points, write_points, Dataset};
use vat_core::model::{save_checkpoint, Model, ModelKind};
use vat_core::train::{hide_labels, outer_split, LabelBudget};
use vat_core::Rng;

fn run(args: &[&str]) -> i32 {
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    cli::run(&args)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth_blobs(dir: &Path, per_class: usize, side: usize) {
    let side = side.to_string();
    let per_class = per_class.to_string();
    assert_eq!(
        run(&[
            "synth",
            "--out",
            p(dir),
            "--synth.kind",
            "blob_images",
            "--synth.count_per_class",
            &per_class,
            "--synth.side",
            &side,
        ]),
        0
    );
}

#[test]
fn synth_blob_images_writes_pgms_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    synth_blobs(&a, 16, 32);
    let pgms = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 32);
    let manifest = fs::read_to_string(a.join(cli::MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.lines().count(), 32);
    assert!(a.join(cli::CONFIG_ECHO).exists());

    let b = tmp.path().join("b");
    synth_blobs(&b, 16, 32);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }

    assert_ne!(run(&["synth", "--out", p(&a)]), 0);
    assert_eq!(run(&["synth", "--out", p(&a), "--force", "--synth.count_per_class", "16"]), 0);
}

#[test]
fn synth_moons_writes_point_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("moons");
    assert_eq!(
        run(&["synth", "--out", p(&out), "--synth.kind", "moons", "--synth.count_per_class", "500"]),
        0
    );
    let points = fs::read_to_string(out.join(cli::POINTS_FILE)).unwrap();
    assert_eq!(points.lines().count(), 1000);
    let data = read_points(out.join(cli::POINTS_FILE)).unwrap();
    assert_eq!(data.samples.dims(), &[1000, 2]);
}

#[test]
fn train_writes_outputs_and_rerun_from_echo_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_blobs(&data, 8, 8);
    let manifest = data.join(cli::MANIFEST_FILE);
    let first = tmp.path().join("run1");
    let args = [
        "train",
        "--out",
        p(&first),
        "--data.manifest",
        p(&manifest),
        "--train.epochs",
        "2",
        "--train.repeats",
        "2",
        "--train.labeled_ratio",
        "0.5",
        "--vat.epsilon",
        "0.5",
    ];
    assert_eq!(run(&args), 0);
    for i in 1..=2 {
        let metrics = fs::read_to_string(first.join(cli::metrics_file(i))).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], "epoch,ce_loss,vat_loss,train_acc,test_acc");
        assert_eq!(lines.len(), 3);
        assert!(first.join(cli::checkpoint_file(i)).exists());
    }
    let summary = fs::read_to_string(first.join(cli::SUMMARY_FILE)).unwrap();
    assert!(summary.starts_with("final_acc_mean=") && summary.contains("\nfinal_acc_std="));

    let second = tmp.path().join("run2");
    let echo = first.join(cli::CONFIG_ECHO);
    assert_eq!(run(&["train", "--out", p(&second), "--config", p(&echo)]), 0);
    for name in [
        cli::SUMMARY_FILE.to_string(),
        cli::CONFIG_ECHO.to_string(),
        cli::metrics_file(1),
        cli::metrics_file(2),
        cli::checkpoint_file(1),
        cli::checkpoint_file(2),
    ] {
        assert_eq!(fs::read(first.join(&name)).unwrap(), fs::read(second.join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn eval_after_overfit_scores_labeled_subset_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = tmp.path().join("moons");
    assert_eq!(
        run(&["synth", "--out", p(&synth), "--synth.kind", "moons", "--synth.count_per_class", "20"]),
        0
    );
    let points = synth.join(cli::POINTS_FILE);
    let out = tmp.path().join("train");
    let train_args = [
        "train",
        "--out",
        p(&out),
        "--data.points",
        p(&points),
        "--model.kind",
        "mlp",
        "--train.use_vat",
        "false",
        "--train.labeled_per_class",
        "4",
        "--train.epochs",
        "500",
        "--train.repeats",
        "1",
        "--train.seed",
        "7",
    ];
    assert_eq!(run(&train_args), 0);
    let last = fs::read_to_string(out.join(cli::metrics_file(1))).unwrap();
    let ce: f64 = last.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(ce < 0.01, "final ce {ce}");

    let data = read_points(&points).unwrap();
    let (train, _) = outer_split(&data.labels, &mut Rng::new(7)).unwrap();
    let (labeled, _) = hide_labels(&data.labels, &train, LabelBudget::PerClass(4), &mut Rng::new(7)).unwrap();
    let (x, y) = data.gather(&labeled).unwrap();
    let subset = tmp.path().join("labeled.csv");
    write_points(&subset, &Dataset::new(x, y).unwrap()).unwrap();

    let eval_out = tmp.path().join("eval");
    let ckpt = out.join(cli::checkpoint_file(1));
    let eval_args = [
        "eval",
        "--out",
        p(&eval_out),
        "--data.points",
        p(&subset),
        "--model.kind",
        "mlp",
        "--eval.checkpoint",
        p(&ckpt),
    ];
    assert_eq!(run(&eval_args), 0);
    assert_eq!(fs::read_to_string(eval_out.join(cli::EVAL_FILE)).unwrap(), "accuracy=1.0000\n");
}

#[test]
fn eval_reports_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_blobs(&data, 4, 8);
    let manifest = data.join(cli::MANIFEST_FILE);
    let model = Model::build_cnn(ModelKind::SmallCnn, &mut Rng::new(0)).unwrap();
    let ckpt = tmp.path().join("small.vatm");
    save_checkpoint(&ckpt, &model.params).unwrap();
    let cfg = |kind: &str, ckpt: &Path, manifest: &Path| {
        cli::parse_args(
            &[
                "eval",
                "--out",
                "unused",
                "--model.kind",
                kind,
                "--eval.checkpoint",
                p(ckpt),
                "--data.manifest",
                p(manifest),
            ]
            .map(String::from),
        )
        .unwrap()
        .config
    };
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();

    let err = cli::cmd_eval(&cfg("small_cnn", &ckpt, &manifest), &out).unwrap_err();
    assert!(matches!(err, vat_core::Error::UninitializedStats(_)), "{err}");

    let err = cli::cmd_eval(&cfg("large_cnn", &ckpt, &manifest), &out).unwrap_err().to_string();
    assert!(err.contains("block1.conv.weight"), "{err}");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    let bad = tmp.path().join("bad.vatm");
    fs::write(&bad, bytes).unwrap();
    let err = cli::cmd_eval(&cfg("small_cnn", &bad, &manifest), &out).unwrap_err().to_string();
    assert!(err.contains("bad checkpoint magic"), "{err}");

    let empty = tmp.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let err = cli::cmd_eval(&cfg("small_cnn", &ckpt, &empty), &out).unwrap_err().to_string();
    assert!(err.contains("no samples"), "{err}");
}

#[test]
fn perturb_of_constant_model_is_flat_gray() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_blobs(&data, 1, 16);
    let mut model = Model::build_cnn(ModelKind::SmallCnn, &mut Rng::new(1)).unwrap();
    for (name, t) in model.params.params_mut().iter_mut() {
        if name.ends_with("conv.weight") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let ckpt = tmp.path().join("const.vatm");
    save_checkpoint(&ckpt, &model.params).unwrap();
    let image = data.join("img_00000.pgm");
    let out = tmp.path().join("perturb");
    let inv = cli::parse_args(
        &[
            "perturb",
            "--out",
            p(&out),
            "--perturb.checkpoint",
            p(&ckpt),
            "--perturb.image",
            p(&image),
        ]
        .map(String::from),
    )
    .unwrap();
    cli::execute(&inv).unwrap();
    let report = fs::read_to_string(out.join(cli::PERTURB_FILE)).unwrap();
    assert!(report.contains("degenerate=true"), "{report}");
    let (_, _, noise) = decode_pgm(&fs::read(out.join("noise.pgm")).unwrap()).unwrap();
    assert!(noise.iter().all(|&b| b == 128));
    let original = fs::read(out.join("original.pgm")).unwrap();
    assert_eq!(fs::read(out.join("perturbed.pgm")).unwrap(), original);
    assert_eq!(original, fs::read(&image).unwrap());
}

#[test]
fn perturb_outputs_are_valid_and_clamped() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_blobs(&data, 1, 16);
    let model = Model::build_cnn(ModelKind::SmallCnn, &mut Rng::new(2)).unwrap();
    let ckpt = tmp.path().join("m.vatm");
    save_checkpoint(&ckpt, &model.params).unwrap();
    let out = tmp.path().join("perturb");
    let code = run(&[
        "perturb",
        "--out",
        p(&out),
        "--perturb.checkpoint",
        p(&ckpt),
        "--perturb.image",
        p(&data.join("img_00001.pgm")),
    ]);
    assert_eq!(code, 0);
    for name in ["original.pgm", "noise.pgm", "perturbed.pgm"] {
        let (w, h, _) = decode_pgm(&fs::read(out.join(name)).unwrap()).unwrap();
        assert_eq!((w, h), (16, 16));
    }
    let report = fs::read_to_string(out.join(cli::PERTURB_FILE)).unwrap();
    let lds: f64 = report.lines().next().unwrap().trim_start_matches("lds=").parse().unwrap();
    assert!(lds >= -1e-12);
    assert!(report.contains("degenerate=false"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_vatlab");
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(bin)
        .args(["train", "--out", p(&tmp.path().join("x")), "--foo.bar", "1"])
        .output()
        .unwrap();
    assert_ne!(status.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&status.stderr).contains("foo.bar"));

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "vat.alpha 0.5\n").unwrap();
    let status = Command::new(bin)
        .args(["train", "--out", p(&tmp.path().join("y")), "--config", p(&cfg)])
        .output()
        .unwrap();
    assert_ne!(status.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&status.stderr).contains("line 1"));

    let status = Command::new(bin)
        .args(["synth", "--out", p(&tmp.path().join("z")), "--synth.kind", "moons", "--synth.count_per_class", "5"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
}
