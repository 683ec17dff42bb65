use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attnfd::attention::CbamParams;
use attnfd::dataset;
use attnfd::train::{Checkpoint, Digest, Teacher};
use attnfd::{SegNet, SegNetConfig, TapId};

const TINY: &str = "\
data.canvas=16
data.train=12
data.val=6
data.seed=3
teacher.widths=8,16,16
teacher.epochs=1
teacher.calibration_epochs=1
student.widths=8,8,8
student.epochs=1
train.batch_size=5
train.eval_every=1
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnfd"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.txt");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_is_byte_stable_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    for rel in [
        "train/manifest.tsv",
        "val/manifest.tsv",
        "train/images/00003.ppm",
        "val/labels/00005.pgm",
    ] {
        assert_eq!(read(a.join(rel)), read(b.join(rel)), "{rel}");
    }
    let train = dataset::load_manifest(&a.join("train/manifest.tsv")).unwrap();
    assert_eq!(train.len(), 12);
    for sample in &train {
        sample.check_labels(4).unwrap();
    }
}

#[test]
fn gen_data_with_no_samples_writes_empty_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "data.train=0\ndata.val=0\n");
    let out = dir.path().join("empty");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert!(read(out.join("train/manifest.tsv")).is_empty());
    assert!(read(out.join("val/manifest.tsv")).is_empty());
}

#[test]
fn training_eval_and_aggregate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let t = dir.path().join("teacher");
    ok(&["train-teacher", "--config", s(&cfg), "--out", s(&t)]);
    for f in [
        "config.txt",
        "log.tsv",
        "teacher.ck",
        "report.txt",
        "metrics.txt",
    ] {
        assert!(t.join(f).is_file(), "{f}");
    }

    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let ck = Checkpoint::load(&t.join("teacher.ck"), None, false).unwrap();
    let eval = ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&t.join("teacher.ck")),
        "--manifest",
        s(&data.join("val/manifest.tsv")),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert!(eval.contains("mIoU"));
    let metrics = String::from_utf8(read(dir.path().join("eval/metrics.txt"))).unwrap();
    let miou: f64 = metrics
        .lines()
        .find_map(|l| l.strip_prefix("miou="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((miou - ck.metric("val_miou").unwrap()).abs() <= 1e-9);

    let mut students = Vec::new();
    for seed in ["0", "1"] {
        let out = dir.path().join(format!("s{seed}"));
        ok(&[
            "distill",
            "--config",
            s(&cfg),
            "--seed",
            seed,
            "--teacher",
            s(&t.join("teacher.ck")),
            "--out",
            s(&out),
        ]);
        students.push(out);
    }
    let agg = ok(&["aggregate", s(&students[0]), s(&students[1]), s(&t)]);
    assert!(agg.contains("== student attnfd taps=BED"));
    assert!(agg.contains("== teacher"));
    assert!(agg
        .lines()
        .any(|l| l.starts_with("seeds") && l.ends_with(" 2")));

    let img = data.join("val/images/00000.ppm");
    let viz = dir.path().join("viz");
    ok(&[
        "viz-attn",
        "--checkpoint",
        s(&students[0].join("student.ck")),
        "--image",
        s(&img),
        "--out",
        s(&viz),
    ]);
    assert!(viz.join("D_refined.pgm").is_file());
}

#[test]
fn distill_none_matches_the_ce_only_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "method=none\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["distill", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["distill", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(read(a.join("student.ck")), read(b.join("student.ck")));

    let cfg_file = attnfd_cli::config::RunConfig::load(&cfg).unwrap();
    let data = cfg_file.splits().unwrap();
    let mut tc = cfg_file.student_train().unwrap();
    tc.calibration_epochs = 0;
    let base =
        attnfd::train::train_teacher::<f64>(&cfg_file.student_net().unwrap(), &tc, &data).unwrap();
    let ck = Checkpoint::load(&a.join("student.ck"), None, false).unwrap();
    let net = attnfd::train::network_from_checkpoint::<f64>(&ck).unwrap();
    for ((n1, p1), (n2, p2)) in net.params().iter().zip(base.teacher.net.params()) {
        assert_eq!(n1, &n2);
        assert_eq!(p1.value(), p2.value(), "{n1}");
    }
}

#[test]
fn zero_attention_heatmaps_match_raw_and_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SegNetConfig {
        widths: vec![8, 16, 16],
        ..SegNetConfig::teacher(4)
    };
    let mut net = SegNet::<f64>::build(cfg.clone(), 5).unwrap();
    net.freeze();
    let cbams = TapId::ALL
        .iter()
        .map(|&id| {
            let c = if id == TapId::Backbone {
                16
            } else {
                cfg.bottleneck()
            };
            (id, CbamParams::zeros(c, 8).unwrap())
        })
        .collect();
    let teacher = Teacher { net, cbams };
    let ck_path = dir.path().join("zero.ck");
    teacher
        .to_checkpoint(Digest([7; 32]))
        .save(&ck_path)
        .unwrap();
    let spec = attnfd::dataset::ShapesSpec {
        canvas: 16,
        ..Default::default()
    };
    let sample = attnfd::dataset::generate(&spec, 0).unwrap();
    let img = dir.path().join("img.ppm");
    dataset::save_sample(&sample, &img, &dir.path().join("lbl.pgm")).unwrap();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = run(&[
        "viz-attn",
        "--checkpoint",
        s(&ck_path),
        "--image",
        s(&img),
        "--out",
        s(&a),
    ]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    ok(&[
        "viz-attn",
        "--checkpoint",
        s(&ck_path),
        "--image",
        s(&img),
        "--out",
        s(&b),
    ]);
    for id in ["B", "E", "D"] {
        let raw = read(a.join(format!("{id}_raw.pgm")));
        assert_eq!(raw, read(a.join(format!("{id}_refined.pgm"))), "{id}");
        assert_eq!(raw, read(a.join(format!("{id}_channel.pgm"))), "{id}");
        let spatial =
            dataset::netpbm::decode(&read(a.join(format!("{id}_spatial.pgm"))), b"P5").unwrap();
        assert!(
            spatial.data.iter().all(|v| *v == 128),
            "sigmoid(0) maps to mid-gray"
        );
        assert_eq!(spatial.width, 16);
        for kind in ["raw", "channel", "refined", "spatial"] {
            let f = format!("{id}_{kind}.pgm");
            assert_eq!(read(a.join(&f)), read(b.join(&f)), "{f}");
        }
    }
    assert!(!stderr.contains("error"));
}

fn code(out: &Output) -> (i32, String) {
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn errors_have_stable_codes_and_categories() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "train.lr=0.1\n").unwrap();
    let (c, e) = code(&run(&[
        "gen-data",
        "--config",
        s(&bad),
        "--out",
        s(dir.path()),
    ]));
    assert_eq!(c, 3);
    assert!(e.starts_with("error[config]: "), "{e}");
    assert!(e.contains("unknown key"), "{e}");
    assert_eq!(e.lines().count(), 1);

    let (c, e) = code(&run(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("missing.ck")),
    ]));
    assert_eq!(c, 4);
    assert!(e.starts_with("error[io]: "), "{e}");

    let cfg = tiny_config(dir.path(), "");
    let (c, e) = code(&run(&[
        "distill",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x")),
    ]));
    assert_eq!(c, 3, "{e}");

    let t = dir.path().join("teacher");
    ok(&["train-teacher", "--config", s(&cfg), "--out", s(&t)]);
    let tck = t.join("teacher.ck");
    let other = tiny_config(dir.path(), "teacher.epochs=2\n");
    let y = dir.path().join("y");
    let args = [
        "distill",
        "--config",
        s(&other),
        "--teacher",
        s(&tck),
        "--out",
        s(&y),
    ];
    let (c, e) = code(&run(&args));
    assert_eq!(c, 5);
    assert!(
        e.starts_with("error[checkpoint]: ") && e.contains("digest"),
        "{e}"
    );
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);

    std::fs::write(dir.path().join("junk.ck"), b"nope").unwrap();
    let (c, _) = code(&run(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("junk.ck")),
    ]));
    assert_eq!(c, 5);

    let (c, _) = code(&run(&[
        "train-teacher",
        "--config",
        s(&cfg),
        "--set",
        "data.canvas=12",
        "--out",
        s(&t),
    ]));
    assert_eq!(c, 7);

    let (c, _) = code(&run(&["frobnicate"]));
    assert_eq!(c, 2);
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "method=none\n");
    let a = dir.path().join("a");
    ok(&["distill", "--config", s(&cfg), "--out", s(&a)]);
    let b = dir.path().join("b");
    ok(&[
        "distill",
        "--config",
        s(&a.join("config.txt")),
        "--out",
        s(&b),
    ]);
    for f in ["student.ck", "log.tsv", "config.txt", "metrics.txt"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
}
