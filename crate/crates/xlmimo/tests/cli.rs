use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use quick_xml::events::Event;
use quick_xml::Reader;

const TINY: &str = r#"
[gen]
array = "na"
inner = 2
outer = 6
subcarriers = 8
slots = 2
n_rf = 4
samples = 24
seed = 5

[data]
holdout = 0.25

[pos_net]
stages = 2
c0 = 2
d_state = 2

[ch_net]
stages = 2
c0 = 2
d_state = 2

[pos_train]
batch = 4
steps = 6
report_every = 2
lr = 0.01

[ch_train]
batch = 4
steps = 4
report_every = 2

[eval]
grid_radii = 6
grid_angles = 6
"#;

fn xlmimo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xlmimo"))
        .args(args)
        .env("XLMIMO_DATA_DIR", dir)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_well_formed(svg: &str) {
    let mut reader = Reader::from_str(svg);
    let mut depth = 0i32;
    loop {
        match reader.read_event().expect("well-formed XML") {
            Event::Start(_) => depth += 1,
            Event::End(_) => depth -= 1,
            Event::Eof => break,
            _ => {}
        }
    }
    assert_eq!(depth, 0);
}

#[test]
fn full_workflow_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), TINY).unwrap();

    let o = xlmimo(dir, &["gen", "--config", "run.toml", "--out", "tiny.xlmd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stderr(&o);
    assert!(log.contains("config hash"), "{log}");
    assert!(log.contains("NA array: 8 elements"), "{log}");
    assert!(log.contains("note: gen.noise not set"), "{log}");
    assert!(dir.join("tiny.manifest.txt").exists());

    let o = xlmimo(dir, &["train", "--config", "run.toml", "--data", "tiny.xlmd", "--stage", "ch"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--pos-ckpt"));

    let o =
        xlmimo(dir, &["train", "--config", "run.toml", "--data", "tiny.xlmd", "--stage", "pos", "--out", "pos.xlmw"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loss = fs::read_to_string(dir.join("pos.loss.csv")).unwrap();
    // Steps 0, 2, 4 of 6.
    assert_eq!(loss.lines().count(), 1 + 3, "{loss}");

    let o = xlmimo(
        dir,
        &[
            "train",
            "--config",
            "run.toml",
            "--data",
            "tiny.xlmd",
            "--stage",
            "ch",
            "--pos-ckpt",
            "pos.xlmw",
            "--out",
            "ch.xlmw",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    // Checkpoints swapped: the channel network cannot serve as stage 1.
    let o = xlmimo(
        dir,
        &[
            "train",
            "--config",
            "run.toml",
            "--data",
            "tiny.xlmd",
            "--stage",
            "ch",
            "--pos-ckpt",
            "ch.xlmw",
            "--out",
            "x.xlmw",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = xlmimo(
        dir,
        &[
            "eval",
            "--config",
            "run.toml",
            "--data",
            "tiny.xlmd",
            "--pos-ckpt",
            "pos.xlmw",
            "--ch-ckpt",
            "ch.xlmw",
            "--methods",
            "ls,grid,cpmamba",
            "--snr",
            "-10,-5,0,10,20",
            "--out",
            "metrics.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",6")), "{csv}");

    let o = xlmimo(dir, &["plot", "--input", "metrics.csv", "--out", "metrics.svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(dir.join("metrics.svg")).unwrap();
    assert_well_formed(&svg);
    assert_eq!(svg.matches("<polyline").count(), 4);
}

#[test]
fn oracle_plot_is_a_flat_zero_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), TINY).unwrap();
    assert!(xlmimo(dir, &["gen", "--config", "run.toml"]).status.success());
    // Default paths: data dir from the environment, dataset named after the preset.
    assert!(dir.join("dataset.xlmd").exists());
    let o = xlmimo(dir, &["eval", "--config", "run.toml", "--methods", "oracle", "--snr", "0,10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(csv.contains("oracle,0,0,0,-inf,6") && csv.contains("oracle,10,0,0,-inf,6"), "{csv}");
    assert!(xlmimo(dir, &["plot"]).status.success());
    let svg = fs::read_to_string(dir.join("metrics.svg")).unwrap();
    assert_well_formed(&svg);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), TINY).unwrap();

    fs::write(dir.join("bad.toml"), "[gen]\nsamplez = 3\n").unwrap();
    assert_eq!(xlmimo(dir, &["gen", "--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(xlmimo(dir, &["gen", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(xlmimo(dir, &["train"]).status.code(), Some(2));
    assert_eq!(xlmimo(dir, &["gen", "--config", "missing.toml"]).status.code(), Some(3));

    fs::write(dir.join("empty.csv"), "").unwrap();
    assert_eq!(xlmimo(dir, &["plot", "--input", "empty.csv"]).status.code(), Some(2));

    fs::write(dir.join("junk.xlmd"), b"XLMDjunk").unwrap();
    let o = xlmimo(dir, &["train", "--config", "run.toml", "--data", "junk.xlmd", "--stage", "pos"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    assert!(xlmimo(dir, &["gen", "--config", "run.toml", "--out", "d.xlmd"]).status.success());
    let blowup = TINY.replace("lr = 0.01", "lr = 1e38");
    fs::write(dir.join("blowup.toml"), blowup).unwrap();
    let o = xlmimo(dir, &["train", "--config", "blowup.toml", "--data", "d.xlmd", "--stage", "pos"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss at step"));
}

#[test]
fn same_seed_same_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), TINY).unwrap();
    for name in ["a.xlmd", "b.xlmd"] {
        assert!(xlmimo(dir, &["gen", "--config", "run.toml", "--out", name]).status.success());
    }
    assert!(xlmimo(dir, &["gen", "--config", "run.toml", "--seed", "6", "--out", "c.xlmd"]).status.success());
    let a = fs::read(dir.join("a.xlmd")).unwrap();
    assert_eq!(a, fs::read(dir.join("b.xlmd")).unwrap());
    assert_ne!(a, fs::read(dir.join("c.xlmd")).unwrap());
}

#[test]
fn pure_los_generation_is_noted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("los.toml"), TINY.replace("seed = 5", "seed = 5\nclusters_min = 0\nclusters_max = 0")).unwrap();
    let o = xlmimo(dir, &["gen", "--config", "los.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("pure LoS"));
}
