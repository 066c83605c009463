use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[synth]
clips = 1
frames = 3
height = 32
width = 32

[synth.psf]
size = 15

[model]
channels = [6, 6, 6]
n_resblocks = 1

[train]
total_iters = 2
flow_freeze_iters = 0
patch = 32
seq_len = 3
val_every = 0
val_clips = 1
ckpt_every = 1
"#;

fn udcvr(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udcvr"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn synth_train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = tiny_config(out);

    ok(&udcvr(out, &["synth", "--config", &cfg]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("dataset/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["clips"].as_array().unwrap().len(), 1);

    ok(&udcvr(out, &["train", "--config", &cfg, "train.total_iters=3", "train.lr_main=0.0005"]));
    let log = fs::read_to_string(out.join("train/metrics.csv")).unwrap();
    let header: Vec<&str> = log.lines().take_while(|l| l.starts_with('#')).collect();
    assert!(header.iter().any(|l| l.contains("total_iters = 3")), "{header:?}");
    assert!(header.iter().any(|l| l.contains("lr_main = 0.0005")), "{header:?}");
    assert!(out.join("train/checkpoints/latest.ckpt").is_file());

    ok(&udcvr(out, &["infer"]));
    assert!(out.join("restored/clip0000").is_dir());

    let o = udcvr(out, &["eval", "--config", &cfg]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean PSNR"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval/report.json")).unwrap()).unwrap();
    assert!(report["mean_psnr"].as_f64().unwrap().is_finite());
    assert!(out.join("eval/report.csv").is_file());

    ok(&udcvr(out, &["eval", "--inputs"]));
}

#[test]
fn bad_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = udcvr(dir.path(), &["synth", "train.no_such_knob=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.no_such_knob"));

    let p = dir.path().join("bad.toml");
    fs::write(&p, "[model]\nwidthh = 3\n").unwrap();
    let o = udcvr(dir.path(), &["synth", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widthh"));
}

#[test]
fn corrupt_manifest_exits_1_and_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("dataset/manifest.json");
    fs::create_dir_all(m.parent().unwrap()).unwrap();
    fs::write(&m, "{ not json").unwrap();
    let o = udcvr(dir.path(), &["eval", "--inputs"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
}

#[test]
fn mask_and_psf_viz_write_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = tiny_config(out);
    ok(&udcvr(out, &["synth", "--config", &cfg]));
    let clip = out.join("dataset/clips/clip0000/degraded");

    ok(&udcvr(out, &["mask", "--input", clip.to_str().unwrap(), "--scale", "2"]));
    for t in 0..3 {
        for kind in ["flare", "haze"] {
            assert!(out.join(format!("masks/{t:06}_{kind}.png")).is_file());
        }
    }
    ok(&udcvr(out, &["mask", "--input", clip.join("000001.png").to_str().unwrap()]));
    assert!(out.join("masks/000001_flare.png").is_file());

    ok(&udcvr(out, &["psf-viz", "--config", &cfg]));
    for c in 0..3 {
        assert!(out.join(format!("psf/psf_c{c}.png")).is_file());
    }
    let psf_file = out.join("dataset/clips/clip0000/psf");
    let first = fs::read_dir(&psf_file).unwrap().next().unwrap().unwrap().path();
    ok(&udcvr(out, &["psf-viz", "--psf", first.to_str().unwrap(), "--decades", "3"]));

    let o = udcvr(out, &["psf-viz", "--decades", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn smoke_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&udcvr(a.path(), &["smoke", "--seed", "3"]));
    ok(&udcvr(b.path(), &["smoke", "--seed", "3"]));
    let ra = fs::read_to_string(a.path().join("smoke.json")).unwrap();
    let rb = fs::read_to_string(b.path().join("smoke.json")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(
        fs::read(a.path().join("eval/report.json")).unwrap(),
        fs::read(b.path().join("eval/report.json")).unwrap()
    );
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut stack = vec![root];
    let mut n = 0;
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "toml") {
                udcvr_core::RunConfig::load(&p, &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
                n += 1;
            }
        }
    }
    assert!(n >= 15, "{n} configs");
    let full = udcvr_core::RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml"), &[]).unwrap();
    assert_eq!(full, udcvr_core::RunConfig::default());
}
