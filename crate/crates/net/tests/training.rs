use std::fs;

use ndarray::{s, Array3};
use proptest::prelude::*;
use rand::Rng;
use udcvr_core::config::{AugConfig, FlowChoice, ModelConfig, RunConfig, Schedule};
use udcvr_core::geometry::{homography_to_flow, warp_bilinear, FlowField, Homography};
use udcvr_core::rng::seeded_rng;
use udcvr_core::{Colorspace, FrameStack};
use udcvr_net::{
    augment, charbonnier, load_checkpoint, total_loss, train, Augmentation, ClipOutput, Intermediate, NetError,
    TrainClip, TrainData, TrainOptions, Trainer,
};
use udcvr_tensor::{Graph, ParamGroup, ParamStore, Tensor};

fn noise(h: usize, w: usize, label: &str) -> Array3<f32> {
    let mut rng = seeded_rng(3, label);
    Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..1.0))
}

/// A smooth clip drifting one pixel per frame, with a blurred, darkened copy
/// as its degraded input.
fn drifting_clip(id: &str, t: usize, h: usize, w: usize) -> TrainClip {
    let base = noise(h + t + 2, w + t + 2, id);
    let smooth = |y: usize, x: usize, c: usize| {
        let mut acc = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                acc += base[(c, y + dy, x + dx)];
            }
        }
        acc / 9.0
    };
    let clean: Vec<Array3<f32>> = (0..t)
        .map(|k| Array3::from_shape_fn((3, h, w), |(c, y, x)| smooth(y, x + t - k - 1, c)))
        .collect();
    let degraded: Vec<Array3<f32>> = clean.iter().map(|f| f.mapv(|v| 0.6 * v + 0.15)).collect();
    let steps = vec![Homography::translation(1.0, 0.0); t];
    TrainClip::new(
        id,
        &FrameStack::from_frames(&degraded, Colorspace::DisplayClamped).unwrap(),
        &FrameStack::from_frames(&clean, Colorspace::DisplayClamped).unwrap(),
        Some(steps),
    )
    .unwrap()
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        channels: vec![6, 6, 6],
        n_resblocks: 1,
        ..ModelConfig::default()
    };
    cfg.train.total_iters = 10;
    cfg.train.flow_freeze_iters = 0;
    cfg.train.batch = 1;
    cfg.train.patch = 16;
    cfg.train.seq_len = 3;
    cfg.train.ckpt_every = 5;
    cfg.train.val_every = 5;
    cfg.train.val_clips = 1;
    cfg.train.lr_main = 1e-3;
    cfg
}

#[test]
fn flips_are_involutions_and_quarter_turns_cycle() {
    let f = noise(5, 7, "aug");
    let flow = FlowField::new(noise(5, 7, "augflow").slice(s![0..2, .., ..]).to_owned()).unwrap();
    for aug in [
        Augmentation { hflip: true, ..Default::default() },
        Augmentation { vflip: true, ..Default::default() },
    ] {
        assert_eq!(aug.apply_frame(&aug.apply_frame(&f)), f);
        assert_eq!(aug.apply_flow(&aug.apply_flow(&flow)).uv(), flow.uv());
    }
    let rot = Augmentation { rot90: true, ..Default::default() };
    let mut g = f.clone();
    let mut fl = flow.clone();
    for k in 0..4 {
        if k > 0 {
            assert_ne!(g, f);
        }
        g = rot.apply_frame(&g);
        fl = rot.apply_flow(&fl);
    }
    assert_eq!(g, f);
    assert_eq!(fl.uv(), flow.uv());
    assert_eq!(rot.apply_frame(&f).dim(), (3, 7, 5));
}

#[test]
fn horizontal_flip_mirrors_and_negates_u() {
    let flow = FlowField::new(noise(4, 6, "mirror").slice(s![0..2, .., ..]).to_owned()).unwrap();
    let out = Augmentation { hflip: true, ..Default::default() }.apply_flow(&flow);
    for y in 0..4 {
        for x in 0..6 {
            assert_eq!(out.uv()[(0, y, x)], -flow.uv()[(0, y, 5 - x)]);
            assert_eq!(out.uv()[(1, y, x)], flow.uv()[(1, y, 5 - x)]);
        }
    }
}

#[test]
fn augmented_flow_still_aligns_augmented_frames() {
    let src = noise(20, 24, "consist");
    let h = Homography::rotation_about(0.07, 11.0, 9.0).compose(&Homography::translation(1.3, -0.6));
    let flow = homography_to_flow(&h, (20, 24)).unwrap();
    let warped = warp_bilinear(src.view(), flow.uv().view()).unwrap();
    for bits in 0..8u8 {
        let aug = Augmentation {
            hflip: bits & 1 != 0,
            vflip: bits & 2 != 0,
            rot90: bits & 4 != 0,
        };
        let lhs = warp_bilinear(aug.apply_frame(&src).view(), aug.apply_flow(&flow).uv().view()).unwrap();
        let rhs = aug.apply_frame(&warped);
        let err = lhs.iter().zip(rhs.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-4, "{aug:?}: {err}");
    }
}

#[test]
fn augment_applies_one_draw_to_every_frame() {
    let frames = vec![noise(6, 6, "a"), noise(6, 6, "b")];
    let flows = vec![FlowField::zeros(6, 6); 2];
    let mut rng = seeded_rng(0, "draw");
    let (out, _, aug) = augment(&frames, &flows, &mut rng, &AugConfig::default());
    for (o, f) in out.iter().zip(&frames) {
        assert_eq!(*o, aug.apply_frame(f));
    }
    let off = AugConfig {
        hflip: false,
        vflip: false,
        rot90: false,
    };
    let (same, _, none) = augment(&frames, &flows, &mut rng, &off);
    assert_eq!(none, Augmentation::default());
    assert_eq!(same, frames);
}

proptest! {
    #[test]
    fn charbonnier_is_bounded_below_by_eps(
        xs in prop::collection::vec(-2.0f32..2.0, 12),
        ys in prop::collection::vec(-2.0f32..2.0, 12),
    ) {
        let x = Array3::from_shape_vec((3, 2, 2), xs).unwrap();
        let y = Array3::from_shape_vec((3, 2, 2), ys).unwrap();
        let v = charbonnier(x.view(), y.view(), 1e-3).unwrap();
        prop_assert!(v >= 1e-3);
        prop_assert_eq!(charbonnier(x.view(), x.view(), 1e-3).unwrap(), 1e-3);
        if x != y {
            prop_assert!(v > 1e-3);
        }
    }
}

fn perfect_output(g: &mut Graph, gt: &[Array3<f32>], scales: &[usize]) -> ClipOutput {
    let mut out = ClipOutput {
        frames: vec![],
        intermediates: vec![],
        dam_calls: 0,
    };
    for (t, y) in gt.iter().enumerate() {
        let (c, h, w) = y.dim();
        out.frames.push(g.constant(Tensor::from_vec(&[c, h, w], y.iter().copied().collect())));
        for (i, &s) in scales.iter().enumerate() {
            let r = udcvr_core::resample::resize3(y, h / s, w / s);
            let var = g.constant(Tensor::from_vec(&[c, h / s, w / s], r.iter().copied().collect()));
            out.intermediates.push(Intermediate {
                scale: i,
                direction: udcvr_net::Direction::Forward,
                t,
                var,
            });
        }
    }
    out
}

#[test]
fn loss_floor_and_supervision_toggles() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let gt = vec![noise(8, 8, "g0"), noise(8, 8, "g1")];
    let scales = [2, 4];
    let out = perfect_output(&mut g, &gt, &scales);
    let eps = 1e-3;
    let (_, b) = total_loss(&mut g, &out, &gt, &scales, true, 0.5, eps).unwrap();
    assert!((b.total - 1.5 * eps).abs() < 1e-9, "{}", b.total);

    // Make the final frames wrong so the terms differ.
    let mut off = out.clone();
    off.frames[0] = g.constant(Tensor::zeros(&[3, 8, 8]));
    let (_, no_sup) = total_loss(&mut g, &off, &gt, &scales, false, 1.0, eps).unwrap();
    let (_, zero_w) = total_loss(&mut g, &off, &gt, &scales, true, 0.0, eps).unwrap();
    assert_eq!(no_sup.total, no_sup.final_term);
    assert!((zero_w.total - no_sup.total).abs() < 1e-7);

    let mut bare = off.clone();
    bare.intermediates.clear();
    assert!(total_loss(&mut g, &bare, &gt, &scales, true, 1.0, eps).is_err());
    assert!(total_loss(&mut g, &bare, &gt, &scales, false, 1.0, eps).is_ok());
}

#[test]
fn short_run_writes_checkpoints_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = TrainData {
        clips: vec![drifting_clip("c0", 4, 16, 16)],
    };
    let summary = train(&cfg, data, dir.path(), &TrainOptions::default()).unwrap();
    assert_eq!(summary.iter, 10);
    assert!(summary.last.unwrap().loss.total.is_finite());
    assert!(summary.val_psnr.unwrap().is_finite());
    for f in ["checkpoints/latest.ckpt", "checkpoints/iter_000005.ckpt", "checkpoints/iter_000010.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(log.contains("# total_iters = 10"));
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], udcvr_net::METRICS_COLUMNS);
    assert_eq!(rows.len(), 11);
    let ck = load_checkpoint(&dir.path().join("checkpoints/latest.ckpt")).unwrap();
    assert_eq!(ck.iter, 10);
    assert_eq!(ck.config, cfg);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny_config();
    let data = || TrainData {
        clips: vec![drifting_clip("c0", 4, 24, 24), drifting_clip("c1", 5, 16, 20)],
    };
    let whole = tempfile::tempdir().unwrap();
    train(&cfg, data(), whole.path(), &TrainOptions::default()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = train(
        &cfg,
        data(),
        split.path(),
        &TrainOptions {
            resume: false,
            stop_after: Some(5),
        },
    )
    .unwrap();
    assert_eq!(first.iter, 5);
    let second = train(
        &cfg,
        data(),
        split.path(),
        &TrainOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(second.iter, 10);
    let a = load_checkpoint(&whole.path().join("checkpoints/latest.ckpt")).unwrap();
    let b = load_checkpoint(&split.path().join("checkpoints/latest.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
    let rows = |p: &std::path::Path| {
        fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(rows(whole.path()), rows(split.path()));
}

#[test]
fn flow_estimator_stays_frozen_then_moves() {
    let mut cfg = tiny_config();
    cfg.model.flow = FlowChoice::Learned;
    cfg.model.flow_width = 4;
    cfg.model.flow_levels = 2;
    cfg.model.zero_init_head = false;
    cfg.train.flow_freeze_iters = 3;
    cfg.train.total_iters = 5;
    let data = TrainData {
        clips: vec![drifting_clip("c0", 4, 16, 16)],
    };
    let mut tr = Trainer::new(&cfg, data).unwrap();
    let flow_values = |tr: &Trainer| {
        tr.model()
            .params()
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Flow)
            .map(|(_, p)| p.value.data().to_vec())
            .collect::<Vec<_>>()
    };
    let main_values = |tr: &Trainer| {
        tr.model()
            .params()
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Main)
            .map(|(_, p)| p.value.data().to_vec())
            .collect::<Vec<_>>()
    };
    let init_flow = flow_values(&tr);
    let init_main = main_values(&tr);
    assert!(!init_flow.is_empty());
    for _ in 0..3 {
        let s = tr.step().unwrap();
        assert_eq!(s.lr_flow, None);
        assert_eq!(flow_values(&tr), init_flow);
    }
    assert_ne!(main_values(&tr), init_main);
    let s = tr.step().unwrap();
    assert!(s.lr_flow.unwrap() > 0.0);
    assert_ne!(flow_values(&tr), init_flow);
}

#[test]
fn cosine_schedule_anneals_to_zero() {
    let mut cfg = tiny_config();
    cfg.train.total_iters = 100;
    cfg.train.flow_freeze_iters = 10;
    let tr = Trainer::new(
        &cfg,
        TrainData {
            clips: vec![drifting_clip("c0", 3, 16, 16)],
        },
    )
    .unwrap();
    assert_eq!(tr.lr(ParamGroup::Main, 0), Some(cfg.train.lr_main));
    assert!((tr.lr(ParamGroup::Main, 50).unwrap() - 0.5 * cfg.train.lr_main).abs() < 1e-12);
    assert!(tr.lr(ParamGroup::Main, 100).unwrap().abs() < 1e-15);
    assert_eq!(tr.lr(ParamGroup::Flow, 9), None);
    assert!(tr.lr(ParamGroup::Flow, 10).unwrap() > 0.0);
    cfg.train.schedule = Schedule::Constant;
    let tr = Trainer::new(
        &cfg,
        TrainData {
            clips: vec![drifting_clip("c0", 3, 16, 16)],
        },
    )
    .unwrap();
    assert_eq!(tr.lr(ParamGroup::Main, 99), Some(cfg.train.lr_main));
}

#[test]
fn training_loss_goes_down() {
    let mut cfg = tiny_config();
    cfg.model.channels = vec![8, 8, 8];
    cfg.train.total_iters = 500;
    cfg.train.patch = 48;
    cfg.train.seq_len = 6;
    cfg.train.aug = AugConfig {
        hflip: false,
        vflip: false,
        rot90: false,
    };
    let mut tr = Trainer::new(
        &cfg,
        TrainData {
            clips: vec![drifting_clip("c0", 6, 48, 48)],
        },
    )
    .unwrap();
    let first = tr.step().unwrap().loss.total;
    let mut last = first;
    while !tr.finished() {
        last = tr.step().unwrap().loss.total;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let mut clip = drifting_clip("bad", 4, 16, 16);
    clip.target[1][(0, 3, 3)] = f32::NAN;
    let err = train(&cfg, TrainData { clips: vec![clip] }, dir.path(), &TrainOptions::default()).unwrap_err();
    match err {
        NetError::NonFinite { iter, batch } => {
            assert_eq!(iter, 1);
            assert!(batch[0].starts_with("bad["));
        }
        e => panic!("unexpected {e}"),
    }
    let dump = fs::read_to_string(dir.path().join("nan_dump.json")).unwrap();
    assert!(dump.contains("bad["));
}

#[test]
fn undersized_or_misaligned_data_is_rejected() {
    let mut cfg = tiny_config();
    let small = || TrainData {
        clips: vec![drifting_clip("c0", 2, 16, 16)],
    };
    assert!(Trainer::new(&cfg, small()).is_err());
    cfg.train.seq_len = 2;
    cfg.train.patch = 12;
    assert!(Trainer::new(&cfg, small()).is_err());
    cfg.train.patch = 16;
    assert!(Trainer::new(&cfg, small()).is_ok());
    assert!(Trainer::new(&cfg, TrainData { clips: vec![] }).is_err());
}

#[test]
fn corrupt_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    fs::write(&p, b"UDCVRCKP\x01\x00\x00\x00").unwrap();
    let err = load_checkpoint(&p).unwrap_err().to_string();
    assert!(err.contains("x.ckpt"), "{err}");
    fs::write(&p, b"garbage").unwrap();
    assert!(load_checkpoint(&p).is_err());
}
