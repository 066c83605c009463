use ndarray::Array3;
use rand::Rng;
use udcvr_core::config::{FlowChoice, MaskConfig, ModelConfig};
use udcvr_core::geometry::Homography;
use udcvr_core::rng::seeded_rng;
use udcvr_core::{Colorspace, FrameStack};
use udcvr_net::{count_params, total_loss, D2RNet, DamState, Direction, MotionInput};
use udcvr_tensor::{Graph, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        channels: vec![8, 10, 12],
        n_resblocks: 1,
        ..ModelConfig::default()
    }
}

fn random_frames(t: usize, h: usize, w: usize, label: &str) -> Vec<Array3<f32>> {
    let mut rng = seeded_rng(7, label);
    (0..t)
        .map(|_| Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..1.0)))
        .collect()
}

fn tensor(a: &Array3<f32>) -> Tensor {
    let (c, h, w) = a.dim();
    Tensor::from_vec(&[c, h, w], a.iter().copied().collect())
}

#[test]
fn encoder_widths_and_resolutions() {
    let net = D2RNet::new(&ModelConfig::default(), &MaskConfig::default(), 0).unwrap();
    let frame = random_frames(1, 64, 64, "enc").remove(0);
    let mut g = Graph::inference(net.params());
    let x = g.constant(tensor(&frame));
    let feats = net.encode(&mut g, x).unwrap();
    let shapes: Vec<Vec<usize>> = feats.iter().map(|&f| g.shape(f).to_vec()).collect();
    assert_eq!(shapes, vec![vec![48, 32, 32], vec![60, 16, 16], vec![72, 8, 8]]);

    let again = net.encode(&mut g, x).unwrap();
    for (a, b) in feats.iter().zip(&again) {
        assert_eq!(g.value(*a).data(), g.value(*b).data());
    }
    let out = net.decode(&mut g, x, &feats[..]).unwrap();
    assert_eq!(g.shape(out), &[3, 64, 64]);
}

#[test]
fn zero_input_encodes_to_bias_only_features() {
    let net = D2RNet::new(&small(), &MaskConfig::default(), 0).unwrap();
    let mut g = Graph::inference(net.params());
    let x = g.constant(Tensor::zeros(&[3, 16, 16]));
    let feats = net.encode(&mut g, x).unwrap();
    // Biases start at zero, so nothing but zeros can come out.
    for f in feats {
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn indivisible_frames_are_rejected_by_prepare() {
    let net = D2RNet::new(&small(), &MaskConfig::default(), 0).unwrap();
    let frames = random_frames(2, 20, 16, "odd");
    assert!(net.prepare(&frames, &MotionInput::Zero).is_err());
}

#[test]
fn step_count_is_directions_times_scales_times_frames() {
    let net = D2RNet::new(&small(), &MaskConfig::default(), 0).unwrap();
    for (t, want) in [(1, 6), (3, 18)] {
        let frames = random_frames(t, 16, 16, "count");
        let input = net.prepare(&frames, &MotionInput::Zero).unwrap();
        let mut g = Graph::inference(net.params());
        let out = net.forward_clip(&mut g, &input).unwrap();
        assert_eq!(out.dam_calls, want);
        assert_eq!(out.intermediates.len(), want);
        assert_eq!(out.frames.len(), t);
    }
}

#[test]
fn zero_state_intermediate_is_the_downsampled_frame() {
    let net = D2RNet::new(&small(), &MaskConfig::default(), 0).unwrap();
    let frame = random_frames(1, 16, 16, "zs").remove(0);
    let mut g = Graph::inference(net.params());
    let f = g.constant(Tensor::from_vec(&[8, 8, 8], (0..512).map(|i| (i % 7) as f32 * 0.1).collect()));
    let fs = g.constant(tensor(&udcvr_core::resample::resize3(&frame, 8, 8)));
    let ones = g.constant(Tensor::full(&[1, 8, 8], 1.0));
    let o = net
        .dam_step(&mut g, Direction::Forward, 0, f, &DamState::default(), fs, (ones, ones), None)
        .unwrap();
    assert_eq!(g.value(o.intermediate).data(), g.value(fs).data());
}

#[test]
fn saturated_frame_hides_short_term_state_from_the_intermediate() {
    let net = D2RNet::new(&small(), &MaskConfig::default(), 3).unwrap();
    let frame = Array3::<f32>::from_elem((3, 16, 16), 1.0);
    let frames = vec![frame.clone(), frame];
    let input = net.prepare(&frames, &MotionInput::Zero).unwrap();
    let _ = input;
    let mut g = Graph::inference(net.params());
    let masks = udcvr_core::masks::mask_at_scale(
        Array3::<f32>::from_elem((3, 16, 16), 1.0).view(),
        &MaskConfig::default(),
        2,
    )
    .unwrap();
    assert!(masks.haze.iter().all(|&v| v == 0.0));
    let mf = g.constant(Tensor::from_vec(&[1, 8, 8], masks.flare.iter().copied().collect()));
    let mh = g.constant(Tensor::from_vec(&[1, 8, 8], masks.haze.iter().copied().collect()));
    let fs = g.constant(Tensor::full(&[3, 8, 8], 1.0));
    let f = g.constant(Tensor::full(&[8, 8, 8], 0.3));
    let long = g.constant(Tensor::full(&[8, 8, 8], 0.5));
    let mut rng = seeded_rng(1, "short");
    let run = |g: &mut Graph, short: Tensor| {
        let short = g.constant(short);
        let st = DamState {
            long: Some(long),
            short: Some(short),
        };
        let o = net.dam_step(g, Direction::Backward, 0, f, &st, fs, (mf, mh), None).unwrap();
        g.value(o.intermediate).data().to_vec()
    };
    let a = run(&mut g, Tensor::zeros(&[8, 8, 8]));
    let b = run(
        &mut g,
        Tensor::from_vec(&[8, 8, 8], (0..512).map(|_| rng.random_range(-5.0..5.0)).collect()),
    );
    assert_eq!(a, b);
}

#[test]
fn disabled_branches_and_gating_change_the_result() {
    let frames = random_frames(3, 16, 16, "toggles");
    let run = |cfg: ModelConfig| {
        let cfg = ModelConfig {
            zero_init_head: false,
            ..cfg
        };
        let net = D2RNet::new(&cfg, &MaskConfig::default(), 11).unwrap();
        let clip = FrameStack::from_frames(&frames, Colorspace::DisplayClamped).unwrap();
        net.restore_clip(&clip, &MotionInput::Zero).unwrap().clip.into_data()
    };
    let full = run(small());
    for cfg in [
        ModelConfig { enable_lfr: false, ..small() },
        ModelConfig { enable_shr: false, ..small() },
        ModelConfig { enable_smg: false, ..small() },
    ] {
        assert_ne!(run(cfg), full);
    }
}

#[test]
fn forward_outputs_ignore_later_inputs() {
    let cfg = ModelConfig {
        zero_init_head: false,
        ..small()
    };
    let net = D2RNet::new(&cfg, &MaskConfig::default(), 5).unwrap();
    let frames = random_frames(4, 16, 16, "causal");
    let input = net.prepare(&frames, &MotionInput::Zero).unwrap();
    // A recording graph keeps every node, so held vars stay valid.
    let mut g = Graph::new(net.params());
    let mut scratch = udcvr_net::ClipOutput {
        frames: vec![],
        intermediates: vec![],
        dam_calls: 0,
    };
    let bwd = net.backward_pass(&mut g, &input, &mut scratch).unwrap();
    let run = |g: &mut Graph, bwd: Vec<Vec<udcvr_tensor::Var>>| {
        let mut out = udcvr_net::ClipOutput {
            frames: vec![],
            intermediates: vec![],
            dam_calls: 0,
        };
        net.forward_pass(g, &input, bwd, &mut out).unwrap();
        out.frames.iter().map(|&v| g.value(v).data().to_vec()).collect::<Vec<_>>()
    };
    let base = run(&mut g, bwd.clone());
    let mut perturbed = bwd.clone();
    for v in perturbed[3].iter_mut() {
        let shape = g.shape(*v).to_vec();
        *v = g.constant(Tensor::full(&shape, 2.5));
    }
    let changed = run(&mut g, perturbed);
    assert_eq!(base[..3], changed[..3]);
    assert_ne!(base[3], changed[3]);
}

#[test]
fn directions_have_separate_weights() {
    let cfg = ModelConfig {
        zero_init_head: false,
        ..small()
    };
    let net = D2RNet::new(&cfg, &MaskConfig::default(), 2).unwrap();
    let names: Vec<&str> = net.params().iter().map(|(_, p)| p.name.as_str()).collect();
    assert!(names.iter().any(|n| n.starts_with("dam.bwd.s2.")));
    assert!(names.iter().any(|n| n.starts_with("dam.fwd.s2.")));
    let mut g = Graph::inference(net.params());
    let f = g.constant(Tensor::full(&[8, 8, 8], 0.2));
    let fs = g.constant(Tensor::full(&[3, 8, 8], 0.4));
    let ones = g.constant(Tensor::full(&[1, 8, 8], 1.0));
    let a = net
        .dam_step(&mut g, Direction::Backward, 0, f, &DamState::default(), fs, (ones, ones), None)
        .unwrap();
    let b = net
        .dam_step(&mut g, Direction::Forward, 0, f, &DamState::default(), fs, (ones, ones), None)
        .unwrap();
    assert_ne!(g.value(a.out).data(), g.value(b.out).data());
}

#[test]
fn identity_motion_matches_no_motion() {
    let cfg = ModelConfig {
        zero_init_head: false,
        ..small()
    };
    let net = D2RNet::new(&cfg, &MaskConfig::default(), 9).unwrap();
    let frame = random_frames(1, 16, 16, "same").remove(0);
    let clip = FrameStack::from_frames(&[frame.clone(), frame.clone(), frame], Colorspace::DisplayClamped).unwrap();
    let known = MotionInput::from_homographies(&[Homography::identity(); 3], (16, 16)).unwrap();
    let a = net.restore_clip(&clip, &known).unwrap();
    let b = net.restore_clip(&clip, &MotionInput::Zero).unwrap();
    assert_eq!(a.clip.data(), b.clip.data());
}

#[test]
fn restore_pads_crops_and_is_identity_at_init() {
    let net = D2RNet::new(&small(), &MaskConfig::default(), 0).unwrap();
    for (t, h, w) in [(1, 16, 16), (3, 13, 15), (2, 9, 16)] {
        let frames = random_frames(t, h, w, "pad");
        let clip = FrameStack::from_frames(&frames, Colorspace::DisplayClamped).unwrap();
        let r = net.restore_clip(&clip, &MotionInput::Zero).unwrap();
        assert_eq!(r.clip.data().dim(), (t, 3, h, w));
        assert_eq!(r.clip.data(), clip.data());
        assert_eq!(r.dam_calls, 6 * t);
        for im in &r.intermediates {
            assert_eq!(im.frame.dim(), (3, h.div_ceil(im.scale), w.div_ceil(im.scale)));
        }
    }
}

#[test]
fn restore_is_bit_reproducible() {
    let cfg = ModelConfig {
        zero_init_head: false,
        ..small()
    };
    let frames = random_frames(3, 16, 16, "det");
    let clip = FrameStack::from_frames(&frames, Colorspace::DisplayClamped).unwrap();
    let a = D2RNet::new(&cfg, &MaskConfig::default(), 4).unwrap();
    let b = D2RNet::new(&cfg, &MaskConfig::default(), 4).unwrap();
    let ra = a.restore_clip(&clip, &MotionInput::Zero).unwrap();
    let rb = b.restore_clip(&clip, &MotionInput::Zero).unwrap();
    assert_eq!(ra.clip.data(), rb.clip.data());
    assert!(ra.clip.data().iter().all(|v| v.is_finite()));
    assert_ne!(ra.clip.data(), clip.data());
}

#[test]
fn learned_flow_runs_and_needs_its_estimator() {
    let cfg = ModelConfig {
        flow: FlowChoice::Learned,
        flow_width: 4,
        flow_levels: 2,
        ..small()
    };
    let net = D2RNet::new(&cfg, &MaskConfig::default(), 0).unwrap();
    let clip = FrameStack::from_frames(&random_frames(2, 16, 16, "lf"), Colorspace::DisplayClamped).unwrap();
    let r = net.restore_clip(&clip, &MotionInput::Learned).unwrap();
    assert_eq!(r.clip.data(), clip.data());
    let plain = D2RNet::new(&small(), &MaskConfig::default(), 0).unwrap();
    assert!(plain.restore_clip(&clip, &MotionInput::Learned).is_err());
}

#[test]
fn parameter_count_is_in_range_and_monotone() {
    let full = count_params(&ModelConfig::full_size()).unwrap();
    assert!((4_000_000..=8_000_000).contains(&full), "{full}");
    let base = count_params(&ModelConfig::default()).unwrap();
    let deeper = count_params(&ModelConfig {
        n_resblocks: 10,
        ..ModelConfig::default()
    })
    .unwrap();
    let narrower = count_params(&ModelConfig {
        channels: vec![24, 30, 36],
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(deeper > base && narrower < base);
}

#[test]
fn every_parameter_receives_a_gradient() {
    let cfg = ModelConfig {
        zero_init_head: false,
        ..ModelConfig::full_size()
    };
    let net = D2RNet::new(&cfg, &MaskConfig::default(), 1).unwrap();
    // Noise with a few saturated 8x8 blocks, so the flare mask is live at every scale.
    let mut frames = random_frames(2, 32, 32, "reach-in");
    for f in frames.iter_mut() {
        f.slice_mut(ndarray::s![.., 0..8, 8..16]).fill(1.0);
        f.slice_mut(ndarray::s![.., 16..24, 24..32]).fill(1.0);
    }
    let gt = random_frames(2, 32, 32, "reach-gt");
    let input = net.prepare(&frames, &MotionInput::Learned).unwrap();
    let mut g = Graph::new(net.params());
    let out = net.forward_clip(&mut g, &input).unwrap();
    let (loss, _) = total_loss(&mut g, &out, &gt, &cfg.scales, true, 1.0, 1e-3).unwrap();
    let grads = g.backward(loss);
    assert!(grads.all_finite());
    let (mut nonzero, mut total) = (0usize, 0usize);
    for (id, p) in net.params().iter() {
        let gr = grads.get(id).unwrap_or_else(|| panic!("no gradient for {}", p.name));
        total += gr.numel();
        nonzero += gr.data().iter().filter(|&&v| v != 0.0).count();
    }
    eprintln!("nonzero gradients: {nonzero}/{total}");
    assert!(nonzero as f64 >= 0.99 * total as f64, "{nonzero}/{total}");
}
