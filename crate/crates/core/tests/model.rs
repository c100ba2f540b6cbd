mod common;

use common::{noise_audio, random_features, random_model, random_vec, tiny_config, unit_vec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vapp_core::codebook::state_swap_map;
use vapp_core::model::{
    loss, loss_on_tape, Checkpoint, Filterbank, FrameLabels, Mode, ModelConfig, ModelOutputs,
    PromptEmbedding, PromptVap,
};
use vapp_core::VapError;
use vapp_numcore::{Tape, Tensor};

fn labels(t: usize, valid: usize, seed: u64) -> FrameLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FrameLabels {
        vap: (0..valid).map(|_| rng.random_range(0..256)).collect(),
        vad: (0..t).map(|_| [rng.random(), rng.random()]).collect(),
    }
}

fn loss_value(
    model: &PromptVap<f64>,
    feats: [&Tensor<f64>; 2],
    prompts: [&[f64]; 2],
    lab: &FrameLabels,
) -> f64 {
    let out = model.forward_features(feats, prompts).unwrap();
    loss(&out, lab, prompts).unwrap().total
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let model = random_model::<f64>(cfg.clone(), 1);
    let t = 20;
    let fa = random_features::<f64>(t, cfg.feature_dim, 2);
    let fb = random_features::<f64>(t, cfg.feature_dim, 3);
    let (pa, pb) = (unit_vec::<f64>(8, 4), unit_vec::<f64>(8, 5));
    let lab = labels(t, 12, 6);

    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = model
        .graph(&mut tape, [&fa, &fb], [&pa, &pb], Mode::Train(&mut rng))
        .unwrap();
    let l = loss_on_tape(&mut tape, &g, &lab, [&pa, &pb]).unwrap();
    tape.backward(l.total).unwrap();

    let names: Vec<&String> = model.params().keys().collect();
    let mut pick = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    // Every tensor at least once, then random extra entries.
    let mut targets: Vec<(usize, usize)> = (0..names.len())
        .map(|i| (i, pick.random_range(0..model.params()[names[i]].len())))
        .collect();
    while targets.len() < 240 {
        let i = pick.random_range(0..names.len());
        targets.push((i, pick.random_range(0..model.params()[names[i]].len())));
    }
    let h = 1e-3;
    for (i, j) in targets {
        let name = names[i];
        let analytic = tape.grad(g.params[name]).unwrap().data()[j];
        let at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().get_mut(name).unwrap().data_mut()[j] += delta;
            loss_value(&m, [&fa, &fb], [&pa, &pb], &lab)
        };
        // Fourth-order central stencil.
        let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            rel < 1e-4,
            "{name}[{j}]: analytic {analytic} numeric {numeric}"
        );
        worst = worst.max(rel);
        checked += 1;
    }
    assert!(checked >= 200);
    assert!(worst < 1e-4);
}

#[test]
fn tape_and_direct_losses_agree() {
    let cfg = tiny_config();
    let model = random_model::<f64>(cfg.clone(), 11);
    let fa = random_features::<f64>(15, cfg.feature_dim, 12);
    let fb = random_features::<f64>(15, cfg.feature_dim, 13);
    let (pa, pb) = (unit_vec::<f64>(8, 14), unit_vec::<f64>(8, 15));
    let lab = labels(15, 9, 16);
    let mut tape = Tape::new();
    let g = model
        .graph(&mut tape, [&fa, &fb], [&pa, &pb], Mode::Eval)
        .unwrap();
    let on_tape = loss_on_tape(&mut tape, &g, &lab, [&pa, &pb])
        .unwrap()
        .values(&tape);
    let direct = loss(
        &model.forward_features([&fa, &fb], [&pa, &pb]).unwrap(),
        &lab,
        [&pa, &pb],
    )
    .unwrap();
    for (a, b) in [
        (on_tape.total, direct.total),
        (on_tape.vap, direct.vap),
        (on_tape.vad, direct.vad),
        (on_tape.prompt, direct.prompt),
    ] {
        assert!((a - b).abs() < 1e-10);
    }
    assert!((direct.total - (direct.vap + direct.vad + direct.prompt)).abs() < 1e-6);
}

#[test]
fn untrained_vap_loss_is_log_256() {
    let cfg = tiny_config();
    let model = PromptVap::<f64>::init(cfg.clone(), 3).unwrap();
    let fa = random_features::<f64>(30, cfg.feature_dim, 1);
    let fb = random_features::<f64>(30, cfg.feature_dim, 2);
    let (pa, pb) = (unit_vec::<f64>(8, 3), unit_vec::<f64>(8, 4));
    let out = model.forward_features([&fa, &fb], [&pa, &pb]).unwrap();
    let l = loss(&out, &labels(30, 20, 5), [&pa, &pb]).unwrap();
    assert!((l.vap - 256f64.ln()).abs() < 1e-12);
}

#[test]
fn perfect_reconstruction_has_zero_prompt_loss() {
    let (pa, pb) = (unit_vec::<f64>(4, 1), unit_vec::<f64>(4, 2));
    let t = 3;
    let rows = |p: &[f64]| Tensor::new(&[t, 4], p.repeat(t)).unwrap();
    let out = ModelOutputs {
        vap_logits: Tensor::zeros(&[t, 256]),
        vad_logits: Tensor::zeros(&[t, 2]),
        prompt_recon: [rows(&pa), rows(&pb)],
        p_now: vec![[0.5, 0.5]; t],
        p_future: vec![[0.5, 0.5]; t],
    };
    let l = loss(&out, &labels(t, 2, 0), [&pa, &pb]).unwrap();
    assert_eq!(l.prompt, 0.0);
    assert!((l.vad - 2f64.ln()).abs() < 1e-12);
    assert!(matches!(
        loss(&out, &labels(t, 0, 0), [&pa, &pb]),
        Err(VapError::Window(_))
    ));
}

#[test]
fn output_shapes_and_normalization() {
    let cfg = tiny_config();
    let model = random_model::<f32>(cfg.clone(), 21);
    let fa = random_features::<f32>(25, cfg.feature_dim, 1);
    let fb = random_features::<f32>(25, cfg.feature_dim, 2);
    let (pa, pb) = (unit_vec::<f32>(8, 3), unit_vec::<f32>(8, 4));
    let out = model.forward_features([&fa, &fb], [&pa, &pb]).unwrap();
    assert_eq!(out.vap_logits.shape(), &[25, 256]);
    assert_eq!(out.vad_logits.shape(), &[25, 2]);
    assert_eq!(out.prompt_recon[0].shape(), &[25, 8]);
    assert_eq!(out.prompt_recon[1].shape(), &[25, 8]);
    for t in 0..25 {
        let sm = vapp_numcore::softmax(out.vap_logits.row(t));
        assert!((sm.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((out.p_now[t][0] + out.p_now[t][1] - 1.0).abs() < 1e-12);
        assert!((out.p_future[t][0] + out.p_future[t][1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn swapping_channels_and_prompts_permutes_outputs_exactly() {
    let cfg = tiny_config();
    let model = random_model::<f32>(cfg.clone(), 31);
    let fa = random_features::<f32>(40, cfg.feature_dim, 1);
    let fb = random_features::<f32>(40, cfg.feature_dim, 2);
    let (pa, pb) = (unit_vec::<f32>(8, 3), unit_vec::<f32>(8, 4));
    let ab = model.forward_features([&fa, &fb], [&pa, &pb]).unwrap();
    let ba = model.forward_features([&fb, &fa], [&pb, &pa]).unwrap();
    let swap = state_swap_map();
    for t in 0..40 {
        for k in 0..256 {
            assert_eq!(ab.vap_logits.row(t)[k], ba.vap_logits.row(t)[swap[k]]);
        }
        assert_eq!(ab.vad_logits.row(t)[0], ba.vad_logits.row(t)[1]);
        assert_eq!(ab.vad_logits.row(t)[1], ba.vad_logits.row(t)[0]);
        assert!((ab.p_now[t][0] - ba.p_now[t][1]).abs() < 1e-12);
    }
    assert_eq!(ab.prompt_recon[0], ba.prompt_recon[1]);
    assert_eq!(ab.prompt_recon[1], ba.prompt_recon[0]);
}

#[test]
fn outputs_never_depend_on_later_audio() {
    let cfg = tiny_config();
    let model = random_model::<f32>(cfg.clone(), 41);
    let fb = Filterbank::new();
    let (pa, pb) = (
        PromptEmbedding::new("a", unit_vec(8, 1)).unwrap(),
        PromptEmbedding::new("b", unit_vec(8, 2)).unwrap(),
    );
    let a = noise_audio(16000 * 3, 3);
    let b = noise_audio(16000 * 3, 4);
    let full = model.forward(&fb, [&a, &b], [&pa, &pb]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let t: usize = rng.random_range(0..148);
        let (mut a2, mut b2) = (a.clone(), b.clone());
        a2[320 * (t + 1)..].iter_mut().for_each(|x| *x = 0.0);
        b2[320 * (t + 1)..].iter_mut().for_each(|x| *x = 0.0);
        let cut = model.forward(&fb, [&a2, &b2], [&pa, &pb]).unwrap();
        for f in 0..=t {
            assert_eq!(full.vap_logits.row(f), cut.vap_logits.row(f));
            assert_eq!(full.vad_logits.row(f), cut.vad_logits.row(f));
            assert_eq!(full.prompt_recon[0].row(f), cut.prompt_recon[0].row(f));
            assert_eq!(full.prompt_recon[1].row(f), cut.prompt_recon[1].row(f));
        }
        assert_ne!(full.vap_logits.row(t + 1), cut.vap_logits.row(t + 1));
    }
}

#[test]
fn prompt_changes_reach_every_frame() {
    let cfg = tiny_config();
    let model = random_model::<f32>(cfg.clone(), 51);
    let fa = random_features::<f32>(30, cfg.feature_dim, 1);
    let fb = random_features::<f32>(30, cfg.feature_dim, 2);
    let (pa, pa2, pb) = (
        unit_vec::<f32>(8, 3),
        unit_vec::<f32>(8, 33),
        unit_vec::<f32>(8, 4),
    );
    let x = model.forward_features([&fa, &fb], [&pa, &pb]).unwrap();
    let y = model.forward_features([&fa, &fb], [&pa2, &pb]).unwrap();
    for t in 0..30 {
        let diff = x
            .vap_logits
            .row(t)
            .iter()
            .zip(y.vap_logits.row(t))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff > 0.0, "frame {t}");
    }
}

#[test]
fn forward_is_deterministic_and_guards_empty_input() {
    let cfg = tiny_config();
    let model = random_model::<f32>(cfg.clone(), 61);
    let fb = Filterbank::new();
    let pa = PromptEmbedding::new("a", unit_vec(8, 1)).unwrap();
    let a = noise_audio(16000, 3);
    let x = model.forward(&fb, [&a, &a], [&pa, &pa]).unwrap();
    let y = model.forward(&fb, [&a, &a], [&pa, &pa]).unwrap();
    assert_eq!(x, y);
    // Identical channels and prompts give identical per-channel outputs.
    assert_eq!(x.prompt_recon[0], x.prompt_recon[1]);
    let short = vec![0.0f32; 300];
    assert!(matches!(
        model.forward(&fb, [&short, &short], [&pa, &pa]),
        Err(VapError::Window(_))
    ));
}

#[test]
fn prompt_projection_examples() {
    let mut cfg = tiny_config();
    cfg.embed_dim = 16;
    let mut model = random_model::<f64>(cfg.clone(), 71);
    let e: Vec<f64> = unit_vec(16, 2);
    {
        let p = model.params_mut();
        p.get_mut("prompt.proj.w").unwrap().data_mut().fill(0.0);
        p.get_mut("prompt.proj.b").unwrap().data_mut().fill(0.0);
    }
    assert!(model.project_prompt(&e).unwrap().iter().all(|&x| x == 0.0));
    {
        let w = model
            .params_mut()
            .get_mut("prompt.proj.w")
            .unwrap()
            .data_mut();
        for i in 0..16 {
            w[i * 16 + i] = 1.0;
        }
    }
    assert_eq!(model.project_prompt(&e).unwrap(), e);
    assert!(matches!(
        model.project_prompt(&e[..8]),
        Err(VapError::Config(_))
    ));
}

#[test]
fn prompt_projection_receives_gradient() {
    let cfg = tiny_config();
    let model = random_model::<f64>(cfg.clone(), 81);
    let fa = random_features::<f64>(10, cfg.feature_dim, 1);
    let (pa, pb) = (unit_vec::<f64>(8, 3), unit_vec::<f64>(8, 4));
    let lab = labels(10, 5, 2);
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = model
        .graph(&mut tape, [&fa, &fa], [&pa, &pb], Mode::Train(&mut rng))
        .unwrap();
    let l = loss_on_tape(&mut tape, &g, &lab, [&pa, &pb]).unwrap();
    tape.backward(l.total).unwrap();
    let grad = tape.grad(g.params["prompt.proj.w"]).unwrap();
    let j = 3 * 16 + 5;
    let h = 1e-6;
    let eval = |delta: f64| {
        let mut m = model.clone();
        m.params_mut().get_mut("prompt.proj.w").unwrap().data_mut()[j] += delta;
        loss_value(&m, [&fa, &fa], [&pa, &pb], &lab)
    };
    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
    assert!(grad.data()[j].abs() > 0.0);
    assert!((grad.data()[j] - numeric).abs() < 1e-6 * numeric.abs().max(1e-3));
}

#[test]
fn fusion_examples() {
    let cfg = tiny_config();
    let mut model = random_model::<f64>(cfg.clone(), 91);
    let d = cfg.d_model;
    let x = random_features::<f64>(7, d, 1);
    let p: Vec<f64> = random_vec(d, 2);
    let changed = model.fuse_prompt(1, &x, &p).unwrap();
    let other = model.fuse_prompt(1, &x, &random_vec::<f64>(d, 3)).unwrap();
    assert_eq!(changed.shape(), &[7, d]);
    for t in 0..7 {
        assert_ne!(changed.row(t), other.row(t));
    }
    {
        let w = model.params_mut().get_mut("fuse2.w").unwrap().data_mut();
        w.fill(0.0);
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        model
            .params_mut()
            .get_mut("fuse2.b")
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    assert_eq!(model.fuse_prompt(2, &x, &vec![0.0; d]).unwrap(), x);
}

#[test]
fn channel_and_cross_transformers() {
    let cfg = tiny_config();
    let model = random_model::<f64>(cfg.clone(), 101);
    let d = cfg.d_model;
    for seed in 0..100 {
        let v: Vec<f64> = unit_vec(12 * d, seed);
        let x = Tensor::new(&[12, d], v).unwrap();
        let y = model.channel_forward(&x).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
    let a = random_features::<f64>(9, d, 1);
    let b = random_features::<f64>(9, d, 2);
    let (oa, ob) = model.cross_forward(&a, &a).unwrap();
    assert_eq!(oa, ob);
    let (xa, xb) = model.cross_forward(&a, &b).unwrap();
    let (ya, yb) = model.cross_forward(&b, &a).unwrap();
    assert_eq!(xa, yb);
    assert_eq!(xb, ya);
    let mut b2 = b.clone();
    for v in &mut b2.data_mut()[5 * d..] {
        *v += 1.0;
    }
    let (za, _) = model.cross_forward(&a, &b2).unwrap();
    for t in 0..5 {
        assert_eq!(za.row(t), xa.row(t));
    }
    assert_ne!(za.row(5), xa.row(5));
    let short = random_features::<f64>(8, d, 3);
    assert!(matches!(
        model.cross_forward(&a, &short),
        Err(VapError::Alignment(9, 8))
    ));
    // A single frame is handled like any other length.
    let one = random_features::<f64>(1, d, 4);
    assert_eq!(model.channel_forward(&one).unwrap().shape(), &[1, d]);
}

#[test]
fn checkpoint_round_trip_is_byte_and_bit_exact() {
    let cfg = tiny_config();
    let model = random_model::<f32>(cfg.clone(), 111);
    let ck = Checkpoint::from_model(&model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vapp");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    let back: PromptVap<f32> = loaded.to_model().unwrap();
    let fa = random_features::<f32>(20, cfg.feature_dim, 1);
    let (pa, pb) = (unit_vec::<f32>(8, 3), unit_vec::<f32>(8, 4));
    assert_eq!(
        model.forward_features([&fa, &fa], [&pa, &pb]).unwrap(),
        back.forward_features([&fa, &fa], [&pa, &pb]).unwrap()
    );

    let mut bytes = ck.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(VapError::Format(_))
    ));
    let bytes = ck.to_bytes();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(VapError::Format(_))
    ));
}

#[test]
fn long_inputs_use_overlapping_windows() {
    let cfg = tiny_config();
    let model = random_model::<f32>(cfg.clone(), 121);
    let fa = random_features::<f32>(95, cfg.feature_dim, 1);
    let fb = random_features::<f32>(95, cfg.feature_dim, 2);
    let (pa, pb) = (unit_vec::<f32>(8, 3), unit_vec::<f32>(8, 4));
    let long = model.forward_long([&fa, &fb], [&pa, &pb], 40, 20).unwrap();
    assert_eq!(long.frames(), 95);
    let direct = model.forward_features([&fa, &fb], [&pa, &pb]).unwrap();
    assert_eq!(long.vap_logits.row(10), direct.vap_logits.row(10));
    let short = model.forward_long([&fa, &fb], [&pa, &pb], 200, 50).unwrap();
    assert_eq!(short, direct);
}

#[test]
fn config_validation() {
    let bad = ModelConfig {
        d_model: 10,
        heads: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(bad.validate(), Err(VapError::Config(_))));
    let bad = ModelConfig {
        window_s: 0.01,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    assert_eq!(ModelConfig::default().window_frames(), 1000);
    let text = ModelConfig::default().to_canonical();
    assert_eq!(
        ModelConfig::from_canonical(&text).unwrap(),
        ModelConfig::default()
    );
}
