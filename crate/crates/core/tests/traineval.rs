mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vapp_core::codebook::{label_window, BinConfig};
use vapp_core::dialoguesim::{default_style_library, generate_session};
use vapp_core::model::{Checkpoint, Filterbank, ModelConfig, PromptEmbedding, PromptVap};
use vapp_core::traineval::*;
use vapp_core::va::{Utterance, VaStream};
use vapp_core::VapError;

fn window_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        channel_layers: 1,
        cross_layers: 1,
        ffn_mult: 2,
        embed_dim: 8,
        window_s: 4.0,
        dropout: 0.1,
        ..ModelConfig::default()
    }
}

fn table_for(ids: &[&str], dim: usize) -> EmbeddingTable {
    let mut t = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        for ch in 0..2 {
            t.insert(
                prompt_key(id, ch),
                common::unit_vec::<f32>(dim, (i * 2 + ch) as u64),
            );
        }
    }
    t
}

fn session(id: &str, duration_s: f64, seed: u64) -> SessionData {
    generate_session(id, &default_style_library(), duration_s, seed)
        .unwrap()
        .into()
}

#[test]
fn sixty_seconds_make_three_windows() {
    let s = session("s0000", 60.0, 1);
    let cfg = ModelConfig {
        embed_dim: 8,
        ..ModelConfig::default()
    };
    let ex = make_examples(&s, &table_for(&["s0000"], 8), &Filterbank::new(), &cfg).unwrap();
    assert_eq!(ex.len(), 3);
    let bins = BinConfig::default();
    for (w, e) in ex.iter().enumerate() {
        assert_eq!(e.start_frame, w * 1000);
        assert_eq!(e.features[0].shape(), &[1000, 41]);
        assert_eq!(e.labels.vad.len(), 1000);
        // 1000 frames minus the 100-frame (2 s at 50 Hz) horizon.
        assert_eq!(e.labels.vap.len(), 1000 - 2 * 50);
        for t in [0, 450, 899] {
            // Windows are cut from the session's own labels.
            let expect = label_window(&s.va, w * 1000 + t, &bins).unwrap().index();
            assert_eq!(e.labels.vap[t], expect);
            assert_eq!(
                e.labels.vad[t],
                [
                    s.va.is_active(0, w * 1000 + t),
                    s.va.is_active(1, w * 1000 + t)
                ]
            );
        }
    }
}

#[test]
fn silent_window_is_state_zero_and_missing_prompt_fails() {
    let va = VaStream::new(50, 8.0, [vec![Utterance::from_secs(0.5, 2.0)], vec![]]).unwrap();
    let s = SessionData {
        id: "q".into(),
        styles: ["fast".into(), "slow".into()],
        va,
        audio: [vec![0.0; 8 * 16000], vec![0.0; 8 * 16000]],
    };
    let cfg = window_config();
    let ex = make_examples(&s, &table_for(&["q"], 8), &Filterbank::new(), &cfg).unwrap();
    assert_eq!(ex.len(), 2);
    assert!(ex[1].labels.vap.iter().all(|&l| l == 0));
    assert!(ex[0].labels.vap.iter().any(|&l| l != 0));

    let mut partial = table_for(&["q"], 8);
    partial.remove("q/B");
    match make_examples(&s, &partial, &Filterbank::new(), &cfg) {
        Err(VapError::Dataset(m)) => assert!(m.contains("q/B")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ablations_replace_prompts() {
    let pairs: Vec<[Vec<f32>; 2]> = (0..6)
        .map(|i| [vec![i as f32; 3], vec![-(i as f32); 3]])
        .collect();
    let refs: Vec<_> = pairs.iter().collect();
    assert_eq!(Ablation::None.apply(&refs, 1), pairs);
    assert!(Ablation::ZeroPrompt
        .apply(&refs, 1)
        .iter()
        .all(|p| p.iter().all(|v| v.iter().all(|x| *x == 0.0))));
    let mut shuffled = Ablation::ShufflePrompt.apply(&refs, 1);
    assert_ne!(shuffled, pairs);
    assert_eq!(shuffled, Ablation::ShufflePrompt.apply(&refs, 1));
    shuffled.sort_by(|a, b| a[0][0].total_cmp(&b[0][0]));
    assert_eq!(shuffled, pairs);
    assert!(Ablation::parse("half_prompt").is_err());
}

fn utt(a: f64, b: f64) -> Utterance {
    Utterance::from_secs(a, b)
}

#[test]
fn silence_examples() {
    let va = VaStream::new(50, 5.0, [vec![utt(0.0, 2.0)], vec![utt(2.8, 4.0)]]).unwrap();
    let ev = find_silences(&va, 0.25);
    assert_eq!(ev.len(), 1);
    assert_eq!((ev[0].start_s, ev[0].end_s), (2.0, 2.8));
    assert_eq!((ev[0].prev_speaker, ev[0].next_speaker), (0, 1));
    assert_eq!(ev[0].label, TurnLabel::Shift);

    let va = VaStream::new(50, 5.0, [vec![utt(0.0, 2.0), utt(2.6, 3.5)], vec![]]).unwrap();
    let ev = find_silences(&va, 0.25);
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].label, TurnLabel::Hold);

    let va = VaStream::new(50, 5.0, [vec![utt(0.0, 2.0)], vec![utt(2.1, 4.0)]]).unwrap();
    assert!(find_silences(&va, 0.25).is_empty());
}

#[test]
fn silence_after_simultaneous_ends_goes_to_the_later_starter() {
    let va = VaStream::new(
        50,
        6.0,
        [vec![utt(0.0, 2.0), utt(3.0, 4.0)], vec![utt(1.5, 2.0)]],
    )
    .unwrap();
    let ev = find_silences(&va, 0.25);
    assert_eq!(ev[0].prev_speaker, 1);
    assert_eq!(ev[0].label, TurnLabel::Shift);
    // Leading and trailing silence are not bounded by speech.
    let va = VaStream::new(50, 6.0, [vec![utt(1.0, 2.0)], vec![]]).unwrap();
    assert!(find_silences(&va, 0.25).is_empty());
}

fn arb_va() -> impl Strategy<Value = VaStream> {
    let channel = prop::collection::vec((0u32..500, 1u32..100), 0..8).prop_map(|gaps| {
        let mut t = 0i64;
        gaps.into_iter()
            .map(|(gap, len)| {
                let start = t + gap as i64 * 10;
                t = start + len as i64 * 10;
                Utterance {
                    start_ms: start,
                    end_ms: t,
                }
            })
            .collect::<Vec<_>>()
    });
    (channel.clone(), channel).prop_map(|(a, b)| VaStream::new(50, 60.0, [a, b]).unwrap())
}

proptest! {
    #[test]
    fn silences_are_sorted_disjoint_and_shift_invariant(va in arb_va(), offset in 0u32..1000) {
        let ev = find_silences(&va, 0.25);
        for w in ev.windows(2) {
            prop_assert!(w[0].end_s <= w[1].start_s);
        }
        for e in &ev {
            prop_assert!(e.duration() >= 0.25 - 1e-9);
            prop_assert_eq!(e.label == TurnLabel::Shift, e.next_speaker != e.prev_speaker);
            for s in 0..2 {
                for u in va.utterances(s) {
                    prop_assert!(u.end() <= e.start_s + 1e-9 || u.start() >= e.end_s - 1e-9);
                }
            }
        }
        let moved = va.shifted(offset as f64 / 100.0).unwrap();
        let ev2 = find_silences(&moved, 0.25);
        prop_assert_eq!(ev.len(), ev2.len());
        for (a, b) in ev.iter().zip(&ev2) {
            prop_assert!((b.start_s - a.start_s - offset as f64 / 100.0).abs() < 1e-9);
            prop_assert_eq!((a.prev_speaker, a.next_speaker, a.label), (b.prev_speaker, b.next_speaker, b.label));
        }
    }
}

#[test]
fn balanced_accuracy_arithmetic() {
    let c = Confusion {
        shift_correct: 8,
        shift_total: 10,
        hold_correct: 30,
        hold_total: 40,
    };
    assert_eq!(c.balanced_accuracy().unwrap(), (0.8 + 0.75) / 2.0);
    assert!((c.balanced_accuracy().unwrap() - 0.775).abs() < 1e-15);

    let mut perfect = Confusion::default();
    for label in [TurnLabel::Shift, TurnLabel::Hold, TurnLabel::Hold] {
        perfect.record(label, label);
    }
    assert_eq!(perfect.balanced_accuracy().unwrap(), 1.0);

    let only_holds = Confusion {
        hold_correct: 3,
        hold_total: 4,
        ..Confusion::default()
    };
    match only_holds.balanced_accuracy() {
        Err(VapError::Evaluation(m)) => {
            assert!(m.contains("0 shift") && m.contains("4 hold"), "{m}")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn coin_flip_predictor_scores_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut c = Confusion::default();
    for i in 0..200_000 {
        let truth = if i % 2 == 0 {
            TurnLabel::Shift
        } else {
            TurnLabel::Hold
        };
        let guess = if rng.random_bool(0.5) {
            TurnLabel::Shift
        } else {
            TurnLabel::Hold
        };
        c.record(truth, guess);
    }
    assert!((c.balanced_accuracy().unwrap() - 0.5).abs() < 0.005);
}

#[test]
fn turn_prediction_compares_mean_scores() {
    let event = SilenceEvent {
        start_s: 0.2,
        end_s: 1.0,
        prev_speaker: 0,
        next_speaker: 1,
        label: TurnLabel::Shift,
    };
    // Frames 10..35 are scored: 0.5 s into the silence.
    let mut p = vec![[0.9, 0.1]; 60];
    for row in p.iter_mut().take(35).skip(10) {
        *row = [0.3, 0.7];
    }
    assert_eq!(predict_turn(&p, 50, &event, 0.5), TurnLabel::Shift);
    for row in p.iter_mut().take(35).skip(20) {
        *row = [0.95, 0.05];
    }
    assert_eq!(predict_turn(&p, 50, &event, 0.5), TurnLabel::Hold);
}

fn training_data(n: usize, cfg: &ModelConfig) -> (Vec<Example>, Vec<Example>) {
    let ids: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
    let table = table_for(&refs, cfg.embed_dim);
    let fb = Filterbank::new();
    let mut all: Vec<Example> = ids
        .iter()
        .enumerate()
        .flat_map(|(i, id)| make_examples(&session(id, 30.0, i as u64), &table, &fb, cfg).unwrap())
        .collect();
    let val = all.split_off(all.len() - 4);
    (all, val)
}

fn tiny_train_config(ablation: Ablation) -> TrainConfig {
    TrainConfig {
        model: window_config(),
        epochs: 2,
        batch_size: 4,
        learning_rate: 3e-3,
        seed: 11,
        checkpoint_path: None,
        ablation,
        precision: Precision::F64,
    }
}

#[test]
fn training_is_bitwise_reproducible_in_64_bit() {
    let (tr, va) = training_data(2, &window_config());
    let cfg = tiny_train_config(Ablation::ShufflePrompt);
    let a = train_examples(&tr, &va, &cfg).unwrap();
    let b = train_examples(&tr, &va, &cfg).unwrap();
    assert_eq!(a.curves, b.curves);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.curves.len(), 2);
    let first = a.curves[0].validation;
    assert!(first.vap < (256f64).ln());
    let c = train_examples(&tr, &va, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.curves, c.curves);
}

#[test]
fn zero_prompt_ablation_reports_every_metric() {
    let (tr, va) = training_data(2, &window_config());
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_path: Some(dir.path().join("best.ckpt")),
        ..tiny_train_config(Ablation::ZeroPrompt)
    };
    let out = train_examples(&tr, &va, &cfg).unwrap();
    for r in &out.curves {
        for v in [
            r.train.total,
            r.train.vap,
            r.train.vad,
            r.train.prompt,
            r.validation.total,
            r.validation.prompt,
        ] {
            assert!(v.is_finite());
        }
    }
    let saved = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(saved.to_bytes(), out.checkpoint.to_bytes());
    let csv = curves_csv(&out.curves);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,train_total"));
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let (tr, va) = training_data(2, &window_config());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let cfg = TrainConfig {
        learning_rate: 1e30,
        checkpoint_path: Some(path.clone()),
        epochs: 3,
        precision: Precision::F32,
        ..tiny_train_config(Ablation::None)
    };
    match train_examples(&tr, &va, &cfg) {
        Err(VapError::Divergence(m)) => assert!(m.contains("epoch"), "{m}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.curves)),
    }
    let kept = Checkpoint::load(&path).unwrap().to_model::<f32>().unwrap();
    assert!(kept
        .params()
        .values()
        .all(|t| t.data().iter().all(|x| x.is_finite())));
}

#[test]
fn train_config_rejects_empty_schedules() {
    let (tr, va) = training_data(1, &window_config());
    for cfg in [
        TrainConfig {
            epochs: 0,
            ..tiny_train_config(Ablation::None)
        },
        TrainConfig {
            batch_size: 0,
            ..tiny_train_config(Ablation::None)
        },
    ] {
        assert!(matches!(
            train_examples(&tr, &va, &cfg),
            Err(VapError::Config(_))
        ));
    }
    assert!(matches!(
        train_examples(&tr, &[], &tiny_train_config(Ablation::None)),
        Err(VapError::Dataset(_))
    ));
}

#[test]
fn untrained_model_scores_uniform_loss() {
    let cfg = window_config();
    let (_, va) = training_data(1, &cfg);
    let model = PromptVap::<f64>::init(cfg, 3).unwrap();
    let l = eval_vap_loss(&model, &va, Ablation::None, 0).unwrap();
    assert!((l.vap - (256f64).ln()).abs() < 1e-12, "{}", l.vap);
    assert_eq!(l, eval_vap_loss(&model, &va, Ablation::None, 0).unwrap());
    assert!((l.total - l.vap - l.vad - l.prompt).abs() < 1e-12);
}

fn sim_setup() -> (PromptVap<f64>, Vec<f32>, PromptEmbedding, PromptEmbedding) {
    let cfg = ModelConfig {
        window_s: 2.0,
        ..common::tiny_config()
    };
    let model = common::random_model::<f64>(cfg, 4);
    let audio = common::noise_audio(16000 * 3, 1);
    let p = |s| PromptEmbedding::new("", common::unit_vec::<f32>(8, s)).unwrap();
    (model, audio, p(1), p(2))
}

#[test]
fn simulation_timeline_layout_and_swap() {
    let (model, audio, user, system) = sim_setup();
    let fb = Filterbank::new();
    let utts = [utt(0.5, 1.0), utt(1.6, 2.2)];
    let params = SimulationParams::default();
    let sim = simulate_system(&model, &fb, &audio, &utts, &user, &system, &params).unwrap();
    assert_eq!(sim.timeline.len(), 150);
    for (t, r) in sim.timeline.iter().enumerate() {
        assert_eq!(r.time_s, t as f64 / 50.0);
        assert!((r.p_now[0] + r.p_now[1] - 1.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.vad[1]));
    }
    assert_eq!(sim.onsets.len(), 2);
    let csv = timeline_csv(&sim.timeline);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "time_s,p_now_a,p_now_b,p_future_a,p_future_b,vad_a,vad_b"
    );
    assert_eq!(lines.len(), 151);
    assert!(lines[1]
        .split(',')
        .all(|f| f.split('.').nth(1).map(str::len) == Some(6)));
    assert_eq!(lines[2].split(',').count(), 7);

    let swapped = simulate_system(&model, &fb, &audio, &utts, &system, &user, &params).unwrap();
    assert_ne!(swapped.timeline, sim.timeline);
    assert_eq!(
        sim,
        simulate_system(&model, &fb, &audio, &utts, &user, &system, &params).unwrap()
    );

    let wrong = PromptEmbedding::new("", common::unit_vec::<f32>(16, 3)).unwrap();
    assert!(matches!(
        simulate_system(&model, &fb, &audio, &utts, &user, &wrong, &params),
        Err(VapError::Config(_))
    ));
}

#[test]
fn onsets_find_the_first_crossing() {
    let mut p = vec![[0.8, 0.2]; 300];
    for row in p.iter_mut().skip(70).take(5) {
        *row = [0.4, 0.6];
    }
    let params = SimulationParams::default();
    let user = [utt(0.2, 1.0), utt(2.0, 2.2), utt(5.0, 6.5)];
    let on = response_onsets(&p, 50, &user, &params);
    // End at frame 50, crossing at frame 70; the second end sees nothing
    // above the threshold; the third lies past the timeline.
    assert_eq!(on.len(), 2);
    assert!((on[0].unwrap() - 0.4).abs() < 1e-12);
    assert_eq!(on[1], None);
    let s = onset_stats(&[Some(0.4), None, Some(0.2), Some(1.0)]);
    assert_eq!((s.events, s.crossings), (4, 3));
    assert_eq!(s.crossing_rate, 0.75);
    assert_eq!(s.median_onset_s, Some(0.7));
    assert_eq!(
        onset_stats(&[Some(0.4), Some(0.2)]).median_onset_s,
        Some(0.30000000000000004)
    );
    assert_eq!(onset_stats(&[None]).median_onset_s, None);
    assert_eq!(onset_stats(&[None, Some(0.3), None]).median_onset_s, None);
    assert_eq!(
        onset_stats(&[None, Some(0.3), Some(0.1)]).median_onset_s,
        Some(0.3)
    );
    assert_eq!(onset_stats(&[]).median_onset_s, None);
}

#[test]
fn activity_runs_become_utterances() {
    let act = [false, true, true, false, false, true];
    let u = utterances_from_activity(&act, 50);
    assert_eq!(
        u,
        vec![
            Utterance {
                start_ms: 20,
                end_ms: 60
            },
            Utterance {
                start_ms: 100,
                end_ms: 120
            }
        ]
    );
}

#[test]
fn shift_hold_evaluation_is_deterministic() {
    let cfg = window_config();
    let fb = Filterbank::new();
    let table = table_for(&["e0", "e1"], cfg.embed_dim);
    let sessions: Vec<PreparedSession> = ["e0", "e1"]
        .iter()
        .enumerate()
        .map(|(i, id)| prepare_session(&session(id, 40.0, 20 + i as u64), &table, &fb).unwrap())
        .collect();
    let model = common::random_model::<f32>(cfg, 9);
    let params = ShiftHoldParams {
        hop_s: 2.0,
        ..ShiftHoldParams::default()
    };
    let r = eval_shift_hold(&model, &sessions, &params, Ablation::None, 0).unwrap();
    assert!((0.0..=1.0).contains(&r.balanced_accuracy));
    let c = r.confusion;
    let events: usize = sessions
        .iter()
        .map(|s| find_silences(&s.va, 0.25).len())
        .sum();
    assert_eq!(c.shift_total + c.hold_total, events);
    assert_eq!(
        r,
        eval_shift_hold(&model, &sessions, &params, Ablation::None, 0).unwrap()
    );
}

#[test]
fn report_text_round_trips() {
    let mut onsets = BTreeMap::new();
    onsets.insert("fast".to_string(), onset_stats(&[Some(0.2), None]));
    let r = EvalReport {
        model: window_config(),
        ablation: Ablation::ShufflePrompt,
        sessions: 3,
        losses: Some(LossRecord {
            total: 3.25,
            vap: 2.5,
            vad: 0.5,
            prompt: 0.25,
        }),
        shift_hold_params: Some(ShiftHoldParams::default()),
        shift_hold: None,
        onsets,
    };
    let text = r.to_text();
    assert_eq!(EvalReport::from_text(&text).unwrap(), r);
    assert!(text.contains("ablation = \"shuffle_prompt\""));
}

#[test]
fn reconstruction_preference_is_a_fraction() {
    let cfg = window_config();
    let (_, va) = training_data(1, &cfg);
    let model = common::random_model::<f32>(cfg, 2);
    let own: Vec<[Vec<f32>; 2]> = va.iter().map(|e| e.prompts.clone()).collect();
    let other: Vec<[Vec<f32>; 2]> = va
        .iter()
        .map(|e| [e.prompts[1].clone(), e.prompts[0].clone()])
        .collect();
    let f = recon_preference(&model, &va, &other).unwrap();
    assert!((0.0..=1.0).contains(&f));
    // Ties never count as a preference.
    assert_eq!(recon_preference(&model, &va, &own).unwrap(), 0.0);
}
