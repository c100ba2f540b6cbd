use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vapp_core::codebook::{
    aggregate, encode_state, label_window, Aggregator, BinConfig, Horizon, StateDistribution,
    NUM_STATES,
};
use vapp_core::va::{Utterance, VaStream};

/// Enumerates every state by its bit pattern, independent of the packed index.
fn brute_force(probs: &[f64], bins: [usize; 2]) -> (f64, f64) {
    let dur = [200.0, 400.0, 600.0, 800.0];
    let total: f64 = bins.iter().map(|&b| dur[b]).sum();
    let mut mass = [0.0f64; 2];
    for a in 0..16usize {
        for b in 0..16usize {
            let bits_a: [bool; 4] = std::array::from_fn(|i| a >> (3 - i) & 1 == 1);
            let bits_b: [bool; 4] = std::array::from_fn(|i| b >> (3 - i) & 1 == 1);
            let p = probs[a * 16 + b];
            for (s, bits) in [bits_a, bits_b].iter().enumerate() {
                let frac: f64 = bins.iter().filter(|&&k| bits[k]).map(|&k| dur[k]).sum();
                mass[s] += p * frac / total;
            }
        }
    }
    if mass[0] + mass[1] == 0.0 {
        (0.5, 0.5)
    } else {
        (mass[0] / (mass[0] + mass[1]), mass[1] / (mass[0] + mass[1]))
    }
}

#[test]
fn aggregate_matches_brute_force_enumeration() {
    let cfg = BinConfig::default();
    let agg = Aggregator::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let raw: Vec<f64> = (0..NUM_STATES).map(|_| -rng.random::<f64>().ln()).collect();
        let z: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|r| r / z).collect();
        for (h, bins) in [(Horizon::Now, [0, 1]), (Horizon::Future, [2, 3])] {
            let got = agg.aggregate(&probs, h);
            let want = brute_force(&probs, bins);
            assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9);
        }
    }
}

fn random_stream(seed: u64, secs: f64) -> VaStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels: [Vec<Utterance>; 2] = Default::default();
    for ch in channels.iter_mut() {
        let mut t = rng.random_range(0.0..0.5);
        while t < secs {
            let len = rng.random_range(0.05..1.5);
            let end = (t + len).min(secs);
            if end > t + 0.01 {
                ch.push(Utterance::from_secs(t, end));
            }
            t = end + rng.random_range(0.05..1.0);
        }
    }
    VaStream::new(50, secs, channels).unwrap()
}

/// Per-frame reference: bin on iff at least half its frames are active.
fn label_oracle(va: &VaStream, t: usize) -> usize {
    let edges = [0usize, 10, 30, 60, 100];
    let mut bits = [[false; 4]; 2];
    for s in 0..2 {
        for b in 0..4 {
            let frames = (t + 1 + edges[b])..(t + 1 + edges[b + 1]);
            let n = frames.clone().filter(|&f| va.is_active(s, f)).count();
            bits[s][b] = 2 * n >= edges[b + 1] - edges[b];
        }
    }
    encode_state(&bits).index()
}

#[test]
fn labels_match_per_frame_oracle() {
    let cfg = BinConfig::default();
    for seed in 0..5 {
        let va = random_stream(seed, 12.0);
        for t in 0..va.n_frames() - 100 {
            assert_eq!(
                label_window(&va, t, &cfg).unwrap().index(),
                label_oracle(&va, t)
            );
        }
    }
}

proptest! {
    #[test]
    fn aggregate_outputs_are_a_distribution(seed in 0u64..10_000, sparse in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw: Vec<f64> = (0..NUM_STATES).map(|_| rng.random::<f64>()).collect();
        for (k, r) in raw.iter_mut().enumerate() {
            if k % 4 < sparse {
                *r = 0.0;
            }
        }
        let z: f64 = raw.iter().sum();
        let dist = StateDistribution::new(raw.iter().map(|r| r / z).collect()).unwrap();
        for h in [Horizon::Now, Horizon::Future] {
            let (a, b) = aggregate(&dist, h, &BinConfig::default());
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_speakers_swaps_labels(seed in 0u64..500) {
        let va = random_stream(seed, 6.0);
        let (a, b) = (va.utterances(0).to_vec(), va.utterances(1).to_vec());
        let swapped = VaStream::new(50, va.duration_s(), [b, a]).unwrap();
        let cfg = BinConfig::default();
        for t in (0..va.n_frames() - 100).step_by(7) {
            let l = label_window(&va, t, &cfg).unwrap();
            prop_assert_eq!(l.swapped(), label_window(&swapped, t, &cfg).unwrap());
        }
    }
}
