use cuside_array::chunking::ContextMode;
use cuside_array::cuside::{Model, ModelConfig};
use cuside_array::signal::{stft, Waveform};
use cuside_array::streamer::{decode_offline, stream_decode, StreamConfig, StreamOutput, Streamer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> Model {
    let mut c = ModelConfig::toy();
    c.mask.hidden_per_direction = 4;
    c.encoder.layers = 1;
    c.encoder.hidden_per_direction = 8;
    c.sim.hidden = 6;
    Model::new(c, seed).unwrap()
}

fn noise(m: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| (0..len).map(|_| rng.random_range(-0.3..0.3)).collect()).collect()
}

fn wave(ch: Vec<Vec<f64>>) -> Waveform {
    Waveform::new(ch, 16_000).unwrap()
}

fn push_partition(model: &Model, cfg: StreamConfig, w: &Waveform, cuts: &[usize]) -> StreamOutput {
    let mut s = Streamer::new(model, cfg).unwrap();
    let mut start = 0;
    for &end in cuts.iter().chain(std::iter::once(&w.len())) {
        let end = end.clamp(start, w.len());
        let block = wave(w.channels().iter().map(|c| c[start..end].to_vec()).collect());
        s.push(&block).unwrap();
        start = end;
    }
    s.finish().unwrap()
}

fn mode_strategy() -> impl Strategy<Value = ContextMode> {
    prop_oneof![Just(ContextMode::None), Just(ContextMode::Real), Just(ContextMode::Simulated)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn any_block_partition_matches_offline(
        len in 300usize..20_000,
        mode in mode_strategy(),
        mut cuts in proptest::collection::vec(0usize..20_000, 0..12),
        seed in 0u64..1000,
    ) {
        let m = model(3);
        let w = wave(noise(2, len, seed));
        cuts.sort_unstable();
        let cfg = StreamConfig::for_model(&m.config, mode);
        let streamed = push_partition(&m, cfg, &w, &cuts);
        let (labels, tokens) = if len >= m.config.stft.window_size {
            decode_offline(&m, &stft(&w, &m.config.stft).unwrap(), &cfg).unwrap()
        } else {
            prop_assert!(streamed.short_input);
            let padded = wave(w.channels().iter().map(|c| {
                let mut c = c.clone();
                c.resize(m.config.stft.window_size, 0.0);
                c
            }).collect());
            decode_offline(&m, &stft(&padded, &m.config.stft).unwrap(), &cfg).unwrap()
        };
        prop_assert_eq!(&streamed.frame_labels, &labels);
        prop_assert_eq!(streamed.transcript.ids(), tokens.ids());
        let hop = stream_decode(&w, &m, &cfg).unwrap();
        prop_assert_eq!(hop.logits, streamed.logits);
    }
}

/// Last sample (exclusive) read by frame `t`.
fn frame_end_sample(t: usize) -> usize {
    t * 160 + 512
}

#[test]
fn outputs_ignore_audio_outside_their_context() {
    let m = model(5);
    let (c, l, r) = (40, 80, 40);
    let len = frame_end_sample(5 * c);
    let base = noise(2, len, 1);
    for mode in ContextMode::ALL {
        let cfg = StreamConfig::for_model(&m.config, mode);
        let reference = stream_decode(&wave(base.clone()), &m, &cfg).unwrap();

        // Chunk 0 reads frames up to its core end, plus R frames in real mode.
        let need = if mode == ContextMode::Real { c + r } else { c };
        let cut = frame_end_sample(need - 1);
        let mut future = base.clone();
        for ch in &mut future {
            for v in &mut ch[cut..] {
                *v = -*v * 3.0;
            }
        }
        let perturbed = stream_decode(&wave(future), &m, &cfg).unwrap();
        assert_eq!(perturbed.logits[0], reference.logits[0], "{mode:?} chunk 0 saw the future");
        assert_ne!(perturbed.logits.last(), reference.logits.last());

        // Chunk 3 starts its left context at frame 3C - L.
        let first = (3 * c - l) * 160;
        let mut past = base.clone();
        for ch in &mut past {
            for v in &mut ch[..first] {
                *v *= -2.0;
            }
        }
        let perturbed = stream_decode(&wave(past), &m, &cfg).unwrap();
        assert_ne!(perturbed.logits[0], reference.logits[0]);
        if mode == ContextMode::Simulated {
            // The simulator state carries information across chunks.
            continue;
        }
        assert_eq!(perturbed.logits[3], reference.logits[3], "{mode:?} chunk 3 saw audio before its context");
    }
}

#[test]
fn simulated_context_depends_on_history_only_through_the_simulator() {
    let m = model(6);
    let len = frame_end_sample(200);
    let base = noise(2, len, 2);
    let cfg = StreamConfig::for_model(&m.config, ContextMode::Simulated);
    let a = stream_decode(&wave(base.clone()), &m, &cfg).unwrap();
    let mut past = base.clone();
    for ch in &mut past {
        for v in &mut ch[..40 * 160] {
            *v *= -2.0;
        }
    }
    let b = stream_decode(&wave(past), &m, &cfg).unwrap();
    assert_ne!(a.logits[3], b.logits[3]);
    assert_eq!(a.events.len(), b.events.len());
    assert!(a.events.iter().all(|e| e.sim_compute_ms.is_some() && e.alg_latency_ms == 400.0));
}
