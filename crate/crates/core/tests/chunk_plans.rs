use cuside_array::chunking::{extract_chunk, plan_chunks, stitch_cores};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cores_tile_the_utterance(total in 1usize..400, c in 1usize..60, l in 0usize..100, r in 0usize..60) {
        let plan = plan_chunks(total, c, l, r).unwrap();
        let mut next = 0;
        for d in &plan.descriptors {
            prop_assert_eq!(d.core_start, next);
            prop_assert!(d.core_end > d.core_start && d.core_end - d.core_start <= c);
            prop_assert_eq!(d.core_start - d.left_ctx_start + d.left_pad, l);
            prop_assert_eq!(d.right_ctx_end - d.core_end + d.right_pad, r);
            prop_assert_eq!(d.chunk_len(), l + d.core_len() + r);
            prop_assert!(d.right_ctx_end <= total);
            next = d.core_end;
        }
        prop_assert_eq!(next, total);
    }

    #[test]
    fn extract_then_stitch_is_identity(total in 1usize..200, c in 1usize..50, l in 0usize..60, r in 0usize..40, dim in 1usize..4) {
        let frames: Vec<f64> = (0..total * dim).map(|i| i as f64 + 1.0).collect();
        let plan = plan_chunks(total, c, l, r).unwrap();
        let chunks: Vec<Vec<f64>> = plan
            .descriptors
            .iter()
            .map(|d| extract_chunk(&frames, dim, d, 0.0).unwrap())
            .collect();
        for (ch, d) in chunks.iter().zip(&plan.descriptors) {
            prop_assert_eq!(ch.len(), d.chunk_len() * dim);
            prop_assert!(ch[..d.left_pad * dim].iter().all(|v| *v == 0.0));
            let tail = ch.len() - d.right_pad * dim;
            prop_assert!(ch[tail..].iter().all(|v| *v == 0.0));
        }
        prop_assert_eq!(stitch_cores(&chunks, &plan.descriptors, dim), frames);
    }
}

#[test]
fn empty_and_zero_chunk_are_rejected() {
    assert!(plan_chunks(10, 0, 4, 4).is_err());
    assert!(plan_chunks(0, 4, 4, 4).is_err());
}
