use super::*;
use crate::tensor::{argmax, Rng};

fn small_spec() -> ModelSpec {
    ModelSpec {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 12,
        vocab: 11,
        max_pos: 64,
        rope_base: 10_000.0,
    }
}

fn small_model(seed: u64) -> Model {
    let spec = small_spec();
    Model::new(spec, random_weights(&spec, seed).unwrap()).unwrap()
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<Token> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(vocab)).collect()
}

fn chain_mask(n: usize) -> Vec<Vec<bool>> {
    (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()
}

#[test]
fn single_token_prefill_equals_decode_on_empty_cache() {
    let m = small_model(1);
    let mut a = m.new_cache();
    let mut b = m.new_cache();
    let pf = prefill(&m, &[3], &mut a, false).unwrap();
    let dc = decode_step(&m, &[3], &mut b, None, &[0], false).unwrap();
    assert_eq!(pf.logits, dc.logits);
}

#[test]
fn prefill_then_decode_matches_recompute() {
    let m = small_model(2);
    let toks = random_tokens(13, 11, 5);
    let mut inc = m.new_cache();
    prefill(&m, &toks[..12], &mut inc, false).unwrap();
    let step = decode_step(&m, &toks[12..], &mut inc, None, &[12], false).unwrap();
    let mut full = m.new_cache();
    let all = prefill(&m, &toks, &mut full, false).unwrap();
    for (a, b) in step.logits.row(0).iter().zip(all.logits.row(12)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn scores_absent_without_capture() {
    let m = small_model(3);
    let mut c = m.new_cache();
    let out = prefill(&m, &[1, 2, 3], &mut c, false).unwrap();
    assert!(out.last_layer_attn.is_none());
    let out = decode_step(&m, &[4], &mut c, None, &[3], false).unwrap();
    assert!(out.last_layer_attn.is_none());
}

#[test]
fn chain_mask_matches_sequential_decode() {
    let m = small_model(4);
    let toks = random_tokens(10, 11, 9);
    let mut seq = m.new_cache();
    prefill(&m, &toks[..6], &mut seq, false).unwrap();
    let mut tree = seq.clone();
    let mut seq_logits = Vec::new();
    for (i, &t) in toks[6..].iter().enumerate() {
        let o = decode_step(&m, &[t], &mut seq, None, &[6 + i], false).unwrap();
        seq_logits.push(o.logits.row(0).to_vec());
    }
    let mask = chain_mask(4);
    let out = decode_step(&m, &toks[6..], &mut tree, Some(&mask), &[6, 7, 8, 9], false).unwrap();
    assert_eq!(tree.speculative_len(), 4);
    for (i, row) in seq_logits.iter().enumerate() {
        for (a, b) in row.iter().zip(out.logits.row(i)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn empty_new_tokens_rejected() {
    let m = small_model(5);
    let mut c = m.new_cache();
    prefill(&m, &[1], &mut c, false).unwrap();
    assert!(matches!(
        decode_step(&m, &[], &mut c, None, &[], false),
        Err(crate::Error::Parameter(_))
    ));
}

#[test]
fn mask_shape_mismatch_is_dimension_error() {
    let m = small_model(5);
    let mut c = m.new_cache();
    prefill(&m, &[1], &mut c, false).unwrap();
    let mask = chain_mask(3);
    assert!(matches!(
        decode_step(&m, &[1, 2], &mut c, Some(&mask), &[1, 2], false),
        Err(crate::Error::Dimension(_))
    ));
}

#[test]
fn captured_row_over_nine_slots_sums_to_one() {
    let m = small_model(6);
    let mut c = m.new_cache();
    prefill(&m, &random_tokens(8, 11, 1), &mut c, false).unwrap();
    let out = decode_step(&m, &[7], &mut c, None, &[8], true).unwrap();
    let attn = out.last_layer_attn.unwrap();
    assert_eq!(attn.shape(), &[1, 9]);
    let s: f64 = attn.row(0).iter().sum();
    assert!((s - 1.0).abs() < 1e-6);
    assert!(attn.row(0).iter().all(|&p| p >= 0.0));
}

#[test]
fn masked_slots_get_exact_zero_weight() {
    let m = small_model(7);
    let mut c = m.new_cache();
    prefill(&m, &[1, 2, 3], &mut c, false).unwrap();
    // root-level siblings 0 and 1, then a child of 0
    let mask = vec![
        vec![true, false, false],
        vec![false, true, false],
        vec![true, false, true],
    ];
    let out = decode_step(&m, &[4, 5, 6], &mut c, Some(&mask), &[3, 3, 4], true).unwrap();
    let attn = out.last_layer_attn.unwrap();
    assert_eq!(attn.shape(), &[3, 6]);
    for i in 0..3 {
        for j in 0..3 {
            let p = attn.row(i)[3 + j];
            if !mask[i][j] {
                assert_eq!(p, 0.0);
            }
        }
    }
}

#[test]
fn last_row_capture_matches_all_rows() {
    let m = small_model(8);
    let toks = random_tokens(7, 11, 3);
    let mut a = m.new_cache();
    let mut b = m.new_cache();
    let all = prefill_with(&m, &toks, &mut a, Capture::AllRows, AttentionConfig::default()).unwrap();
    let last = prefill_with(&m, &toks, &mut b, Capture::LastRow, AttentionConfig::default()).unwrap();
    assert_eq!(last.last_layer_attn.unwrap().row(0), all.last_layer_attn.unwrap().row(6));
}

#[test]
fn max_reduction_yields_distribution() {
    let m = small_model(8);
    let mut c = m.new_cache();
    let cfg = AttentionConfig {
        hybrid_chunk: None,
        score_reduce: ScoreReduce::Max,
    };
    let out = prefill_with(&m, &random_tokens(9, 11, 2), &mut c, Capture::LastRow, cfg).unwrap();
    let s: f64 = out.last_layer_attn.unwrap().row(0).iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn hybrid_chunked_forward_matches_standard() {
    let m = small_model(9);
    let toks = random_tokens(20, 11, 4);
    let mut a = m.new_cache();
    let mut b = m.new_cache();
    prefill(&m, &toks[..17], &mut a, false).unwrap();
    prefill(&m, &toks[..17], &mut b, false).unwrap();
    let mask = chain_mask(3);
    let std = decode_step(&m, &toks[17..], &mut a, Some(&mask), &[17, 18, 19], false).unwrap();
    let cfg = AttentionConfig {
        hybrid_chunk: Some(5),
        score_reduce: ScoreReduce::Mean,
    };
    let hyb = decode_step_with(&m, &toks[17..], &mut b, Some(&mask), &[17, 18, 19], Capture::None, cfg)
        .unwrap();
    assert!(std.logits.max_abs_diff(&hyb.logits).unwrap() < 1e-9);
}

#[test]
fn position_overflow_is_capacity_error() {
    let m = small_model(10);
    let mut c = m.new_cache();
    let toks = vec![1; 65];
    assert!(matches!(prefill(&m, &toks, &mut c, false), Err(crate::Error::Capacity(_))));
}

#[test]
fn rope_identity_at_zero() {
    let x = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
    assert_eq!(rope_apply(&x, 0, 10_000.0).unwrap(), x);
}

#[test]
fn rope_preserves_pair_norms() {
    let x = Tensor::new(vec![6], vec![1.0, -2.0, 0.5, 3.0, -0.7, 0.9]).unwrap();
    let y = rope_apply(&x, 1234, 10_000.0).unwrap();
    for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
        let na = a[0].hypot(a[1]);
        let nb = b[0].hypot(b[1]);
        assert!((na - nb).abs() < 1e-12);
    }
}

#[test]
fn rope_closed_form_at_position_five() {
    // unit vector along the first coordinate of each pair
    let x = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let y = rope_apply(&x, 5, 100.0).unwrap();
    // theta_0 = 1, theta_1 = 100^(-1/2) = 0.1
    let expect = [5.0f64.cos(), 5.0f64.sin(), 0.5f64.cos(), 0.5f64.sin()];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn rope_rejects_odd_width() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    assert!(rope_apply(&x, 1, 10.0).is_err());
}

#[test]
fn derive_draft_bounds() {
    let m = small_model(11);
    assert!(matches!(derive_draft(&m, 2), Err(crate::Error::Parameter(_))));
    assert!(matches!(derive_draft(&m, 0), Err(crate::Error::Parameter(_))));
    let d = derive_draft(&m, 1).unwrap();
    assert_eq!(d.spec().n_layers, 1);
    assert_eq!(d.weights().embed, m.weights().embed);
    assert_eq!(d.weights().unembed, m.weights().unembed);
    assert_eq!(d.weights().final_norm, m.weights().final_norm);
    assert_eq!(d.weights().layers[0], m.weights().layers[0]);
}

#[test]
fn weight_file_round_trip() {
    let m = small_model(12);
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    let back = read_model(buf.as_slice()).unwrap();
    assert_eq!(back.spec(), m.spec());
    assert_eq!(back.weights(), m.weights());

    let mut again = Vec::new();
    write_model(&small_model(12), &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn truncated_weight_file_rejected() {
    let m = small_model(13);
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    buf.truncate(buf.len() - 8);
    assert!(matches!(read_model(buf.as_slice()), Err(crate::Error::Format(_))));
}

#[test]
fn copy_model_completes_a_seen_span() {
    let layout = CopyModelLayout {
        max_pos: 512,
        ..CopyModelLayout::default()
    };
    let m = copy_model(&layout).unwrap();
    let mut rng = Rng::new(99);
    // a random sequence with no repeated token, then a repeat of its start
    let mut pool: Vec<Token> = (0..layout.vocab).collect();
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.below(i + 1));
    }
    let span = &pool[..40];
    let mut toks: Vec<Token> = span.to_vec();
    toks.extend_from_slice(&span[..5]);
    let mut c = m.new_cache();
    let out = prefill(&m, &toks, &mut c, false).unwrap();
    assert_eq!(argmax(out.logits.row(toks.len() - 1)), span[5]);
    // and keeps going when fed its own predictions
    let mut next = span[5];
    for i in 0..10 {
        let pos = toks.len() + i;
        let o = decode_step(&m, &[next], &mut c, None, &[pos], false).unwrap();
        next = argmax(o.logits.row(0));
        assert_eq!(next, span[6 + i]);
    }
}
