mod common;

use analogy_core::model::{
    forward, init_params, last_logits, loss_and_grads, ModelConfig, ModelParams,
};
use common::{loss_of, max_relative_error};

fn small_config(d: usize, heads: usize, layers: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: heads,
        n_layers: layers,
        vocab_size: vocab,
        max_seq: 8,
        init_std: 0.15,
        ..Default::default()
    }
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = small_config(8, 1, 1, 20);
    let (fine, at) = max_relative_error(&cfg, 0, 1e-4);
    assert!(fine <= 1e-4, "h=1e-4: relative error {fine:e} at {at}");
    // At the coarse end of the step range the residual is truncation error,
    // which must shrink roughly with h^2.
    let (coarse, _) = max_relative_error(&cfg, 0, 1e-3);
    assert!(coarse <= 1e-2, "h=1e-3: relative error {coarse:e}");
    assert!(fine < coarse / 10.0);
}

#[test]
fn gradients_match_with_heads_and_depth() {
    let cfg = small_config(8, 2, 2, 20);
    let (err, at) = max_relative_error(&cfg, 1, 1e-4);
    assert!(err <= 1e-4, "relative error {err:e} at {at}");
}

#[test]
fn attention_rows_normalised_and_causal() {
    let cfg = small_config(16, 2, 2, 30);
    let p: ModelParams<f64> = init_params(&cfg, 2).unwrap();
    let trace = forward(&p, &[3, 8, 1, 29, 0]).unwrap();
    assert_eq!(trace.logits.dim(), (5, 30));
    assert_eq!(trace.hidden.len(), 2);
    for att in &trace.attention {
        for h in 0..2 {
            for q in 0..5 {
                let row: f64 = (0..5).map(|k| att[[h, q, k]]).sum();
                assert!((row - 1.0).abs() < 1e-6);
                for k in q + 1..5 {
                    assert_eq!(att[[h, q, k]], 0.0);
                }
            }
        }
    }
    let single = forward(&p, &[4]).unwrap();
    assert_eq!(single.attn(0, 0, 0, 0), Some(1.0));
}

#[test]
fn perturbing_a_token_leaves_earlier_logits_unchanged() {
    let cfg = small_config(16, 2, 2, 30);
    let p: ModelParams<f64> = init_params(&cfg, 3).unwrap();
    let a = forward(&p, &[3, 8, 1, 29]).unwrap();
    let b = forward(&p, &[3, 8, 17, 29]).unwrap();
    for pos in 0..2 {
        assert_eq!(a.logits.row(pos), b.logits.row(pos));
    }
    assert_ne!(a.logits.row(2), b.logits.row(2));
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let cfg = small_config(8, 1, 1, 20);
    let mut p: ModelParams<f64> = init_params(&cfg, 0).unwrap();
    p.w_unembed.fill(0.0);
    let loss = loss_of(&p, &[vec![1, 2]], &[3]);
    assert!((loss - 20f64.ln()).abs() < 1e-12);
}

#[test]
fn duplicated_example_keeps_mean_loss() {
    let cfg = small_config(8, 1, 1, 20);
    let p: ModelParams<f64> = init_params(&cfg, 0).unwrap();
    let one = loss_of(&p, &[vec![1, 2]], &[3]);
    let two = loss_of(&p, &[vec![1, 2], vec![1, 2]], &[3, 3]);
    assert!((one - two).abs() < 1e-14);
}

#[test]
fn vocabulary_permutation_invariance() {
    let cfg = small_config(8, 1, 1, 20);
    let p: ModelParams<f64> = init_params(&cfg, 4).unwrap();
    let perm: Vec<u32> = (0..20).map(|i| (i * 7 + 3) % 20).collect();
    let mut q = p.clone();
    for old in 0..20 {
        let new = perm[old] as usize;
        q.wte.row_mut(new).assign(&p.wte.row(old));
        q.w_unembed.column_mut(new).assign(&p.w_unembed.column(old));
    }
    let (inputs, targets) = common::gradient_batch();
    let map = |v: &Vec<u32>| v.iter().map(|&t| perm[t as usize]).collect::<Vec<_>>();
    let pinputs: Vec<Vec<u32>> = inputs.iter().map(map).collect();
    let ptargets = map(&targets);
    let a = loss_of(&p, &inputs, &targets);
    let b = loss_of(&q, &pinputs, &ptargets);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn packed_batch_matches_single_sequences() {
    let cfg = small_config(16, 2, 1, 30);
    let p: ModelParams<f64> = init_params(&cfg, 5).unwrap();
    let seqs: Vec<&[u32]> = vec![&[1, 2, 3], &[4], &[5, 6]];
    let batched = last_logits(&p, &seqs).unwrap();
    for (i, s) in seqs.iter().enumerate() {
        let t = forward(&p, s).unwrap();
        let last = t.logits.row(s.len() - 1);
        for (a, b) in last.iter().zip(batched.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn input_errors() {
    let cfg = small_config(8, 1, 1, 20);
    let p: ModelParams<f64> = init_params(&cfg, 0).unwrap();
    assert!(forward(&p, &[20]).is_err());
    assert!(forward(&p, &[0; 9]).is_err());
    assert!(loss_and_grads(&p, &[], &[]).is_err());
    assert!(loss_and_grads(&p, &[&[1]], &[25]).is_err());
}

#[test]
fn single_precision_tracks_double() {
    let cfg = small_config(16, 1, 1, 20);
    let p64: ModelParams<f64> = init_params(&cfg, 8).unwrap();
    let p32: ModelParams<f32> = p64.cast();
    let (inputs, targets) = common::gradient_batch();
    let refs: Vec<&[u32]> = inputs.iter().map(|v| v.as_slice()).collect();
    let (l64, g64) = loss_and_grads(&p64, &refs, &targets).unwrap();
    let (l32, g32) = loss_and_grads(&p32, &refs, &targets).unwrap();
    assert!((l64 - l32 as f64).abs() < 1e-4);
    let diff = (&g64.w_unembed - &g32.w_unembed.mapv(|v| v as f64)).mapv(f64::abs);
    assert!(diff.iter().all(|&d| d < 1e-4));
}
