use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adapters::{BoftState, HybridState, LoraAdapter};
use crate::numerics::fdiff::DEFAULT_EPS;

fn tiny_cfg(targets: Vec<Target>) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab: 6,
        seq_len: 5,
        adapter_targets: targets,
    }
}

fn batch(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let tokens: Vec<usize> = (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
            let targets = tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| if i == 1 { None } else { Some((t + i) % cfg.vocab) })
                .collect();
            Example { tokens, targets }
        })
        .collect()
}

fn perturbed_lora(d_out: usize, d_in: usize, rng: &mut ChaCha8Rng) -> LoraAdapter {
    let mut l = LoraAdapter::init(d_out, d_in, 2, 4.0, 0.3, rng).unwrap();
    l.b = Matrix::random_uniform(2, d_in, 0.3, rng);
    l
}

fn random_cayley(dim: usize, rng: &mut ChaCha8Rng) -> BoftState {
    let mut st = BoftState::cayley(dim, 0.2).unwrap();
    let g: Vec<f64> = st.generator().iter().map(|_| rng.gen_range(-0.5..0.5)).collect();
    st.set_generator(&g).unwrap();
    st
}

fn model_with(kind: &str, seed: u64) -> (Model, Vec<Example>) {
    crate::checks::gradcheck_fixture(kind, seed).unwrap()
}

#[test]
fn gradients_match_central_differences_for_every_mode() {
    for kind in crate::checks::GRADCHECK_MODES {
        let (model, b) = model_with(kind, 11);
        let err = model.gradient_check(&b, kind == "full", DEFAULT_EPS).unwrap();
        assert!(err <= 1e-4, "{kind}: relative error {err:e}");
    }
}

#[test]
fn adapter_modes_expose_no_base_gradients() {
    let (model, b) = model_with("lora", 12);
    let (_, g) = model.grads(&b, false).unwrap();
    assert!(g.base.is_none());
    assert_eq!(g.flatten().len(), model.trainable_params(false).len());
}

#[test]
fn zero_model_gives_uniform_predictions() {
    let cfg = tiny_cfg(vec![]);
    let model = Model::new(cfg.clone(), BaseWeights::zeros(&cfg)).unwrap();
    let ex = Example {
        tokens: vec![0, 1, 2, 3, 4],
        targets: vec![Some(0); 5],
    };
    let (logits, _) = model.forward(&ex.tokens).unwrap();
    assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    assert!((model.loss(&[ex]).unwrap() - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn batch_order_does_not_leak() {
    let (model, b) = model_with("hybrid", 13);
    let toks: Vec<Vec<usize>> = b.iter().map(|e| e.tokens.clone()).collect();
    let fwd = model.forward_batch(&toks).unwrap();
    let rev: Vec<Vec<usize>> = toks.iter().rev().cloned().collect();
    let fwd_rev = model.forward_batch(&rev).unwrap();
    for (a, b) in fwd.iter().zip(fwd_rev.iter().rev()) {
        assert_eq!(a, b);
    }
}

#[test]
fn zero_delta_adapters_match_base_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = tiny_cfg(vec![Target::AttnQ, Target::AttnV]);
    let mut model = Model::random(cfg.clone(), &mut rng).unwrap();
    let b = batch(&cfg, 2, &mut rng);
    let base_logits = model.forward(&b[0].tokens).unwrap().0;
    model
        .attach(0, Target::AttnQ, Adapter::Lora(LoraAdapter::init(8, 8, 2, 4.0, 0.1, &mut rng).unwrap()))
        .unwrap();
    model.attach(0, Target::AttnV, Adapter::Boft(BoftState::butterfly(8, 3).unwrap())).unwrap();
    assert_eq!(model.forward(&b[0].tokens).unwrap().0, base_logits);
    model.attach(0, Target::AttnV, Adapter::Boft(BoftState::cayley(8, 0.1).unwrap())).unwrap();
    assert_eq!(model.forward(&b[0].tokens).unwrap().0, base_logits);
}

#[test]
fn hybrid_at_lambda_one_is_lora() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = tiny_cfg(vec![Target::AttnQ]);
    let mut m1 = Model::random(cfg, &mut rng).unwrap();
    let mut m2 = m1.clone();
    let lora = perturbed_lora(8, 8, &mut rng);
    let mut h = HybridState::new(lora.clone(), random_cayley(8, &mut rng), 0.1, 0.1, None).unwrap();
    h.lambda_last = 1.0;
    m1.attach(0, Target::AttnQ, Adapter::Lora(lora)).unwrap();
    m2.attach(0, Target::AttnQ, Adapter::Hybrid(h)).unwrap();
    assert_eq!(
        m1.effective_weight(0, Target::AttnQ).unwrap(),
        m2.effective_weight(0, Target::AttnQ).unwrap()
    );
}

#[test]
fn unitary_sublayer_backward_is_isometric() {
    let (model, _) = model_with("unitary", 16);
    let w = model.effective_weight(0, Target::AttnQ).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let back = w.transpose().matvec(&g).unwrap();
    let n0 = crate::numerics::matrix::norm2(&g);
    let n1 = crate::numerics::matrix::norm2(&back);
    assert!((n0 - n1).abs() <= 1e-10 * n0);
}

#[test]
fn snapshot_round_trips_every_adapter_kind() {
    for kind in crate::checks::GRADCHECK_MODES {
        let (model, _) = model_with(kind, 18);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &model.cfg, &model.to_tensors()).unwrap();
        let (cfg, t) = read_snapshot(&mut buf.as_slice()).unwrap();
        let back = Model::from_tensors(cfg, &t).unwrap();
        assert_eq!(back, model, "{kind}");
        let mut buf2 = Vec::new();
        write_snapshot(&mut buf2, &back.cfg, &back.to_tensors()).unwrap();
        assert_eq!(buf, buf2);
    }
}

#[test]
fn forward_rejects_bad_tokens() {
    let (model, _) = model_with("full", 19);
    assert!(model.forward(&[0, 99]).is_err());
    assert!(model.forward(&[]).is_err());
    assert!(model.forward(&[0; 6]).is_err());
}
