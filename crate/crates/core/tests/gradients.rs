mod common;

use common::*;
use imvalign_core::gradcheck::finite_diff_check;
use imvalign_core::model::{Model, ModelConfig};
use imvalign_core::predictor::PredictorConfig;
use imvalign_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_kernel_passes_central_differences() {
    for (k, case) in grad_cases().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        for _ in 0..3 {
            let inputs = (case.inputs)(&mut rng);
            let (eps, tol) = if case.linear { (0.5, 1e-7) } else { (1e-5, 1e-4) };
            let r = finite_diff_check(case.f, &inputs, eps).unwrap();
            assert!(
                r.max_rel_err < tol,
                "{}: rel err {:e} (analytic {}, numeric {})",
                case.name,
                r.max_rel_err,
                r.analytic,
                r.numeric
            );
        }
    }
}

#[test]
fn composed_generator_graph_passes_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..8 {
        let inputs = generator_case(&mut rng);
        let r = finite_diff_check(generator_graph, &inputs, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-4, "rel err {:e}", r.max_rel_err);
    }
}

#[test]
fn model_loss_gradients_match_central_differences() {
    let mut c = ModelConfig::desk(3, 5);
    c.dim = 4;
    c.heads = 1;
    c.ffn_dim = 6;
    c.encoder_layers = 1;
    c.text_encoder_layers = 1;
    c.decoder_layers = 1;
    c.predictor = PredictorConfig::new(3);
    c.lambda = 0.0;
    let model = Model::<f64>::new(c).unwrap();
    let features = Tensor::from_f64(
        &[6, 3],
        &[0.9, -0.2, 0.1, 0.8, -0.1, 0.0, -0.5, 0.7, 0.3, -0.6, 0.9, 0.2, 0.1, 0.1, -0.9, 0.0, 0.2, -1.0],
    )
    .unwrap();
    let example = imvalign_core::data::TranscriptionExample {
        features,
        tokens: vec![1, 3, 4],
        true_alignment: None,
    };
    let (_, grads) = model.loss_and_grads(&example).unwrap();

    // exact check of the transcription term; the predictor sees no gradient at lambda 0
    assert!(grads.get("pred.head.w").map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));
    let loss = |m: &Model<f64>| m.loss_and_grads(&example).unwrap().0.loss_total;
    for name in ["enc.in.w", "enc.0.attn.wq", "text.emb", "dec.out.w", "sigma"] {
        let g = grads.get(name).unwrap().clone();
        for e in 0..g.len().min(4) {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let eps = 1e-6;
            plus.params.get_mut(name).unwrap().tensor.data_mut()[e] += eps;
            minus.params.get_mut(name).unwrap().tensor.data_mut()[e] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let a = g.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "{name}[{e}]: analytic {a}, numeric {numeric}");
        }
    }
}
