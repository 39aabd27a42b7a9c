mod common;

use common::{dims, rand_tensor, random_model, Instance};
use purls::align::{scale_loss, train_loss, AlphaMode, BatchContext, ModelConfig, PartitionMode};
use purls::bundle::DescriptionBank;
use purls::partition::node_mean;
use purls::tensor::dot;
use purls::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Contrastive loss evaluated term by term with plain exp/ln.
fn direct_scale_loss(v: &[f64], f: &[f64], classes: &[Vec<f64>], batch: &[Vec<f64>], tau: f64) -> f64 {
    let pos = (dot(v, f) / tau).exp();
    let den_c: f64 = classes.iter().map(|fo| (dot(v, fo) / tau).exp()).sum();
    let den_b: f64 = batch.iter().map(|vw| (dot(vw, f) / tau).exp()).sum();
    -0.5 * (pos / den_c).ln() - 0.5 * (pos / den_b).ln()
}

fn two_loop_forward(model: &purls::AlignmentModel, r: &[f64]) -> Vec<f64> {
    let (w1, b1, w2, b2) = (&model.mlp.w1, &model.mlp.b1, &model.mlp.w2, &model.mlp.b2);
    let hid = w1.cols();
    let mut h = vec![0.0; hid];
    for (k, hk) in h.iter_mut().enumerate() {
        let mut acc = b1.data()[k];
        for (i, ri) in r.iter().enumerate() {
            acc += ri * w1.get(i, k);
        }
        *hk = acc.max(0.0);
    }
    (0..w2.cols())
        .map(|j| b2.data()[j] + h.iter().enumerate().map(|(k, hk)| hk * w2.get(k, j)).sum::<f64>())
        .collect()
}

fn cfg(mode: PartitionMode, alpha_mode: AlphaMode) -> ModelConfig {
    ModelConfig {
        mode,
        alpha_mode,
        hidden_dim: 9,
        attention_dim: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn projection_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = dims(2, 3, 5, 4, 2, 1);
    let model = random_model(&mut rng, d, cfg(PartitionMode::Adaptive, AlphaMode::Uniform));
    let r = rand_tensor(&mut rng, 6, 5, 2.0);
    let v = model.project(&r).unwrap();
    assert_eq!(v.shape(), &[6, 4]);
    for row in 0..6 {
        let oracle = two_loop_forward(&model, r.row(row));
        for (a, b) in v.row(row).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_weights_project_to_output_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = dims(2, 3, 5, 4, 2, 1);
    let mut model = random_model(&mut rng, d, cfg(PartitionMode::Global, AlphaMode::Uniform));
    model.mlp.w1 = Tensor::zeros(model.mlp.w1.shape());
    model.mlp.w2 = Tensor::zeros(model.mlp.w2.shape());
    let v = model.project(&rand_tensor(&mut rng, 1, 5, 1.0)).unwrap();
    assert_eq!(v.data(), model.mlp.b2.data());
}

#[test]
fn scale_loss_examples() {
    let v = [0.3, -1.2, 0.5];
    let f = [1.0, 0.2, -0.4];
    assert_eq!(scale_loss(&v, &f, &[&f], &[&v], 0.1).unwrap(), 0.0);
    // An orthogonal negative has the same logit as... a row with equal dot product.
    let g = [1.0 + 0.2 * 1.2 / 0.3, 0.0, -0.4 + 0.0];
    let (a, b) = (dot(&v, &f), dot(&v, &g));
    let g: Vec<f64> = g.iter().map(|x| x * a / b).collect();
    let l = scale_loss(&v, &f, &[&f, &g], &[&v], 0.1).unwrap();
    assert!((l - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!(scale_loss(&v, &f, &[], &[&v], 0.1).is_err());
}

#[test]
fn scale_loss_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let m = 5;
        let classes: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let (pos_c, pos_b) = (rng.gen_range(0..4), rng.gen_range(0..3));
        let tau = rng.gen_range(0.2..2.0);
        let cr: Vec<&[f64]> = classes.iter().map(|c| c.as_slice()).collect();
        let br: Vec<&[f64]> = batch.iter().map(|b| b.as_slice()).collect();
        let got = scale_loss(&batch[pos_b], &classes[pos_c], &cr, &br, tau).unwrap();
        let want = direct_scale_loss(&batch[pos_b], &classes[pos_c], &classes, &batch, tau);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(got >= 0.0);
    }
}

/// Global-mode training loss recomputed from projections and the direct
/// formula, averaged over a random 4-class batch of 3.
#[test]
fn global_train_loss_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = dims(2, 3, 5, 4, 2, 1);
    let model = random_model(&mut rng, d, cfg(PartitionMode::Global, AlphaMode::Uniform));
    let inst = Instance::random(&mut rng, &d, 4, 3);
    let g = d.global_row();
    let vs: Vec<Vec<f64>> = inst
        .nodes
        .iter()
        .map(|n| model.project(&node_mean(n).unwrap()).unwrap().into_data())
        .collect();
    let class_rows: Vec<Vec<f64>> = inst.seen.iter().map(|c| inst.banks[c].rows.row(g).to_vec()).collect();
    let want: f64 = vs
        .iter()
        .zip(&inst.labels)
        .map(|(v, c)| direct_scale_loss(v, inst.banks[c].rows.row(g), &class_rows, &vs, model.tau()))
        .sum::<f64>()
        / 3.0;
    let got = train_loss(&model, &inst.ctx()).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn equal_logits_reproduce_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = dims(3, 4, 5, 6, 2, 3);
    for mode in [PartitionMode::Static, PartitionMode::Adaptive] {
        let mut model = random_model(&mut rng, d, cfg(mode, AlphaMode::Uniform));
        let inst = Instance::random(&mut rng, &d, 3, 4);
        let uniform = train_loss(&model, &inst.ctx()).unwrap();
        model.config.alpha_mode = AlphaMode::Learnable;
        model.alpha_logits = Tensor::filled(&[1, d.rows()], 0.7);
        let learnable = train_loss(&model, &inst.ctx()).unwrap();
        assert!((uniform - learnable).abs() < 1e-12);
    }
}

#[test]
fn equal_scale_losses_combine_to_that_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = dims(3, 4, 5, 6, 2, 3);
    // Constant node fields and banks with identical rows make every scale
    // contribute the same loss c, so the combination is c as well.
    let field = rand_tensor(&mut rng, 1, 5, 1.0);
    let nodes: Vec<Tensor> = (0..3)
        .map(|k| {
            let shifted: Vec<f64> = field.data().iter().map(|x| x + k as f64 * 0.3).collect();
            Tensor::from_rows(&vec![shifted; d.nodes()]).unwrap()
        })
        .collect();
    let banks = (0..3u32)
        .map(|c| {
            let row = rand_tensor(&mut rng, 1, 6, 1.0).into_data();
            (
                c,
                DescriptionBank {
                    class_id: c,
                    rows: Tensor::from_rows(&vec![row; d.rows()]).unwrap(),
                },
            )
        })
        .collect();
    let seen = vec![0, 1, 2];
    let ctx = BatchContext {
        samples: nodes.iter().zip([0u32, 2, 1]).collect(),
        banks: &banks,
        seen: &seen,
    };
    let model = random_model(&mut rng, d, cfg(PartitionMode::Static, AlphaMode::Learnable));
    let combined = train_loss(&model, &ctx).unwrap();
    let mut global = model.clone();
    global.config.mode = PartitionMode::Global;
    let c = train_loss(&global, &ctx).unwrap();
    assert!((combined - c).abs() < 1e-12);
}

#[test]
fn one_class_single_sample_loss_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = dims(2, 2, 3, 3, 1, 2);
    for mode in [PartitionMode::Global, PartitionMode::Static, PartitionMode::Adaptive] {
        let model = random_model(&mut rng, d, cfg(mode, AlphaMode::Learnable));
        let inst = Instance::random(&mut rng, &d, 1, 1);
        assert_eq!(train_loss(&model, &inst.ctx()).unwrap(), 0.0);
    }
}

#[test]
fn batch_label_outside_seen_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = dims(2, 2, 3, 3, 1, 2);
    let model = random_model(&mut rng, d, cfg(PartitionMode::Global, AlphaMode::Uniform));
    let mut inst = Instance::random(&mut rng, &d, 2, 2);
    inst.seen = vec![0];
    inst.labels = vec![0, 1];
    assert!(train_loss(&model, &inst.ctx()).is_err());
    inst.seen = vec![];
    assert!(train_loss(&model, &inst.ctx()).is_err());
}

/// With the positive logit largest in both softmaxes, lowering τ lowers the
/// loss.
#[test]
fn loss_is_monotone_in_tau_when_positive_dominates() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let taus = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];
    let mut checked = 0;
    while checked < 200 {
        let m = 4;
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let classes: Vec<Vec<f64>> = (0..3).map(|_| row(&mut rng)).collect();
        let batch: Vec<Vec<f64>> = (0..3).map(|_| row(&mut rng)).collect();
        let (v, f) = (&batch[0], &classes[0]);
        let pos = dot(v, f);
        let distinct_max = classes[1..].iter().all(|c| dot(v, c) < pos) && batch[1..].iter().all(|w| dot(w, f) < pos);
        if !distinct_max {
            continue;
        }
        checked += 1;
        let cr: Vec<&[f64]> = classes.iter().map(|c| c.as_slice()).collect();
        let br: Vec<&[f64]> = batch.iter().map(|b| b.as_slice()).collect();
        let losses: Vec<f64> = taus.iter().map(|&t| scale_loss(v, f, &cr, &br, t).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[0] <= w[1]), "{losses:?}");
    }
}
