//! Finite-difference verification of every primitive adjoint and of each
//! loss differentiated through a full model stack.

use camadapt_core::domain::{CameraIndexer, Domain};
use camadapt_core::losses;
use camadapt_core::miner::{TripletEntry, TripletSet};
use camadapt_core::model::{ModelDims, Models};
use camadapt_core::optim::finite_diff_check;
use camadapt_core::rng;
use camadapt_core::tape::{NodeId, Tape};
use camadapt_core::tensor::Tensor;
use rand::Rng;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn random_matrix(r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Avoid kink neighborhoods so central differences stay valid.
fn random_matrix_away_from(
    r: usize,
    c: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    threshold: f64,
    margin: f64,
) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c)
            .map(|_| loop {
                let v: f64 = rng.random_range(-2.0..2.0);
                if (v - threshold).abs() > margin {
                    break v;
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Reduce `out` against a fixed random weighting so every output coordinate
/// feeds the scalar root.
fn weighted_sum(tape: &mut Tape, out: NodeId, weights: &Tensor) -> NodeId {
    let w = tape.input(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

#[test]
fn primitive_adjoints_match_finite_differences_over_many_shapes() {
    let mut master = rng::stream(1234, "primitive-fd");
    for trial in 0..50 {
        let n = master.random_range(1..5usize);
        let m = master.random_range(1..5usize);
        let k = master.random_range(1..5usize);

        // matmul + bias_add
        {
            let a = random_matrix(n, k, &mut master, -2.0, 2.0);
            let b = random_matrix(k, m, &mut master, -2.0, 2.0);
            let bias = Tensor::vector((0..m).map(|_| master.random_range(-1.0..1.0)).collect());
            let w = random_matrix(n, m, &mut master, -1.0, 1.0);
            let loss = move |t: &mut Tape, p: &[NodeId]| {
                let mm = t.matmul(p[0], p[1])?;
                let ba = t.bias_add(mm, p[2])?;
                Ok(weighted_sum(t, ba, &w))
            };
            let err = finite_diff_check(&loss, &[a, b, bias], FD_H).unwrap();
            assert!(err <= FD_TOL, "matmul/bias trial {trial}: {err}");
        }

        // relu (hinge), away from the kink
        {
            let x = random_matrix_away_from(n, m, &mut master, 0.0, 1e-3);
            let w = random_matrix(n, m, &mut master, -1.0, 1.0);
            let loss = move |t: &mut Tape, p: &[NodeId]| {
                let r = t.relu(p[0]);
                Ok(weighted_sum(t, r, &w))
            };
            let err = finite_diff_check(&loss, &[x], FD_H).unwrap();
            assert!(err <= FD_TOL, "relu trial {trial}: {err}");
        }

        // softmax -> clamp -> log chain (the cross-entropy backbone)
        {
            let x = random_matrix(n, m + 1, &mut master, -2.0, 2.0);
            let w = random_matrix(n, m + 1, &mut master, -1.0, 1.0);
            let loss = move |t: &mut Tape, p: &[NodeId]| {
                let s = t.softmax(p[0])?;
                let c = t.clamp_min(s, 1e-12);
                let l = t.log(c)?;
                Ok(weighted_sum(t, l, &w))
            };
            let err = finite_diff_check(&loss, &[x], FD_H).unwrap();
            assert!(err <= FD_TOL, "softmax/log trial {trial}: {err}");
        }

        // sqrt of clamped square distances
        {
            let x = random_matrix(n.max(2), k, &mut master, -2.0, 2.0);
            let w = random_matrix(n.max(2), n.max(2), &mut master, 0.0, 1.0);
            let loss = move |t: &mut Tape, p: &[NodeId]| {
                let d = t.pairwise_sq_dist(p[0])?;
                let c = t.clamp_min(d, 1e-12);
                let s = t.sqrt(c)?;
                Ok(weighted_sum(t, s, &w))
            };
            let err = finite_diff_check(&loss, &[x], FD_H).unwrap();
            assert!(err <= FD_TOL, "pairwise/sqrt trial {trial}: {err}");
        }

        // elementwise add/sub/mul + scale + add_scalar
        {
            let a = random_matrix(n, m, &mut master, -2.0, 2.0);
            let b = random_matrix(n, m, &mut master, -2.0, 2.0);
            let w = random_matrix(n, m, &mut master, -1.0, 1.0);
            let loss = move |t: &mut Tape, p: &[NodeId]| {
                let s = t.add(p[0], p[1])?;
                let d = t.sub(s, p[1])?;
                let prod = t.mul(d, p[1])?;
                let sc = t.scale(prod, -1.7);
                let sh = t.add_scalar(sc, 0.3);
                Ok(weighted_sum(t, sh, &w))
            };
            let err = finite_diff_check(&loss, &[a, b], FD_H).unwrap();
            assert!(err <= FD_TOL, "elementwise trial {trial}: {err}");
        }

        // mean + row_sum + slice_rows. (grad_scale is exempt from FD checks
        // by definition: its backward deliberately differs from its forward
        // derivative. The GRL contract test pins it instead.)
        {
            let rows = n + 1;
            let x = random_matrix(rows, m, &mut master, -2.0, 2.0);
            let loss = move |t: &mut Tape, p: &[NodeId]| {
                let s = t.slice_rows(p[0], 0, rows - 1)?;
                let rs = t.row_sum(s)?;
                Ok(t.mean(rs))
            };
            let err = finite_diff_check(&loss, &[x], FD_H).unwrap();
            assert!(err <= FD_TOL, "reduction trial {trial}: {err}");
        }

        // row_l2_normalize on rows away from zero norm
        {
            let x = random_matrix(n, m + 1, &mut master, 0.5, 2.0);
            let w = random_matrix(n, m + 1, &mut master, -1.0, 1.0);
            let loss = move |t: &mut Tape, p: &[NodeId]| {
                let nrm = t.row_l2_normalize(p[0])?;
                Ok(weighted_sum(t, nrm, &w))
            };
            let err = finite_diff_check(&loss, &[x], FD_H).unwrap();
            assert!(err <= FD_TOL, "l2norm trial {trial}: {err}");
        }
    }
}

fn test_models(seed: u64, c_s: usize, c_t: usize, pid: usize) -> Models {
    Models::init(
        ModelDims {
            feature_dim: 4,
            backbone_hidden: vec![6],
            embed_dim: 5,
            disc_hidden: 6,
            num_person_classes: pid,
            num_camera_classes: c_s + c_t,
        },
        seed,
    )
    .unwrap()
}

/// Loss gradient through backbone + discriminator vs finite differences.
fn check_scheme_loss<F>(seed: u64, build_loss: F) -> f64
where
    F: Fn(&mut Tape, NodeId, &CameraIndexer) -> camadapt_core::Result<NodeId> + Clone + 'static,
{
    let mut data_rng = rng::stream(seed, "scheme-fd");
    let indexer = CameraIndexer::new(2, 3).unwrap();
    let models = test_models(seed, 2, 3, 4);
    let batch = random_matrix(6, 4, &mut data_rng, -1.5, 1.5);
    let params: Vec<Tensor> = models
        .backbone
        .mlp
        .tensors()
        .into_iter()
        .chain(models.discriminator.mlp.tensors())
        .cloned()
        .collect();
    let n_backbone = models.backbone.mlp.tensors().len();
    let dims_b = models.backbone.mlp.dims.clone();
    let dims_d = models.discriminator.mlp.dims.clone();

    let loss = move |t: &mut Tape, p: &[NodeId]| -> camadapt_core::Result<NodeId> {
        let x = t.input(batch.clone());
        let mut h = x;
        // backbone: affine+relu chain, linear head
        for layer in 0..dims_b.len() - 1 {
            h = t.matmul(h, p[2 * layer])?;
            h = t.bias_add(h, p[2 * layer + 1])?;
            if layer + 2 < dims_b.len() {
                h = t.relu(h);
            }
        }
        // discriminator on top
        let mut d = h;
        for layer in 0..dims_d.len() - 1 {
            let base = n_backbone + 2 * layer;
            d = t.matmul(d, p[base])?;
            d = t.bias_add(d, p[base + 1])?;
            if layer + 2 < dims_d.len() {
                d = t.relu(d);
            }
        }
        let probs = t.softmax(d)?;
        build_loss(t, probs, &CameraIndexer::new(2, 3).unwrap())
    };
    finite_diff_check(&loss, &params, FD_H).unwrap()
}

#[test]
fn cal_d_loss_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let labels = vec![0usize, 4, 2, 1, 3, 0];
        let err = check_scheme_loss(seed, move |t, probs, _| {
            losses::cal_d_loss(t, probs, &labels)
        });
        assert!(err <= FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn grl_generator_loss_gradient_matches_finite_differences() {
    for seed in 10..15 {
        let labels = vec![1usize, 3, 0, 2, 4, 1];
        let err = check_scheme_loss(seed, move |t, probs, _| {
            losses::grl_generator_loss(t, probs, &labels)
        });
        assert!(err <= FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn cce_loss_gradient_matches_finite_differences() {
    for seed in 20..25 {
        let domains = vec![
            Domain::Source,
            Domain::Target,
            Domain::Source,
            Domain::Target,
            Domain::Target,
            Domain::Source,
        ];
        let err = check_scheme_loss(seed, move |t, probs, idx| {
            losses::cce_loss(t, probs, &domains, idx)
        });
        assert!(err <= FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn aoe_loss_gradient_matches_finite_differences() {
    for seed in 30..35 {
        let labels = vec![2usize, 0, 4, 3, 1, 2];
        let err = check_scheme_loss(seed, move |t, probs, _| {
            losses::aoe_loss(t, probs, &labels)
        });
        assert!(err <= FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn source_cross_entropy_gradient_through_classifier() {
    for seed in 40..45 {
        let mut data_rng = rng::stream(seed, "cls-fd");
        let models = test_models(seed, 1, 1, 4);
        let batch = random_matrix(5, 4, &mut data_rng, -1.5, 1.5);
        let params: Vec<Tensor> = models
            .backbone
            .mlp
            .tensors()
            .into_iter()
            .chain(models.classifier.mlp.tensors())
            .cloned()
            .collect();
        let n_backbone = models.backbone.mlp.tensors().len();
        let labels = vec![0usize, 2, 3, 1, 0];

        let loss = move |t: &mut Tape, p: &[NodeId]| -> camadapt_core::Result<NodeId> {
            let x = t.input(batch.clone());
            let h1 = t.matmul(x, p[0])?;
            let h1 = t.bias_add(h1, p[1])?;
            let h1 = t.relu(h1);
            let emb = t.matmul(h1, p[2])?;
            let emb = t.bias_add(emb, p[3])?;
            let logits = t.matmul(emb, p[n_backbone])?;
            let logits = t.bias_add(logits, p[n_backbone + 1])?;
            let probs = t.softmax(logits)?;
            losses::source_cross_entropy(t, probs, &labels)
        };
        let err = finite_diff_check(&loss, &params, FD_H).unwrap();
        assert!(err <= FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn cce_gradient_survives_clamped_probabilities() {
    // Logit gaps of ~80 push opposite-domain probabilities under the clamp;
    // the subgradient convention keeps analytic and numeric in agreement.
    let idx = CameraIndexer::new(1, 1).unwrap();
    let logits = Tensor::matrix(1, 2, vec![40.0, -40.0]).unwrap();
    let loss = move |t: &mut Tape, p: &[NodeId]| -> camadapt_core::Result<NodeId> {
        let probs = t.softmax(p[0])?;
        losses::cce_loss(t, probs, &[Domain::Source], &idx)
    };
    let err = finite_diff_check(&loss, &[logits], FD_H).unwrap();
    assert!(err <= FD_TOL, "clamped cce: {err}");
}

#[test]
fn triplet_loss_gradient_matches_finite_differences_away_from_kinks() {
    let mut master = rng::stream(99, "triplet-fd");
    let mut checked = 0;
    while checked < 5 {
        let n = 6;
        let emb = random_matrix(n, 3, &mut master, -1.5, 1.5);
        let set = TripletSet {
            camera_id: 0,
            entries: vec![
                TripletEntry { anchor: 0, active: true, positives: vec![1, 2], negatives: vec![3, 4] },
                TripletEntry { anchor: 1, active: true, positives: vec![0], negatives: vec![5] },
                TripletEntry { anchor: 2, active: false, positives: vec![], negatives: vec![] },
                TripletEntry { anchor: 3, active: true, positives: vec![4], negatives: vec![0, 1] },
                TripletEntry { anchor: 4, active: false, positives: vec![], negatives: vec![] },
                TripletEntry { anchor: 5, active: false, positives: vec![], negatives: vec![] },
            ],
        };
        let margin = master.random_range(0.1..0.8);

        // Skip draws that sit near a hinge kink.
        let mut tape = Tape::new();
        let e = tape.input(emb.clone());
        let (node, _) = camadapt_core::miner::triplet_loss(&mut tape, e, &set, margin).unwrap();
        let _ = node;
        let dist = camadapt_core::miner::compute_distance_matrix(
            &emb,
            &camadapt_core::miner::DistanceMetric::Euclidean,
        )
        .unwrap();
        let near_kink = set.entries.iter().any(|en| {
            if !en.active || en.negatives.is_empty() {
                return false;
            }
            let dp: f64 = en.positives.iter().map(|&p| dist.at(en.anchor, p)).sum::<f64>()
                / en.positives.len() as f64;
            let dn: f64 = en.negatives.iter().map(|&g| dist.at(en.anchor, g)).sum::<f64>()
                / en.negatives.len() as f64;
            (dp - dn + margin).abs() < 1e-2
        });
        if near_kink {
            continue;
        }
        checked += 1;

        let set2 = set.clone();
        let loss = move |t: &mut Tape, p: &[NodeId]| -> camadapt_core::Result<NodeId> {
            let (node, _) = camadapt_core::miner::triplet_loss(t, p[0], &set2, margin)?;
            Ok(node)
        };
        let err = finite_diff_check(&loss, &[emb], FD_H).unwrap();
        assert!(err <= FD_TOL, "triplet fd: {err}");
    }
}

#[test]
fn grl_contract_exact_negation_of_backbone_gradient() {
    // Backbone gradient through GRL(lambda) equals -lambda times the
    // no-GRL gradient, computed by the same tape arithmetic.
    for (seed, lambda) in [(0u64, 1.0f64), (1, 1.0), (2, 0.5), (3, 2.0)] {
        let mut data_rng = rng::stream(seed, "grl-contract");
        let models = test_models(seed, 2, 2, 3);
        let batch = random_matrix(5, 4, &mut data_rng, -1.0, 1.0);
        let labels = vec![0usize, 2, 3, 1, 0];

        let grads_for = |grl: Option<f64>| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let x = tape.input(batch.clone());
            let staged_b = models.backbone.mlp.stage(&mut tape, true);
            let emb = staged_b.forward(&mut tape, x).unwrap();
            let (_, probs) = models
                .discriminator
                .forward(&mut tape, emb, grl, false)
                .unwrap();
            let loss = losses::cal_d_loss(&mut tape, probs, &labels).unwrap();
            let grads = tape.backward(loss).unwrap();
            staged_b
                .ids()
                .iter()
                .map(|&id| grads.wrt(id).clone())
                .collect()
        };

        let plain = grads_for(None);
        let reversed = grads_for(Some(lambda));
        let mut max_diff: f64 = 0.0;
        for (p, r) in plain.iter().zip(&reversed) {
            for (pv, rv) in p.values().iter().zip(r.values()) {
                max_diff = max_diff.max((rv - (-lambda) * pv).abs());
            }
        }
        assert!(
            max_diff <= 1e-12,
            "seed {seed} lambda {lambda}: max diff {max_diff}"
        );
    }
}
