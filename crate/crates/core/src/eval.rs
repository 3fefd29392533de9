//! Retrieval evaluation (mAP, CMC), distribution-discrepancy distances and
//! the posterior-uniformity check of the adversarial objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::CameraIndexer;
use crate::error::{Error, Result};
use crate::model::{Backbone, Models};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::world::{Dataset, Sample};

/// One evaluation pass over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub inter_domain_distance: f64,
    pub inter_camera_distance: f64,
    pub posterior_uniformity: f64,
    pub opposite_domain_mass: f64,
    pub queries_evaluated: usize,
    pub queries_excluded: usize,
    pub warnings: Vec<String>,
}

/// Raw (unnormalized) backbone embeddings for a sample list.
pub fn backbone_embeddings(backbone: &Backbone, samples: &[Sample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Data("cannot embed an empty sample list".into()));
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.feature.clone()).collect();
    let features = Tensor::from_rows(&rows)?;
    let mut tape = Tape::new();
    let x = tape.input(features);
    let (_, out) = backbone.forward(&mut tape, x, false)?;
    Ok(tape.value(out).clone())
}

/// L2-normalized embeddings; zero rows are left as zeros with a warning.
pub fn extract_embeddings(
    backbone: &Backbone,
    samples: &[Sample],
) -> Result<(Tensor, Vec<String>)> {
    let raw = backbone_embeddings(backbone, samples)?;
    Ok(normalize_rows(&raw))
}

/// Row-wise L2 normalization with zero-row warnings.
pub fn normalize_rows(m: &Tensor) -> (Tensor, Vec<String>) {
    let (n, e) = (m.rows(), m.cols());
    let mut out = vec![0.0; n * e];
    let mut warnings = Vec::new();
    for i in 0..n {
        let row = m.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            warnings.push(format!("row {i} is the zero vector; left unnormalized"));
            continue;
        }
        for j in 0..e {
            out[i * e + j] = row[j] / norm;
        }
    }
    (Tensor::from_parts(vec![n, e], out), warnings)
}

/// Retrieval scores under the single-query protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalScores {
    pub map: f64,
    /// Hit rates for the requested rank cutoffs, in order.
    pub rank: Vec<f64>,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Rank the gallery per query by ascending Euclidean distance, excluding
/// gallery samples that share BOTH the query's person and camera, then score
/// average precision and rank-k hits. Queries left without any relevant
/// gallery item are excluded and counted.
pub fn cmc_map(
    query_emb: &Tensor,
    query_meta: &[Sample],
    gallery_emb: &Tensor,
    gallery_meta: &[Sample],
    rank_cutoffs: &[usize],
) -> Result<RetrievalScores> {
    if query_meta.is_empty() || gallery_meta.is_empty() {
        return Err(Error::Data("empty query or gallery set".into()));
    }
    if query_emb.rows() != query_meta.len()
        || gallery_emb.rows() != gallery_meta.len()
        || query_emb.cols() != gallery_emb.cols()
    {
        return Err(Error::ShapeMismatch {
            op: "cmc_map",
            lhs: query_emb.shape().to_vec(),
            rhs: gallery_emb.shape().to_vec(),
        });
    }

    let gallery_ids: Vec<i64> = gallery_meta.iter().map(|s| s.person_id()).collect();
    let per_query: Vec<Option<(f64, Vec<bool>)>> = (0..query_meta.len())
        .into_par_iter()
        .map(|qi| {
            let q = &query_meta[qi];
            let qrow = query_emb.row(qi);
            let qid = q.person_id();
            let mut order: Vec<(f64, usize)> = Vec::with_capacity(gallery_meta.len());
            for (gi, g) in gallery_meta.iter().enumerate() {
                if gallery_ids[gi] == qid && g.camera_id == q.camera_id && g.domain == q.domain {
                    continue; // single-query protocol: drop same-id same-camera
                }
                let grow = gallery_emb.row(gi);
                let d: f64 = qrow
                    .iter()
                    .zip(grow)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                order.push((d, gi));
            }
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

            let mut relevant_seen = 0usize;
            let mut precision_sum = 0.0;
            let mut hits = vec![false; rank_cutoffs.len()];
            for (pos, &(_, gi)) in order.iter().enumerate() {
                if gallery_ids[gi] == qid {
                    relevant_seen += 1;
                    precision_sum += relevant_seen as f64 / (pos + 1) as f64;
                    for (hi, &cut) in rank_cutoffs.iter().enumerate() {
                        if pos < cut {
                            hits[hi] = true;
                        }
                    }
                }
            }
            if relevant_seen == 0 {
                None
            } else {
                Some((precision_sum / relevant_seen as f64, hits))
            }
        })
        .collect();

    let mut map = 0.0;
    let mut rank = vec![0.0; rank_cutoffs.len()];
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for entry in per_query {
        match entry {
            Some((ap, hits)) => {
                evaluated += 1;
                map += ap;
                for (hi, hit) in hits.iter().enumerate() {
                    if *hit {
                        rank[hi] += 1.0;
                    }
                }
            }
            None => excluded += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::Data(
            "no query kept a relevant gallery item after filtering".into(),
        ));
    }
    let n = evaluated as f64;
    Ok(RetrievalScores {
        map: map / n,
        rank: rank.into_iter().map(|r| r / n).collect(),
        evaluated,
        excluded,
    })
}

fn column_mean(m: &Tensor, rows: Option<&[usize]>) -> Vec<f64> {
    let e = m.cols();
    let mut mean = vec![0.0; e];
    let count = match rows {
        Some(idx) => {
            for &i in idx {
                for (j, v) in m.row(i).iter().enumerate() {
                    mean[j] += v;
                }
            }
            idx.len()
        }
        None => {
            for i in 0..m.rows() {
                for (j, v) in m.row(i).iter().enumerate() {
                    mean[j] += v;
                }
            }
            m.rows()
        }
    };
    for v in mean.iter_mut() {
        *v /= count as f64;
    }
    mean
}

/// `|| mean(source) - mean(target) ||_2`.
pub fn inter_domain_distance(source_emb: &Tensor, target_emb: &Tensor) -> Result<f64> {
    if source_emb.rows() == 0 || target_emb.rows() == 0 {
        return Err(Error::Data("inter-domain distance needs both sets non-empty".into()));
    }
    if source_emb.cols() != target_emb.cols() {
        return Err(Error::ShapeMismatch {
            op: "inter_domain_distance",
            lhs: source_emb.shape().to_vec(),
            rhs: target_emb.shape().to_vec(),
        });
    }
    let (ms, mt) = (column_mean(source_emb, None), column_mean(target_emb, None));
    Ok(ms
        .iter()
        .zip(&mt)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Mean over cameras of the camera-mean-to-global-mean distance. Cameras
/// with no samples are excluded with a warning and the divisor adjusted.
pub fn inter_camera_distance(
    emb: &Tensor,
    camera_of_row: &[usize],
    num_cameras: usize,
) -> Result<(f64, Vec<String>)> {
    if emb.rows() == 0 || emb.rows() != camera_of_row.len() {
        return Err(Error::Data(
            "inter-camera distance needs one camera id per embedding row".into(),
        ));
    }
    let global = column_mean(emb, None);
    let mut warnings = Vec::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for cam in 0..num_cameras {
        let rows: Vec<usize> = camera_of_row
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cam)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            warnings.push(format!("camera {cam} has no samples; excluded from the mean"));
            continue;
        }
        let cm = column_mean(emb, Some(&rows));
        total += cm
            .iter()
            .zip(&global)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Data("every camera was empty".into()));
    }
    Ok((total / counted as f64, warnings))
}

/// Posterior statistics of the discriminator against the ideal
/// uniform-opposite-domain prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorStats {
    /// Mean absolute deviation of the renormalized opposite-domain posterior
    /// from uniform `1/C_opp`; zero iff exactly uniform.
    pub deviation: f64,
    /// Mean un-renormalized probability mass on opposite-domain classes.
    pub opposite_mass: f64,
}

/// Evaluate the discriminator posterior over `samples`, restricted and
/// renormalized to each sample's opposite-domain camera classes. A posterior
/// with zero opposite mass is scored at the worst-case deviation
/// `1 - 1/C_opp`.
pub fn posterior_uniformity(
    models: &Models,
    samples: &[Sample],
    indexer: &CameraIndexer,
) -> Result<PosteriorStats> {
    if samples.is_empty() {
        return Err(Error::Data("posterior check needs samples".into()));
    }
    let mut tape = Tape::new();
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.feature.clone()).collect();
    let x = tape.input(Tensor::from_rows(&rows)?);
    let (_, emb) = models.backbone.forward(&mut tape, x, false)?;
    let (_, probs) = models.discriminator.forward(&mut tape, emb, None, false)?;
    let probs = tape.value(probs);

    // A 2-way head (DAL) degenerates to one camera class per domain.
    let layout = if probs.cols() == indexer.total() {
        *indexer
    } else if probs.cols() == 2 {
        CameraIndexer::new(1, 1)?
    } else {
        return Err(Error::ShapeMismatch {
            op: "posterior_uniformity",
            lhs: probs.shape().to_vec(),
            rhs: vec![indexer.total()],
        });
    };

    let mut deviation = 0.0;
    let mut mass_total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let opp = s.domain.opposite();
        let c_opp = layout.opposite_count(s.domain) as f64;
        let row = probs.row(i);
        let mass: f64 = layout.range_of(opp).map(|k| row[k]).sum();
        mass_total += mass;
        if mass == 0.0 {
            deviation += 1.0 - 1.0 / c_opp;
            continue;
        }
        let uniform = 1.0 / c_opp;
        let mad: f64 = layout
            .range_of(opp)
            .map(|k| (row[k] / mass - uniform).abs())
            .sum::<f64>()
            / c_opp;
        deviation += mad;
    }
    let n = samples.len() as f64;
    Ok(PosteriorStats {
        deviation: deviation / n,
        opposite_mass: mass_total / n,
    })
}

/// Write embeddings with sample metadata in the shared dump format.
pub fn export_embeddings(
    path: &std::path::Path,
    samples: &[Sample],
    embeddings: &Tensor,
    visibility: crate::world::LabelVisibility,
) -> Result<()> {
    crate::world::save_embeddings(path, samples, Some(embeddings), visibility)
}

/// Options for a full evaluation pass.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// Compute the discrepancy distances on L2-normalized embeddings
    /// instead of raw ones.
    pub distances_on_normalized: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            distances_on_normalized: false,
        }
    }
}

/// Full evaluation: retrieval on the normalized query/gallery embeddings,
/// discrepancy distances on the training splits, posterior statistics over
/// all training samples.
pub fn evaluate(models: &Models, dataset: &Dataset, opts: EvalOptions) -> Result<MetricsReport> {
    let mut warnings = Vec::new();

    let (qe, w) = extract_embeddings(&models.backbone, &dataset.target_query)?;
    warnings.extend(w.into_iter().map(|m| format!("query: {m}")));
    let (ge, w) = extract_embeddings(&models.backbone, &dataset.target_gallery)?;
    warnings.extend(w.into_iter().map(|m| format!("gallery: {m}")));
    let scores = cmc_map(&qe, &dataset.target_query, &ge, &dataset.target_gallery, &[1, 5, 10])?;

    let mut source_emb = backbone_embeddings(&models.backbone, &dataset.source_train)?;
    let mut target_emb = backbone_embeddings(&models.backbone, &dataset.target_train)?;
    if opts.distances_on_normalized {
        source_emb = normalize_rows(&source_emb).0;
        target_emb = normalize_rows(&target_emb).0;
    }
    let inter_domain = inter_domain_distance(&source_emb, &target_emb)?;
    let cameras: Vec<usize> = dataset.target_train.iter().map(|s| s.camera_id).collect();
    let (inter_camera, w) =
        inter_camera_distance(&target_emb, &cameras, dataset.indexer.target_cameras())?;
    warnings.extend(w);

    let mut all_train: Vec<Sample> = dataset.source_train.clone();
    all_train.extend(dataset.target_train.iter().cloned());
    let posterior = posterior_uniformity(models, &all_train, &dataset.indexer)?;

    Ok(MetricsReport {
        map: scores.map,
        rank1: scores.rank[0],
        rank5: scores.rank[1],
        rank10: scores.rank[2],
        inter_domain_distance: inter_domain,
        inter_camera_distance: inter_camera,
        posterior_uniformity: posterior.deviation,
        opposite_domain_mass: posterior.opposite_mass,
        queries_evaluated: scores.evaluated,
        queries_excluded: scores.excluded,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;

    fn sample(domain: Domain, cam: usize, frame: u64, pid: i64) -> Sample {
        Sample::new(vec![0.0], domain, cam, frame, pid, false)
    }

    #[test]
    fn normalize_three_four_row() {
        let m = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let (out, w) = normalize_rows(&m);
        assert!(w.is_empty());
        assert!((out.at(0, 0) - 0.6).abs() < 1e-15);
        assert!((out.at(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_keeps_unit_rows_and_warns_on_zero_rows() {
        let m = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (out, w) = normalize_rows(&m);
        assert_eq!(out.row(0), &[1.0, 0.0]);
        assert_eq!(out.row(1), &[0.0, 0.0]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn hand_ranked_case_gives_five_sixths() {
        // Gallery order by distance: relevant, irrelevant, relevant.
        let query_emb = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let gallery_emb = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let qm = vec![sample(Domain::Target, 0, 0, 1)];
        let gm = vec![
            sample(Domain::Target, 1, 0, 1),
            sample(Domain::Target, 1, 1, 2),
            sample(Domain::Target, 2, 2, 1),
        ];
        let s = cmc_map(&query_emb, &qm, &gallery_emb, &gm, &[1, 5, 10]).unwrap();
        assert!((s.map - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(s.rank[0], 1.0);
        assert_eq!((s.evaluated, s.excluded), (1, 0));
    }

    #[test]
    fn single_relevant_at_rank_one_gives_ap_one() {
        let query_emb = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let gallery_emb = Tensor::matrix(3, 1, vec![0.1, 5.0, 9.0]).unwrap();
        let qm = vec![sample(Domain::Target, 0, 0, 1)];
        let gm = vec![
            sample(Domain::Target, 1, 0, 1),
            sample(Domain::Target, 1, 1, 2),
            sample(Domain::Target, 2, 2, 3),
        ];
        let s = cmc_map(&query_emb, &qm, &gallery_emb, &gm, &[1, 5, 10]).unwrap();
        assert_eq!(s.map, 1.0);
    }

    #[test]
    fn same_camera_matches_are_filtered_and_query_excluded() {
        // The only same-id gallery item shares the query's camera.
        let query_emb = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let gallery_emb = Tensor::matrix(2, 1, vec![0.1, 0.2]).unwrap();
        let qm = vec![sample(Domain::Target, 0, 0, 1)];
        let gm = vec![
            sample(Domain::Target, 0, 1, 1),
            sample(Domain::Target, 1, 0, 2),
        ];
        let err = cmc_map(&query_emb, &qm, &gallery_emb, &gm, &[1]).unwrap_err();
        assert!(err.to_string().contains("no query"));
    }

    #[test]
    fn scores_invariant_under_gallery_permutation() {
        let mut rng = crate::rng::stream(4, "perm");
        let qn = 4;
        let gn = 12;
        let qe = Tensor::from_rows(
            &(0..qn)
                .map(|_| vec![rand::Rng::random_range(&mut rng, -1.0..1.0); 3])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let rows: Vec<Vec<f64>> = (0..gn)
            .map(|_| {
                (0..3)
                    .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                    .collect()
            })
            .collect();
        let qm: Vec<Sample> = (0..qn)
            .map(|i| sample(Domain::Target, 0, i as u64, (i % 3) as i64))
            .collect();
        let gm: Vec<Sample> = (0..gn)
            .map(|i| sample(Domain::Target, 1 + i % 2, i as u64, (i % 3) as i64))
            .collect();
        let ge = Tensor::from_rows(&rows).unwrap();
        let a = cmc_map(&qe, &qm, &ge, &gm, &[1, 5, 10]).unwrap();

        let perm: Vec<usize> = (0..gn).rev().collect();
        let prows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let pm: Vec<Sample> = perm.iter().map(|&i| gm[i].clone()).collect();
        let pe = Tensor::from_rows(&prows).unwrap();
        let b = cmc_map(&qe, &qm, &pe, &pm, &[1, 5, 10]).unwrap();
        assert!((a.map - b.map).abs() < 1e-12);
        assert_eq!(a.rank, b.rank);
    }

    #[test]
    fn rank_k_monotone_and_bounded() {
        let mut rng = crate::rng::stream(12, "mono");
        let qe = Tensor::from_rows(
            &(0..6)
                .map(|_| vec![rand::Rng::random_range(&mut rng, -1.0..1.0); 2])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let ge = Tensor::from_rows(
            &(0..20)
                .map(|_| vec![rand::Rng::random_range(&mut rng, -1.0..1.0); 2])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let qm: Vec<Sample> = (0..6)
            .map(|i| sample(Domain::Target, 0, i as u64, (i % 4) as i64))
            .collect();
        let gm: Vec<Sample> = (0..20)
            .map(|i| sample(Domain::Target, 1, i as u64, (i % 4) as i64))
            .collect();
        let s = cmc_map(&qe, &qm, &ge, &gm, &[1, 5, 10]).unwrap();
        assert!(s.map >= 0.0 && s.map <= 1.0);
        assert!(s.rank[0] <= s.rank[1] && s.rank[1] <= s.rank[2]);
        assert!(s.rank[2] <= 1.0);
    }

    #[test]
    fn inter_domain_examples() {
        let a = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(inter_domain_distance(&a, &b).unwrap(), 0.0);

        let c = Tensor::matrix(2, 3, vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((inter_domain_distance(&c, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inter_camera_two_opposed_cameras_in_one_dimension() {
        let emb = Tensor::matrix(4, 1, vec![-1.0, -1.0, 1.0, 1.0]).unwrap();
        let (d, w) = inter_camera_distance(&emb, &[0, 0, 1, 1], 2).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        assert!(w.is_empty());

        let (d3, w3) = inter_camera_distance(&emb, &[0, 0, 1, 1], 3).unwrap();
        assert!((d3 - 1.0).abs() < 1e-15);
        assert_eq!(w3.len(), 1);
    }

    #[test]
    fn discrepancy_distances_are_rotation_invariant() {
        // Norms of mean differences do not change under a global rotation.
        let mut rng = crate::rng::stream(3, "rot");
        let dim = 4;
        // Random orthogonal matrix via Gram-Schmidt on a random matrix.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in v.iter_mut() {
                    *x /= norm;
                }
                basis.push(v);
            }
        }
        let rotate = |m: &Tensor| -> Tensor {
            let rows: Vec<Vec<f64>> = (0..m.rows())
                .map(|i| {
                    basis
                        .iter()
                        .map(|b| m.row(i).iter().zip(b).map(|(x, y)| x * y).sum())
                        .collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };

        let mk = |seed: u64, n: usize| {
            let mut r = crate::rng::stream(seed, "rotdata");
            Tensor::from_rows(
                &(0..n)
                    .map(|_| {
                        (0..dim)
                            .map(|_| rand::Rng::random_range(&mut r, -2.0..2.0))
                            .collect()
                    })
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let (s, t) = (mk(1, 6), mk(2, 8));
        let d0 = inter_domain_distance(&s, &t).unwrap();
        let d1 = inter_domain_distance(&rotate(&s), &rotate(&t)).unwrap();
        assert!((d0 - d1).abs() < 1e-9);

        let cams = [0, 1, 0, 1, 0, 1, 0, 1];
        let (c0, _) = inter_camera_distance(&t, &cams, 2).unwrap();
        let (c1, _) = inter_camera_distance(&rotate(&t), &cams, 2).unwrap();
        assert!((c0 - c1).abs() < 1e-9);
    }

    #[test]
    fn posterior_stats_on_constructed_models() {
        use crate::model::ModelDims;
        // Identity backbone (1-layer) and a discriminator whose output we
        // control through its bias (zero weights).
        let dims = ModelDims {
            feature_dim: 2,
            backbone_hidden: vec![],
            embed_dim: 2,
            disc_hidden: 2,
            num_person_classes: 2,
            num_camera_classes: 4,
        };
        let mut models = Models::init(dims, 0).unwrap();
        for w in models.discriminator.mlp.weights.iter_mut() {
            *w = Tensor::zeros(w.shape());
        }
        let indexer = CameraIndexer::new(2, 2).unwrap();
        let samples = vec![Sample::new(vec![0.3, -0.7], Domain::Source, 0, 0, 1, false)];

        // Zero logits -> uniform posterior over 4 classes: renormalized
        // opposite posterior is uniform (deviation 0), mass = 0.5.
        let stats = posterior_uniformity(&models, &samples, &indexer).unwrap();
        assert!(stats.deviation.abs() < 1e-12);
        assert!((stats.opposite_mass - 0.5).abs() < 1e-12);

        // Concentrate everything on an own-domain class: mass ~ 0,
        // deviation reported as the worst case 1 - 1/C_opp.
        models.discriminator.mlp.biases[1] =
            Tensor::vector(vec![1000.0, 0.0, 0.0, 0.0]);
        let stats = posterior_uniformity(&models, &samples, &indexer).unwrap();
        assert!(stats.opposite_mass < 1e-12);
        assert!((stats.deviation - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_brute_force_oracle_on_random_instances() {
        let mut rng = crate::rng::stream(50, "ap-oracle");
        for trial in 0..50 {
            let gn = rand::Rng::random_range(&mut rng, 3..25usize);
            let qe = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
            let grows: Vec<Vec<f64>> = (0..gn)
                .map(|_| {
                    vec![
                        rand::Rng::random_range(&mut rng, -3.0..3.0),
                        rand::Rng::random_range(&mut rng, -3.0..3.0),
                    ]
                })
                .collect();
            let ge = Tensor::from_rows(&grows).unwrap();
            let qm = vec![sample(Domain::Target, 0, 0, 1)];
            let gm: Vec<Sample> = (0..gn)
                .map(|i| {
                    let pid = if rand::Rng::random_bool(&mut rng, 0.3) { 1 } else { 2 + i as i64 };
                    sample(Domain::Target, 1, i as u64, pid)
                })
                .collect();
            let has_relevant = gm.iter().any(|s| s.person_id() == 1);
            let result = cmc_map(&qe, &qm, &ge, &gm, &[1]);
            if !has_relevant {
                assert!(result.is_err());
                continue;
            }
            let s = result.unwrap();

            // Oracle: rank by distance independently, then brute-force AP.
            let mut order: Vec<usize> = (0..gn).collect();
            let dist = |gi: usize| -> f64 {
                grows[gi].iter().map(|v| v * v).sum::<f64>()
            };
            order.sort_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b)));
            let flags: Vec<bool> = order.iter().map(|&gi| gm[gi].person_id() == 1).collect();
            let expected = crate::oracles::brute_force_average_precision(&flags).unwrap();
            assert!(
                (s.map - expected).abs() <= 1e-10,
                "trial {trial}: {} vs {expected}",
                s.map
            );
        }
    }
}
