//! Unsupervised online triplet generation over temporal fragment batches.
//!
//! A batch is `p` non-overlapping windows of `q` temporally consecutive
//! samples from one camera. Per anchor, positives are top-k nearest samples
//! from the anchor's own fragment; negatives are nearest samples from
//! distinct other fragments. Selection reads a (possibly re-ranked) distance
//! matrix; the loss always differentiates live Euclidean distances.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rerank::{kreciprocal_rerank, RerankParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// `p` disjoint windows of `q` consecutive positions in one camera's
/// temporally sorted sample list. Batch position `b` maps to fragment
/// `b / q` and to camera-list position `fragments[b / q][b % q]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FragmentBatch {
    pub camera_id: usize,
    fragments: Vec<Vec<usize>>,
}

impl FragmentBatch {
    pub fn new(camera_id: usize, fragments: Vec<Vec<usize>>) -> Result<Self> {
        if fragments.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "fragment batch needs p >= 2 fragments, got {}",
                fragments.len()
            )));
        }
        let q = fragments[0].len();
        if q == 0 {
            return Err(Error::InvalidConfig("empty fragment".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for frag in &fragments {
            if frag.len() != q {
                return Err(Error::InvalidConfig("ragged fragment lengths".into()));
            }
            for win in frag.windows(2) {
                if win[1] != win[0] + 1 {
                    return Err(Error::InvalidConfig(
                        "fragment positions must be consecutive".into(),
                    ));
                }
            }
            for &idx in frag {
                if !seen.insert(idx) {
                    return Err(Error::InvalidConfig(format!(
                        "fragments overlap at position {idx}"
                    )));
                }
            }
        }
        Ok(FragmentBatch {
            camera_id,
            fragments,
        })
    }

    pub fn p(&self) -> usize {
        self.fragments.len()
    }

    pub fn q(&self) -> usize {
        self.fragments[0].len()
    }

    pub fn n(&self) -> usize {
        self.p() * self.q()
    }

    pub fn fragments(&self) -> &[Vec<usize>] {
        &self.fragments
    }

    /// Fragment owning batch position `b`.
    pub fn fragment_of(&self, b: usize) -> usize {
        b / self.q()
    }

    /// Camera-list positions in batch order (fragments concatenated).
    pub fn flat_positions(&self) -> Vec<usize> {
        self.fragments.iter().flatten().copied().collect()
    }
}

/// Draw `p` non-overlapping windows of `q` consecutive positions from a
/// camera timeline of `camera_len` samples, uniformly over all valid
/// placements.
///
/// Sampling a p-combination `c_1 < ... < c_p` from `[0, L - pq + p)` and
/// setting window starts `s_i = c_i + (i - 1)(q - 1)` is a bijection onto
/// valid placements, so uniform combinations give uniform placements.
pub fn build_fragment_batch(
    camera_id: usize,
    camera_len: usize,
    p: usize,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FragmentBatch> {
    if p < 2 || q < 2 {
        return Err(Error::InvalidConfig(format!(
            "fragment batch needs p >= 2 and q >= 2, got p = {p}, q = {q}"
        )));
    }
    if p * q > camera_len {
        return Err(Error::InvalidConfig(format!(
            "camera {camera_id} too small: p * q = {} samples required, {camera_len} available",
            p * q
        )));
    }
    let slots = camera_len - p * q + p;
    let mut combo: Vec<usize> = rand::seq::index::sample(rng, slots, p).into_vec();
    combo.sort_unstable();
    let fragments = combo
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let start = c + i * (q - 1);
            (start..start + q).collect()
        })
        .collect();
    FragmentBatch::new(camera_id, fragments)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DistanceMetric {
    Euclidean,
    KReciprocal(RerankParams),
}

/// Pairwise distances between embedding rows. `KReciprocal` re-ranks the
/// Euclidean matrix, clipping `k1` to `n / 2` so small batches stay valid.
pub fn compute_distance_matrix(embeddings: &Tensor, metric: &DistanceMetric) -> Result<Tensor> {
    if embeddings.shape().len() != 2 || embeddings.rows() < 2 {
        return Err(Error::InvalidShape {
            op: "compute_distance_matrix",
            shape: embeddings.shape().to_vec(),
            msg: "expects a matrix with at least two rows".into(),
        });
    }
    if !embeddings.is_finite() {
        return Err(Error::NonFinite {
            what: "embeddings".into(),
        });
    }
    let n = embeddings.rows();
    let e = embeddings.cols();
    let mut vals = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (ri, rj) = (embeddings.row(i), embeddings.row(j));
            let mut sq = 0.0;
            for k in 0..e {
                let d = ri[k] - rj[k];
                sq += d * d;
            }
            let d = sq.sqrt();
            vals[i * n + j] = d;
            vals[j * n + i] = d;
        }
    }
    let euclid = Tensor::from_parts(vec![n, n], vals);
    match metric {
        DistanceMetric::Euclidean => Ok(euclid),
        DistanceMetric::KReciprocal(params) => {
            let k1 = params.k1.min((n / 2).max(1));
            let k2 = params.k2.min(k1).max(1);
            kreciprocal_rerank(&euclid, k1, k2, params.lambda)
        }
    }
}

/// Non-anchor batch positions sorted by `(distance to anchor, index)`.
fn sorted_others(anchor: usize, dist: &Tensor) -> Vec<usize> {
    let n = dist.rows();
    let mut others: Vec<usize> = (0..n).filter(|&i| i != anchor).collect();
    others.sort_by(|&a, &b| {
        dist.at(anchor, a)
            .partial_cmp(&dist.at(anchor, b))
            .unwrap()
            .then(a.cmp(&b))
    });
    others
}

/// Positives: within the top-`k` positions of the sorted list AND in the
/// anchor's fragment. Empty results are valid (the anchor goes inactive).
pub fn select_positives(
    anchor: usize,
    dist: &Tensor,
    batch: &FragmentBatch,
    k: usize,
) -> Vec<usize> {
    let own = batch.fragment_of(anchor);
    sorted_others(anchor, dist)
        .into_iter()
        .take(k)
        .filter(|&i| batch.fragment_of(i) == own)
        .collect()
}

/// Negatives: scan the sorted list ascending, taking a sample only if it
/// lies outside the anchor's fragment and its fragment has not contributed
/// a negative yet. Stops after `k_n` picks; yields `min(k_n, p - 1)`.
pub fn select_negatives(
    anchor: usize,
    dist: &Tensor,
    batch: &FragmentBatch,
    k_n: usize,
) -> Vec<usize> {
    let own = batch.fragment_of(anchor);
    let mut used = vec![false; batch.p()];
    used[own] = true;
    let mut out = Vec::new();
    for i in sorted_others(anchor, dist) {
        if out.len() == k_n {
            break;
        }
        let frag = batch.fragment_of(i);
        if !used[frag] {
            used[frag] = true;
            out.push(i);
        }
    }
    // Fragment distinctness is structural; check it on every call.
    debug_assert_eq!(
        out.iter()
            .map(|&i| batch.fragment_of(i))
            .collect::<std::collections::HashSet<_>>()
            .len(),
        out.len()
    );
    out
}

/// Per-anchor mining result for one fragment batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletEntry {
    pub anchor: usize,
    /// The paper-facing `w_a`: 1 when the anchor found positives.
    pub active: bool,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletSet {
    pub camera_id: usize,
    pub entries: Vec<TripletEntry>,
}

impl TripletSet {
    /// Apply the selection rules to every anchor of the batch.
    pub fn mine(dist: &Tensor, batch: &FragmentBatch, k: usize, k_n: usize) -> Result<TripletSet> {
        if k == 0 || k_n == 0 {
            return Err(Error::InvalidConfig("mining needs k >= 1 and k_n >= 1".into()));
        }
        if dist.rows() != batch.n() {
            return Err(Error::ShapeMismatch {
                op: "TripletSet::mine",
                lhs: dist.shape().to_vec(),
                rhs: vec![batch.n()],
            });
        }
        let entries = (0..batch.n())
            .map(|anchor| {
                let positives = select_positives(anchor, dist, batch, k);
                let negatives = select_negatives(anchor, dist, batch, k_n);
                TripletEntry {
                    anchor,
                    active: !positives.is_empty(),
                    positives,
                    negatives,
                }
            })
            .collect();
        let set = TripletSet {
            camera_id: batch.camera_id,
            entries,
        };
        set.validate(batch)?;
        Ok(set)
    }

    /// Structural invariants: `w_a = 0` iff no positives; positives live in
    /// the anchor's fragment; negatives occupy pairwise distinct non-anchor
    /// fragments.
    pub fn validate(&self, batch: &FragmentBatch) -> Result<()> {
        for e in &self.entries {
            if e.active != !e.positives.is_empty() {
                return Err(Error::Data(format!(
                    "anchor {}: activity flag disagrees with positive count",
                    e.anchor
                )));
            }
            let own = batch.fragment_of(e.anchor);
            if e.positives.iter().any(|&p| batch.fragment_of(p) != own) {
                return Err(Error::Data(format!(
                    "anchor {}: positive outside its fragment",
                    e.anchor
                )));
            }
            let mut frags: Vec<usize> = e.negatives.iter().map(|&i| batch.fragment_of(i)).collect();
            frags.sort_unstable();
            let len_before = frags.len();
            frags.dedup();
            if frags.len() != len_before || frags.contains(&own) {
                return Err(Error::Data(format!(
                    "anchor {}: negatives not in distinct non-anchor fragments",
                    e.anchor
                )));
            }
        }
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.entries.iter().filter(|e| e.active).count()
    }
}

/// Triplet loss `sum_a w_a [ mean_pos_dist - mean_neg_dist + margin ]_+`
/// as a tape node over live Euclidean distances of `embeddings`.
///
/// Returns the loss node and the number of anchors skipped because they were
/// active yet had no negatives (possible only for label-based selection).
pub fn triplet_loss(
    tape: &mut Tape,
    embeddings: NodeId,
    triplets: &TripletSet,
    margin: f64,
) -> Result<(NodeId, usize)> {
    if margin <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "triplet margin must be positive, got {margin}"
        )));
    }
    let n = {
        let t = tape.value(embeddings);
        if t.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "triplet_loss",
                shape: t.shape().to_vec(),
                msg: "embeddings must be a matrix".into(),
            });
        }
        t.rows()
    };
    if triplets.entries.len() != n {
        return Err(Error::ShapeMismatch {
            op: "triplet_loss",
            lhs: vec![triplets.entries.len()],
            rhs: vec![n],
        });
    }

    let mut wp = vec![0.0; n * n];
    let mut wn = vec![0.0; n * n];
    let mut active = vec![0.0; n];
    let mut skipped = 0usize;
    for e in &triplets.entries {
        if !e.active {
            continue;
        }
        if e.negatives.is_empty() {
            skipped += 1;
            continue;
        }
        active[e.anchor] = 1.0;
        let pw = 1.0 / e.positives.len() as f64;
        for &p in &e.positives {
            wp[e.anchor * n + p] = pw;
        }
        let nw = 1.0 / e.negatives.len() as f64;
        for &g in &e.negatives {
            wn[e.anchor * n + g] = nw;
        }
    }

    let sq = tape.pairwise_sq_dist(embeddings)?;
    let clamped = tape.clamp_min(sq, 1e-12);
    let d = tape.sqrt(clamped)?;
    let wp = tape.input(Tensor::from_parts(vec![n, n], wp));
    let wn = tape.input(Tensor::from_parts(vec![n, n], wn));
    let dp = tape.mul(d, wp)?;
    let dp = tape.row_sum(dp)?;
    let dn = tape.mul(d, wn)?;
    let dn = tape.row_sum(dn)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, margin);
    let hinged = tape.hinge(shifted);
    let w = tape.input(Tensor::from_parts(vec![n, 1], active));
    let gated = tape.mul(hinged, w)?;
    Ok((tape.sum(gated), skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Distance matrix realizing a chosen sorted order for anchor 0.
    fn spec_example_batch() -> (Tensor, FragmentBatch) {
        // Fragments A = {0,1,2}, B = {3,4,5}; S(0) = [2, 3, 1, 4, 5].
        let batch = FragmentBatch::new(0, vec![vec![0, 1, 2], vec![3, 4, 5]]).unwrap();
        let n = 6;
        let mut vals = vec![0.0; n * n];
        let d0 = [0.0, 0.3, 0.1, 0.2, 0.4, 0.5];
        for j in 0..n {
            vals[j] = d0[j];
            vals[j * n] = d0[j];
        }
        for i in 1..n {
            for j in (i + 1)..n {
                let d = 1.0 + (i * n + j) as f64 * 0.01;
                vals[i * n + j] = d;
                vals[j * n + i] = d;
            }
        }
        (Tensor::from_parts(vec![n, n], vals), batch)
    }

    #[test]
    fn positive_selection_applies_both_rules() {
        let (dist, batch) = spec_example_batch();
        // k = 2 takes {2, 3}; only 2 shares fragment A.
        assert_eq!(select_positives(0, &dist, &batch, 2), vec![2]);
        // k = n - 1 returns the whole fragment minus the anchor.
        let mut all = select_positives(0, &dist, &batch, 5);
        all.sort_unstable();
        assert_eq!(all, vec![1, 2]);
    }

    #[test]
    fn negative_selection_takes_one_per_fragment() {
        let (dist, batch) = spec_example_batch();
        // k_n = 2 but only one other fragment exists: p - 1 = 1 negative.
        assert_eq!(select_negatives(0, &dist, &batch, 2), vec![3]);
    }

    #[test]
    fn negative_count_matches_min_of_kn_and_p_minus_one() {
        let batch =
            FragmentBatch::new(1, vec![vec![0, 1], vec![2, 3], vec![4, 5]]).unwrap();
        let mut rng = crate::rng::stream(5, "negcount");
        let emb = Tensor::from_rows(
            &(0..6)
                .map(|_| vec![rand::Rng::random_range(&mut rng, -1.0..1.0); 3])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let dist = compute_distance_matrix(&emb, &DistanceMetric::Euclidean).unwrap();
        for anchor in 0..6 {
            let negs = select_negatives(anchor, &dist, &batch, 2);
            assert_eq!(negs.len(), 2);
            let f: std::collections::HashSet<_> =
                negs.iter().map(|&i| batch.fragment_of(i)).collect();
            assert_eq!(f.len(), 2);
            assert!(!f.contains(&batch.fragment_of(anchor)));
        }
    }

    #[test]
    fn six_samples_two_by_three_has_single_layout() {
        let mut rng = crate::rng::stream(0, "layout");
        for _ in 0..20 {
            let b = build_fragment_batch(0, 6, 2, 3, &mut rng).unwrap();
            assert_eq!(b.fragments(), &[vec![0, 1, 2], vec![3, 4, 5]]);
        }
    }

    #[test]
    fn oversized_batch_is_rejected_with_counts() {
        let mut rng = crate::rng::stream(0, "layout");
        let err = build_fragment_batch(3, 5, 2, 3, &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('6') && msg.contains('5'), "{msg}");
    }

    #[test]
    fn placements_cover_all_layouts_roughly_uniformly() {
        // L = 10, p = 2, q = 3: enumerate the valid placements by brute
        // force, then sample 10_000 draws and check a chi-square statistic.
        let (l, p, q) = (10usize, 2usize, 3usize);
        let mut layouts = Vec::new();
        for s1 in 0..=l - q {
            for s2 in s1 + q..=l - q {
                layouts.push((s1, s2));
            }
        }
        assert_eq!(layouts.len(), 15);

        let mut counts = vec![0usize; layouts.len()];
        let mut rng = crate::rng::stream(42, "chi2");
        let draws = 10_000;
        for _ in 0..draws {
            let b = build_fragment_batch(0, l, p, q, &mut rng).unwrap();
            let key = (b.fragments()[0][0], b.fragments()[1][0]);
            let pos = layouts.iter().position(|&x| x == key).unwrap();
            counts[pos] += 1;
        }
        let expected = draws as f64 / layouts.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99.9% quantile of chi-square with 14 dof is about 36.1.
        assert!(chi2 < 36.1, "chi2 = {chi2}, counts = {counts:?}");
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn euclidean_matrix_three_four_five() {
        let emb = Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let d = compute_distance_matrix(&emb, &DistanceMetric::Euclidean).unwrap();
        assert_eq!(d.values(), &[0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn identical_rows_give_zero_matrix() {
        let emb = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let d = compute_distance_matrix(&emb, &DistanceMetric::Euclidean).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mine_validates_and_flags_anchorless_rows() {
        let (dist, batch) = spec_example_batch();
        let set = TripletSet::mine(&dist, &batch, 2, 2).unwrap();
        assert_eq!(set.entries.len(), 6);
        assert!(set.entries[0].active);
        assert_eq!(set.entries[0].positives, vec![2]);
        assert_eq!(set.entries[0].negatives, vec![3]);
        set.validate(&batch).unwrap();
    }

    #[test]
    fn triplet_loss_hinge_arithmetic() {
        // Distances: anchor-positive 0.8, anchor-negative 0.6, margin 0.3
        // -> 0.5. Then margin 0.3 with dp = 0.2, dn = 0.9 -> 0.
        let batch = FragmentBatch::new(0, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let mk_set = |pos: usize, neg: usize| TripletSet {
            camera_id: 0,
            entries: vec![
                TripletEntry {
                    anchor: 0,
                    active: true,
                    positives: vec![pos],
                    negatives: vec![neg],
                },
                TripletEntry { anchor: 1, active: false, positives: vec![], negatives: vec![] },
                TripletEntry { anchor: 2, active: false, positives: vec![], negatives: vec![] },
                TripletEntry { anchor: 3, active: false, positives: vec![], negatives: vec![] },
            ],
        };

        let mut tape = Tape::new();
        let emb = tape.input(Tensor::matrix(4, 1, vec![0.0, 0.8, -0.6, 5.0]).unwrap());
        let (loss, skipped) = triplet_loss(&mut tape, emb, &mk_set(1, 2), 0.3).unwrap();
        assert_eq!(skipped, 0);
        assert!((tape.value(loss).item() - 0.5).abs() < 1e-9);
        let _ = batch;

        let mut tape2 = Tape::new();
        let emb2 = tape2.input(Tensor::matrix(4, 1, vec![0.0, 0.2, -0.9, 5.0]).unwrap());
        let (loss2, _) = triplet_loss(&mut tape2, emb2, &mk_set(1, 2), 0.3).unwrap();
        assert_eq!(tape2.value(loss2).item(), 0.0);
    }

    #[test]
    fn all_inactive_anchors_give_zero_loss_and_zero_gradient() {
        let set = TripletSet {
            camera_id: 0,
            entries: (0..4)
                .map(|a| TripletEntry {
                    anchor: a,
                    active: false,
                    positives: vec![],
                    negatives: vec![],
                })
                .collect(),
        };
        let mut tape = Tape::new();
        let emb = tape.param(Tensor::matrix(4, 2, vec![0.5; 8]).unwrap());
        let (loss, _) = triplet_loss(&mut tape, emb, &set, 0.3).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(emb).values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn active_anchor_without_negatives_contributes_nothing_but_warns() {
        let set = TripletSet {
            camera_id: 0,
            entries: vec![
                TripletEntry {
                    anchor: 0,
                    active: true,
                    positives: vec![1],
                    negatives: vec![],
                },
                TripletEntry { anchor: 1, active: false, positives: vec![], negatives: vec![] },
            ],
        };
        let mut tape = Tape::new();
        let emb = tape.input(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let (loss, skipped) = triplet_loss(&mut tape, emb, &set, 0.3).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        assert_eq!(skipped, 1);
    }
}
