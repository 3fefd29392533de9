//! Independent reference implementations used to cross-check the production
//! code paths. These stay deliberately naive — plain loops, fresh sorts,
//! `Vec`-based set arithmetic — and must never share code with the modules
//! they verify.

use crate::miner::FragmentBatch;
use crate::tensor::Tensor;

/// Reference positive selection: for each candidate, count how many others
/// rank ahead of it, then apply the two rules literally.
pub fn brute_select_positives(
    anchor: usize,
    dist: &Tensor,
    batch: &FragmentBatch,
    k: usize,
) -> Vec<usize> {
    let n = dist.rows();
    let mut picked = Vec::new();
    for cand in 0..n {
        if cand == anchor {
            continue;
        }
        // Rank of `cand` in the ascending (distance, index) order.
        let mut rank = 0usize;
        for other in 0..n {
            if other == anchor || other == cand {
                continue;
            }
            let before = match dist
                .at(anchor, other)
                .partial_cmp(&dist.at(anchor, cand))
                .unwrap()
            {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Equal => other < cand,
                std::cmp::Ordering::Greater => false,
            };
            if before {
                rank += 1;
            }
        }
        if rank < k && batch.fragment_of(cand) == batch.fragment_of(anchor) {
            picked.push(cand);
        }
    }
    // Order by list position, as the scan-based implementation returns.
    picked.sort_by(|&a, &b| {
        dist.at(anchor, a)
            .partial_cmp(&dist.at(anchor, b))
            .unwrap()
            .then(a.cmp(&b))
    });
    picked
}

/// Reference negative selection: repeatedly find the nearest unconsidered
/// sample and apply the fragment rules.
pub fn brute_select_negatives(
    anchor: usize,
    dist: &Tensor,
    batch: &FragmentBatch,
    k_n: usize,
) -> Vec<usize> {
    let n = dist.rows();
    let mut considered = vec![false; n];
    considered[anchor] = true;
    let mut taken_fragments: Vec<usize> = vec![batch.fragment_of(anchor)];
    let mut out = Vec::new();
    while out.len() < k_n {
        let mut best: Option<usize> = None;
        for cand in 0..n {
            if considered[cand] {
                continue;
            }
            best = match best {
                None => Some(cand),
                Some(b) => {
                    let better = match dist
                        .at(anchor, cand)
                        .partial_cmp(&dist.at(anchor, b))
                        .unwrap()
                    {
                        std::cmp::Ordering::Less => true,
                        std::cmp::Ordering::Equal => cand < b,
                        std::cmp::Ordering::Greater => false,
                    };
                    if better {
                        Some(cand)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let Some(next) = best else { break };
        considered[next] = true;
        let frag = batch.fragment_of(next);
        if !taken_fragments.contains(&frag) {
            taken_fragments.push(frag);
            out.push(next);
        }
    }
    out
}

/// Reference k-reciprocal re-ranking with `Vec` set arithmetic throughout.
pub fn naive_kreciprocal(dist: &Tensor, k1: usize, k2: usize, lambda: f64) -> Tensor {
    let n = dist.rows();
    if lambda == 1.0 {
        return dist.clone();
    }

    let neighbors = |i: usize, k: usize| -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        all.sort_by(|&a, &b| {
            dist.at(i, a)
                .partial_cmp(&dist.at(i, b))
                .unwrap()
                .then(a.cmp(&b))
        });
        all.truncate((k + 1).min(n));
        all
    };
    let reciprocal = |i: usize, k: usize| -> Vec<usize> {
        neighbors(i, k)
            .into_iter()
            .filter(|&j| neighbors(j, k).contains(&i))
            .collect()
    };

    let half = (k1 / 2).max(1);
    let mut v = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let r = reciprocal(i, k1);
        let mut star = r.clone();
        for &j in &r {
            let rh = reciprocal(j, half);
            let overlap = rh.iter().filter(|g| r.contains(g)).count();
            if overlap as f64 >= 2.0 / 3.0 * rh.len() as f64 {
                for &g in &rh {
                    if !star.contains(&g) {
                        star.push(g);
                    }
                }
            }
        }
        let mut total = 0.0;
        for &j in &star {
            v[i][j] = (-dist.at(i, j)).exp();
            total += v[i][j];
        }
        for x in v[i].iter_mut() {
            *x /= total;
        }
    }

    let mut vq = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let close = neighbors(i, k2.saturating_sub(1));
        let close = &close[..k2.min(n)];
        for &j in close {
            for c in 0..n {
                vq[i][c] += v[j][c] / close.len() as f64;
            }
        }
    }

    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut mins = 0.0;
            let mut maxs = 0.0;
            for c in 0..n {
                mins += vq[i][c].min(vq[j][c]);
                maxs += vq[i][c].max(vq[j][c]);
            }
            let dj = 1.0 - mins / maxs;
            out[i * n + j] = (1.0 - lambda) * dj + lambda * dist.at(i, j);
        }
    }
    for i in 0..n {
        out[i * n + i] = 0.0;
        for j in (i + 1)..n {
            let m = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = m;
            out[j * n + i] = m;
        }
    }
    Tensor::from_parts(vec![n, n], out)
}

/// Reference average precision over a ranked relevance list: the mean of
/// precision at each relevant rank.
pub fn brute_force_average_precision(relevant_in_rank_order: &[bool]) -> Option<f64> {
    let total_relevant = relevant_in_rank_order.iter().filter(|&&r| r).count();
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &rel) in relevant_in_rank_order.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}
