//! k-reciprocal re-ranking of a pairwise distance matrix.
//!
//! Pipeline: k-reciprocal neighbor sets -> expansion through half-k1
//! reciprocal sets -> Gaussian-weighted membership vectors -> local query
//! expansion over the k2 nearest -> Jaccard distance, blended with the
//! original distance as `(1 - lambda) * d_J + lambda * d` and symmetrized.
//!
//! Neighbor sets include the item itself (the zero-distance entry), ties are
//! broken by ascending index, and the half-k1 expansion uses
//! `max(1, k1 / 2)` with integer division.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

/// Indices `0..n` ordered by `(distance to i, index)` ascending.
fn sorted_neighbors(dist: &Tensor, i: usize) -> Vec<usize> {
    let n = dist.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        dist.at(i, a)
            .partial_cmp(&dist.at(i, b))
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

fn validate(dist: &Tensor, k1: usize, k2: usize, lambda: f64) -> Result<usize> {
    if dist.shape().len() != 2 || dist.rows() != dist.cols() {
        return Err(Error::InvalidShape {
            op: "kreciprocal_rerank",
            shape: dist.shape().to_vec(),
            msg: "expects a square distance matrix".into(),
        });
    }
    if !dist.is_finite() {
        return Err(Error::NonFinite {
            what: "distance matrix".into(),
        });
    }
    let n = dist.rows();
    if k1 >= n {
        return Err(Error::InvalidConfig(format!(
            "rerank: k1 = {k1} must be smaller than the matrix size {n}"
        )));
    }
    if k2 < 1 || k2 > k1 {
        return Err(Error::InvalidConfig(format!(
            "rerank: need 1 <= k2 <= k1, got k2 = {k2}, k1 = {k1}"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "rerank: lambda = {lambda} outside [0, 1]"
        )));
    }
    Ok(n)
}

/// Re-rank `dist`; `lambda = 1` returns the input unchanged.
pub fn kreciprocal_rerank(dist: &Tensor, k1: usize, k2: usize, lambda: f64) -> Result<Tensor> {
    let n = validate(dist, k1, k2, lambda)?;
    if lambda == 1.0 {
        return Ok(dist.clone());
    }

    let order: Vec<Vec<usize>> = (0..n).map(|i| sorted_neighbors(dist, i)).collect();

    // member[i][j] = rank of j in i's ordering, for O(1) N(i,k) membership.
    let mut rank = vec![0usize; n * n];
    for (i, ord) in order.iter().enumerate() {
        for (pos, &j) in ord.iter().enumerate() {
            rank[i * n + j] = pos;
        }
    }
    let in_neigh = |i: usize, j: usize, k: usize| rank[i * n + j] < (k + 1).min(n);

    let reciprocal = |i: usize, k: usize| -> Vec<usize> {
        order[i]
            .iter()
            .take((k + 1).min(n))
            .copied()
            .filter(|&j| in_neigh(j, i, k))
            .collect()
    };

    let half = (k1 / 2).max(1);
    let r_k1: Vec<Vec<usize>> = (0..n).map(|i| reciprocal(i, k1)).collect();
    let r_half: Vec<Vec<usize>> = (0..n).map(|i| reciprocal(i, half)).collect();

    // Expanded reciprocal sets.
    let mut expanded: Vec<Vec<bool>> = vec![vec![false; n]; n];
    for i in 0..n {
        for &j in &r_k1[i] {
            expanded[i][j] = true;
        }
        for &j in &r_k1[i] {
            let candidate = &r_half[j];
            let overlap = candidate.iter().filter(|&&g| r_k1[i].contains(&g)).count();
            if 3 * overlap >= 2 * candidate.len() {
                for &g in candidate {
                    expanded[i][g] = true;
                }
            }
        }
    }

    // Gaussian-weighted membership vectors, L1-normalized per row.
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            if expanded[i][j] {
                let w = (-dist.at(i, j)).exp();
                v[i * n + j] = w;
                sum += w;
            }
        }
        for j in 0..n {
            v[i * n + j] /= sum;
        }
    }

    // Local query expansion: average the membership vectors of the k2
    // nearest (the item itself included).
    let mut vq = vec![0.0f64; n * n];
    for i in 0..n {
        let neigh = &order[i][..k2.min(n)];
        for &j in neigh {
            for c in 0..n {
                vq[i * n + c] += v[j * n + c];
            }
        }
        for c in 0..n {
            vq[i * n + c] /= neigh.len() as f64;
        }
    }

    // Jaccard distance blended with the original distance.
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let (mut mins, mut maxs) = (0.0, 0.0);
            for c in 0..n {
                let (a, b) = (vq[i * n + c], vq[j * n + c]);
                mins += a.min(b);
                maxs += a.max(b);
            }
            let dj = 1.0 - mins / maxs;
            out[i * n + j] = (1.0 - lambda) * dj + lambda * dist.at(i, j);
        }
    }

    // Symmetrize; the construction is already symmetric up to rounding.
    for i in 0..n {
        out[i * n + i] = 0.0;
        for j in (i + 1)..n {
            let m = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = m;
            out[j * n + i] = m;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}
