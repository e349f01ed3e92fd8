//! Straight-line 64-bit reference implementations used to check the fast
//! paths. Nothing here shares code with the kernels it checks: every output
//! row is computed by gathering that token's keys and values explicitly.

use std::collections::HashSet;

use crate::grouped::AttentionHeads;
use crate::stga::StaticGroup;
use crate::tensor::Matrix;

/// One query against an explicit key/value index set, textbook softmax.
pub fn attend_one(q: &[f64], k: &Matrix<f64>, v: &Matrix<f64>, kv: &[usize]) -> Vec<f64> {
    let d = q.len() as f64;
    let logits: Vec<f64> = kv
        .iter()
        .map(|&j| q.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut out = vec![0.0; v.cols()];
    for (w, &j) in weights.iter().zip(kv) {
        for (o, x) in out.iter_mut().zip(v.row(j)) {
            *o += w / z * x;
        }
    }
    out
}

pub fn naive_attention(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>) -> Matrix<f64> {
    let all: Vec<usize> = (0..k.rows()).collect();
    let rows: Vec<Vec<f64>> = (0..q.rows()).map(|i| attend_one(q.row(i), k, v, &all)).collect();
    Matrix::from_rows(&rows).unwrap()
}

/// Runs `kv_of(token)` attention per head and concatenates heads.
fn per_token(heads: &AttentionHeads<f64>, kv_of: impl Fn(usize) -> Vec<usize>) -> Matrix<f64> {
    let rows: Vec<Vec<f64>> = (0..heads.n_tokens())
        .map(|t| {
            let kv = kv_of(t);
            (0..heads.n_heads())
                .flat_map(|h| attend_one(heads.q(h).row(t), heads.k(h), heads.v(h), &kv))
                .collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

/// "Gather my group's K, V, attend, multiply by my gate."
pub fn moga_gather(heads: &AttentionHeads<f64>, assignment: &[usize], gate: &[f64]) -> Matrix<f64> {
    let mut out = per_token(heads, |t| {
        (0..assignment.len()).filter(|&j| assignment[j] == assignment[t]).collect()
    });
    let d = out.cols();
    let data: Vec<f64> = out
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * gate[i / d])
        .collect();
    out = Matrix::new(out.rows(), d, data).unwrap();
    out
}

/// Each token attends over the kv set of the (unique) group that queries it.
pub fn static_gather(heads: &AttentionHeads<f64>, groups: &[StaticGroup]) -> Matrix<f64> {
    per_token(heads, |t| {
        let g = groups
            .iter()
            .find(|g| g.query_tokens.contains(&t))
            .expect("token not covered");
        g.kv_tokens.clone()
    })
}

/// Mean of the MoGA stream and every static stream.
pub fn combined_gather(
    heads: &AttentionHeads<f64>,
    assignment: &[usize],
    gate: &[f64],
    static_streams: &[&[StaticGroup]],
) -> Matrix<f64> {
    let mut streams = vec![moga_gather(heads, assignment, gate)];
    streams.extend(static_streams.iter().map(|s| static_gather(heads, s)));
    let n = streams.len() as f64;
    let (r, c) = streams[0].shape();
    Matrix::from_fn(r, c, |i, j| streams.iter().map(|s| s.get(i, j)).sum::<f64>() / n).unwrap()
}

/// Distinct (query, key) pairs attended by MoGA groups or any static group,
/// by checking every pair.
pub fn union_pairs_double_loop(assignment: &[usize], groups: &[StaticGroup], n: usize) -> u64 {
    let kv_sets: Vec<HashSet<usize>> = groups.iter().map(|g| g.kv_tokens.iter().copied().collect()).collect();
    let mut querying: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (gi, g) in groups.iter().enumerate() {
        for &q in &g.query_tokens {
            querying[q].push(gi);
        }
    }
    let mut count = 0;
    for q in 0..n {
        for k in 0..n {
            let dynamic = assignment.get(q).is_some() && assignment[q] == assignment[k];
            let fixed = querying[q].iter().any(|&gi| kv_sets[gi].contains(&k));
            if dynamic || fixed {
                count += 1;
            }
        }
    }
    count
}
