//! Groupwise attention over routed tokens.
//!
//! The execution path is permute → varlen attention over contiguous group
//! segments → repermute → gate scaling. The segment description
//! (`cu_seqlens`, `max_seqlen`) follows the usual varlen-attention layout, so
//! the segment loop in [`varlen_attention`] is the only piece a fused backend
//! would replace.

use std::ops::Range;

use crate::error::{shape_err, Result};
use crate::routing::{gate_backward, RouterGrad, Router, RoutingResult};
use crate::tensor::{finite_diff_grad, rel_err, Matrix, Real};

/// Stable counting-sort layout of tokens by group id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    permutation: Vec<usize>,
    inverse: Vec<usize>,
    cu_seqlens: Vec<usize>,
    max_seqlen: usize,
}

impl GroupLayout {
    pub fn build(assignment: &[usize], n_groups: usize) -> Result<Self> {
        let mut counts = vec![0usize; n_groups];
        for (t, &g) in assignment.iter().enumerate() {
            if g >= n_groups {
                return Err(shape_err(format!(
                    "token {t} assigned to group {g}, only {n_groups} groups"
                )));
            }
            counts[g] += 1;
        }
        let mut cu_seqlens = Vec::with_capacity(n_groups + 1);
        cu_seqlens.push(0);
        for c in &counts {
            cu_seqlens.push(cu_seqlens.last().unwrap() + c);
        }
        let mut cursor = cu_seqlens[..n_groups].to_vec();
        let mut permutation = vec![0; assignment.len()];
        let mut inverse = vec![0; assignment.len()];
        for (t, &g) in assignment.iter().enumerate() {
            permutation[cursor[g]] = t;
            inverse[t] = cursor[g];
            cursor[g] += 1;
        }
        Ok(Self {
            permutation,
            inverse,
            cu_seqlens,
            max_seqlen: counts.into_iter().max().unwrap_or(0),
        })
    }

    /// `permutation[j]` is the original index of the token at packed slot `j`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// `inverse[t]` is the packed slot of original token `t`.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn cu_seqlens(&self) -> &[usize] {
        &self.cu_seqlens
    }

    pub fn max_seqlen(&self) -> usize {
        self.max_seqlen
    }

    pub fn n_groups(&self) -> usize {
        self.cu_seqlens.len() - 1
    }

    pub fn n_tokens(&self) -> usize {
        self.permutation.len()
    }

    pub fn segment(&self, group: usize) -> Range<usize> {
        self.cu_seqlens[group]..self.cu_seqlens[group + 1]
    }

    /// Original token indices of `group`, ascending.
    pub fn members(&self, group: usize) -> &[usize] {
        &self.permutation[self.segment(group)]
    }

    /// `sum_i n_i^2`, the number of query-key pairs groupwise attention scores.
    pub fn pair_count(&self) -> u64 {
        self.cu_seqlens.windows(2).map(|w| ((w[1] - w[0]) as u64).pow(2)).sum()
    }

    pub fn permute<U: Clone>(&self, items: &[U]) -> Vec<U> {
        self.permutation.iter().map(|&t| items[t].clone()).collect()
    }

    pub fn repermute<U: Clone>(&self, packed: &[U]) -> Vec<U> {
        self.inverse.iter().map(|&j| packed[j].clone()).collect()
    }

    pub fn permute_rows<T: Real>(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_rows(m)?;
        m.gather_rows(&self.permutation)
    }

    pub fn repermute_rows<T: Real>(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_rows(m)?;
        m.gather_rows(&self.inverse)
    }

    fn check_rows<T: Real>(&self, m: &Matrix<T>) -> Result<()> {
        if m.rows() != self.n_tokens() {
            return Err(shape_err(format!(
                "layout covers {} tokens, matrix has {} rows",
                self.n_tokens(),
                m.rows()
            )));
        }
        Ok(())
    }
}

/// Per-head query/key/value stacks over the same `N` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeads<T = f32> {
    q: Vec<Matrix<T>>,
    k: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Real> AttentionHeads<T> {
    pub fn new(q: Vec<Matrix<T>>, k: Vec<Matrix<T>>, v: Vec<Matrix<T>>) -> Result<Self> {
        if q.is_empty() || q.len() != k.len() || q.len() != v.len() {
            return Err(shape_err("q, k, v must hold the same non-zero number of heads"));
        }
        let (n, d) = q[0].shape();
        for m in q.iter().chain(&k).chain(&v) {
            if m.shape() != (n, d) {
                return Err(shape_err(format!(
                    "every head must be {n}x{d}, found {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self { q, k, v })
    }

    /// Splits packed `N x (n_heads * d_head)` projections into heads.
    pub fn from_packed(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !q.cols().is_multiple_of(n_heads) {
            return Err(shape_err(format!(
                "width {} not divisible into {n_heads} heads",
                q.cols()
            )));
        }
        let d = q.cols() / n_heads;
        let split = |m: &Matrix<T>| -> Result<Vec<Matrix<T>>> {
            (0..n_heads).map(|h| m.slice_cols(h * d, (h + 1) * d)).collect()
        };
        Self::new(split(q)?, split(k)?, split(v)?)
    }

    pub fn n_heads(&self) -> usize {
        self.q.len()
    }

    pub fn d_head(&self) -> usize {
        self.q[0].cols()
    }

    pub fn d_model(&self) -> usize {
        self.n_heads() * self.d_head()
    }

    pub fn n_tokens(&self) -> usize {
        self.q[0].rows()
    }

    pub fn q(&self, head: usize) -> &Matrix<T> {
        &self.q[head]
    }

    pub fn k(&self, head: usize) -> &Matrix<T> {
        &self.k[head]
    }

    pub fn v(&self, head: usize) -> &Matrix<T> {
        &self.v[head]
    }

    /// Token rows `[start, end)` of every head.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Result<Self> {
        let s = |ms: &[Matrix<T>]| -> Result<Vec<Matrix<T>>> {
            ms.iter().map(|m| m.slice_rows(start, end)).collect()
        };
        Self::new(s(&self.q)?, s(&self.k)?, s(&self.v)?)
    }

    pub fn cast<U: Real>(&self) -> AttentionHeads<U> {
        AttentionHeads {
            q: self.q.iter().map(Matrix::cast).collect(),
            k: self.k.iter().map(Matrix::cast).collect(),
            v: self.v.iter().map(Matrix::cast).collect(),
        }
    }
}

/// Dense attention of `nq` contiguous query rows against `nk` contiguous
/// key/value rows, written into `out`. Returns the number of scores computed.
pub(crate) fn attend_block<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    scale: T,
    scores: &mut Vec<T>,
    out: &mut [T],
) -> u64 {
    let nq = q.len() / d;
    let nk = k.len() / d;
    scores.clear();
    scores.resize(nk, T::zero());
    for i in 0..nq {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            let mut acc = T::zero();
            for c in 0..d {
                acc = acc + qi[c] * kj[c];
            }
            *s = acc * scale;
            max = max.max(*s);
        }
        let mut sum = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum = sum + *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        oi.fill(T::zero());
        for (j, s) in scores.iter().enumerate() {
            let w = *s / sum;
            let vj = &v[j * d..(j + 1) * d];
            for c in 0..d {
                oi[c] = oi[c] + w * vj[c];
            }
        }
    }
    (nq * nk) as u64
}

pub(crate) fn softmax_scale<T: Real>(d_head: usize) -> T {
    T::one() / T::of(d_head as f64).sqrt()
}

/// `softmax(q K^T / sqrt(d)) V` over all keys.
pub fn full_attention<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    if q.cols() != k.cols() || k.shape() != v.shape() || k.rows() == 0 {
        return Err(shape_err(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let d = q.cols();
    let mut out = Matrix::zeros(q.rows(), d);
    attend_block(q.data(), k.data(), v.data(), d, softmax_scale(d), &mut Vec::new(), out.data_mut());
    out.ensure_finite("full_attention")
}

/// Attention within each `[cu_seqlens[i], cu_seqlens[i+1])` segment of packed
/// rows. Returns the packed output and the number of scores computed.
pub fn varlen_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cu_seqlens: &[usize],
    max_seqlen: usize,
) -> Result<(Matrix<T>, u64)> {
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(shape_err("varlen_attention: q, k, v shapes differ"));
    }
    if cu_seqlens.first() != Some(&0)
        || cu_seqlens.last() != Some(&q.rows())
        || cu_seqlens.windows(2).any(|w| w[0] > w[1] || w[1] - w[0] > max_seqlen)
    {
        return Err(shape_err("varlen_attention: inconsistent cu_seqlens/max_seqlen"));
    }
    let d = q.cols();
    let scale = softmax_scale(d);
    let mut out = Matrix::zeros(q.rows(), d);
    let mut scores = Vec::with_capacity(max_seqlen);
    let mut pairs = 0;
    for w in cu_seqlens.windows(2) {
        let seg = w[0] * d..w[1] * d;
        if seg.is_empty() {
            continue;
        }
        pairs += attend_block(
            &q.data()[seg.clone()],
            &k.data()[seg.clone()],
            &v.data()[seg.clone()],
            d,
            scale,
            &mut scores,
            &mut out.data_mut()[seg],
        );
    }
    Ok((out.ensure_finite("varlen_attention")?, pairs))
}

/// Score-entry counter of a MoGA forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionStats {
    /// Summed over heads.
    pub score_entries: u64,
    pub n_heads: usize,
}

impl AttentionStats {
    pub fn pairs_per_head(&self) -> u64 {
        self.score_entries / self.n_heads.max(1) as u64
    }
}

/// Groupwise attention without the gate factor, heads concatenated.
pub fn grouped_attention<T: Real>(
    heads: &AttentionHeads<T>,
    layout: &GroupLayout,
) -> Result<(Matrix<T>, AttentionStats)> {
    if layout.n_tokens() != heads.n_tokens() {
        return Err(shape_err(format!(
            "routing covers {} tokens, heads cover {}",
            layout.n_tokens(),
            heads.n_tokens()
        )));
    }
    let mut outs = Vec::with_capacity(heads.n_heads());
    let mut score_entries = 0;
    for h in 0..heads.n_heads() {
        let q = layout.permute_rows(heads.q(h))?;
        let k = layout.permute_rows(heads.k(h))?;
        let v = layout.permute_rows(heads.v(h))?;
        let (packed, pairs) = varlen_attention(&q, &k, &v, layout.cu_seqlens(), layout.max_seqlen())?;
        score_entries += pairs;
        outs.push(layout.repermute_rows(&packed)?);
    }
    Ok((Matrix::hcat(&outs)?, AttentionStats { score_entries, n_heads: heads.n_heads() }))
}

pub(crate) fn scale_rows<T: Real>(m: &mut Matrix<T>, gates: &[T]) {
    for (r, &g) in gates.iter().enumerate() {
        for v in m.row_mut(r) {
            *v = *v * g;
        }
    }
}

/// MoGA forward: groupwise attention scaled by each token's gate.
pub fn moga_attention_with_stats<T: Real>(
    heads: &AttentionHeads<T>,
    routing: &RoutingResult<T>,
) -> Result<(Matrix<T>, AttentionStats)> {
    let layout = GroupLayout::build(routing.assignment(), routing.n_groups())?;
    let (mut out, stats) = grouped_attention(heads, &layout)?;
    scale_rows(&mut out, routing.gate());
    Ok((out, stats))
}

pub fn moga_attention<T: Real>(heads: &AttentionHeads<T>, routing: &RoutingResult<T>) -> Result<Matrix<T>> {
    Ok(moga_attention_with_stats(heads, routing)?.0)
}

/// Gradient of `sum(readout ∘ MoGA(x))` with respect to the router, through
/// the gate only (assignments pinned).
pub fn moga_readout_grad<T: Real>(
    heads: &AttentionHeads<T>,
    router: &Router<T>,
    x: &Matrix<T>,
    readout: &Matrix<T>,
) -> Result<(RouterGrad<T>, RoutingResult<T>)> {
    let routing = router.route(x)?;
    let layout = GroupLayout::build(routing.assignment(), routing.n_groups())?;
    let (ungated, _) = grouped_attention(heads, &layout)?;
    if readout.shape() != ungated.shape() {
        return Err(shape_err("readout shape must match the attention output"));
    }
    let dgate: Vec<T> = (0..ungated.rows())
        .map(|t| {
            readout
                .row(t)
                .iter()
                .zip(ungated.row(t))
                .fold(T::zero(), |acc, (r, o)| acc + *r * *o)
        })
        .collect();
    let grad = gate_backward(router, x, &routing, &dgate)?;
    Ok((grad, routing))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradCheck {
    Checked(GradCheckReport),
    /// Some token is within `tie_eps` of an argmax tie; finite differences
    /// would cross the assignment discontinuity.
    SkippedTie { margin: f64 },
}

/// Tie margin below which gradient checks are skipped.
pub const TIE_EPS: f64 = 1e-6;
/// Relative tolerance for analytic-vs-finite-difference agreement.
pub const GRAD_TOL: f64 = 1e-4;

/// Checks [`moga_readout_grad`] against central differences of the full
/// MoGA forward, in 64-bit, with assignments pinned to the unperturbed routing.
pub fn moga_output_grad_check(
    heads: &AttentionHeads<f64>,
    router: &Router<f64>,
    x: &Matrix<f64>,
    readout: &Matrix<f64>,
) -> Result<GradCheck> {
    let (grad, routing) = moga_readout_grad(heads, router, x, readout)?;
    let margin = routing.min_margin();
    if margin < TIE_EPS {
        return Ok(GradCheck::SkippedTie { margin });
    }
    let objective = |p: &[f64]| -> f64 {
        let perturbed = router.with_params(p).and_then(|r| r.route(x)).expect("router forward");
        let pinned = RoutingResult::from_parts(routing.assignment().to_vec(), perturbed.dist().clone())
            .expect("pinned routing");
        let out = moga_attention(heads, &pinned).expect("moga forward");
        out.data().iter().zip(readout.data()).map(|(o, r)| o * r).sum()
    };
    let numeric = finite_diff_grad(objective, &router.params(), 1e-5)?;
    let analytic = grad.flatten();
    Ok(GradCheck::Checked(GradCheckReport {
        rel_err: rel_err(&analytic, &numeric),
        analytic,
        numeric,
        tolerance: GRAD_TOL,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::synth;

    #[test]
    fn layout_hand_cases() {
        let l = GroupLayout::build(&[0, 0, 0], 1).unwrap();
        assert_eq!(l.permutation(), &[0, 1, 2]);
        assert_eq!(l.cu_seqlens(), &[0, 3]);

        let l = GroupLayout::build(&[1, 0, 1], 2).unwrap();
        assert_eq!(l.permutation(), &[1, 0, 2]);
        assert_eq!(l.cu_seqlens(), &[0, 1, 3]);
        assert_eq!(l.max_seqlen(), 2);

        let l = GroupLayout::build(&[2, 2], 4).unwrap();
        assert_eq!(l.cu_seqlens(), &[0, 0, 0, 2, 2]);
        assert!(GroupLayout::build(&[0, 3], 3).is_err());
    }

    #[test]
    fn layout_random_exhaustive() {
        let assignment = synth::random_assignment(1000, 7, 3);
        let l = GroupLayout::build(&assignment, 7).unwrap();
        for (t, &j) in l.inverse().iter().enumerate() {
            assert_eq!(l.permutation()[j], t);
        }
        for g in 0..7 {
            let expect: Vec<usize> = (0..1000).filter(|&t| assignment[t] == g).collect();
            assert_eq!(l.members(g), &expect[..]);
        }
    }

    #[test]
    fn full_attention_trivial_cases() {
        let q = Matrix::<f64>::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![2.0, 5.0]]).unwrap();
        assert_eq!(full_attention(&q, &q, &v).unwrap(), v);

        let k = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![2.0, 0.0], vec![4.0, 2.0]]).unwrap();
        let out = full_attention(&q, &k, &v).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-12 && (out.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_attention_matches_naive() {
        let heads = synth::random_heads::<f64>(32, 1, 8, 5);
        let expect = oracle::naive_attention(heads.q(0), heads.k(0), heads.v(0));
        let got = full_attention(&heads.q(0).cast::<f32>(), &heads.k(0).cast(), &heads.v(0).cast()).unwrap();
        assert!(got.cast::<f64>().max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn single_group_is_full_attention() {
        let heads = synth::random_heads::<f32>(40, 2, 4, 1);
        let routing = RoutingResult::one_hot(vec![0; 40], 1).unwrap();
        let out = moga_attention(&heads, &routing).unwrap();
        for h in 0..2 {
            let full = full_attention(heads.q(h), heads.k(h), heads.v(h)).unwrap();
            assert_eq!(out.slice_cols(h * 4, h * 4 + 4).unwrap(), full);
        }
    }

    #[test]
    fn presorted_blocks() {
        let heads = synth::random_heads::<f64>(10, 1, 3, 2);
        let assignment = vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let x = synth::random_matrix::<f64>(10, 3, 3);
        let routing = Router::<f64>::uniform_init(3, 2, 4).unwrap().route(&x).unwrap();
        let routing = RoutingResult::from_parts(assignment, routing.dist().clone()).unwrap();
        let out = moga_attention(&heads, &routing).unwrap();
        for (range, _) in [(0..4, 0), (4..10, 1)] {
            let q = heads.q(0).slice_rows(range.start, range.end).unwrap();
            let k = heads.k(0).slice_rows(range.start, range.end).unwrap();
            let v = heads.v(0).slice_rows(range.start, range.end).unwrap();
            let block = full_attention(&q, &k, &v).unwrap();
            for (i, t) in range.enumerate() {
                for c in 0..3 {
                    let expect = block.get(i, c) * routing.gate()[t];
                    assert!((out.get(t, c) - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn moga_matches_gather_oracle_and_counts_pairs() {
        let heads = synth::random_heads::<f32>(96, 2, 4, 9);
        let x = synth::random_matrix::<f32>(96, 8, 10);
        let routing = Router::uniform_init(8, 4, 11).unwrap().route(&x).unwrap();
        let (out, stats) = moga_attention_with_stats(&heads, &routing).unwrap();
        let expect = oracle::moga_gather(&heads.cast::<f64>(), routing.assignment(), &routing.gate().iter().map(|&g| g as f64).collect::<Vec<_>>());
        assert!(out.cast::<f64>().max_abs_diff(&expect) < 1e-5);
        let sizes = routing.group_sizes();
        assert_eq!(stats.pairs_per_head(), sizes.iter().map(|&s| (s * s) as u64).sum::<u64>());
    }

    #[test]
    fn relabeling_groups_keeps_output() {
        let heads = synth::random_heads::<f64>(30, 1, 4, 12);
        let assignment = synth::random_assignment(30, 4, 13);
        let relabel = [2, 0, 3, 1];
        let a = RoutingResult::<f64>::one_hot(assignment.clone(), 4).unwrap();
        let b = RoutingResult::<f64>::one_hot(assignment.iter().map(|&g| relabel[g]).collect(), 4).unwrap();
        assert_eq!(moga_attention(&heads, &a).unwrap(), moga_attention(&heads, &b).unwrap());
    }

    #[test]
    fn round_trip_is_identity() {
        let assignment = synth::random_assignment(200, 6, 14);
        let l = GroupLayout::build(&assignment, 6).unwrap();
        let m = synth::random_matrix::<f32>(200, 3, 15);
        assert_eq!(l.repermute_rows(&l.permute_rows(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn readout_grad_trivial_cases() {
        let heads = synth::random_heads::<f64>(12, 1, 4, 16);
        let x = synth::random_matrix::<f64>(12, 4, 17);
        let router = Router::<f64>::uniform_init(4, 3, 18).unwrap();
        let (g, _) = moga_readout_grad(&heads, &router, &x, &Matrix::zeros(12, 4)).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));

        let single = Router::<f64>::uniform_init(4, 1, 19).unwrap();
        let readout = synth::random_matrix::<f64>(12, 4, 20);
        let (g, _) = moga_readout_grad(&heads, &single, &x, &readout).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn readout_grad_matches_finite_differences() {
        let heads = synth::random_heads::<f64>(16, 2, 3, 21);
        let x = synth::random_matrix::<f64>(16, 6, 22);
        let router = Router::<f64>::uniform_init(6, 3, 23).unwrap();
        let readout = synth::random_matrix::<f64>(16, 6, 24);
        match moga_output_grad_check(&heads, &router, &x, &readout).unwrap() {
            GradCheck::Checked(r) => assert!(r.passed(), "rel err {}", r.rel_err),
            GradCheck::SkippedTie { margin } => panic!("unexpected tie {margin}"),
        }
    }

    #[test]
    fn grad_check_reports_ties() {
        let heads = synth::random_heads::<f64>(4, 1, 2, 25);
        let x = synth::random_matrix::<f64>(4, 2, 26);
        let router = Router::<f64>::zeros(2, 2).unwrap();
        let readout = synth::random_matrix::<f64>(4, 2, 27);
        assert!(matches!(
            moga_output_grad_check(&heads, &router, &x, &readout).unwrap(),
            GradCheck::SkippedTie { .. }
        ));
    }
}
