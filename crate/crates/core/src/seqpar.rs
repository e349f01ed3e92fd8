//! In-process simulation of sequence-parallel MoGA.
//!
//! Each virtual rank owns a contiguous token shard. Routing is computed
//! shard-locally, then routing results and K/V rows are all-gathered
//! (rank-ascending) so every rank can attend its own queries against the full
//! membership of their groups. Ranks run on scoped threads and communicate
//! only through channels.

use std::sync::mpsc;
use std::thread;

use crate::error::{shape_err, Result};
use crate::grouped::{attend_block, softmax_scale, AttentionHeads, GroupLayout};
use crate::routing::{Router, RoutingResult};
use crate::stga::near_equal_split;
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    bounds: Vec<usize>,
}

impl ShardPlan {
    /// `ranks` near-equal contiguous shards of `n` tokens.
    pub fn contiguous(n: usize, ranks: usize) -> Result<Self> {
        if ranks == 0 || ranks > n.max(1) {
            return Err(shape_err(format!("cannot split {n} tokens over {ranks} ranks")));
        }
        let mut bounds = vec![0];
        bounds.extend(near_equal_split(n, ranks).iter().map(|r| r.end));
        Ok(Self { bounds })
    }

    /// Explicit prefix-sum bounds: `[0, b1, ..., n]`, non-decreasing.
    pub fn from_bounds(bounds: Vec<usize>) -> Result<Self> {
        if bounds.len() < 2 || bounds[0] != 0 || bounds.windows(2).any(|w| w[0] > w[1]) {
            return Err(shape_err("shard bounds must start at 0 and be non-decreasing"));
        }
        Ok(Self { bounds })
    }

    pub fn ranks(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn n_tokens(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }

    pub fn shard(&self, rank: usize) -> std::ops::Range<usize> {
        self.bounds[rank]..self.bounds[rank + 1]
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.n_tokens() != n {
            return Err(shape_err(format!("plan covers {} tokens, input has {n}", self.n_tokens())));
        }
        Ok(())
    }
}

/// Routes every shard independently and concatenates in rank order.
pub fn sharded_route<T: Real>(router: &Router<T>, x: &Matrix<T>, plan: &ShardPlan) -> Result<RoutingResult<T>> {
    plan.check(x.rows())?;
    let parts = run_ranks(plan, |rank| router.route(&x.slice_rows(plan.shard(rank).start, plan.shard(rank).end)?))?;
    RoutingResult::concat(&parts)
}

/// What each rank contributes to the all-gather.
struct Contribution<T> {
    routing: RoutingResult<T>,
    k: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

/// Sequence-parallel MoGA forward; equals `moga_attention(heads, router.route(x))`.
pub fn sharded_moga<T: Real>(
    heads: &AttentionHeads<T>,
    router: &Router<T>,
    x: &Matrix<T>,
    plan: &ShardPlan,
) -> Result<Matrix<T>> {
    plan.check(x.rows())?;
    plan.check(heads.n_tokens())?;
    let local_heads: Vec<AttentionHeads<T>> = (0..plan.ranks())
        .map(|r| heads.slice_tokens(plan.shard(r).start, plan.shard(r).end))
        .collect::<Result<_>>()?;

    // phase 1: shard-local routing, then all-gather of routing and K/V
    let contributions = run_ranks(plan, |rank| {
        let shard = plan.shard(rank);
        let local = &local_heads[rank];
        Ok(Contribution {
            routing: router.route(&x.slice_rows(shard.start, shard.end)?)?,
            k: (0..local.n_heads()).map(|h| local.k(h).clone()).collect(),
            v: (0..local.n_heads()).map(|h| local.v(h).clone()).collect(),
        })
    })?;
    let routing = RoutingResult::concat(&contributions.iter().map(|c| c.routing.clone()).collect::<Vec<_>>())?;
    let gather = |pick: fn(&Contribution<T>) -> &Vec<Matrix<T>>, h: usize| -> Result<Matrix<T>> {
        Matrix::vcat(&contributions.iter().map(|c| pick(c)[h].clone()).collect::<Vec<_>>())
    };
    let k_all: Vec<Matrix<T>> = (0..heads.n_heads()).map(|h| gather(|c| &c.k, h)).collect::<Result<_>>()?;
    let v_all: Vec<Matrix<T>> = (0..heads.n_heads()).map(|h| gather(|c| &c.v, h)).collect::<Result<_>>()?;
    let layout = GroupLayout::build(routing.assignment(), routing.n_groups())?;

    // phase 2: every rank attends its own queries against gathered group K/V
    let outputs = run_ranks(plan, |rank| {
        let shard = plan.shard(rank);
        let local = &local_heads[rank];
        let d = local.d_head();
        let scale = softmax_scale::<T>(d);
        let mut scores = Vec::new();
        let mut head_outs = Vec::with_capacity(local.n_heads());
        for h in 0..local.n_heads() {
            let mut out = Matrix::zeros(shard.len(), d);
            for g in 0..layout.n_groups() {
                let members = layout.members(g);
                let mine: Vec<usize> = members.iter().copied().filter(|t| shard.contains(t)).collect();
                if mine.is_empty() {
                    continue;
                }
                let local_idx: Vec<usize> = mine.iter().map(|t| t - shard.start).collect();
                let q = local.q(h).gather_rows(&local_idx)?;
                let k = k_all[h].gather_rows(members)?;
                let v = v_all[h].gather_rows(members)?;
                let mut block = Matrix::zeros(q.rows(), d);
                attend_block(q.data(), k.data(), v.data(), d, scale, &mut scores, block.data_mut());
                for (i, &li) in local_idx.iter().enumerate() {
                    let gate = routing.gate()[shard.start + li];
                    for (o, b) in out.row_mut(li).iter_mut().zip(block.row(i)) {
                        *o = *b * gate;
                    }
                }
            }
            head_outs.push(out);
        }
        Matrix::hcat(&head_outs)
    })?;
    Matrix::vcat(&outputs)?.ensure_finite("sharded_moga")
}

/// Runs `work(rank)` on one scoped thread per rank and collects results in
/// rank order.
fn run_ranks<R, F>(plan: &ShardPlan, work: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync,
{
    let (tx, rx) = mpsc::channel();
    thread::scope(|s| {
        for rank in 0..plan.ranks() {
            let tx = tx.clone();
            let work = &work;
            s.spawn(move || {
                // receiver outlives the scope
                let _ = tx.send((rank, work(rank)));
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<Result<R>>> = (0..plan.ranks()).map(|_| None).collect();
    for (rank, res) in rx {
        slots[rank] = Some(res);
    }
    slots
        .into_iter()
        .map(|s| s.expect("every rank reports"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouped::moga_attention;
    use crate::synth;

    #[test]
    fn plans() {
        let p = ShardPlan::contiguous(10, 3).unwrap();
        assert_eq!(p.bounds(), &[0, 4, 7, 10]);
        assert!(ShardPlan::contiguous(3, 4).is_err());
        assert!(ShardPlan::contiguous(3, 0).is_err());
        assert!(ShardPlan::from_bounds(vec![0, 5, 3]).is_err());
    }

    #[test]
    fn sharded_route_is_bit_identical() {
        let x = synth::random_matrix::<f32>(64, 8, 70);
        let router = Router::uniform_init(8, 5, 71).unwrap();
        let single = router.route(&x).unwrap();
        for r in [1, 2, 3, 4, 64] {
            let plan = ShardPlan::contiguous(64, r).unwrap();
            assert_eq!(sharded_route(&router, &x, &plan).unwrap(), single);
        }
    }

    #[test]
    fn sharded_moga_matches_single_rank() {
        let heads = synth::random_heads::<f32>(50, 2, 4, 72);
        let x = synth::random_matrix::<f32>(50, 6, 73);
        let router = Router::uniform_init(6, 4, 74).unwrap();
        let single = moga_attention(&heads, &router.route(&x).unwrap()).unwrap();
        for r in [1, 2, 3, 50] {
            let plan = ShardPlan::contiguous(50, r).unwrap();
            let got = sharded_moga(&heads, &router, &x, &plan).unwrap();
            assert!(got.max_abs_diff(&single) <= 1e-6, "R={r}");
        }
        let plan = ShardPlan::contiguous(50, 1).unwrap();
        assert_eq!(sharded_moga(&heads, &router, &x, &plan).unwrap(), single);
    }

    #[test]
    fn plan_must_cover_input() {
        let x = synth::random_matrix::<f32>(8, 2, 75);
        let router = Router::<f32>::zeros(2, 2).unwrap();
        let plan = ShardPlan::contiguous(7, 2).unwrap();
        assert!(sharded_route(&router, &x, &plan).is_err());
    }
}
