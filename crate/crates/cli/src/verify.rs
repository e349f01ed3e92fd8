//! Self-checks run by `moga verify`, one suite per library module.

use moga_core::cost::{count_pairs_exact, static_pairs_analytic, uniform_group_pairs, DEFAULT_EXACT_BOUND};
use moga_core::grouped::{moga_output_grad_check, GradCheck};
use moga_core::latent::tokens_for_duration;
use moga_core::routing::{balance_loss_grad, pinned_balance_loss};
use moga_core::stga::{build_static_groups, check_coverage, combined_attention};
use moga_core::tensor::{finite_diff_grad, matmul, rel_err, softmax_rows};
use moga_core::{
    balance_stats, full_attention, moga_attention, oracle, sharded_moga, sharded_route, synth, GroupLayout,
    LatentGrid, Matrix, Real, Router, RoutingResult, ShardPlan, ShotMap, StaticGroupSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, VerifyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Module {
    TensorCore,
    LatentGeometry,
    Routing,
    GroupedAttn,
    Stga,
    CostMetrics,
    SeqparSim,
}

impl Module {
    pub const ALL: [Module; 7] = [
        Module::TensorCore,
        Module::LatentGeometry,
        Module::Routing,
        Module::GroupedAttn,
        Module::Stga,
        Module::CostMetrics,
        Module::SeqparSim,
    ];

    /// Position in [`Module::ALL`]; the exhaustive match makes a new variant
    /// a compile error until it is registered here.
    pub fn index(self) -> usize {
        match self {
            Module::TensorCore => 0,
            Module::LatentGeometry => 1,
            Module::Routing => 2,
            Module::GroupedAttn => 3,
            Module::Stga => 4,
            Module::CostMetrics => 5,
            Module::SeqparSim => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Module::TensorCore => "tensor-core",
            Module::LatentGeometry => "latent-geometry",
            Module::Routing => "routing",
            Module::GroupedAttn => "grouped-attn",
            Module::Stga => "stga",
            Module::CostMetrics => "cost-metrics",
            Module::SeqparSim => "seqpar-sim",
        }
    }

    fn suite<T: Real>(self) -> fn(&mut Ctx) -> Vec<Check> {
        match self {
            Module::TensorCore => tensor_core::<T>,
            Module::LatentGeometry => latent_geometry,
            Module::Routing => routing::<T>,
            Module::GroupedAttn => grouped_attn::<T>,
            Module::Stga => stga::<T>,
            Module::CostMetrics => cost_metrics,
            Module::SeqparSim => seqpar_sim::<T>,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub module: Module,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub precision: String,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

struct Ctx {
    module: Module,
    rng: ChaCha8Rng,
    sizes: VerifyConfig,
    cfg: RunConfig,
    f32_mode: bool,
}

impl Ctx {
    fn check(&self, name: &str, passed: bool, detail: impl Into<String>) -> Check {
        Check { module: self.module, name: name.to_string(), passed, detail: detail.into() }
    }

    fn seed(&mut self) -> u64 {
        self.rng.random()
    }

    /// Relative tolerance for kernel-vs-oracle comparisons.
    fn tol(&self) -> f64 {
        if self.f32_mode {
            1e-5
        } else {
            1e-10
        }
    }

    fn tokens(&mut self) -> usize {
        let max = self.sizes.max_tokens;
        self.rng.random_range(2..=max)
    }

    fn groups(&mut self) -> usize {
        let max = self.sizes.max_groups;
        self.rng.random_range(1..=max)
    }

    fn heads<T: Real>(&mut self, n: usize) -> moga_core::AttentionHeads<T> {
        let h = self.rng.random_range(1..=self.sizes.max_heads);
        let d = self.rng.random_range(1..=8);
        let seed = self.seed();
        synth::random_heads(n, h, d, seed)
    }

    /// Small random grid with 1..=3 shots.
    fn grid(&mut self) -> LatentGrid {
        let t = self.rng.random_range(1..=6);
        let h = self.rng.random_range(1..=5);
        let w = self.rng.random_range(1..=5);
        let n_shots = self.rng.random_range(1..=t.min(3));
        let mut cuts: Vec<usize> = (1..t).collect();
        let mut bounds = vec![0];
        for _ in 1..n_shots {
            let i = self.rng.random_range(0..cuts.len());
            bounds.push(cuts.remove(i));
        }
        bounds.sort_unstable();
        LatentGrid::new(t, h, w, 4, ShotMap::new(bounds, t).expect("valid shots")).expect("valid grid")
    }

    fn spec(&mut self, grid: &LatentGrid) -> StaticGroupSpec {
        StaticGroupSpec {
            spatial_grid: (self.rng.random_range(1..=grid.h), self.rng.random_range(1..=grid.w)),
            per_frame: self.rng.random_bool(0.5),
            boundary_augment: self.rng.random_range(0..=2),
        }
    }
}

fn rel<T: Real>(a: &Matrix<T>, reference: &Matrix<f64>) -> f64 {
    rel_err(&a.cast::<f64>().into_data(), reference.data())
}

fn tensor_core<T: Real>(ctx: &mut Ctx) -> Vec<Check> {
    let mut out = Vec::new();
    let n = ctx.sizes.instances;
    let mut sum_err = 0.0f64;
    let mut mm_err = 0.0f64;
    let mut deterministic = true;
    for _ in 0..n {
        let (r, k, c) = (ctx.rng.random_range(1..9), ctx.rng.random_range(1..9), ctx.rng.random_range(1..9));
        let (sa, sb) = (ctx.seed(), ctx.seed());
        let a: Matrix<T> = synth::random_matrix(r, k, sa);
        let b: Matrix<T> = synth::random_matrix(k, c, sb);
        let s = softmax_rows(&a);
        for i in 0..r {
            sum_err = sum_err.max((s.row(i).iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs());
        }
        let p = matmul(&a, &b).expect("shapes agree");
        deterministic &= p == matmul(&a, &b).expect("shapes agree");
        let (a64, b64) = (a.cast::<f64>(), b.cast::<f64>());
        let reference = Matrix::from_fn(r, c, |i, j| (0..k).map(|l| a64.get(i, l) * b64.get(l, j)).sum()).unwrap();
        mm_err = mm_err.max(rel(&p, &reference));
    }
    let tol = ctx.tol();
    out.push(ctx.check("softmax rows sum to one", sum_err <= tol, format!("max |sum-1| = {sum_err:.3e}")));
    out.push(ctx.check("matmul matches naive", mm_err <= tol, format!("max rel err = {mm_err:.3e}")));
    out.push(ctx.check("matmul is deterministic", deterministic, ""));
    let g = finite_diff_grad(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5).expect("finite");
    let e = rel_err(&g, &[4.0, 3.0]);
    out.push(ctx.check("finite differences on a quadratic", e <= 1e-8, format!("rel err = {e:.3e}")));
    out
}

fn latent_geometry(ctx: &mut Ctx) -> Vec<Check> {
    let mut out = Vec::new();
    let mut bijective = true;
    for _ in 0..ctx.sizes.instances {
        let grid = ctx.grid();
        let mut seen = vec![false; grid.n_tokens()];
        for f in 0..grid.t {
            for r in 0..grid.h {
                for c in 0..grid.w {
                    let idx = grid.token_index(f, r, c).expect("in range");
                    bijective &= !seen[idx] && grid.position(idx).expect("in range") == (f, r, c);
                    seen[idx] = true;
                }
            }
        }
        bijective &= seen.iter().all(|s| *s);
    }
    out.push(ctx.check("token index is a frame-major bijection", bijective, ""));
    let table = [(5.0, 31_200), (10.0, 62_400), (15.0, 93_600), (20.0, 124_800), (30.0, 187_200)];
    let got: Vec<usize> = table.iter().map(|(s, _)| tokens_for_duration(*s, 16.0, 480, 832).expect("valid")).collect();
    let ok = got.iter().zip(&table).all(|(g, (_, want))| g == want);
    out.push(ctx.check("480p 16 fps sequence lengths", ok, format!("{got:?}")));
    out
}

fn routing<T: Real>(ctx: &mut Ctx) -> Vec<Check> {
    let mut out = Vec::new();
    let alpha = ctx.cfg.training.alpha;
    let mut argmax_ok = true;
    let mut loss_ok = true;
    let mut worst_grad = 0.0f64;
    for _ in 0..ctx.sizes.instances {
        let n = ctx.tokens();
        let m = ctx.groups();
        let d = ctx.rng.random_range(1..=8);
        let (sx, sr) = (ctx.seed(), ctx.seed());
        let x: Matrix<T> = synth::random_matrix(n, d, sx);
        let router = Router::<T>::uniform_init(d, m, sr).expect("valid shape");
        let r = router.route(&x).expect("route");
        for t in 0..n {
            let row = r.dist().row(t);
            let best = row.iter().copied().fold(T::neg_infinity(), T::max);
            let g = r.assignment()[t];
            argmax_ok &= row[g] == best && row[..g].iter().all(|v| *v < best) && r.gate()[t] == best;
        }
        // random one-hot assignments: loss >= alpha, equality at balance
        let assignment = synth::random_assignment(n, m, ctx.seed());
        let s = balance_stats(&RoutingResult::<T>::one_hot(assignment, m).expect("valid"), alpha);
        loss_ok &= s.loss >= alpha * (1.0 - 1e-12);
        let balanced: Vec<usize> = (0..m * 3).map(|i| i % m).collect();
        let b = balance_stats(&RoutingResult::<T>::one_hot(balanced, m).expect("valid"), alpha);
        loss_ok &= (b.loss - alpha).abs() <= 1e-12;
        loss_ok &= s.mean_probs.iter().zip(&s.fractions).all(|(p, f)| *p <= f + 1e-12);

        let r64 = router.cast::<f64>();
        let x64 = x.cast::<f64>();
        let (grad, pinned) = balance_loss_grad(&r64, &x64, alpha).expect("grad");
        if pinned.min_margin() >= moga_core::grouped::TIE_EPS {
            let numeric = finite_diff_grad(
                |p| pinned_balance_loss(&r64.with_params(p).unwrap(), &x64, &pinned, alpha).unwrap(),
                &r64.params(),
                1e-5,
            )
            .expect("finite");
            worst_grad = worst_grad.max(rel_err(&grad.flatten(), &numeric));
        }
    }
    out.push(ctx.check("assignment is lowest-index argmax, gate is its probability", argmax_ok, ""));
    out.push(ctx.check("balancing loss is >= alpha with equality at balance", loss_ok, ""));
    out.push(ctx.check(
        "balancing-loss gradient matches finite differences",
        worst_grad <= moga_core::grouped::GRAD_TOL,
        format!("worst rel err = {worst_grad:.3e}"),
    ));
    out
}

fn grouped_attn<T: Real>(ctx: &mut Ctx) -> Vec<Check> {
    let mut out = Vec::new();
    let tol = ctx.tol();
    let (mut deg, mut orc) = (0.0f64, 0.0f64);
    let (mut round_trip, mut pairs_ok) = (true, true);
    let mut worst_grad = 0.0f64;
    for _ in 0..ctx.sizes.instances {
        let n = ctx.tokens();
        let m = ctx.groups();
        let heads = ctx.heads::<T>(n);
        let assignment = synth::random_assignment(n, m, ctx.seed());
        let layout = GroupLayout::build(&assignment, m).expect("valid");
        let ids: Vec<usize> = (0..n).collect();
        round_trip &= layout.repermute(&layout.permute(&ids)) == ids;
        let sizes = layout.cu_seqlens().windows(2).map(|w| ((w[1] - w[0]) as u64).pow(2)).sum::<u64>();
        let mut counts = vec![0u64; m];
        assignment.iter().for_each(|&g| counts[g] += 1);
        pairs_ok &= layout.pair_count() == sizes && sizes == counts.iter().map(|c| c * c).sum::<u64>();

        let single = RoutingResult::<T>::one_hot(vec![0; n], 1).expect("valid");
        let y = moga_attention(&heads, &single).expect("forward");
        let full: Vec<Matrix<T>> =
            (0..heads.n_heads()).map(|h| full_attention(heads.q(h), heads.k(h), heads.v(h)).unwrap()).collect();
        let full = Matrix::hcat(&full).expect("heads");
        deg = deg.max(rel(&y, &full.cast()));

        let d = ctx.rng.random_range(1..=6);
        let router = Router::<T>::uniform_init(d, m, ctx.seed()).expect("valid");
        let x: Matrix<T> = synth::random_matrix(n, d, ctx.seed());
        let routing = router.route(&x).expect("route");
        let y = moga_attention(&heads, &routing).expect("forward");
        let gate: Vec<f64> = routing.gate().iter().map(|g| g.as_f64()).collect();
        let reference = oracle::moga_gather(&heads.cast(), routing.assignment(), &gate);
        orc = orc.max(rel(&y, &reference));

        let readout: Matrix<f64> = synth::random_matrix(n, heads.d_model(), ctx.seed());
        if let GradCheck::Checked(report) =
            moga_output_grad_check(&heads.cast(), &router.cast(), &x.cast(), &readout).expect("grad check")
        {
            worst_grad = worst_grad.max(report.rel_err);
        }
    }
    out.push(ctx.check("single group equals full attention", deg <= 1e-6, format!("max rel err = {deg:.3e}")));
    out.push(ctx.check("MoGA matches gather oracle", orc <= tol, format!("max rel err = {orc:.3e}")));
    out.push(ctx.check("permute/repermute round trip", round_trip, ""));
    out.push(ctx.check("pair count is sum of squared group sizes", pairs_ok, ""));
    out.push(ctx.check(
        "gate-path gradient matches finite differences",
        worst_grad <= moga_core::grouped::GRAD_TOL,
        format!("worst rel err = {worst_grad:.3e}"),
    ));
    out
}

fn stga<T: Real>(ctx: &mut Ctx) -> Vec<Check> {
    let mut out = Vec::new();
    let tol = ctx.tol();
    let mut coverage = true;
    let mut worst = 0.0f64;
    for _ in 0..ctx.sizes.instances {
        let grid = ctx.grid();
        let spec = ctx.spec(&grid);
        let groups = build_static_groups(&grid, &spec).expect("valid spec");
        let n = grid.n_tokens();
        coverage &= groups.streams().iter().all(|s| check_coverage(s, n).is_ok());
        let heads = ctx.heads::<T>(n);
        let m = ctx.groups();
        let router = Router::<T>::uniform_init(grid.d_model, m, ctx.seed()).expect("valid");
        let x: Matrix<T> = synth::random_matrix(n, grid.d_model, ctx.seed());
        let routing = router.route(&x).expect("route");
        let y = combined_attention(&heads, &routing, &groups).expect("forward");
        let gate: Vec<f64> = routing.gate().iter().map(|g| g.as_f64()).collect();
        let reference = oracle::combined_gather(&heads.cast(), routing.assignment(), &gate, &groups.streams());
        worst = worst.max(rel(&y, &reference));
    }
    out.push(ctx.check("every static stream covers each token exactly once", coverage, ""));
    out.push(ctx.check("combined streams match gather oracle", worst <= tol, format!("max rel err = {worst:.3e}")));
    out
}

fn cost_metrics(ctx: &mut Ctx) -> Vec<Check> {
    let mut out = Vec::new();
    let mut sparsity_ok = true;
    let mut exact_ok = true;
    let mut analytic_ok = true;
    for _ in 0..ctx.sizes.instances {
        let m = ctx.groups();
        let n = m * ctx.rng.random_range(1..=8);
        let assignment: Vec<usize> = (0..n).map(|i| i % m).collect();
        let routing = RoutingResult::<f64>::one_hot(assignment.clone(), m).expect("valid");
        let r = count_pairs_exact(Some(&routing), &Default::default(), n, DEFAULT_EXACT_BOUND).expect("small");
        sparsity_ok &= (r.sparsity_moga - (1.0 - 1.0 / m as f64)).abs() <= 1e-12
            && r.pairs_moga == uniform_group_pairs(n, m);

        let grid = ctx.grid();
        let spec = ctx.spec(&grid);
        let groups = build_static_groups(&grid, &spec).expect("valid");
        let n = grid.n_tokens();
        let m = ctx.groups();
        let assignment = synth::random_assignment(n, m, ctx.seed());
        let routing = RoutingResult::<f64>::one_hot(assignment.clone(), m).expect("valid");
        let r = count_pairs_exact(Some(&routing), &groups, n, DEFAULT_EXACT_BOUND).expect("small");
        let all: Vec<_> = groups.all().cloned().collect();
        exact_ok &= r.pairs_union == oracle::union_pairs_double_loop(&assignment, &all, n);
        let (ws, pf) = static_pairs_analytic(&grid, &spec).expect("valid");
        analytic_ok &= ws == r.pairs_window_shot && pf == r.pairs_per_frame;
    }
    out.push(ctx.check("uniform groups give sparsity 1 - 1/M", sparsity_ok, ""));
    out.push(ctx.check("mask count matches double loop", exact_ok, ""));
    out.push(ctx.check("analytic static pair counts match mask", analytic_ok, ""));
    let model = ctx.cfg.flops_model();
    let cfg = ctx.cfg.flops_curve_config();
    let rows = moga_core::flops_curve(&cfg, &[30.0], &[]).expect("curve");
    let full = rows.iter().find(|r| r.variant == "full").map(|r| r.pflops).unwrap_or(f64::NAN);
    let target = ctx.cfg.cost.calibration.pflops;
    let ok = ((full - target) / target).abs() <= 0.15;
    out.push(ctx.check("calibrated full-attention FLOPs", ok, format!("kappa = {:.4}, {full:.3} PF", model.kappa)));
    out
}

fn seqpar_sim<T: Real>(ctx: &mut Ctx) -> Vec<Check> {
    let mut out = Vec::new();
    let tol = ctx.tol();
    let mut route_ok = true;
    let mut worst = 0.0f64;
    for _ in 0..ctx.sizes.instances {
        let n = ctx.tokens();
        let m = ctx.groups();
        let d = ctx.rng.random_range(1..=6);
        let heads = ctx.heads::<T>(n);
        let router = Router::<T>::uniform_init(d, m, ctx.seed()).expect("valid");
        let x: Matrix<T> = synth::random_matrix(n, d, ctx.seed());
        let single = router.route(&x).expect("route");
        let reference = moga_attention(&heads, &single).expect("forward").cast::<f64>();
        for ranks in [1, 2, 3, n] {
            let ranks = ranks.min(n);
            let plan = ShardPlan::contiguous(n, ranks).expect("valid plan");
            route_ok &= sharded_route(&router, &x, &plan).expect("route") == single;
            let y = sharded_moga(&heads, &router, &x, &plan).expect("forward");
            worst = worst.max(rel(&y, &reference));
        }
    }
    out.push(ctx.check("sharded routing equals single-rank routing", route_ok, ""));
    out.push(ctx.check("sharded MoGA equals single-rank MoGA", worst <= tol, format!("max rel err = {worst:.3e}")));
    out
}

/// Runs every registered suite.
pub fn run_verify<T: Real>(cfg: &RunConfig, seed: u64) -> VerifyReport {
    let f32_mode = std::mem::size_of::<T>() == 4;
    let mut checks = Vec::new();
    for module in Module::ALL {
        let mut ctx = Ctx {
            module,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(module.index() as u64)),
            sizes: cfg.verify.clone(),
            cfg: cfg.clone(),
            f32_mode,
        };
        checks.extend(module.suite::<T>()(&mut ctx));
    }
    let passed = checks.iter().all(|c| c.passed);
    VerifyReport { precision: if f32_mode { "f32" } else { "f64" }.into(), seed, checks, passed }
}
