//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion; the process
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use moga_cli::{cmd_balance, cmd_flops, cmd_groups, RunConfig};
use moga_core::cost::{count_pairs_exact, uniform_group_pairs, FlopsCurveConfig, DEFAULT_EXACT_BOUND};
use moga_core::grouped::{moga_output_grad_check, GradCheck, GRAD_TOL, TIE_EPS};
use moga_core::routing::{balance_loss_grad, pinned_balance_loss, train_balance};
use moga_core::stga::{build_static_groups, combined_attention};
use moga_core::tensor::{finite_diff_grad, rel_err};
use moga_core::{
    balance_stats, flops_curve, full_attention, moga_attention, oracle, sharded_moga, sharded_route,
    static_group_attention, synth, tokens_for_duration, FlopsModel, GroupLayout, LatentGrid, Matrix, ModelShape,
    Real, Router, RoutingResult, ShardPlan, ShotMap, StaticGroupSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn rel<T: Real>(a: &Matrix<T>, reference: &Matrix<f64>) -> f64 {
    rel_err(&a.cast::<f64>().into_data(), reference.data())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

/// Random grid with 1..=3 shots and side lengths up to `max_side`, at most
/// `max_tokens` tokens.
fn random_grid(rng: &mut ChaCha8Rng, max_side: usize, max_tokens: usize) -> LatentGrid {
    loop {
        let t = rng.random_range(1..=max_side);
        let h = rng.random_range(1..=max_side);
        let w = rng.random_range(1..=max_side);
        if t * h * w > max_tokens {
            continue;
        }
        let n_shots = rng.random_range(1..=t.min(3));
        let mut cuts: Vec<usize> = (1..t).collect();
        let mut bounds = vec![0];
        for _ in 1..n_shots {
            bounds.push(cuts.remove(rng.random_range(0..cuts.len())));
        }
        bounds.sort_unstable();
        return LatentGrid::new(t, h, w, 8, ShotMap::new(bounds, t).unwrap()).unwrap();
    }
}

fn random_spec(rng: &mut ChaCha8Rng, grid: &LatentGrid) -> StaticGroupSpec {
    StaticGroupSpec {
        spatial_grid: (rng.random_range(1..=grid.h), rng.random_range(1..=grid.w)),
        per_frame: true,
        boundary_augment: rng.random_range(0..=2),
    }
}

fn degeneracy() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(1..=256);
        let heads = synth::random_heads::<f32>(n, r.random_range(1..=4), r.random_range(1..=16), r.random());
        let single = RoutingResult::<f32>::one_hot(vec![0; n], 1).unwrap();
        let y = moga_attention(&heads, &single).unwrap();
        let full: Vec<Matrix<f32>> =
            (0..heads.n_heads()).map(|h| full_attention(heads.q(h), heads.k(h), heads.v(h)).unwrap()).collect();
        worst = worst.max(rel(&y, &Matrix::hcat(&full).unwrap().cast()));
    }
    let t = start.elapsed();
    outcome(worst <= 1e-6 && within(t, 10), format!("max rel err {worst:.2e}, {:.2?}", t))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut moga, mut stat, mut comb) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..200 {
        let n = r.random_range(1..=256);
        let m = r.random_range(1..=8);
        let d = r.random_range(1..=8);
        let heads = synth::random_heads::<f32>(n, r.random_range(1..=4), r.random_range(1..=16), r.random());
        let router = Router::<f32>::uniform_init(d, m, r.random()).unwrap();
        let x: Matrix<f32> = synth::random_matrix(n, d, r.random());
        let routing = router.route(&x).unwrap();
        let gate: Vec<f64> = routing.gate().iter().map(|g| g.as_f64()).collect();
        let y = moga_attention(&heads, &routing).unwrap();
        moga = moga.max(rel(&y, &oracle::moga_gather(&heads.cast(), routing.assignment(), &gate)));

        // static and combined operators on a grid of their own, every fourth instance
        if i % 4 == 0 {
            let grid = random_grid(&mut r, 8, 256);
            let spec = random_spec(&mut r, &grid);
            let groups = build_static_groups(&grid, &spec).unwrap();
            let n = grid.n_tokens();
            let heads = synth::random_heads::<f32>(n, r.random_range(1..=4), r.random_range(1..=16), r.random());
            let heads64 = heads.cast::<f64>();
            for s in groups.streams() {
                let y = static_group_attention(&heads, s).unwrap();
                stat = stat.max(rel(&y, &oracle::static_gather(&heads64, s)));
            }
            let router = Router::<f32>::uniform_init(grid.d_model, m, r.random()).unwrap();
            let x: Matrix<f32> = synth::random_matrix(n, grid.d_model, r.random());
            let routing = router.route(&x).unwrap();
            let gate: Vec<f64> = routing.gate().iter().map(|g| g.as_f64()).collect();
            let y = combined_attention(&heads, &routing, &groups).unwrap();
            comb = comb.max(rel(&y, &oracle::combined_gather(&heads64, routing.assignment(), &gate, &groups.streams())));
        }
    }
    let t = start.elapsed();
    let ok = moga <= 1e-5 && stat <= 1e-5 && comb <= 1e-5 && within(t, 60);
    outcome(ok, format!("moga {moga:.2e}, static {stat:.2e}, combined {comb:.2e}, {t:.2?}"))
}

fn round_trip() -> Outcome {
    let mut r = rng(3);
    let mut ok = true;
    for _ in 0..1000 {
        let n = r.random_range(0..=512);
        let m = r.random_range(1..=32);
        let assignment = synth::random_assignment(n, m, r.random());
        let layout = GroupLayout::build(&assignment, m).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        ok &= layout.repermute(&layout.permute(&ids)) == ids;
        let x: Matrix<f32> = synth::random_matrix(n.max(1), 3, r.random());
        if n > 0 {
            ok &= layout.repermute_rows(&layout.permute_rows(&x).unwrap()).unwrap() == x;
        }
    }
    outcome(ok, "1000 assignments, bit-exact")
}

fn balance_properties() -> Outcome {
    let mut r = rng(4);
    let alpha = moga_core::routing::DEFAULT_ALPHA;
    let (mut uniform_exact, mut bound, mut equality_iff_uniform, mut p_le_f) = (true, true, true, true);
    for _ in 0..1000 {
        let m = r.random_range(1..=16);
        let n = m * r.random_range(1..=32);
        let uniform: Vec<usize> = (0..n).map(|i| i % m).collect();
        uniform_exact &= balance_stats(&RoutingResult::<f64>::one_hot(uniform, m).unwrap(), alpha).loss == alpha;

        let assignment = synth::random_assignment(n, m, r.random());
        let s = balance_stats(&RoutingResult::<f64>::one_hot(assignment, m).unwrap(), alpha);
        bound &= s.loss >= alpha;
        let is_uniform = s.counts.iter().all(|&c| c * m == n);
        equality_iff_uniform &= (s.loss == alpha) == is_uniform;
        p_le_f &= s.mean_probs.iter().zip(&s.fractions).all(|(p, f)| p <= f);

        // soft routing: P_i <= F_i holds for any gates in [0, 1]
        let d = r.random_range(1..=8);
        let router = Router::<f64>::uniform_init(d, m, r.random()).unwrap();
        let routed = router.route(&synth::random_matrix(n, d, r.random())).unwrap();
        let s = balance_stats(&routed, alpha);
        p_le_f &= s.mean_probs.iter().zip(&s.fractions).all(|(p, f)| p <= f);
    }
    let ok = uniform_exact && bound && equality_iff_uniform && p_le_f;
    outcome(
        ok,
        format!("uniform=α {uniform_exact}, loss≥α {bound}, equality only at uniform {equality_iff_uniform}, P≤F {p_le_f}"),
    )
}

fn gradients() -> Outcome {
    let mut r = rng(5);
    let alpha = moga_core::routing::DEFAULT_ALPHA;
    let (mut checked, mut skipped) = (0, 0);
    let (mut worst_balance, mut worst_gate) = (0.0f64, 0.0f64);
    while checked < 100 {
        let n = r.random_range(2..=48);
        let m = r.random_range(2..=6);
        let d = r.random_range(1..=6);
        let router = Router::<f64>::uniform_init(d, m, r.random()).unwrap();
        let x: Matrix<f64> = synth::random_matrix(n, d, r.random());
        let (grad, pinned) = balance_loss_grad(&router, &x, alpha).unwrap();
        if pinned.min_margin() < TIE_EPS {
            skipped += 1;
            continue;
        }
        let numeric = finite_diff_grad(
            |p| pinned_balance_loss(&router.with_params(p).unwrap(), &x, &pinned, alpha).unwrap(),
            &router.params(),
            1e-5,
        )
        .unwrap();
        worst_balance = worst_balance.max(rel_err(&grad.flatten(), &numeric));

        let heads = synth::random_heads::<f64>(n, r.random_range(1..=3), r.random_range(1..=6), r.random());
        let readout: Matrix<f64> = synth::random_matrix(n, heads.d_model(), r.random());
        match moga_output_grad_check(&heads, &router, &x, &readout).unwrap() {
            GradCheck::Checked(report) => worst_gate = worst_gate.max(report.rel_err),
            GradCheck::SkippedTie { .. } => unreachable!("margin already checked"),
        }
        checked += 1;
    }
    let ok = worst_balance <= GRAD_TOL && worst_gate <= GRAD_TOL;
    outcome(ok, format!("balance {worst_balance:.2e}, gate path {worst_gate:.2e} over {checked} instances ({skipped} tied skipped)"))
}

fn sequence_lengths() -> Outcome {
    let table = [(5.0, 31_200), (10.0, 62_400), (15.0, 93_600), (20.0, 124_800), (30.0, 187_200)];
    let got: Vec<usize> = table.iter().map(|(s, _)| tokens_for_duration(*s, 16.0, 480, 832).unwrap()).collect();
    let ok = got.iter().zip(&table).all(|(g, (_, want))| g == want);
    outcome(ok, format!("{got:?}"))
}

fn flops_anchors() -> Outcome {
    let shape = ModelShape::WAN_1_3B;
    let model = FlopsModel::calibrate(shape, tokens_for_duration(30.0, 16.0, 480, 832).unwrap(), 6.94e15);
    let cfg = FlopsCurveConfig { kappa: model.kappa, ..FlopsCurveConfig::default() };
    let anchors = [(5.0, 0.28), (10.0, 0.88), (15.0, 1.85), (20.0, 3.19)];
    let durations: Vec<f64> = anchors.iter().map(|a| a.0).collect();
    let rows = flops_curve(&cfg, &durations, &[5, 10, 20]).unwrap();
    let mut worst = 0.0f64;
    for (secs, want) in anchors {
        let got = rows.iter().find(|r| r.duration_s == secs && r.variant == "full").unwrap().pflops;
        worst = worst.max((got - want).abs() / want);
    }
    // MoGA-only attention FLOPs versus full attention FLOPs divided by M
    let mut exact_pairs = true;
    let mut flops_gap = 0.0f64;
    for secs in durations {
        let n = tokens_for_duration(secs, 16.0, 480, 832).unwrap() as u64;
        let full = rows.iter().find(|r| r.duration_s == secs && r.variant == "full_attn").unwrap();
        for m in [5u64, 10, 20] {
            let moga = rows.iter().find(|r| r.duration_s == secs && r.m as u64 == m && r.variant == "moga_attn").unwrap();
            exact_pairs &= moga.pairs * m == n * n && uniform_group_pairs(n as usize, m as usize) == moga.pairs;
            flops_gap = flops_gap.max((moga.pflops - full.pflops / m as f64).abs() / moga.pflops);
        }
    }
    let ok = worst <= 0.15 && exact_pairs && flops_gap <= 4.0 * f64::EPSILON;
    outcome(
        ok,
        format!(
            "kappa {:.4}, worst row error {:.1}%, pairs·M = N² {exact_pairs}, flops vs full/M rel gap {flops_gap:.1e}",
            model.kappa,
            worst * 100.0
        ),
    )
}

fn sparsity() -> Outcome {
    let mut r = rng(8);
    let mut worst_sparsity = 0.0f64;
    for m in 1..=32usize {
        let n = m * r.random_range(1..=30);
        let routing = RoutingResult::<f64>::one_hot((0..n).map(|i| i % m).collect(), m).unwrap();
        let report = count_pairs_exact(Some(&routing), &Default::default(), n, DEFAULT_EXACT_BOUND).unwrap();
        worst_sparsity = worst_sparsity.max((report.sparsity_moga - (1.0 - 1.0 / m as f64)).abs());
    }
    let mut mismatches = 0;
    let mut largest = 0;
    for _ in 0..20 {
        let grid = random_grid(&mut r, 14, 1000);
        let spec = random_spec(&mut r, &grid);
        let groups = build_static_groups(&grid, &spec).unwrap();
        let n = grid.n_tokens();
        largest = largest.max(n);
        let m = r.random_range(1..=8);
        let assignment = synth::random_assignment(n, m, r.random());
        let routing = RoutingResult::<f64>::one_hot(assignment.clone(), m).unwrap();
        let report = count_pairs_exact(Some(&routing), &groups, n, DEFAULT_EXACT_BOUND).unwrap();
        let all: Vec<_> = groups.all().cloned().collect();
        if report.pairs_union != oracle::union_pairs_double_loop(&assignment, &all, n) {
            mismatches += 1;
        }
    }
    let ok = worst_sparsity <= f64::EPSILON && mismatches == 0;
    outcome(ok, format!("|sparsity - (1-1/M)| ≤ {worst_sparsity:.1e}, {mismatches}/20 oracle mismatches (N ≤ {largest})"))
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let (n, d, m) = (512, 16, 8);
    let mut converged = 0;
    let mut adversarial = true;
    let mut finals = Vec::new();
    for seed in 0..10u64 {
        let x: Matrix<f32> = synth::random_matrix(n, d, 1000 + seed);
        let mut router = Router::<f32>::collapsed_init(d, m, seed, 4.0).unwrap();
        let trace = train_balance(&mut router, &x, 500, 1.0, moga_core::routing::DEFAULT_ALPHA).unwrap();
        adversarial &= trace[0].balance_metric >= 0.8 * m as f64;
        let last = balance_stats(&router.route(&x).unwrap(), 0.0).balance_metric;
        let best = trace.iter().map(|s| s.balance_metric).fold(last, f64::min);
        if best < 1.1 {
            converged += 1;
        }
        finals.push(format!("{last:.2}"));
    }
    let t = start.elapsed();
    let ok = adversarial && converged >= 9 && within(t, 30);
    outcome(ok, format!("{converged}/10 seeds below 1.1, final metrics [{}], {t:.2?}", finals.join(", ")))
}

fn sequence_parallel() -> Outcome {
    let mut r = rng(10);
    let mut route_identical = true;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(1..=96);
        let m = r.random_range(1..=8);
        let d = r.random_range(1..=8);
        let heads = synth::random_heads::<f32>(n, r.random_range(1..=4), r.random_range(1..=8), r.random());
        let router = Router::<f32>::uniform_init(d, m, r.random()).unwrap();
        let x: Matrix<f32> = synth::random_matrix(n, d, r.random());
        let single = router.route(&x).unwrap();
        let reference = moga_attention(&heads, &single).unwrap().cast::<f64>();
        let mut ranks: Vec<usize> = vec![1, 2, 3, n];
        ranks.retain(|&k| k <= n);
        for k in ranks {
            let plan = ShardPlan::contiguous(n, k).unwrap();
            route_identical &= sharded_route(&router, &x, &plan).unwrap() == single;
            worst = worst.max(rel(&sharded_moga(&heads, &router, &x, &plan).unwrap(), &reference));
        }
    }
    outcome(route_identical && worst <= 1e-6, format!("routing bit-identical {route_identical}, max rel err {worst:.2e}"))
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let cfg = RunConfig::default();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        cmd_flops(&cfg, dir.path()).unwrap();
        cmd_groups::<f32>(&cfg, dir.path(), 7).unwrap();
        cmd_balance::<f32>(&cfg, dir.path(), 7).unwrap();
        read_tree(dir.path())
    };
    let (a, b) = (run(), run());
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    let ok = a == b && names.contains(&"flops.csv") && names.contains(&"balance.csv") && names.contains(&"assignment.txt");
    outcome(ok, format!("{} files byte-identical across two runs", a.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 degeneracy: M=1 equals full attention", degeneracy),
        ("2 oracle equivalence: MoGA, static, combined", oracle_equivalence),
        ("3 permutation round trip", round_trip),
        ("4 balancing loss properties", balance_properties),
        ("5 gradient correctness", gradients),
        ("6 sequence lengths", sequence_lengths),
        ("7 FLOPs anchors", flops_anchors),
        ("8 sparsity accounting", sparsity),
        ("9 balancing convergence", convergence),
        ("10 sequence-parallel equivalence", sequence_parallel),
        ("11 determinism of CLI outputs", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        if !o.passed {
            failed += 1;
        }
        println!("[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
