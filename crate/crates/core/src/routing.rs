//! Token router: a single linear layer plus softmax, argmax assignment, and the
//! group balancing loss `alpha * M * sum_i F_i * P_i` with its gradient.
//!
//! Gradients treat the argmax assignment (and therefore `F`) as a constant of
//! the forward pass; only the gate probability `p(g(x)|x)` is differentiated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{linear, softmax_in_place, Matrix, Real};

/// Default weight of the balancing loss.
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Router<T = f32> {
    weights: Matrix<T>,
    bias: Option<Vec<T>>,
}

impl<T: Real> Router<T> {
    pub fn new(weights: Matrix<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if weights.cols() == 0 {
            return Err(shape_err("router needs at least one group"));
        }
        if let Some(b) = &bias {
            if b.len() != weights.cols() {
                return Err(shape_err(format!(
                    "bias length {} != group count {}",
                    b.len(),
                    weights.cols()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite router bias".into()));
            }
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(d_model: usize, n_groups: usize) -> Result<Self> {
        Self::new(Matrix::zeros(d_model, n_groups), None)
    }

    /// Centered uniform init in `[-1/sqrt(d), 1/sqrt(d)]`, no bias.
    pub fn uniform_init(d_model: usize, n_groups: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d_model.max(1) as f64).sqrt();
        let w = Matrix::from_fn(d_model, n_groups, |_, _| {
            T::of(rng.random_range(-scale..=scale))
        })?;
        Self::new(w, None)
    }

    /// Uniform init plus a bias that pushes every token toward group 0.
    pub fn collapsed_init(d_model: usize, n_groups: usize, seed: u64, dominance: f64) -> Result<Self> {
        let base = Self::uniform_init(d_model, n_groups, seed)?;
        let mut bias = vec![T::zero(); n_groups];
        bias[0] = T::of(dominance);
        Self::new(base.weights, Some(bias))
    }

    pub fn n_groups(&self) -> usize {
        self.weights.cols()
    }

    pub fn d_model(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    /// Flattened parameters: weights (row-major) then bias, in 64-bit.
    pub fn params(&self) -> Vec<f64> {
        self.weights
            .data()
            .iter()
            .chain(self.bias.iter().flatten())
            .map(|v| v.as_f64())
            .collect()
    }

    /// Router with the same shape and parameters replaced by `params`.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let nw = self.weights.data().len();
        let nb = self.bias.as_ref().map_or(0, Vec::len);
        if params.len() != nw + nb {
            return Err(shape_err(format!("expected {} params, got {}", nw + nb, params.len())));
        }
        let w = Matrix::new(
            self.weights.rows(),
            self.weights.cols(),
            params[..nw].iter().map(|&v| T::of(v)).collect(),
        )?;
        let bias = self.bias.as_ref().map(|_| params[nw..].iter().map(|&v| T::of(v)).collect());
        Self::new(w, bias)
    }

    pub fn cast<U: Real>(&self) -> Router<U> {
        Router {
            weights: self.weights.cast(),
            bias: self.bias.as_ref().map(|b| b.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.weights.rows() {
            return Err(shape_err(format!(
                "router expects width {}, got {}",
                self.weights.rows(),
                x.cols()
            )));
        }
        linear(x, &self.weights, self.bias.as_deref())
    }

    pub fn route(&self, x: &Matrix<T>) -> Result<RoutingResult<T>> {
        let mut dist = self.logits(x)?;
        let m = dist.cols();
        let mut assignment = Vec::with_capacity(dist.rows());
        let mut gate = Vec::with_capacity(dist.rows());
        for r in 0..dist.rows() {
            let row = dist.row_mut(r);
            softmax_in_place(row);
            let g = argmax_lowest(row);
            assignment.push(g);
            gate.push(row[g]);
        }
        Ok(RoutingResult { assignment, gate, dist, n_groups: m })
    }

    fn apply_step(&mut self, grad: &RouterGrad<T>, lr: T) {
        for (w, g) in self.weights.data_mut().iter_mut().zip(grad.weights.data()) {
            *w = *w - lr * *g;
        }
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), grad.bias.as_ref()) {
            for (bv, g) in b.iter_mut().zip(gb) {
                *bv = *bv - lr * *g;
            }
        }
    }
}

/// Index of the maximum; ties go to the lowest index.
fn argmax_lowest<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingResult<T = f32> {
    assignment: Vec<usize>,
    gate: Vec<T>,
    dist: Matrix<T>,
    n_groups: usize,
}

impl<T: Real> RoutingResult<T> {
    /// Assembles a result from parts, enforcing `gate == dist[assignment]`.
    pub fn from_parts(assignment: Vec<usize>, dist: Matrix<T>) -> Result<Self> {
        if assignment.len() != dist.rows() {
            return Err(shape_err("assignment length != distribution rows"));
        }
        let n_groups = dist.cols();
        let mut gate = Vec::with_capacity(assignment.len());
        for (t, &g) in assignment.iter().enumerate() {
            if g >= n_groups {
                return Err(shape_err(format!("group {g} out of range {n_groups}")));
            }
            gate.push(dist.get(t, g));
        }
        Ok(Self { assignment, gate, dist, n_groups })
    }

    /// One-hot routing: every gate is 1.
    pub fn one_hot(assignment: Vec<usize>, n_groups: usize) -> Result<Self> {
        let n = assignment.len();
        let mut data = vec![T::zero(); n * n_groups];
        for (t, &g) in assignment.iter().enumerate() {
            if g >= n_groups {
                return Err(shape_err(format!("group {g} out of range {n_groups}")));
            }
            data[t * n_groups + g] = T::one();
        }
        Self::from_parts(assignment, Matrix::new(n, n_groups, data)?)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn gate(&self) -> &[T] {
        &self.gate
    }

    pub fn dist(&self) -> &Matrix<T> {
        &self.dist
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }

    /// Smallest gap between the top and runner-up probability over all tokens.
    /// Infinite for a single group.
    pub fn min_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for (t, &g) in self.assignment.iter().enumerate() {
            let top = self.gate[t].as_f64();
            for (j, v) in self.dist.row(t).iter().enumerate() {
                if j != g {
                    margin = margin.min(top - v.as_f64());
                }
            }
        }
        margin
    }

    /// Row range `[start, end)` of this result as a new result.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            assignment: self.assignment[start..end].to_vec(),
            gate: self.gate[start..end].to_vec(),
            dist: self.dist.slice_rows(start, end)?,
            n_groups: self.n_groups,
        })
    }

    /// Concatenates per-shard results in order.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let n_groups = parts.first().map_or(0, |p| p.n_groups);
        if parts.iter().any(|p| p.n_groups != n_groups) {
            return Err(shape_err("concat: group counts differ"));
        }
        let dists: Vec<Matrix<T>> = parts.iter().map(|p| p.dist.clone()).collect();
        Ok(Self {
            assignment: parts.iter().flat_map(|p| p.assignment.iter().copied()).collect(),
            gate: parts.iter().flat_map(|p| p.gate.iter().copied()).collect(),
            dist: Matrix::vcat(&dists)?,
            n_groups,
        })
    }
}

/// Per-group token fractions `F`, mean routing probabilities `P`, and the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStats {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub mean_probs: Vec<f64>,
    pub loss: f64,
    /// `M * sum_i F_i * P_i`; 1 at balanced one-hot routing.
    pub balance_metric: f64,
}

pub fn balance_stats<T: Real>(result: &RoutingResult<T>, alpha: f64) -> BalanceStats {
    let n = result.len().max(1) as f64;
    let m = result.n_groups();
    let counts = result.group_sizes();
    let mut gate_sums = vec![0.0; m];
    for (&g, p) in result.assignment.iter().zip(&result.gate) {
        gate_sums[g] += p.as_f64();
    }
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mean_probs: Vec<f64> = gate_sums.iter().map(|s| s / n).collect();
    // M * sum F_i P_i with the 1/N^2 applied last: for one-hot routing the
    // numerator is an integer, so balanced routing gives exactly 1.
    let weighted: f64 = counts.iter().zip(&gate_sums).map(|(&c, s)| c as f64 * s).sum();
    let balance_metric = m as f64 * weighted / (n * n);
    BalanceStats {
        counts,
        fractions,
        mean_probs,
        loss: alpha * balance_metric,
        balance_metric,
    }
}

/// Balancing loss of `router` on `x` with assignments and fractions taken
/// from `pinned` instead of the router's own argmax.
pub fn pinned_balance_loss<T: Real>(
    router: &Router<T>,
    x: &Matrix<T>,
    pinned: &RoutingResult<T>,
    alpha: f64,
) -> Result<f64> {
    let fresh = router.route(x)?;
    let stats = balance_stats(pinned, alpha);
    let n = pinned.len().max(1) as f64;
    let m = pinned.n_groups() as f64;
    let mut acc = 0.0;
    for (t, &g) in pinned.assignment.iter().enumerate() {
        acc += stats.fractions[g] * fresh.dist.get(t, g).as_f64();
    }
    Ok(alpha * m * acc / n)
}

/// Gradient with respect to router weights (and bias, when present).
#[derive(Debug, Clone, PartialEq)]
pub struct RouterGrad<T = f32> {
    pub weights: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> RouterGrad<T> {
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .data()
            .iter()
            .chain(self.bias.iter().flatten())
            .map(|v| v.as_f64())
            .collect()
    }
}

/// Backpropagates `dloss/dgate` for every token through the gate softmax
/// into the router parameters, assignments held fixed.
pub fn gate_backward<T: Real>(
    router: &Router<T>,
    x: &Matrix<T>,
    routing: &RoutingResult<T>,
    dgate: &[T],
) -> Result<RouterGrad<T>> {
    if x.rows() != routing.len() || dgate.len() != routing.len() {
        return Err(shape_err("gate_backward: token counts differ"));
    }
    if x.cols() != router.d_model() || routing.n_groups() != router.n_groups() {
        return Err(shape_err("gate_backward: router shape mismatch"));
    }
    let m = router.n_groups();
    let d = router.d_model();
    // dlogit_j = dgate * p_g * (delta_gj - p_j)
    let mut dlogits = Matrix::zeros(x.rows(), m);
    for t in 0..x.rows() {
        let g = routing.assignment[t];
        let pg = routing.gate[t];
        let probs = routing.dist.row(t);
        let out = dlogits.row_mut(t);
        for j in 0..m {
            let delta = if j == g { T::one() } else { T::zero() };
            out[j] = dgate[t] * pg * (delta - probs[j]);
        }
    }
    let mut gw = Matrix::zeros(d, m);
    for t in 0..x.rows() {
        let xr = x.row(t);
        let dl = dlogits.row(t);
        for k in 0..d {
            let row = gw.row_mut(k);
            for j in 0..m {
                row[j] = row[j] + xr[k] * dl[j];
            }
        }
    }
    let bias = router.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); m];
        for t in 0..x.rows() {
            for (acc, v) in gb.iter_mut().zip(dlogits.row(t)) {
                *acc = *acc + *v;
            }
        }
        gb
    });
    Ok(RouterGrad { weights: gw.ensure_finite("gate_backward")?, bias })
}

/// Analytic gradient of the balancing loss. Returns the routing used, too.
pub fn balance_loss_grad<T: Real>(
    router: &Router<T>,
    x: &Matrix<T>,
    alpha: f64,
) -> Result<(RouterGrad<T>, RoutingResult<T>)> {
    let routing = router.route(x)?;
    let grad = balance_loss_grad_at(router, x, &routing, alpha)?;
    Ok((grad, routing))
}

/// Gradient of the balancing loss at an already computed routing.
pub fn balance_loss_grad_at<T: Real>(
    router: &Router<T>,
    x: &Matrix<T>,
    routing: &RoutingResult<T>,
    alpha: f64,
) -> Result<RouterGrad<T>> {
    let stats = balance_stats(routing, alpha);
    let n = routing.len().max(1) as f64;
    let scale = alpha * routing.n_groups() as f64 / n;
    let dgate: Vec<T> = routing
        .assignment
        .iter()
        .map(|&g| T::of(scale * stats.fractions[g]))
        .collect();
    gate_backward(router, x, routing, &dgate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceStep {
    pub step: usize,
    pub balance_metric: f64,
    pub loss: f64,
}

/// Plain gradient descent on the balancing loss alone. Entry `s` of the trace
/// holds the metric before update `s` is applied.
pub fn train_balance<T: Real>(
    router: &mut Router<T>,
    x: &Matrix<T>,
    steps: usize,
    lr: f64,
    alpha: f64,
) -> Result<Vec<BalanceStep>> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Numeric(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let lr_t = T::of(lr);
    let mut trace = Vec::with_capacity(steps);
    let mut last_finite = None;
    for step in 0..steps {
        let diverged = |e: Error, last: Option<usize>| match e {
            Error::Numeric(_) => Error::Diverged { step, last_finite_step: last },
            other => other,
        };
        let routing = router.route(x).map_err(|e| diverged(e, last_finite))?;
        let stats = balance_stats(&routing, alpha);
        if !stats.balance_metric.is_finite() {
            return Err(Error::Diverged { step, last_finite_step: last_finite });
        }
        trace.push(BalanceStep { step, balance_metric: stats.balance_metric, loss: stats.loss });
        last_finite = Some(step);
        let grad = balance_loss_grad_at(router, x, &routing, alpha).map_err(|e| diverged(e, last_finite))?;
        router.apply_step(&grad, lr_t);
    }
    Ok(trace)
}
