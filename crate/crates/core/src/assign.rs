//! Per-pixel template assignment with a rejection option.
//!
//! A pixel with similarity scores `a_k` to `K` templates picks a point of the
//! extended simplex `{(q, p) ≥ 0 : q + Σ p_k = 1}`, where `q` is the mass
//! given to "no template matches" at threshold `μ`:
//!
//! * [`solve_hard`] maximizes the linear objective `q·μ + Σ p_k a_k`, whose
//!   optimum is a vertex: one template, or rejection.
//! * [`solve_smooth`] adds the entropy term `−(1/ε)(q log q + Σ p_k log p_k)`
//!   and returns the closed-form softmax solution.
//! * [`oracle_smooth`] maximizes the same smoothed objective iteratively
//!   without using the closed form; it exists to check [`solve_smooth`].
//! * [`bn_relu_assignment`] is the batch-norm + ReLU surrogate used inside the
//!   distillation layer, which learns the threshold from batch statistics.

use crate::error::{Error, Result};
use crate::ops::norm::{batch_norm_eval, batch_norm_train, Mode, RunningStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProblem {
    /// Similarity of the pixel to each template.
    pub a: Vec<f64>,
    /// Rejection threshold, on the same scale as `a`.
    pub mu: f64,
    /// Smoothness; larger is closer to the hard assignment.
    pub epsilon: f64,
}

impl AssignmentProblem {
    pub fn new(a: Vec<f64>, mu: f64, epsilon: f64) -> Self {
        AssignmentProblem { a, mu, epsilon }
    }

    fn validate(&self, smoothed: bool) -> Result<()> {
        if self.a.is_empty() {
            return Err(Error::invalid("assignment needs at least one template"));
        }
        if self.a.iter().any(|v| !v.is_finite()) || !self.mu.is_finite() {
            return Err(Error::invalid("assignment scores must be finite"));
        }
        if smoothed && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "smoothness ε must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSolution {
    pub p: Vec<f64>,
    /// Rejection mass.
    pub q: f64,
}

impl AssignmentSolution {
    /// `q + Σ p_k`; equals 1 for every solver output.
    pub fn total_mass(&self) -> f64 {
        self.q + self.p.iter().sum::<f64>()
    }

    /// True when the solution is a vertex of the extended simplex.
    pub fn is_vertex(&self) -> bool {
        let ones = self.p.iter().filter(|&&v| v == 1.0).count() + usize::from(self.q == 1.0);
        let zeros = self.p.iter().filter(|&&v| v == 0.0).count() + usize::from(self.q == 0.0);
        ones == 1 && zeros == self.p.len()
    }

    /// Total variation distance over the extended simplex.
    pub fn total_variation(&self, other: &AssignmentSolution) -> f64 {
        let body: f64 = self
            .p
            .iter()
            .zip(&other.p)
            .map(|(a, b)| (a - b).abs())
            .sum();
        0.5 * (body + (self.q - other.q).abs())
    }
}

/// Vertex maximizing `q·μ + Σ p_k a_k`. Ties go to rejection first, then to
/// the lowest template index.
pub fn solve_hard(problem: &AssignmentProblem) -> AssignmentSolution {
    let mut p = vec![0.0; problem.a.len()];
    let mut best: Option<usize> = None;
    let mut best_score = problem.mu;
    for (k, &ak) in problem.a.iter().enumerate() {
        if ak > best_score {
            best = Some(k);
            best_score = ak;
        }
    }
    match best {
        Some(k) => {
            p[k] = 1.0;
            AssignmentSolution { p, q: 0.0 }
        }
        None => AssignmentSolution { p, q: 1.0 },
    }
}

/// Closed-form maximizer of the entropy-smoothed objective:
/// `p_k = e^{ε a_k} / (e^{ε μ} + Σ_k' e^{ε a_k'})`, `q = e^{ε μ} / (…)`.
pub fn solve_smooth(problem: &AssignmentProblem) -> Result<AssignmentSolution> {
    problem.validate(true)?;
    let mut p = vec![0.0; problem.a.len()];
    let q = smooth_row(&problem.a, problem.mu, problem.epsilon, &mut p);
    Ok(AssignmentSolution { p, q })
}

/// Writes the smoothed `p` for one pixel into `out` and returns `q`.
fn smooth_row(a: &[f64], mu: f64, eps: f64, out: &mut [f64]) -> f64 {
    let max = a.iter().copied().fold(mu, f64::max);
    let eq = (eps * (mu - max)).exp();
    let mut z = eq;
    for (o, &ak) in out.iter_mut().zip(a) {
        *o = (eps * (ak - max)).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
    eq / z
}

/// Applies [`solve_smooth`] to every pixel of a `… × K` score map and returns
/// the template part `p` (the rejection mass is implied).
pub fn smooth_assignment_map(scores: &Tensor, mu: f64, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0 && eps.is_finite()) || !mu.is_finite() {
        return Err(Error::invalid(format!(
            "smoothed assignment needs ε > 0 and finite μ, got ε={eps}, μ={mu}"
        )));
    }
    let k = scores.last_dim();
    let mut out = vec![0.0; scores.len()];
    for r in 0..scores.rows() {
        smooth_row(scores.row(r), mu, eps, &mut out[r * k..(r + 1) * k]);
    }
    Tensor::new(scores.shape(), out)?.check_finite("smooth_assignment")
}

/// Iteration cap for [`oracle_smooth`].
pub const ORACLE_MAX_ITERS: usize = 100_000;
/// Stationarity tolerance for [`oracle_smooth`].
pub const ORACLE_TOL: f64 = 1e-10;

/// Maximizes `q·μ + pᵀa − (1/ε)(q log q + pᵀ log p)` over the extended simplex
/// by exponentiated-gradient ascent, starting from the uniform point.
///
/// Iterates are kept in the log domain. The step on the objective is `ε/2`,
/// which contracts the distance to the optimum by one half per iteration.
/// Stops once the spread of the gradient across coordinates (the first-order
/// stationarity residual on the simplex) is below [`ORACLE_TOL`].
pub fn oracle_smooth(problem: &AssignmentProblem) -> Result<AssignmentSolution> {
    problem.validate(true)?;
    let eps = problem.epsilon;
    let step = 0.5 * eps;
    // coordinate 0 is the rejection entry
    let coef: Vec<f64> = std::iter::once(problem.mu)
        .chain(problem.a.iter().copied())
        .collect();
    let n = coef.len();
    let mut log_z = vec![-(n as f64).ln(); n];
    let mut grad = vec![0.0; n];

    for _ in 0..ORACLE_MAX_ITERS {
        for i in 0..n {
            grad[i] = coef[i] - (log_z[i] + 1.0) / eps;
        }
        let lo = grad.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < ORACLE_TOL {
            let z: Vec<f64> = log_z.iter().map(|l| l.exp()).collect();
            return Ok(AssignmentSolution {
                q: z[0],
                p: z[1..].to_vec(),
            });
        }
        for i in 0..n {
            log_z[i] += step * grad[i];
        }
        // renormalize: log z ← log z − logsumexp(log z)
        let m = log_z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + log_z.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        log_z.iter_mut().for_each(|l| *l -= lse);
    }
    Err(Error::NoConvergence("oracle_smooth", ORACLE_MAX_ITERS))
}

/// Batch-norm whitening followed by rectification:
/// `p̂ = max(0, γ·â + β)` per channel, with `â` the whitened scores.
///
/// The result is left unnormalized. Returns `(p̂, â)`.
pub fn bn_relu_assignment(
    scores: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<(Tensor, Tensor)> {
    let ones = Tensor::ones(gamma.shape());
    let zeros = Tensor::zeros(beta.shape());
    let whitened = match mode {
        Mode::Train => batch_norm_train(scores, &ones, &zeros, stats)?.0,
        Mode::Eval => batch_norm_eval(scores, &ones, &zeros, stats)?,
    };
    let c = whitened.last_dim();
    let p = whitened
        .data()
        .iter()
        .enumerate()
        .map(|(i, &w)| (gamma.data()[i % c] * w + beta.data()[i % c]).max(0.0))
        .collect();
    Ok((Tensor::new(scores.shape(), p)?, whitened))
}

/// Divides each nonzero row of an unnormalized assignment by its sum.
/// All-zero rows (full rejection) are left at zero.
pub fn normalize_assignment(p_hat: &Tensor) -> Tensor {
    let k = p_hat.last_dim();
    let mut out = p_hat.data().to_vec();
    for r in 0..p_hat.rows() {
        let row = &mut out[r * k..(r + 1) * k];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Tensor::new(p_hat.shape(), out).unwrap()
}

/// Error of the first-order expansion `e^{a'} ≈ 1 + a'`.
pub fn taylor_gap(a_prime: f64) -> f64 {
    (a_prime.exp() - (1.0 + a_prime)).abs()
}
