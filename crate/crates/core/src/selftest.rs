//! Numerical self-checks: closed-form assignment against its iterative
//! oracle, the hard limit, finite-difference gradients, the supervision table
//! against a counting oracle, and LDA applied map-wise versus per pixel.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assign::{oracle_smooth, solve_hard, solve_smooth, AssignmentProblem};
use crate::error::Result;
use crate::gradcheck::primitive_suite;
use crate::lda::fit_lda;
use crate::subclass::{counting_oracle_st, fit_subclass_model};
use crate::tensor::Tensor;

/// Result of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{tag} {}: {} ({:.2}s)",
            self.name, self.detail, self.seconds
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Result<Check> {
    let t = Instant::now();
    let (passed, detail) = f()?;
    Ok(Check {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Random assignment problem with `K ≤ 16` and scores in `[-1, 1]`.
pub fn random_problem(rng: &mut impl Rng, epsilon: f64) -> AssignmentProblem {
    let k = rng.random_range(1..=16);
    let a = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    AssignmentProblem::new(a, rng.random_range(-1.0..1.0), epsilon)
}

/// Gap between the two largest of `{μ, a_1, …, a_K}`.
pub fn top_margin(p: &AssignmentProblem) -> f64 {
    let mut v: Vec<f64> = p.a.iter().copied().chain([p.mu]).collect();
    v.sort_by(|x, y| y.total_cmp(x));
    v[0] - v[1]
}

/// Closed form versus the iterative oracle, componentwise.
pub fn smooth_vs_oracle(seed: u64, problems: usize, tol: f64) -> Result<Check> {
    timed("smooth assignment matches oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..problems {
            let eps = rng.random_range(0.1..=50.0);
            let p = random_problem(&mut rng, eps);
            let (s, o) = (solve_smooth(&p)?, oracle_smooth(&p)?);
            let diff =
                s.p.iter()
                    .zip(&o.p)
                    .map(|(x, y)| (x - y).abs())
                    .fold((s.q - o.q).abs(), f64::max);
            worst = worst.max(diff);
        }
        Ok((
            worst < tol,
            format!("{problems} problems, max |Δ| = {worst:.3e}"),
        ))
    })
}

/// Smoothed solution at large ε versus the hard solution on well-separated
/// problems; hard outputs must be vertices of the extended simplex.
pub fn hard_limit(seed: u64, problems: usize, epsilon: f64, tol: f64) -> Result<Check> {
    timed("hard limit", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst, mut vertices, mut done) = (0.0f64, true, 0);
        while done < problems {
            let p = random_problem(&mut rng, epsilon);
            if top_margin(&p) < 0.1 {
                continue;
            }
            let hard = solve_hard(&p);
            vertices &= hard.is_vertex();
            worst = worst.max(solve_smooth(&p)?.total_variation(&hard));
            done += 1;
        }
        Ok((
            worst < tol && vertices,
            format!("{problems} problems, max TV = {worst:.3e}, all vertices: {vertices}"),
        ))
    })
}

/// Central finite differences for every primitive and the KD composite.
pub fn gradients(seed: u64, instances: usize) -> Result<Check> {
    timed("gradient check", || {
        let outcomes = primitive_suite(seed, instances)?;
        let failed: Vec<String> = outcomes
            .iter()
            .filter(|o| !o.passed())
            .map(|o| format!("{} ({:.2e})", o.name, o.max_rel_err))
            .collect();
        let worst = outcomes.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
        let detail = if failed.is_empty() {
            format!(
                "{} checks × {instances}, max rel err = {worst:.2e}",
                outcomes.len()
            )
        } else {
            format!("failed: {}", failed.join(", "))
        };
        Ok((failed.is_empty(), detail))
    })
}

/// Random clustered points with `C ≤ 5` classes and `K_inter ≤ 4`.
pub fn random_subclass_problem(
    rng: &mut impl Rng,
    max_n: usize,
) -> (Tensor, Vec<usize>, usize, usize) {
    let c = rng.random_range(1..=5);
    let k = rng.random_range(1..=4);
    let d = rng.random_range(1..=4);
    let n = rng.random_range((c * k * 4).max(20)..=max_n.max(c * k * 4 + 1));
    let centers: Vec<f64> = (0..c * k * d)
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // every class receives at least K_inter points
        let class = if i < c * k {
            i % c
        } else {
            rng.random_range(0..c)
        };
        let sub = rng.random_range(0..k);
        let base = (class * k + sub) * d;
        for j in 0..d {
            data.push(centers[base + j] + rng.random_range(-0.5..0.5));
        }
        labels.push(class);
    }
    (
        Tensor::new(&[n, d], data).expect("consistent shape"),
        labels,
        c,
        k,
    )
}

/// The fitted table equals an independent count, and rows are distributions.
pub fn subclass_table(seed: u64, datasets: usize, max_n: usize) -> Result<Check> {
    timed("supervision table matches counting", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut equal, mut worst_row) = (true, 0.0f64);
        for i in 0..datasets {
            let (z, y, c, k) = random_subclass_problem(&mut rng, max_n);
            let model = fit_subclass_model(&z, &y, c, k, seed.wrapping_add(i as u64))?;
            let (s_t, report) = counting_oracle_st(&z, &y, &model.prototypes)?;
            equal &= s_t == model.s_t && report == model.report;
            for r in 0..model.s_t.rows() {
                worst_row = worst_row.max((model.s_t.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok((
            equal && worst_row <= 1e-9,
            format!("{datasets} datasets, exact: {equal}, max |row sum − 1| = {worst_row:.1e}"),
        ))
    })
}

/// Map-wise LDA equals per-pixel LDA.
pub fn lda_as_convolution(seed: u64, trials: usize, tol: f64) -> Result<Check> {
    timed("LDA as 1×1 convolution", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (z, y, c, _) = random_subclass_problem(&mut rng, 400);
            if c < 2 {
                continue;
            }
            let lda = fit_lda(&z, &y, crate::lda::DEFAULT_SHRINKAGE)?;
            let d = z.last_dim();
            let (b, h, w) = (2, rng.random_range(1..5), rng.random_range(1..5));
            let map = Tensor::randn(&[b, h, w, d], 2.0, &mut rng);
            let out = lda.apply_map(&map)?;
            for p in 0..b * h * w {
                let row = lda.apply_row(&map.data()[p * d..(p + 1) * d]);
                let got = &out.data()[p * row.len()..(p + 1) * row.len()];
                worst = row
                    .iter()
                    .zip(got)
                    .map(|(x, y)| (x - y).abs())
                    .fold(worst, f64::max);
            }
        }
        Ok((
            worst <= tol,
            format!("{trials} trials, max |Δ| = {worst:.1e}"),
        ))
    })
}

/// The full suite at the stated sizes and tolerances.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        smooth_vs_oracle(seed, 1000, 1e-6)?,
        hard_limit(seed, 200, 100.0, 1e-3)?,
        gradients(seed, 50)?,
        subclass_table(seed, 20, 10_000)?,
        lda_as_convolution(seed, 20, 1e-12)?,
    ])
}
