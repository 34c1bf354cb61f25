//! 3D-Var baseline: minimise the quadratic misfit-plus-prior cost with L-BFGS.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::graph::ObservationSet;
use crate::operator::SparseOperator;

/// Prior precision, prior mean and point observations.
#[derive(Debug, Clone)]
pub struct VarProblem {
    pub precision: SparseOperator,
    pub prior_mean: Vec<f64>,
    pub obs: ObservationSet,
}

impl VarProblem {
    pub fn new(precision: SparseOperator, prior_mean: Vec<f64>, obs: ObservationSet) -> Result<Self> {
        let n = precision.dim();
        if prior_mean.len() != n {
            return Err(Error::Dimension { expected: n, got: prior_mean.len() });
        }
        obs.validate(n)?;
        Ok(Self { precision, prior_mean, obs })
    }

    pub fn dim(&self) -> usize {
        self.precision.dim()
    }

    fn check(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: f.len() });
        }
        Ok(())
    }

    /// Cost and gradient in one pass over the precision.
    pub fn cost_and_gradient(&self, f: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(f)?;
        let d: Vec<f64> = f.iter().zip(&self.prior_mean).map(|(x, m)| x - m).collect();
        let mut grad = self.precision.matvec(&d)?;
        let mut cost = 0.5 * d.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>();
        for o in self.obs.entries() {
            let r = f[o.node] - o.value;
            cost += 0.5 * r * r / o.variance;
            grad[o.node] += r / o.variance;
        }
        Ok((cost, grad))
    }
}

/// `J(f) = 1/2 sum (y - f_i)^2 / var + 1/2 (f - f_b)^T P (f - f_b)`.
pub fn cost(p: &VarProblem, f: &[f64]) -> Result<f64> {
    Ok(p.cost_and_gradient(f)?.0)
}

pub fn gradient(p: &VarProblem, f: &[f64]) -> Result<Vec<f64>> {
    Ok(p.cost_and_gradient(f)?.1)
}

/// Gradient test used to declare convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientTest {
    /// `max|grad| <= tol * max(1, |J|)`.
    #[default]
    RelativeInf,
    /// `||grad||_2 <= tol`.
    AbsoluteL2,
}

impl GradientTest {
    pub fn name(&self) -> &'static str {
        match self {
            GradientTest::RelativeInf => "relative-inf",
            GradientTest::AbsoluteL2 => "absolute-l2",
        }
    }

    pub fn holds(&self, tol: f64, fx: f64, g: &[f64]) -> bool {
        match self {
            GradientTest::RelativeInf => inf_norm(g) <= tol * fx.abs().max(1.0),
            GradientTest::AbsoluteL2 => dot(g, g).sqrt() <= tol,
        }
    }
}

impl std::str::FromStr for GradientTest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative-inf" => Ok(GradientTest::RelativeInf),
            "absolute-l2" => Ok(GradientTest::AbsoluteL2),
            _ => Err(Error::Parameter(format!("unknown gradient test '{s}' (relative-inf, absolute-l2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub test: GradientTest,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 10, tol: 1e-3, max_iters: 500, test: GradientTest::RelativeInf }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    MaxIters,
    /// No step satisfying the Wolfe conditions was found; the best iterate is returned.
    LineSearchFailed,
}

impl LbfgsStatus {
    pub fn label(&self) -> &'static str {
        match self {
            LbfgsStatus::Converged => "converged",
            LbfgsStatus::MaxIters => "max_iters",
            LbfgsStatus::LineSearchFailed => "line_search_failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub cost: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
    /// Cost after each accepted iterate, starting with the initial point.
    pub history: Vec<f64>,
}

/// Minimise a 3D-Var problem.
pub fn minimize(p: &VarProblem, init: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult> {
    p.check(init)?;
    lbfgs(|x| p.cost_and_gradient(x), init, opts)
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_SEARCH_EVALS: usize = 30;
const ROUNDOFF: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Generic L-BFGS with a strong-Wolfe line search.
pub fn lbfgs<F>(mut eval: F, init: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if opts.memory == 0 {
        return Err(Error::Parameter("L-BFGS memory must be at least 1".into()));
    }
    let n = init.len();
    let mut x = init.to_vec();
    let (mut fx, mut g) = eval(&x)?;
    let mut evaluations = 1;
    let mut history = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let converged = |fx: f64, g: &[f64]| opts.test.holds(opts.tol, fx, g);

    let mut status = LbfgsStatus::MaxIters;
    let mut iterations = 0;
    if converged(fx, &g) {
        status = LbfgsStatus::Converged;
    } else {
        for it in 1..=opts.max_iters {
            let mut dir = two_loop(&g, &pairs);
            let mut slope = dot(&g, &dir);
            if !(slope < 0.0) {
                // Curvature history lost descent; restart from steepest descent.
                pairs.clear();
                dir = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let initial_step = if pairs.is_empty() { 1.0 / inf_norm(&g).max(1.0) } else { 1.0 };
            let search = strong_wolfe(&mut eval, &x, fx, slope, &dir, initial_step)?;
            evaluations += search.evaluations;
            let Some((step, f_new, g_new)) = search.accepted else {
                status = LbfgsStatus::LineSearchFailed;
                break;
            };
            let s: Vec<f64> = dir.iter().map(|d| step * d).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            for k in 0..n {
                x[k] += s[k];
            }
            fx = f_new;
            g = g_new;
            history.push(fx);
            iterations = it;
            if sy > f64::EPSILON * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                if pairs.len() == opts.memory {
                    pairs.pop_front();
                }
                pairs.push_back((s, y, 1.0 / sy));
            }
            if converged(fx, &g) {
                status = LbfgsStatus::Converged;
                break;
            }
        }
    }
    Ok(LbfgsResult { grad_inf_norm: inf_norm(&g), x, cost: fx, iterations, evaluations, status, history })
}

/// Approximate `-H^{-1} g` from the stored curvature pairs.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qk, yk) in q.iter_mut().zip(y) {
            *qk -= a * yk;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let scale = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= scale);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qk, sk) in q.iter_mut().zip(s) {
            *qk += (a - b) * sk;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct LineSearch {
    accepted: Option<(f64, f64, Vec<f64>)>,
    evaluations: usize,
}

struct Probe {
    step: f64,
    f: f64,
    slope: f64,
    g: Vec<f64>,
}

/// Bracketing and zoom line search for the strong Wolfe conditions.
fn strong_wolfe<F>(eval: &mut F, x: &[f64], f0: f64, slope0: f64, dir: &[f64], initial: f64) -> Result<LineSearch>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut evaluations = 0;
    let mut probe = |step: f64, evaluations: &mut usize| -> Result<Probe> {
        let trial: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + step * d).collect();
        let (f, g) = eval(&trial)?;
        *evaluations += 1;
        Ok(Probe { step, f, slope: dot(&g, dir), g })
    };
    // Sufficient decrease, or its slope-based form once cost differences reach roundoff.
    let armijo = |p: &Probe| {
        p.f <= f0 + WOLFE_C1 * p.step * slope0
            || (p.f <= f0 + ROUNDOFF * f0.abs() && p.slope <= (2.0 * WOLFE_C1 - 1.0) * slope0)
    };
    let curvature = |p: &Probe| p.slope.abs() <= WOLFE_C2 * slope0.abs();

    let mut prev = Probe { step: 0.0, f: f0, slope: slope0, g: Vec::new() };
    let mut step = initial;
    let (mut lo, mut hi);
    let mut first = true;
    loop {
        if evaluations >= MAX_LINE_SEARCH_EVALS {
            return Ok(LineSearch { accepted: None, evaluations });
        }
        let cur = probe(step, &mut evaluations)?;
        if !cur.f.is_finite() {
            step = 0.5 * (prev.step + step);
            continue;
        }
        if !armijo(&cur) || (!first && cur.f > prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Ok(LineSearch { accepted: Some((cur.step, cur.f, cur.g)), evaluations });
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        first = false;
        step *= 2.0;
        prev = cur;
    }
    // Zoom: `lo` satisfies Armijo with the lowest cost seen; `hi` brackets it.
    loop {
        if evaluations >= MAX_LINE_SEARCH_EVALS {
            let accepted = (lo.step > 0.0).then(|| (lo.step, lo.f, lo.g.clone()));
            return Ok(LineSearch { accepted, evaluations });
        }
        let trial_step = interpolate(&lo, &hi);
        let cur = probe(trial_step, &mut evaluations)?;
        if !armijo(&cur) || cur.f > lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok(LineSearch { accepted: Some((cur.step, cur.f, cur.g)), evaluations });
            }
            if cur.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.step - lo.step).abs() <= 1e-16 * lo.step.abs().max(1e-300) {
            let accepted = (lo.step > 0.0).then(|| (lo.step, lo.f, lo.g.clone()));
            return Ok(LineSearch { accepted, evaluations });
        }
    }
}

/// Minimiser of the cubic through both endpoints, safeguarded to the interior.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.step, hi.step);
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    let mid = 0.5 * (a + b);
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (low, high) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (high - low);
    if t.is_finite() && t > low + margin && t < high - margin {
        t
    } else {
        mid
    }
}
