//! Exact solvers for tiny tabular problems, used to check the constrained
//! formulation and soft policy iteration independently of any learning.
//!
//! Values are normalized discounted sums, `(1 - gamma) * sum_t gamma^t x_t`,
//! so a cost value is directly comparable with a per-slot budget.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Finite constrained MDP with a per-state cost budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyCmdp {
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub gamma: f64,
    /// Initial-state distribution.
    pub initial: Vec<f64>,
    pub budget: f64,
}

impl TinyCmdp {
    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_states();
        let a = self.n_actions();
        if s == 0 || a == 0 {
            return Err(invalid("need at least one state and one action"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("gamma must lie in (0, 1)"));
        }
        check_kernel(&self.transitions, s, a)?;
        for table in [&self.reward, &self.cost] {
            if table.len() != s || table.iter().any(|r| r.len() != a || r.iter().any(|x| !x.is_finite())) {
                return Err(invalid("reward and cost tables must be S x A and finite"));
            }
        }
        if self.initial.len() != s || (self.initial.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("initial distribution must have S entries summing to 1"));
        }
        Ok(())
    }
}

fn check_kernel(p: &[Vec<Vec<f64>>], s: usize, a: usize) -> Result<()> {
    for row in p {
        if row.len() != a {
            return Err(invalid("transition table must be S x A x S"));
        }
        for dist in row {
            if dist.len() != s || dist.iter().any(|x| !(*x >= 0.0)) || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(invalid("each transition row must be a distribution over S states"));
            }
        }
    }
    Ok(())
}

/// `(1 - gamma) (I - gamma P_pi)^{-1} x_pi` for a deterministic policy.
fn policy_value(p: &[Vec<Vec<f64>>], x: &[Vec<f64>], gamma: f64, policy: &[usize]) -> Vec<f64> {
    let s = p.len();
    let mut m = DMatrix::<f64>::identity(s, s);
    let mut rhs = DVector::<f64>::zeros(s);
    for i in 0..s {
        let a = policy[i];
        for j in 0..s {
            m[(i, j)] -= gamma * p[i][a][j];
        }
        rhs[i] = (1.0 - gamma) * x[i][a];
    }
    let v = m.lu().solve(&rhs).expect("I - gamma P is nonsingular for gamma < 1");
    v.iter().copied().collect()
}

fn reachable(p: &[Vec<Vec<f64>>], initial: &[f64], policy: &[usize]) -> Vec<bool> {
    let s = p.len();
    let mut seen: Vec<bool> = initial.iter().map(|&x| x > 0.0).collect();
    let mut stack: Vec<usize> = (0..s).filter(|&i| seen[i]).collect();
    while let Some(i) = stack.pop() {
        for j in 0..s {
            if p[i][policy[i]][j] > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

fn for_each_policy(n_states: usize, n_actions: usize, mut f: impl FnMut(&[usize])) {
    let mut policy = vec![0usize; n_states];
    loop {
        f(&policy);
        let mut k = 0;
        loop {
            if k == n_states {
                return;
            }
            policy[k] += 1;
            if policy[k] < n_actions {
                break;
            }
            policy[k] = 0;
            k += 1;
        }
    }
}

/// One deterministic stationary policy and its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub policy: Vec<usize>,
    pub reward_value: Vec<f64>,
    pub cost_value: Vec<f64>,
    /// `-initial^T v`: the loss being minimized.
    pub loss: f64,
    /// `initial^T V_c`.
    pub expected_cost: f64,
    /// `V_c(s) <= M` on every reachable state.
    pub statewise_feasible: bool,
    /// `initial^T V_c <= M`.
    pub expectation_feasible: bool,
}

/// Result of [`brute_force_cmdp`], in loss form (`loss = -reward value`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmdpSolution {
    pub policies: Vec<PolicyRecord>,
    /// Index of the best policy ignoring the budget.
    pub unconstrained: usize,
    /// Best deterministic policy under the state-wise constraint.
    pub best_statewise: Option<usize>,
    /// Best deterministic policy under the expectation constraint.
    pub best_expectation: Option<usize>,
    /// State-wise constrained optimum over randomizations of deterministic
    /// policies: `(policy index, probability)` pairs and the loss.
    pub primal_mixture: Vec<(usize, f64)>,
    pub primal_value: f64,
    /// `max_{lambda >= 0} min_pi L(pi, lambda)` with one multiplier per state.
    pub dual_value: f64,
    pub multipliers: Vec<f64>,
    /// `min_pi L(pi, lambda*)` recomputed by enumeration at the reported multipliers.
    pub dual_at_multipliers: f64,
}

impl CmdpSolution {
    /// `|dual - primal|`.
    pub fn duality_gap(&self) -> f64 {
        (self.dual_value - self.primal_value).abs()
    }
}

fn lp_error(e: microlp::Error) -> Error {
    match e {
        microlp::Error::Infeasible => Error::Infeasible("no policy mixture meets the state-wise budget".into()),
        other => Error::InvalidArgument(format!("linear program failed: {other}")),
    }
}

/// Enumerates every deterministic stationary policy, then solves the
/// state-wise constrained problem and its per-state Lagrangian dual.
///
/// The primal is taken over randomizations among the enumerated policies
/// (a convex set on which the constraint and objective are linear); the
/// dual's inner minimization is over the enumerated policies. Both are
/// small linear programs. States constrained are those reachable from the
/// initial distribution under some policy.
pub fn brute_force_cmdp(m: &TinyCmdp) -> Result<CmdpSolution> {
    m.validate()?;
    let (s, a) = (m.n_states(), m.n_actions());
    if a.pow(s as u32) > 1 << 16 {
        return Err(invalid("instance too large to enumerate"));
    }
    let mut policies = Vec::new();
    let mut constrained = vec![false; s];
    for_each_policy(s, a, |pi| {
        let v = policy_value(&m.transitions, &m.reward, m.gamma, pi);
        let vc = policy_value(&m.transitions, &m.cost, m.gamma, pi);
        let reach = reachable(&m.transitions, &m.initial, pi);
        for (c, r) in constrained.iter_mut().zip(&reach) {
            *c |= *r;
        }
        let loss = -m.initial.iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
        let expected_cost = m.initial.iter().zip(&vc).map(|(p, c)| p * c).sum::<f64>();
        let statewise_feasible = vc.iter().zip(&reach).all(|(c, r)| !r || *c <= m.budget);
        policies.push(PolicyRecord {
            policy: pi.to_vec(),
            reward_value: v,
            cost_value: vc,
            loss,
            expected_cost,
            statewise_feasible,
            expectation_feasible: expected_cost <= m.budget,
        });
    });

    let argmin = |pred: &dyn Fn(&PolicyRecord) -> bool| -> Option<usize> {
        policies
            .iter()
            .enumerate()
            .filter(|(_, p)| pred(p))
            .min_by(|x, y| x.1.loss.total_cmp(&y.1.loss))
            .map(|(i, _)| i)
    };
    let unconstrained = argmin(&|_| true).expect("at least one policy");
    let best_statewise = argmin(&|p| p.statewise_feasible);
    let best_expectation = argmin(&|p| p.expectation_feasible);
    let states: Vec<usize> = (0..s).filter(|&i| constrained[i]).collect();

    // primal: min sum_k p_k loss_k  s.t.  sum_k p_k (V_c^k(s) - M) <= 0, sum p = 1
    let mut primal = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = policies.iter().map(|p| primal.add_var(p.loss, (0.0, 1.0))).collect();
    primal.add_constraint(vars.iter().map(|&v| (v, 1.0)), ComparisonOp::Eq, 1.0);
    for &i in &states {
        primal.add_constraint(
            vars.iter().zip(&policies).map(|(&v, p)| (v, p.cost_value[i] - m.budget)),
            ComparisonOp::Le,
            0.0,
        );
    }
    let sol = primal
        .solve()
        .map_err(lp_error)?
        .into_solution()
        .map_err(|_| invalid("primal linear program interrupted"))?;
    let primal_mixture: Vec<(usize, f64)> = vars
        .iter()
        .enumerate()
        .map(|(k, &v)| (k, sol[v]))
        .filter(|(_, p)| *p > 1e-12)
        .collect();
    let primal_value = primal_mixture.iter().map(|&(k, p)| p * policies[k].loss).sum();

    // dual: max t  s.t.  t - sum_s lambda_s (V_c^k(s) - M) <= loss_k for every k
    let mut dual = Problem::new(OptimizationDirection::Maximize);
    let t = dual.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    let lam: Vec<_> = states.iter().map(|_| dual.add_var(0.0, (0.0, f64::INFINITY))).collect();
    for p in &policies {
        let mut terms = vec![(t, 1.0)];
        terms.extend(states.iter().zip(&lam).map(|(&i, &l)| (l, -(p.cost_value[i] - m.budget))));
        dual.add_constraint(terms, ComparisonOp::Le, p.loss);
    }
    let dsol = dual
        .solve()
        .map_err(lp_error)?
        .into_solution()
        .map_err(|_| invalid("dual linear program interrupted"))?;
    let mut multipliers = vec![0.0; s];
    for (&i, &l) in states.iter().zip(&lam) {
        multipliers[i] = dsol[l].max(0.0);
    }
    let dual_at_multipliers = policies
        .iter()
        .map(|p| lagrangian(p, &multipliers, m.budget))
        .fold(f64::INFINITY, f64::min);

    Ok(CmdpSolution {
        policies,
        unconstrained,
        best_statewise,
        best_expectation,
        primal_mixture,
        primal_value,
        dual_value: dsol[t],
        multipliers,
        dual_at_multipliers,
    })
}

/// `loss + sum_s lambda_s (V_c(s) - M)`.
pub fn lagrangian(p: &PolicyRecord, multipliers: &[f64], budget: f64) -> f64 {
    p.loss
        + p.cost_value
            .iter()
            .zip(multipliers)
            .map(|(c, l)| l * (c - budget))
            .sum::<f64>()
}

fn random_kernel<R: Rng + ?Sized>(rng: &mut R, s: usize, a: usize) -> Vec<Vec<Vec<f64>>> {
    (0..s)
        .map(|_| {
            (0..a)
                .map(|_| {
                    let w: Vec<f64> = (0..s).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let z: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / z).collect()
                })
                .collect()
        })
        .collect()
}

/// Random instance whose budget lies strictly between the smallest
/// achievable worst-state cost and the worst-state cost of the
/// unconstrained optimum, so the constraint usually binds.
pub fn random_cmdp<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Result<TinyCmdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(invalid("need at least one state and one action"));
    }
    let transitions = random_kernel(rng, n_states, n_actions);
    let table = |rng: &mut R| -> Vec<Vec<f64>> {
        (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
            .collect()
    };
    let reward = table(rng);
    let cost = table(rng);
    let w: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 0.1).collect();
    let z: f64 = w.iter().sum();
    let mut m = TinyCmdp {
        transitions,
        reward,
        cost,
        gamma,
        initial: w.into_iter().map(|x| x / z).collect(),
        budget: f64::INFINITY,
    };
    let loose = brute_force_cmdp(&TinyCmdp {
        budget: 1e9,
        ..m.clone()
    })?;
    let worst = |p: &PolicyRecord| p.cost_value.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = loose.policies.iter().map(worst).fold(f64::INFINITY, f64::min);
    let hi = worst(&loose.policies[loose.unconstrained]);
    m.budget = if hi > lo { lo + rng.random_range(0.2..0.8) * (hi - lo) } else { hi };
    Ok(m)
}

/// Two states, two actions. Action 1 in state 1 is the rewarding but
/// expensive choice; starting mostly in state 0, its average cost stays
/// under budget while its cost value from state 1 does not.
pub fn separating_cmdp() -> TinyCmdp {
    TinyCmdp {
        transitions: vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ],
        reward: vec![vec![0.0, 0.0], vec![0.0, 1.0]],
        cost: vec![vec![0.0, 0.0], vec![0.0, 2.0]],
        gamma: 0.99,
        initial: vec![0.9, 0.1],
        budget: 1.0,
    }
}

/// Finite MDP without costs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Self {
        Self {
            transitions: random_kernel(rng, n_states, n_actions),
            reward: (0..n_states)
                .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
                .collect(),
            gamma,
        }
    }

    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states(), self.n_actions());
        if s == 0 || a == 0 {
            return Err(invalid("need at least one state and one action"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("gamma must lie in (0, 1)"));
        }
        check_kernel(&self.transitions, s, a)?;
        if self.reward.len() != s || self.reward.iter().any(|r| r.len() != a) {
            return Err(invalid("reward table must be S x A"));
        }
        Ok(())
    }
}

fn entropy(dist: &[f64]) -> f64 {
    dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Exact soft Q of a stochastic policy (plain discounted sums):
/// `Q = r + gamma P V`, `V(s) = sum_a pi(a|s) (Q(s,a) - alpha log pi(a|s))`.
pub fn soft_policy_evaluation(mdp: &TabularMdp, policy: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    let (s, a) = (mdp.n_states(), mdp.n_actions());
    let n = s * a;
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for i in 0..s {
        for u in 0..a {
            let row = i * a + u;
            rhs[row] = mdp.reward[i][u];
            for j in 0..s {
                let p = mdp.transitions[i][u][j];
                if p == 0.0 {
                    continue;
                }
                rhs[row] += mdp.gamma * p * alpha * entropy(&policy[j]);
                for v in 0..a {
                    m[(row, j * a + v)] -= mdp.gamma * p * policy[j][v];
                }
            }
        }
    }
    let q = m.lu().solve(&rhs).expect("I - gamma P Pi is nonsingular for gamma < 1");
    (0..s).map(|i| (0..a).map(|u| q[i * a + u]).collect()).collect()
}

/// `pi(a|s) proportional to exp(Q(s,a) / alpha)`.
pub fn soft_improvement(q: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    q.iter()
        .map(|row| {
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|x| ((x - top) / alpha).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpiTrace {
    /// Q of each iterate's policy, starting from the uniform policy.
    pub q: Vec<Vec<Vec<f64>>>,
    pub policies: Vec<Vec<Vec<f64>>>,
    pub converged: bool,
}

impl SpiTrace {
    /// Smallest `Q_{k+1}(s,a) - Q_k(s,a)` over all iterates.
    pub fn min_improvement(&self) -> f64 {
        self.q
            .windows(2)
            .flat_map(|w| {
                w[1].iter()
                    .flatten()
                    .zip(w[0].iter().flatten())
                    .map(|(b, a)| b - a)
                    .collect::<Vec<_>>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn final_q(&self) -> &[Vec<f64>] {
        self.q.last().expect("at least one iterate")
    }
}

/// Exact soft policy iteration from the uniform policy until successive Q
/// tables differ by less than `tol` (max norm) or `max_iter` is reached.
pub fn tabular_soft_policy_iteration(mdp: &TabularMdp, alpha: f64, max_iter: usize, tol: f64) -> Result<SpiTrace> {
    mdp.validate()?;
    if !(alpha > 0.0) {
        return Err(invalid("alpha must be positive"));
    }
    let a = mdp.n_actions();
    let mut pi = vec![vec![1.0 / a as f64; a]; mdp.n_states()];
    let mut trace = SpiTrace {
        q: vec![soft_policy_evaluation(mdp, &pi, alpha)],
        policies: vec![pi.clone()],
        converged: false,
    };
    for _ in 0..max_iter {
        pi = soft_improvement(trace.final_q(), alpha);
        let q = soft_policy_evaluation(mdp, &pi, alpha);
        let delta = q
            .iter()
            .flatten()
            .zip(trace.final_q().iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        trace.q.push(q);
        trace.policies.push(pi.clone());
        if delta < tol {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

/// Optimal (unregularized) Q by value iteration and its greedy policy.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    mdp.validate()?;
    let (s, a) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; s];
    loop {
        let q: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                (0..a)
                    .map(|u| {
                        mdp.reward[i][u]
                            + mdp.gamma * (0..s).map(|j| mdp.transitions[i][u][j] * v[j]).sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        let next: Vec<f64> = q.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let delta = next.iter().zip(&v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        v = next;
        if delta < tol {
            let greedy = q.iter().map(|r| argmax(r)).collect();
            return Ok((q, greedy));
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
