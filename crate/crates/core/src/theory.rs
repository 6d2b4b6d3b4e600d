//! Brute-force entropy checks of the description-usefulness bound over
//! small discrete joints of (X, H_l, θ, y).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Tolerance for every asserted relation, in bits.
pub const TOLERANCE: f64 = 1e-9;
/// Entropies at or below this are treated as exactly zero.
pub const ZERO_BITS: f64 = 1e-12;
pub const MIN_ALPHABET: usize = 2;
pub const MAX_ALPHABET: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("alphabet size {0} outside [2, 6]")]
    BadAlphabet(usize),
    #[error("pmf has {got} entries, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("pmf entry {0} is negative or not finite")]
    NegativeMass(f64),
    #[error("pmf sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("target and conditioning sets must be disjoint and the target nonempty")]
    InvalidVariableSubset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Var {
    X = 0,
    Hl = 1,
    Theta = 2,
    Y = 3,
}

impl Var {
    pub const ALL: [Var; 4] = [Var::X, Var::Hl, Var::Theta, Var::Y];
}

/// A joint pmf over (X, H_l, θ, y), row-major with X outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    alphabets: [usize; 4],
    pmf: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(alphabets: [usize; 4], pmf: Vec<f64>) -> Result<Self, TheoryError> {
        if let Some(&a) = alphabets
            .iter()
            .find(|a| !(MIN_ALPHABET..=MAX_ALPHABET).contains(*a))
        {
            return Err(TheoryError::BadAlphabet(a));
        }
        let expected = alphabets.iter().product();
        if pmf.len() != expected {
            return Err(TheoryError::WrongLength {
                expected,
                got: pmf.len(),
            });
        }
        if let Some(&p) = pmf.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(TheoryError::NegativeMass(p));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TheoryError::NotNormalized(total));
        }
        Ok(Self { alphabets, pmf })
    }

    /// Builds a joint from unnormalized nonnegative weights.
    pub fn from_weights(alphabets: [usize; 4], mut weights: Vec<f64>) -> Result<Self, TheoryError> {
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Self::new(alphabets, weights)
    }

    /// Uniformly random point of the simplex with random alphabet sizes.
    pub fn random(rng: &mut impl Rng) -> Self {
        let alphabets = [0; 4].map(|_| rng.gen_range(MIN_ALPHABET..=MAX_ALPHABET));
        let n: usize = alphabets.iter().product();
        // Exponential draws normalize to a flat Dirichlet sample.
        let weights = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        Self::from_weights(alphabets, weights).expect("random weights are valid")
    }

    pub fn alphabets(&self) -> [usize; 4] {
        self.alphabets
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn size(&self, v: Var) -> usize {
        self.alphabets[v as usize]
    }

    /// Decodes a flat index into the four coordinates.
    pub fn coords(&self, mut idx: usize) -> [usize; 4] {
        let mut c = [0; 4];
        for v in (0..4).rev() {
            c[v] = idx % self.alphabets[v];
            idx /= self.alphabets[v];
        }
        c
    }

    fn marginal(&self, vars: &[Var]) -> Vec<f64> {
        let mut out = vec![0.0; vars.iter().map(|&v| self.size(v)).product()];
        for (i, &p) in self.pmf.iter().enumerate() {
            out[self.sub_index(&self.coords(i), vars)] += p;
        }
        out
    }

    fn sub_index(&self, c: &[usize; 4], vars: &[Var]) -> usize {
        vars.iter()
            .fold(0, |acc, &v| acc * self.size(v) + c[v as usize])
    }

    /// H(target | given) in bits; plain entropy when `given` is empty.
    pub fn conditional_entropy(&self, target: &[Var], given: &[Var]) -> Result<f64, TheoryError> {
        if target.is_empty() || target.iter().any(|t| given.contains(t)) {
            return Err(TheoryError::InvalidVariableSubset);
        }
        let joint_vars: Vec<Var> = given.iter().chain(target).copied().collect();
        let p_tg = self.marginal(&joint_vars);
        let p_g = self.marginal(given);
        let target_size: usize = target.iter().map(|&v| self.size(v)).product();
        let h: f64 = p_tg
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| p * (p_g[i / target_size] / p).log2())
            .sum();
        Ok(h.max(0.0))
    }

    fn h(&self, target: &[Var], given: &[Var]) -> f64 {
        self.conditional_entropy(target, given)
            .expect("fixed variable sets are valid")
    }

    /// I(a; b | c) from its defining sum of p log p(a,b|c) / (p(a|c) p(b|c)).
    pub fn conditional_mutual_information(&self, a: Var, b: Var, c: &[Var]) -> f64 {
        let abc: Vec<Var> = c.iter().copied().chain([a, b]).collect();
        let ac: Vec<Var> = c.iter().copied().chain([a]).collect();
        let bc: Vec<Var> = c.iter().copied().chain([b]).collect();
        let (p_abc, p_ac, p_bc, p_c) = (
            self.marginal(&abc),
            self.marginal(&ac),
            self.marginal(&bc),
            self.marginal(c),
        );
        // Visit each (a, b, c) cell once: at its first flat index.
        let rest: Vec<Var> = Var::ALL
            .iter()
            .copied()
            .filter(|v| !abc.contains(v))
            .collect();
        let mut total = 0.0;
        for i in 0..self.pmf.len() {
            let co = self.coords(i);
            if rest.iter().any(|&v| co[v as usize] != 0) {
                continue;
            }
            let p = p_abc[self.sub_index(&co, &abc)];
            if p > 0.0 {
                let num = p * p_c[self.sub_index(&co, c)];
                let den = p_ac[self.sub_index(&co, &ac)] * p_bc[self.sub_index(&co, &bc)];
                total += p * (num / den).log2();
            }
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainReport {
    /// |H(y|X,θ) − H(y|X,H_l,θ) − I(y;H_l|X,θ)|
    pub decomposition_gap: f64,
    /// I(y;H_l|X,θ) − H(H_l|X,θ); must be ≤ 0.
    pub mi_excess: f64,
    /// H(y|X,θ) − H(y|X,H_l) − H(H_l|θ); must be ≤ 0.
    pub bound_excess: f64,
    pub decomposition_ok: bool,
    pub mi_bound_ok: bool,
    pub entropy_bound_ok: bool,
}

impl ChainReport {
    pub fn all_ok(&self) -> bool {
        self.decomposition_ok && self.mi_bound_ok && self.entropy_bound_ok
    }

    /// Largest violation of the three relations (≤ 0 when all hold exactly).
    pub fn max_violation(&self) -> f64 {
        self.decomposition_gap
            .max(self.mi_excess)
            .max(self.bound_excess)
    }
}

pub fn verify_chain(j: &DiscreteJoint) -> ChainReport {
    use Var::*;
    let h_y_xt = j.h(&[Y], &[X, Theta]);
    let h_y_xht = j.h(&[Y], &[X, Hl, Theta]);
    let mi = j.conditional_mutual_information(Y, Hl, &[X, Theta]);
    let h_h_xt = j.h(&[Hl], &[X, Theta]);
    let h_y_xh = j.h(&[Y], &[X, Hl]);
    let h_h_t = j.h(&[Hl], &[Theta]);
    let decomposition_gap = (h_y_xt - h_y_xht - mi).abs();
    let mi_excess = mi - h_h_xt;
    let bound_excess = h_y_xt - h_y_xh - h_h_t;
    ChainReport {
        decomposition_gap,
        mi_excess,
        bound_excess,
        decomposition_ok: decomposition_gap <= TOLERANCE,
        mi_bound_ok: mi_excess <= TOLERANCE,
        entropy_bound_ok: bound_excess <= TOLERANCE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    /// H(H_l|θ)
    pub epsilon: f64,
    /// H(y|X) − H(y|X,H_l)
    pub epsilon_prime: f64,
    /// H(y|X,θ)
    pub lhs: f64,
    /// H(y|X)
    pub rhs: f64,
    pub conditions_met: bool,
    /// Evaluated only when the conditions are met.
    pub conclusion_holds: Option<bool>,
    /// ε is zero while ε′ > 0: the conclusion still follows, but the
    /// hypothesis ε > 0 is not met.
    pub zero_epsilon_edge: bool,
}

pub fn verify_theorem1(j: &DiscreteJoint) -> TheoremReport {
    use Var::*;
    let epsilon = j.h(&[Hl], &[Theta]);
    let rhs = j.h(&[Y], &[X]);
    let epsilon_prime = rhs - j.h(&[Y], &[X, Hl]);
    let lhs = j.h(&[Y], &[X, Theta]);
    let eps_positive = epsilon > ZERO_BITS;
    let conditions_met = eps_positive && epsilon_prime > epsilon;
    let conclusion_holds =
        conditions_met.then_some(lhs < rhs && lhs <= rhs + epsilon - epsilon_prime + TOLERANCE);
    TheoremReport {
        epsilon,
        epsilon_prime,
        lhs,
        rhs,
        conditions_met,
        conclusion_holds,
        zero_epsilon_edge: !eps_positive && epsilon_prime > ZERO_BITS,
    }
}

/// Builds a joint meeting the hypotheses by channel composition: a latent
/// L drives y, X is a coarse noisy view of L, H_l = L, and θ is H_l sent
/// through a symmetric channel with error δ. δ is halved until ε′ > ε.
pub fn constructive_joint(rng: &mut impl Rng) -> DiscreteJoint {
    let m = rng.gen_range(4..=MAX_ALPHABET);
    let nx = rng.gen_range(MIN_ALPHABET..=3);
    let ny = rng.gen_range(MIN_ALPHABET..=MAX_ALPHABET.min(m));
    let p_l: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.0)).collect();
    let coarse: Vec<usize> = (0..m).map(|l| l * nx / m).collect();
    // Surjective label map so y depends on L and is not constant.
    let g: Vec<usize> = (0..m)
        .map(|l| if l < ny { l } else { rng.gen_range(0..ny) })
        .collect();
    let eta = rng.gen_range(0.05..0.3);
    let mut delta = rng.gen_range(0.05..0.4);
    loop {
        let joint = compose(m, nx, ny, &p_l, &coarse, &g, eta, delta);
        let r = verify_theorem1(&joint);
        if r.conditions_met || delta < 1e-9 {
            return joint;
        }
        delta /= 2.0;
    }
}

#[allow(clippy::too_many_arguments)]
fn compose(
    m: usize,
    nx: usize,
    ny: usize,
    p_l: &[f64],
    coarse: &[usize],
    g: &[usize],
    eta: f64,
    delta: f64,
) -> DiscreteJoint {
    let alphabets = [nx, m, m, ny];
    let mut w = vec![0.0; nx * m * m * ny];
    for l in 0..m {
        for x in 0..nx {
            let px = if x == coarse[l] { 1.0 - eta } else { 0.0 } + eta / nx as f64;
            for t in 0..m {
                let pt = if t == l {
                    1.0 - delta
                } else {
                    delta / (m - 1) as f64
                };
                let y = g[l];
                w[((x * m + l) * m + t) * ny + y] += p_l[l] * px * pt;
            }
        }
    }
    DiscreteJoint::from_weights(alphabets, w).expect("composed weights are valid")
}

/// Joint with θ an exact copy of H_l.
pub fn copy_joint(rng: &mut impl Rng) -> DiscreteJoint {
    let base = DiscreteJoint::random(rng);
    let [nx, nh, _, ny] = base.alphabets();
    let mut w = vec![0.0; nx * nh * nh * ny];
    for (i, &p) in base.pmf().iter().enumerate() {
        let [x, h, _, y] = base.coords(i);
        w[((x * nh + h) * nh + h) * ny + y] += p;
    }
    DiscreteJoint::from_weights([nx, nh, nh, ny], w).expect("copied weights are valid")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub trials: usize,
    pub seed: u64,
    pub max_chain_violation: f64,
    pub chain_failures: usize,
    pub constructed_conditions_met: usize,
    pub conclusion_failures: usize,
    pub random_conditions_met: usize,
    pub zero_epsilon_edges: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.chain_failures == 0 && self.conclusion_failures == 0
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("trials", self.trials.to_string()),
            ("seed", self.seed.to_string()),
            (
                "max chain violation (bits)",
                format!("{:.3e}", self.max_chain_violation),
            ),
            ("chain failures", self.chain_failures.to_string()),
            (
                "constructed joints meeting hypotheses",
                self.constructed_conditions_met.to_string(),
            ),
            (
                "random joints meeting hypotheses",
                self.random_conditions_met.to_string(),
            ),
            ("conclusion failures", self.conclusion_failures.to_string()),
            (
                "zero-epsilon edge cases flagged",
                self.zero_epsilon_edges.to_string(),
            ),
            (
                "result",
                if self.passed() { "PASS" } else { "FAIL" }.to_string(),
            ),
        ];
        rows.iter().map(|(k, v)| format!("{k:<40} {v}\n")).collect()
    }
}

/// Per trial: one random joint, one constructed joint and one copy joint,
/// each checked against the chain and the theorem.
pub fn run_suite(trials: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        trials,
        seed,
        max_chain_violation: f64::NEG_INFINITY,
        chain_failures: 0,
        constructed_conditions_met: 0,
        conclusion_failures: 0,
        random_conditions_met: 0,
        zero_epsilon_edges: 0,
    };
    for _ in 0..trials {
        let joints = [
            DiscreteJoint::random(&mut rng),
            constructive_joint(&mut rng),
            copy_joint(&mut rng),
        ];
        for (kind, j) in joints.iter().enumerate() {
            let chain = verify_chain(j);
            report.max_chain_violation = report.max_chain_violation.max(chain.max_violation());
            report.chain_failures += usize::from(!chain.all_ok());
            let t = verify_theorem1(j);
            if t.conclusion_holds == Some(false) {
                report.conclusion_failures += 1;
            }
            report.zero_epsilon_edges += usize::from(t.zero_epsilon_edge);
            match kind {
                0 => report.random_conditions_met += usize::from(t.conditions_met),
                1 => report.constructed_conditions_met += usize::from(t.conditions_met),
                _ => {}
            }
        }
    }
    report
}
