//! Scoring candidate parts and choosing the subset that covers the cloud.
//!
//! Every part gets four raw cost components (registration, fit, length and
//! turning angle). Each is z-scored over the candidate set, and the overall
//! cost rewards length by subtracting its z-score. The subset is then chosen
//! by a binary program: minimize c.x subject to x.a >= k1 N / 100 (coverage)
//! and x.Q.x <= k2 N / 100 (pairwise overlap), solved exactly here by
//! branch-and-bound.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::crosssec::plane_cost;
use crate::error::{Error, Result};
use crate::grow::Part;

/// Raw and normalized costs of one candidate part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartCosts {
    pub part_id: usize,
    /// Mean registration cost of adjacent section pairs (degrees); `None`
    /// when the part has no registered pair.
    pub c_reg: Option<f64>,
    /// Mean plane cost over the sections, in [0, 1].
    pub c_fit: f64,
    /// Axis length in model units.
    pub c_len: f64,
    /// Mean turning angle at interior axis vertices (degrees).
    pub c_ang: f64,
    /// z-scores of (reg, fit, len, ang); zero until normalized.
    pub normalized: [f64; 4],
    /// z_reg + z_fit - z_len + z_ang.
    pub c_ovr: f64,
}

/// Turning angle (degrees) at each interior vertex of a polyline. A
/// zero-length segment contributes no turn.
pub fn turning_angles(axis: &[crate::cloud::Vec3]) -> Vec<f64> {
    axis.windows(3)
        .map(|w| {
            let (u, v) = (w[1] - w[0], w[2] - w[1]);
            if u.norm() == 0.0 || v.norm() == 0.0 {
                0.0
            } else {
                u.angle(&v).to_degrees()
            }
        })
        .collect()
}

pub fn part_costs(part: &Part, cloud: &PointCloud) -> Result<PartCosts> {
    if part.is_empty() {
        return Err(Error::EmptyInput(format!("part {} has no sections", part.id)));
    }
    let c_reg = if part.per_pair_registration_cost.is_empty() {
        None
    } else {
        Some(mean(&part.per_pair_registration_cost))
    };
    let fits = part
        .sections
        .iter()
        .map(|s| plane_cost(cloud, &s.member_indices, &s.plane.normal))
        .collect::<Result<Vec<f64>>>()?;
    let turns = turning_angles(&part.axis);
    Ok(PartCosts {
        part_id: part.id,
        c_reg,
        c_fit: mean(&fits),
        c_len: part.axis_length(),
        c_ang: if turns.is_empty() { 0.0 } else { mean(&turns) },
        normalized: [0.0; 4],
        c_ovr: 0.0,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population z-scores of `values`, using only entries flagged in
/// `in_stats` for the mean and deviation. Zero variance gives zeros.
fn z_scores(values: &[f64], in_stats: &[bool]) -> Vec<f64> {
    let sample: Vec<f64> = values.iter().zip(in_stats).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
    if sample.is_empty() {
        return vec![0.0; values.len()];
    }
    let mu = mean(&sample);
    let var = sample.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / sample.len() as f64;
    let sd = var.sqrt();
    // Relative guard: a spread at rounding level is no spread.
    if sd <= 1e-12 * mu.abs().max(1e-300) || sd == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mu) / sd).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct NormalizeConfig {
    /// Whether parts without a registration cost take part in the mean and
    /// deviation of every component, or are only scored against the others.
    pub include_unregistered_in_stats: bool,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            include_unregistered_in_stats: true,
        }
    }
}

pub fn normalize_costs(all: &[PartCosts]) -> Result<Vec<PartCosts>> {
    normalize_costs_with(all, &NormalizeConfig::default())
}

/// Z-scores every component and composes the overall cost. Parts without a
/// registration cost are charged the worst registration cost observed.
pub fn normalize_costs_with(all: &[PartCosts], cfg: &NormalizeConfig) -> Result<Vec<PartCosts>> {
    if all.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalizing needs at least 2 parts, got {}",
            all.len()
        )));
    }
    let worst = all.iter().filter_map(|c| c.c_reg).fold(f64::NEG_INFINITY, f64::max);
    let worst = if worst.is_finite() { worst } else { 0.0 };
    let in_stats: Vec<bool> = all.iter().map(|c| cfg.include_unregistered_in_stats || c.c_reg.is_some()).collect();
    let columns: [Vec<f64>; 4] = [
        all.iter().map(|c| c.c_reg.unwrap_or(worst)).collect(),
        all.iter().map(|c| c.c_fit).collect(),
        all.iter().map(|c| c.c_len).collect(),
        all.iter().map(|c| c.c_ang).collect(),
    ];
    let z: Vec<Vec<f64>> = columns.iter().map(|col| z_scores(col, &in_stats)).collect();
    Ok(all
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let normalized = [z[0][i], z[1][i], z[2][i], z[3][i]];
            PartCosts {
                normalized,
                c_ovr: normalized[0] + normalized[1] - normalized[2] + normalized[3],
                ..c.clone()
            }
        })
        .collect())
}

/// The binary program over M candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProblem {
    pub costs: Vec<f64>,
    /// Points covered by each candidate.
    pub coverage: Vec<u64>,
    /// Shared point counts, upper triangle only: overlap[i][j - i - 1] for i < j.
    overlap: Vec<Vec<u64>>,
    pub n_points: u64,
    /// Required coverage in percent of the cloud.
    pub k1: f64,
    /// Allowed pairwise overlap in percent of the cloud.
    pub k2: f64,
}

impl SelectionProblem {
    /// `overlap(i, j)` for i != j; the full symmetric matrix is given as
    /// rows and only its upper triangle is kept.
    pub fn new(costs: Vec<f64>, coverage: Vec<u64>, overlap: &[Vec<u64>], n_points: u64, k1: f64, k2: f64) -> Result<Self> {
        let m = costs.len();
        if coverage.len() != m || overlap.len() != m || overlap.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidArgument(format!(
                "selection problem of size {m} has mismatched coverage or overlap"
            )));
        }
        if let Some(i) = coverage.iter().position(|&a| a == 0) {
            return Err(Error::InvalidArgument(format!("candidate {i} covers no points")));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("part costs must be finite".into()));
        }
        for (name, k) in [("k1", k1), ("k2", k2)] {
            if !(0.0..=100.0).contains(&k) {
                return Err(Error::InvalidArgument(format!("{name} = {k} is not a percentage")));
            }
        }
        let upper = (0..m).map(|i| overlap[i][i + 1..].to_vec()).collect();
        Ok(Self {
            costs,
            coverage,
            overlap: upper,
            n_points,
            k1,
            k2,
        })
    }

    /// Builds the program from parts' member sets (each sorted) and costs.
    pub fn from_parts(parts: &[Part], costs: &[f64], n_points: usize, k1: f64, k2: f64) -> Result<Self> {
        let m = parts.len();
        let mut q = vec![vec![0u64; m]; m];
        for i in 0..m {
            for j in i + 1..m {
                let shared = sorted_intersection_len(&parts[i].member_set, &parts[j].member_set) as u64;
                q[i][j] = shared;
                q[j][i] = shared;
            }
        }
        let a = parts.iter().map(|p| p.member_set.len() as u64).collect();
        Self::new(costs.to_vec(), a, &q, n_points as u64, k1, k2)
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    /// q_ij for i < j; zero on and below the diagonal.
    pub fn q(&self, i: usize, j: usize) -> u64 {
        if i < j {
            self.overlap[i][j - i - 1]
        } else {
            0
        }
    }

    fn pair(&self, i: usize, j: usize) -> u64 {
        if i < j {
            self.q(i, j)
        } else {
            self.q(j, i)
        }
    }

    pub fn required_coverage(&self) -> f64 {
        self.k1 / 100.0 * self.n_points as f64
    }

    pub fn overlap_budget(&self) -> f64 {
        self.k2 / 100.0 * self.n_points as f64
    }

    /// (c.x, x.a, x.Q.x) for a selection vector.
    pub fn evaluate(&self, x: &[bool]) -> (f64, u64, u64) {
        let chosen: Vec<usize> = (0..self.len()).filter(|&i| x[i]).collect();
        let cost = chosen.iter().map(|&i| self.costs[i]).sum();
        let cov = chosen.iter().map(|&i| self.coverage[i]).sum();
        let mut ov = 0;
        for (k, &i) in chosen.iter().enumerate() {
            for &j in &chosen[k + 1..] {
                ov += self.q(i, j);
            }
        }
        (cost, cov, ov)
    }

    pub fn is_feasible(&self, x: &[bool]) -> bool {
        let (_, cov, ov) = self.evaluate(x);
        meets(cov as f64, self.required_coverage()) && ov as f64 <= self.overlap_budget() + TOL
    }
}

const TOL: f64 = 1e-9;

fn meets(value: f64, required: f64) -> bool {
    value + TOL >= required
}

pub fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub chosen: Vec<bool>,
    pub objective: f64,
    /// x.a: covered points counted once per selected part.
    pub covered_points: u64,
    /// x.Q.x: pairwise shared points among selected parts.
    pub overlap_points: u64,
    pub feasible: bool,
    /// Search nodes visited (diagnostic).
    pub nodes: u64,
}

impl Selection {
    fn infeasible(m: usize, nodes: u64) -> Self {
        Self {
            chosen: vec![false; m],
            objective: 0.0,
            covered_points: 0,
            overlap_points: 0,
            feasible: false,
            nodes,
        }
    }

    fn from_vector(problem: &SelectionProblem, chosen: Vec<bool>, nodes: u64) -> Self {
        let (objective, covered_points, overlap_points) = problem.evaluate(&chosen);
        Self {
            chosen,
            objective,
            covered_points,
            overlap_points,
            feasible: true,
            nodes,
        }
    }

    pub fn chosen_indices(&self) -> Vec<usize> {
        (0..self.chosen.len()).filter(|&i| self.chosen[i]).collect()
    }
}

struct Search<'p> {
    p: &'p SelectionProblem,
    /// Candidates in branching order: ascending cost per covered point.
    order: Vec<usize>,
    required: f64,
    budget: f64,
    /// Overlap each candidate would add given the current partial choice.
    added: Vec<u64>,
    chosen: Vec<bool>,
    best: Option<(f64, Vec<bool>)>,
    nodes: u64,
}

impl Search<'_> {
    fn compatible(&self, j: usize, overlap: u64) -> bool {
        (overlap + self.added[j]) as f64 <= self.budget + TOL
    }

    /// Lower bound on the cost of any completion: every remaining negative
    /// cost is collected, then the outstanding coverage is bought at the
    /// cheapest rates, fractionally. None when coverage cannot be reached.
    fn bound(&self, depth: usize, cost: f64, cov: u64, overlap: u64) -> Option<f64> {
        let mut lb = cost;
        let mut need = self.required - cov as f64;
        let mut reachable = cov as f64;
        for &j in &self.order[depth..] {
            if self.compatible(j, overlap) {
                reachable += self.p.coverage[j] as f64;
            }
        }
        if !meets(reachable, self.required) {
            return None;
        }
        for &j in &self.order[depth..] {
            if !self.compatible(j, overlap) {
                continue;
            }
            let (c, a) = (self.p.costs[j], self.p.coverage[j] as f64);
            if c < 0.0 {
                lb += c;
                need -= a;
            } else if need > TOL {
                let take = need.min(a);
                lb += c * take / a;
                need -= take;
            }
        }
        Some(lb)
    }

    fn dfs(&mut self, depth: usize, cost: f64, cov: u64, overlap: u64) {
        self.nodes += 1;
        let Some(lb) = self.bound(depth, cost, cov, overlap) else {
            return;
        };
        if let Some((best, _)) = &self.best {
            if lb >= *best - TOL {
                return;
            }
        }
        if depth == self.order.len() {
            // The bound is exact at a leaf and coverage was checked by it.
            self.best = Some((cost, self.chosen.clone()));
            return;
        }
        let i = self.order[depth];
        if self.compatible(i, overlap) {
            let new_overlap = overlap + self.added[i];
            self.chosen[i] = true;
            for &j in &self.order[depth + 1..] {
                self.added[j] += self.p.pair(i, j);
            }
            self.dfs(depth + 1, cost + self.p.costs[i], cov + self.p.coverage[i], new_overlap);
            for &j in &self.order[depth + 1..] {
                self.added[j] -= self.p.pair(i, j);
            }
            self.chosen[i] = false;
        }
        self.dfs(depth + 1, cost, cov, overlap);
    }
}

/// Optimal selection by depth-first branch-and-bound. The coverage and cost
/// bounds ignore overlap between the remaining candidates, so they are valid
/// relaxations and the returned vector is a global optimum.
pub fn solve_selection(problem: &SelectionProblem) -> Selection {
    let m = problem.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let ra = problem.costs[a] / problem.coverage[a] as f64;
        let rb = problem.costs[b] / problem.coverage[b] as f64;
        ra.total_cmp(&rb).then(a.cmp(&b))
    });
    let mut search = Search {
        p: problem,
        order,
        required: problem.required_coverage(),
        budget: problem.overlap_budget(),
        added: vec![0; m],
        chosen: vec![false; m],
        best: None,
        nodes: 0,
    };
    search.dfs(0, 0.0, 0, 0);
    match search.best {
        Some((_, x)) => Selection::from_vector(problem, x, search.nodes),
        None => Selection::infeasible(m, search.nodes),
    }
}

/// Enumerates all 2^M selections; the lowest objective wins, ties going to
/// the lexicographically smallest mask. For M <= 25 only.
pub fn solve_exhaustive(problem: &SelectionProblem) -> Result<Selection> {
    let m = problem.len();
    if m > 25 {
        return Err(Error::InvalidArgument(format!("exhaustive search over {m} candidates")));
    }
    let mut best: Option<(f64, u64)> = None;
    for mask in 0..(1u64 << m) {
        let x: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
        if !problem.is_feasible(&x) {
            continue;
        }
        let (cost, _, _) = problem.evaluate(&x);
        if best.is_none_or(|(b, _)| cost < b - TOL) {
            best = Some((cost, mask));
        }
    }
    Ok(match best {
        Some((_, mask)) => Selection::from_vector(problem, (0..m).map(|i| mask >> i & 1 == 1).collect(), 1u64 << m),
        None => Selection::infeasible(m, 1u64 << m),
    })
}

/// Largest x.a reachable within the overlap budget, by branch-and-bound.
pub fn max_coverage(problem: &SelectionProblem) -> u64 {
    let m = problem.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| problem.coverage[b].cmp(&problem.coverage[a]).then(a.cmp(&b)));
    let budget = problem.overlap_budget();
    let mut added = vec![0u64; m];
    let mut best = 0u64;

    fn dfs(p: &SelectionProblem, order: &[usize], depth: usize, cov: u64, overlap: u64, budget: f64, added: &mut [u64], best: &mut u64) {
        *best = (*best).max(cov);
        let fits = |j: usize, added: &[u64]| (overlap + added[j]) as f64 <= budget + TOL;
        let reachable: u64 = cov
            + order[depth..]
                .iter()
                .filter(|&&j| fits(j, added))
                .map(|&j| p.coverage[j])
                .sum::<u64>();
        if depth == order.len() || reachable <= *best {
            return;
        }
        let i = order[depth];
        if fits(i, added) {
            let new_overlap = overlap + added[i];
            for &j in &order[depth + 1..] {
                added[j] += p.pair(i, j);
            }
            dfs(p, order, depth + 1, cov + p.coverage[i], new_overlap, budget, added, best);
            for &j in &order[depth + 1..] {
                added[j] -= p.pair(i, j);
            }
        }
        dfs(p, order, depth + 1, cov, overlap, budget, added, best);
    }

    dfs(problem, &order, 0, 0, 0, budget, &mut added, &mut best);
    best
}

/// The largest whole-percent k1 for which the program is feasible under the
/// problem's k2. Feasibility is monotone in k1, so this equals probing the
/// 1% grid up or down from any start.
pub fn max_feasible_k1(problem: &SelectionProblem) -> Result<u32> {
    if problem.n_points == 0 {
        return Err(Error::EmptyInput("selection over an empty cloud".into()));
    }
    let cov = max_coverage(problem);
    // Largest k with k N / 100 <= cov, in integers.
    let k = (100 * cov / problem.n_points).min(100);
    Ok(k as u32)
}
