//! Brute-force checks of the connectivity, density and separation results
//! on small random point sets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::pointcloud::{dist, Point3};

/// Largest set size for which all k-subsets are enumerated.
pub const MAX_SET_SIZE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("a finite set needs at least 2 points, got {0}")]
    TooSmall(usize),
    #[error("need 2 <= k <= m <= {MAX_SET_SIZE}, got m = {m}, k = {k}")]
    Combinatorial { m: usize, k: usize },
    #[error("invalid annulus [{alpha}, {beta}] or eps {eps}")]
    Annulus { alpha: f64, beta: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteSet3 {
    points: Vec<Point3>,
}

impl FiniteSet3 {
    pub fn new(points: Vec<Point3>) -> Result<Self, VerifyError> {
        if points.len() < 2 {
            return Err(VerifyError::TooSmall(points.len()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distances over unordered pairs `i < j`.
    pub fn pairwise(&self) -> Vec<f64> {
        let n = self.points.len();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(dist(&self.points[i], &self.points[j]));
            }
        }
        out
    }

    fn subset(&self, idx: &[usize]) -> FiniteSet3 {
        FiniteSet3 {
            points: idx.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// `(α, β)`: smallest and largest pairwise distance.
pub fn connectivity_bounds(set: &FiniteSet3) -> (f64, f64) {
    set.pairwise()
        .into_iter()
        .fold((f64::INFINITY, 0.0), |(lo, hi), d| (lo.min(d), hi.max(d)))
}

/// Every point has at least `m` other points within `eps` (inclusive).
pub fn is_m_eps_dense(set: &FiniteSet3, m: usize, eps: f64) -> bool {
    let pts = set.points();
    if m >= pts.len() {
        return false;
    }
    pts.iter().enumerate().all(|(i, z)| {
        pts.iter()
            .enumerate()
            .filter(|&(j, y)| j != i && dist(z, y) <= eps)
            .count()
            >= m
    })
}

/// Every pair of distinct points is strictly farther apart than `eps`.
pub fn is_eps_separated(set: &FiniteSet3, eps: f64) -> bool {
    set.pairwise().into_iter().all(|d| d > eps)
}

fn separated_from(packing: &[Point3], p: &Point3, eps: f64) -> bool {
    packing.iter().all(|q| dist(p, q) > eps)
}

fn sample_annulus(rng: &mut ChaCha8Rng, alpha: f64, beta: f64) -> Point3 {
    let v: [f64; 3] = [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-300);
    let u: f64 = rng.gen_range(0.0..=1.0);
    let r = (alpha.powi(3) + u * (beta.powi(3) - alpha.powi(3))).cbrt();
    [v[0] / n * r, v[1] / n * r, v[2] / n * r]
}

/// Options for the greedy packing search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PackingSearch {
    pub trials: usize,
    pub candidates: usize,
    pub seed: u64,
    /// Stop as soon as a packing of this size is found.
    pub target: Option<usize>,
}

impl Default for PackingSearch {
    fn default() -> Self {
        Self {
            trials: 8,
            candidates: 2000,
            seed: 0,
            target: None,
        }
    }
}

/// Largest ε-separated subset of the annulus `{α ≤ ‖x‖ ≤ β}` found by greedy
/// insertion. The first pass tries the six axis points on both radii, later
/// passes random candidates in random order.
pub fn annulus_packing(alpha: f64, beta: f64, eps: f64, search: &PackingSearch) -> Result<Vec<Point3>, VerifyError> {
    if !(alpha >= 0.0 && alpha <= beta && beta > 0.0 && eps > 0.0 && beta.is_finite() && eps.is_finite()) {
        return Err(VerifyError::Annulus { alpha, beta, eps });
    }
    let mut axes = Vec::with_capacity(12);
    for r in [beta, alpha] {
        if r > 0.0 {
            for k in 0..3 {
                for s in [1.0, -1.0] {
                    let mut p = [0.0; 3];
                    p[k] = s * r;
                    axes.push(p);
                }
            }
        }
    }
    let reached = |p: &Vec<Point3>| search.target.is_some_and(|t| p.len() >= t);
    let mut best: Vec<Point3> = Vec::new();
    for p in axes {
        if separated_from(&best, &p, eps) {
            best.push(p);
        }
    }
    if reached(&best) {
        return Ok(best);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    for _ in 0..search.trials {
        let mut candidates: Vec<Point3> = (0..search.candidates).map(|_| sample_annulus(&mut rng, alpha, beta)).collect();
        candidates.shuffle(&mut rng);
        let mut packing = Vec::new();
        for p in candidates {
            if separated_from(&packing, &p, eps) {
                packing.push(p);
                if reached(&packing) {
                    return Ok(packing);
                }
            }
        }
        if packing.len() > best.len() {
            best = packing;
        }
    }
    Ok(best)
}

/// Certified lower bound on the ε-metric entropy of the annulus.
pub fn metric_entropy_lower_bound(alpha: f64, beta: f64, eps: f64, trials: usize, seed: u64) -> Result<usize, VerifyError> {
    let search = PackingSearch {
        trials,
        seed,
        ..PackingSearch::default()
    };
    Ok(annulus_packing(alpha, beta, eps, &search)?.len())
}

/// Volume bound: disjoint balls of radius ε/2 inside a ball of radius
/// β + ε/2.
pub fn metric_entropy_upper_bound(beta: f64, eps: f64) -> f64 {
    ((2.0 * beta + eps) / eps).powi(3).ceil()
}

fn check_mk(m: usize, k: usize) -> Result<(), VerifyError> {
    if 2 <= k && k <= m && m <= MAX_SET_SIZE {
        Ok(())
    } else {
        Err(VerifyError::Combinatorial { m, k })
    }
}

fn k_subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    rec(0, m, k, &mut cur, &mut out);
    out
}

/// Shared `(α, β)` under which every `k`-subset of `set` is connected:
/// the extremes of the subsets' own bounds.
pub fn shared_bounds(set: &FiniteSet3, k: usize) -> (f64, f64) {
    k_subsets(set.len(), k)
        .iter()
        .map(|idx| connectivity_bounds(&set.subset(idx)))
        .fold((f64::INFINITY, 0.0), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)))
}

fn uniform_cube_set(rng: &mut ChaCha8Rng, m: usize) -> FiniteSet3 {
    FiniteSet3 {
        points: (0..m)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect(),
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Theorem2Report {
    pub m: usize,
    pub k: usize,
    pub trials: usize,
    pub counterexamples: usize,
}

/// Draws `trials` sets of `m` points in the unit cube and checks that each
/// is `(m−k+1)∼β`-dense for the shared β of its `k`-subsets.
pub fn check_theorem2(m: usize, k: usize, trials: usize, seed: u64) -> Result<Theorem2Report, VerifyError> {
    check_mk(m, k)?;
    let mut counterexamples = 0;
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let set = uniform_cube_set(&mut rng, m);
        let (_, beta) = shared_bounds(&set, k);
        if !is_m_eps_dense(&set, m - k + 1, beta) {
            counterexamples += 1;
        }
    }
    Ok(Theorem2Report {
        m,
        k,
        trials,
        counterexamples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Theorem3Report {
    pub m: usize,
    pub k: usize,
    pub trials: usize,
    /// Premise certified false by a packing of size ≥ m−k+1.
    pub verified_vacuous: usize,
    /// Premise certified true by the volume bound and the set is not
    /// ε-separated.
    pub verified_conclusion: usize,
    pub undecided: usize,
    pub violations: usize,
}

impl Theorem3Report {
    pub fn verified(&self) -> usize {
        self.verified_vacuous + self.verified_conclusion
    }
}

/// `eps_of_beta` maps each trial's β to the ε under test.
pub fn check_theorem3(
    m: usize,
    k: usize,
    eps_of_beta: impl Fn(f64) -> f64,
    trials: usize,
    seed: u64,
) -> Result<Theorem3Report, VerifyError> {
    check_mk(m, k)?;
    let mut report = Theorem3Report {
        m,
        k,
        trials,
        verified_vacuous: 0,
        verified_conclusion: 0,
        undecided: 0,
        violations: 0,
    };
    let need = m - k + 1;
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let set = uniform_cube_set(&mut rng, m);
        let (alpha, beta) = shared_bounds(&set, k);
        let eps = eps_of_beta(beta);
        if (need as f64) > metric_entropy_upper_bound(beta, eps) {
            if is_eps_separated(&set, eps) {
                report.violations += 1;
            } else {
                report.verified_conclusion += 1;
            }
            continue;
        }
        let search = PackingSearch {
            trials: 4,
            candidates: 256,
            seed: rng.gen(),
            target: Some(need),
        };
        if annulus_packing(alpha, beta, eps, &search)?.len() >= need {
            report.verified_vacuous += 1;
        } else {
            report.undecided += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: Vec<Point3>) -> FiniteSet3 {
        FiniteSet3::new(points).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> FiniteSet3 {
        uniform_cube_set(rng, n)
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(connectivity_bounds(&set(vec![[0.0; 3], [1.0, 0.0, 0.0]])), (1.0, 1.0));
        let sq = set(vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let (a, b) = connectivity_bounds(&sq);
        assert_eq!(a, 1.0);
        assert!((b - 2f64.sqrt()).abs() < 1e-15);
        assert!(FiniteSet3::new(vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn predicates_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(2..=MAX_SET_SIZE);
            let s = random_set(&mut rng, n);
            let p = s.points();
            let mut lo = f64::INFINITY;
            let mut hi: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        lo = lo.min(dist(&p[i], &p[j]));
                        hi = hi.max(dist(&p[i], &p[j]));
                    }
                }
            }
            assert_eq!(connectivity_bounds(&s), (lo, hi));
            let eps = rng.gen_range(0.0..1.5);
            let m = rng.gen_range(1..n);
            let dense = (0..n).all(|i| (0..n).filter(|&j| j != i && dist(&p[i], &p[j]) <= eps).count() >= m);
            assert_eq!(is_m_eps_dense(&s, m, eps), dense);
            let separated = (0..n).all(|i| (0..n).all(|j| i == j || dist(&p[i], &p[j]) > eps));
            assert_eq!(is_eps_separated(&s, eps), separated);
            // Shared bounds over all k-subsets equal the global bounds.
            for k in 2..=n {
                assert_eq!(shared_bounds(&s, k), (lo, hi));
            }
        }
    }

    #[test]
    fn density_and_separation_examples() {
        let h = 3f64.sqrt() / 2.0;
        let tri = set(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.5, h, 0.0]]);
        assert!(is_m_eps_dense(&tri, 2, 1.0 + 1e-12));
        assert!(!is_m_eps_dense(&tri, 2, 0.99));
        let two = set(vec![[0.0; 3], [2.0, 0.0, 0.0]]);
        assert!(is_eps_separated(&two, 1.0));
        assert!(!is_eps_separated(&two, 2.0));
    }

    #[test]
    fn packing_bounds() {
        assert_eq!(metric_entropy_lower_bound(0.2, 0.5, 1.01, 4, 0).unwrap(), 1);
        let oct = annulus_packing(1.0, 1.0, 2f64.sqrt() - 1e-6, &PackingSearch::default()).unwrap();
        assert!(oct.len() >= 6);
        assert!(is_eps_separated(&set(oct), 2f64.sqrt() - 1e-6));
        let mut prev = usize::MAX;
        for eps in [0.2, 0.3, 0.5, 0.8, 1.2] {
            let p = annulus_packing(0.3, 1.0, eps, &PackingSearch { trials: 2, ..PackingSearch::default() }).unwrap();
            assert!(is_eps_separated(&set(p.clone()), eps));
            assert!(p.iter().all(|x| {
                let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
                (0.3 - 1e-12..=1.0 + 1e-12).contains(&r)
            }));
            assert!(p.len() <= prev);
            assert!((p.len() as f64) <= metric_entropy_upper_bound(1.0, eps));
            prev = p.len();
        }
        assert!(annulus_packing(0.5, 0.2, 0.1, &PackingSearch::default()).is_err());
    }

    #[test]
    fn theorem2_has_no_counterexamples() {
        for k in 2..=5 {
            assert_eq!(check_theorem2(5, k, 200, 3).unwrap().counterexamples, 0);
        }
        assert_eq!(check_theorem2(4, 4, 50, 0).unwrap().counterexamples, 0);
        assert!(check_theorem2(9, 3, 1, 0).is_err());
        assert!(check_theorem2(5, 1, 1, 0).is_err());
    }

    #[test]
    fn theorem3_large_eps_is_decided() {
        // ε far above the diameter: the volume bound certifies the premise
        // and no two points are ε-separated.
        let r = check_theorem3(4, 2, |beta| 100.0 * beta, 100, 1).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.verified_conclusion, 100);
        let r = check_theorem3(6, 2, |beta| beta / 10.0, 50, 2).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.verified_vacuous, 50);
    }
}
