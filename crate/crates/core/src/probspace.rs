//! Finite probability spaces, filtrations and adapted processes.
//!
//! A [`ScenarioTree`] stores the atoms of Ω with their probabilities and,
//! for every time in `[start, end]`, a partition of the atoms. The chain of
//! partitions refines forward in time; conditional expectation with respect
//! to time `t` is cellwise averaging over `partitions[t]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Total-mass tolerance for probabilities and noise weights.
pub const MASS_TOL: f64 = 1e-12;

/// Within-cell spread below which a process counts as measurable.
pub const MEASURABILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("stage {stage} has no noise samples")]
    EmptyStage { stage: usize },
    #[error("stage {stage} weights sum to {sum}, expected 1")]
    WeightsNotNormalized { stage: usize, sum: f64 },
    #[error("stage {stage} has a non-positive weight {weight}")]
    NonPositiveWeight { stage: usize, weight: f64 },
    #[error("noise samples at stage {stage} have inconsistent dimensions")]
    NoiseDimension { stage: usize },
    #[error("atom probabilities must be positive and sum to 1 (sum {sum})")]
    BadProbabilities { sum: f64 },
    #[error("partition at time {t} is not a partition of the atoms")]
    NotAPartition { t: usize },
    #[error("partition at time {t} does not refine the partition at time {prev}")]
    NotRefining { t: usize, prev: usize },
    #[error("time {t} outside the tree range [{start}, {end}]")]
    TimeOutOfRange { t: usize, start: usize, end: usize },
    #[error("tree needs end > start (got start {start}, end {end})")]
    EmptyHorizon { start: usize, end: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// One sample of a finite noise distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSample {
    pub value: Vec<f64>,
    pub prob: f64,
}

impl NoiseSample {
    pub fn new(value: Vec<f64>, prob: f64) -> Self {
        Self { value, prob }
    }
}

/// Realized noise per atom, when the tree was built from noise samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseValues {
    /// Initial information (the value observed before `start`), per atom.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<Vec<f64>>>,
    /// `stages[k][atom]` is the noise realized at time `start + k`, which
    /// becomes known at time `start + k + 1`.
    pub stages: Vec<Vec<Vec<f64>>>,
}

/// A finite filtered probability space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct ScenarioTree {
    probs: Vec<f64>,
    start: usize,
    end: usize,
    partitions: Vec<Vec<Vec<usize>>>,
    cell_of: Vec<Vec<usize>>,
    noise: Option<NoiseValues>,
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    probs: Vec<f64>,
    start: usize,
    partitions: Vec<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise: Option<NoiseValues>,
}

impl TryFrom<TreeRepr> for ScenarioTree {
    type Error = TreeError;
    fn try_from(r: TreeRepr) -> Result<Self, TreeError> {
        let mut tree = ScenarioTree::new(r.probs, r.start, r.partitions)?;
        if let Some(noise) = r.noise {
            tree = tree.with_noise(noise)?;
        }
        Ok(tree)
    }
}

impl From<ScenarioTree> for TreeRepr {
    fn from(t: ScenarioTree) -> Self {
        TreeRepr { probs: t.probs, start: t.start, partitions: t.partitions, noise: t.noise }
    }
}

impl ScenarioTree {
    /// Builds a tree from atom probabilities and one partition per time
    /// `start, start+1, …`. Partitions are canonicalized (cells sorted by
    /// their smallest atom, atoms sorted within cells).
    pub fn new(probs: Vec<f64>, start: usize, partitions: Vec<Vec<Vec<usize>>>) -> Result<Self, TreeError> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p > 0.0) || !p.is_finite()) || (sum - 1.0).abs() > MASS_TOL {
            return Err(TreeError::BadProbabilities { sum });
        }
        if partitions.len() < 2 {
            return Err(TreeError::EmptyHorizon { start, end: start + partitions.len().saturating_sub(1) });
        }
        let atoms = probs.len();
        let mut canon = Vec::with_capacity(partitions.len());
        let mut cell_of = Vec::with_capacity(partitions.len());
        for (k, part) in partitions.into_iter().enumerate() {
            let t = start + k;
            let mut owner = vec![usize::MAX; atoms];
            let mut cells: Vec<Vec<usize>> = part
                .into_iter()
                .map(|mut c| {
                    c.sort_unstable();
                    c
                })
                .collect();
            if cells.iter().any(|c| c.is_empty()) {
                return Err(TreeError::NotAPartition { t });
            }
            cells.sort_by_key(|c| c[0]);
            for (ci, cell) in cells.iter().enumerate() {
                for &a in cell {
                    if a >= atoms || owner[a] != usize::MAX {
                        return Err(TreeError::NotAPartition { t });
                    }
                    owner[a] = ci;
                }
            }
            if owner.iter().any(|&o| o == usize::MAX) {
                return Err(TreeError::NotAPartition { t });
            }
            canon.push(cells);
            cell_of.push(owner);
        }
        let tree = ScenarioTree { probs, start, end: start + canon.len() - 1, partitions: canon, cell_of, noise: None };
        tree.check_refinement()?;
        Ok(tree)
    }

    /// Single-atom tree on `[start, end]`.
    pub fn deterministic(start: usize, end: usize) -> Self {
        let parts = vec![vec![vec![0]]; end - start + 1];
        ScenarioTree::new(vec![1.0], start, parts).expect("valid deterministic tree")
    }

    fn with_noise(mut self, noise: NoiseValues) -> Result<Self, TreeError> {
        if noise.stages.len() != self.end - self.start {
            return Err(TreeError::Shape(format!(
                "noise has {} stages, tree has {}",
                noise.stages.len(),
                self.end - self.start
            )));
        }
        let atoms = self.atoms();
        let per_atom_ok = |v: &Vec<Vec<f64>>| v.len() == atoms;
        if !noise.stages.iter().all(per_atom_ok) || !noise.initial.as_ref().map_or(true, per_atom_ok) {
            return Err(TreeError::Shape("noise values must be given for every atom".into()));
        }
        self.noise = Some(noise);
        Ok(self)
    }

    /// Verifies that every partition refines its predecessor.
    pub fn check_refinement(&self) -> Result<(), TreeError> {
        for k in 1..self.partitions.len() {
            for cell in &self.partitions[k] {
                let parent = self.cell_of[k - 1][cell[0]];
                if cell.iter().any(|&a| self.cell_of[k - 1][a] != parent) {
                    return Err(TreeError::NotRefining { t: self.start + k, prev: self.start + k - 1 });
                }
            }
        }
        Ok(())
    }

    pub fn atoms(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, atom: usize) -> f64 {
        self.probs[atom]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn noise(&self) -> Option<&NoiseValues> {
        self.noise.as_ref()
    }

    /// Noise realized at time `t` (known from `t + 1` on) for `atom`.
    pub fn noise_at(&self, t: usize, atom: usize) -> Option<&[f64]> {
        let noise = self.noise.as_ref()?;
        let k = t.checked_sub(self.start)?;
        noise.stages.get(k).map(|s| s[atom].as_slice())
    }

    fn idx(&self, t: usize) -> Result<usize, TreeError> {
        if t < self.start || t > self.end {
            Err(TreeError::TimeOutOfRange { t, start: self.start, end: self.end })
        } else {
            Ok(t - self.start)
        }
    }

    /// The partition generating the σ-field at time `t`.
    pub fn partition(&self, t: usize) -> &[Vec<usize>] {
        &self.partitions[t - self.start]
    }

    /// Index of the cell of `partitions[t]` containing `atom`.
    pub fn cell_of(&self, t: usize, atom: usize) -> usize {
        self.cell_of[t - self.start][atom]
    }

    pub fn cell_prob(&self, t: usize, cell: usize) -> f64 {
        self.partition(t)[cell].iter().map(|&a| self.probs[a]).sum()
    }

    /// Cells of `partitions[fine]` contained in cell `cell` of `partitions[coarse]`.
    pub fn children(&self, coarse: usize, cell: usize, fine: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.partition(coarse)[cell].iter().map(|&a| self.cell_of(fine, a)).collect();
        out.dedup();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Conditional expectation given the σ-field at time `t`.
    ///
    /// `values[atom]` is a vector in ℝⁿ; the result is broadcast back to atoms.
    pub fn cond_expect(&self, values: &[Vec<f64>], t: usize) -> Result<Vec<Vec<f64>>, TreeError> {
        let k = self.idx(t)?;
        if values.len() != self.atoms() {
            return Err(TreeError::Shape(format!("expected {} atoms, got {}", self.atoms(), values.len())));
        }
        let dim = values.first().map_or(0, Vec::len);
        let mut out = vec![vec![0.0; dim]; self.atoms()];
        for cell in &self.partitions[k] {
            let mass: f64 = cell.iter().map(|&a| self.probs[a]).sum();
            let mut avg = vec![0.0; dim];
            for &a in cell {
                if values[a].len() != dim {
                    return Err(TreeError::Shape("ragged values".into()));
                }
                for (s, v) in avg.iter_mut().zip(&values[a]) {
                    *s += self.probs[a] * v;
                }
            }
            avg.iter_mut().for_each(|s| *s /= mass);
            for &a in cell {
                out[a].clone_from(&avg);
            }
        }
        Ok(out)
    }

    /// Plain expectation 𝔼[values].
    pub fn expect(&self, values: &[Vec<f64>]) -> Vec<f64> {
        let dim = values.first().map_or(0, Vec::len);
        let mut out = vec![0.0; dim];
        for (a, v) in values.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(v) {
                *o += self.probs[a] * x;
            }
        }
        out
    }

    /// Largest ∞-norm spread of `values` inside a cell of `partitions[t]`.
    pub fn cell_spread(&self, values: &[Vec<f64>], t: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for cell in self.partition(t) {
            let first = &values[cell[0]];
            for &a in &cell[1..] {
                for (x, y) in values[a].iter().zip(first) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }
}

/// Builds the product tree generated by stagewise noise samples.
///
/// `stages[k]` lists the samples of the noise realized at time `start + k`;
/// the tree has times `start ..= start + stages.len()`, and the partition at
/// time `t` groups atoms sharing the noise prefix realized before `t`. An
/// optional `initial` stage is observed before `start` and already refines
/// the partition at `start`.
pub fn build_tree(
    initial: Option<&[NoiseSample]>,
    stages: &[Vec<NoiseSample>],
    start: usize,
) -> Result<ScenarioTree, TreeError> {
    if stages.is_empty() {
        return Err(TreeError::EmptyHorizon { start, end: start });
    }
    let mut all: Vec<&[NoiseSample]> = Vec::new();
    if let Some(init) = initial {
        all.push(init);
    }
    all.extend(stages.iter().map(Vec::as_slice));
    for (k, samples) in all.iter().enumerate() {
        if samples.is_empty() {
            return Err(TreeError::EmptyStage { stage: k });
        }
        let sum: f64 = samples.iter().map(|s| s.prob).sum();
        if let Some(s) = samples.iter().find(|s| !(s.prob > 0.0)) {
            return Err(TreeError::NonPositiveWeight { stage: k, weight: s.prob });
        }
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(TreeError::WeightsNotNormalized { stage: k, sum });
        }
        let d = samples[0].value.len();
        if samples.iter().any(|s| s.value.len() != d) {
            return Err(TreeError::NoiseDimension { stage: k });
        }
    }

    // Atoms are noise paths in lexicographic order (last stage fastest).
    let mut paths: Vec<Vec<usize>> = vec![vec![]];
    for samples in &all {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                (0..samples.len()).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    let probs: Vec<f64> = paths
        .iter()
        .map(|p| p.iter().zip(&all).map(|(&i, s)| s[i].prob).product())
        .collect();
    // Normalize the product away from rounding only; stage weights were checked.
    let mass: f64 = probs.iter().sum();
    let probs: Vec<f64> = probs.into_iter().map(|p| p / mass).collect();

    let offset = usize::from(initial.is_some());
    let mut partitions = Vec::with_capacity(stages.len() + 1);
    for k in 0..=stages.len() {
        let prefix = offset + k;
        let mut cells: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for (a, p) in paths.iter().enumerate() {
            let key = &p[..prefix];
            match cells.iter_mut().find(|(kk, _)| kk.as_slice() == key) {
                Some((_, members)) => members.push(a),
                None => cells.push((key.to_vec(), vec![a])),
            }
        }
        partitions.push(cells.into_iter().map(|(_, m)| m).collect());
    }

    let noise = NoiseValues {
        initial: initial.map(|init| paths.iter().map(|p| init[p[0]].value.clone()).collect()),
        stages: (0..stages.len())
            .map(|k| paths.iter().map(|p| stages[k][p[offset + k]].value.clone()).collect())
            .collect(),
    };
    ScenarioTree::new(probs, start, partitions)?.with_noise(noise)
}

/// Which σ-fields the entries of a process must be measurable for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `x_t` is measurable at time `t`.
    Primal,
    /// `p_{t-1}` is measurable at time `t`, and both `𝔼^s[p_s]` and `p_T`
    /// are constant on Ω.
    Dual,
}

/// A tree-indexed ℝⁿ-valued process on the window `[first, last]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Process {
    pub dim: usize,
    pub first: usize,
    pub last: usize,
    /// `values[t - first][atom]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl Process {
    pub fn zeros(dim: usize, first: usize, last: usize, atoms: usize) -> Self {
        Process { dim, first, last, values: vec![vec![vec![0.0; dim]; atoms]; last - first + 1] }
    }

    pub fn at(&self, t: usize) -> &[Vec<f64>] {
        &self.values[t - self.first]
    }

    pub fn at_mut(&mut self, t: usize) -> &mut Vec<Vec<f64>> {
        &mut self.values[t - self.first]
    }

    pub fn get(&self, t: usize, atom: usize) -> &[f64] {
        &self.values[t - self.first][atom]
    }

    /// `x_t − x_{t−1}` at every atom.
    pub fn increment(&self, t: usize) -> Vec<Vec<f64>> {
        self.at(t).iter().zip(self.at(t - 1)).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect()
    }

    pub fn mean(&self, tree: &ScenarioTree, t: usize) -> Vec<f64> {
        tree.expect(self.at(t))
    }

    pub fn atoms(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

/// Duality pairing 𝔼[Σ_t y_t · x_t] over a shared window.
pub fn expect_pair(tree: &ScenarioTree, y: &Process, x: &Process) -> Result<f64, TreeError> {
    if y.dim != x.dim || y.first != x.first || y.last != x.last || y.atoms() != tree.atoms() || x.atoms() != tree.atoms() {
        return Err(TreeError::Shape("processes must share dimension, window and atoms".into()));
    }
    let mut total = 0.0;
    for t in x.first..=x.last {
        for a in 0..tree.atoms() {
            let dot: f64 = y.get(t, a).iter().zip(x.get(t, a)).map(|(u, v)| u * v).sum();
            total += tree.prob(a) * dot;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedReport {
    pub adapted: bool,
    /// Largest within-cell ∞-norm spread found.
    pub deviation: f64,
    /// Time at which the largest spread occurs, if any.
    pub worst_time: Option<usize>,
}

/// Checks the measurability schedule of `x` on its window.
pub fn check_adapted(tree: &ScenarioTree, x: &Process, schedule: Schedule) -> AdaptedReport {
    let mut deviation: f64 = 0.0;
    let mut worst_time = None;
    let mut note = |d: f64, t: usize| {
        if d > deviation {
            deviation = d;
            worst_time = Some(t);
        }
    };
    match schedule {
        Schedule::Primal => {
            for t in x.first..=x.last {
                note(tree.cell_spread(x.at(t), t), t);
            }
        }
        Schedule::Dual => {
            for t in x.first + 1..=x.last {
                note(tree.cell_spread(x.at(t - 1), t), t - 1);
            }
            let ce = tree.cond_expect(x.at(x.first), x.first).expect("window inside tree");
            note(spread_all(&ce), x.first);
            note(spread_all(x.at(x.last)), x.last);
        }
    }
    AdaptedReport { adapted: deviation <= MEASURABILITY_TOL, deviation, worst_time }
}

fn spread_all(values: &[Vec<f64>]) -> f64 {
    let first = &values[0];
    values
        .iter()
        .flat_map(|v| v.iter().zip(first).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm_one() -> Vec<NoiseSample> {
        vec![NoiseSample::new(vec![1.0], 0.5), NoiseSample::new(vec![-1.0], 0.5)]
    }

    #[test]
    fn two_binary_stages_give_four_atoms() {
        let tree = build_tree(None, &[pm_one(), pm_one()], 0).unwrap();
        assert_eq!(tree.atoms(), 4);
        assert!(tree.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let sizes: Vec<usize> = (0..=2).map(|t| tree.partition(t).len()).collect();
        assert_eq!(sizes, vec![1, 2, 4]);
        assert_eq!(tree.noise_at(1, 1), Some(&[-1.0][..]));
    }

    #[test]
    fn single_sample_stage_is_degenerate() {
        let tree = build_tree(None, &[vec![NoiseSample::new(vec![0.0], 1.0)]], 3).unwrap();
        assert_eq!(tree.atoms(), 1);
        assert_eq!(tree.partition(3).len(), 1);
        assert_eq!(tree.partition(4).len(), 1);
    }

    #[test]
    fn unnormalized_weights_are_rejected() {
        let stage = vec![NoiseSample::new(vec![1.0], 0.3), NoiseSample::new(vec![-1.0], 0.6)];
        match build_tree(None, &[stage], 0) {
            Err(TreeError::WeightsNotNormalized { sum, .. }) => assert!((sum - 0.9).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(build_tree(None, &[vec![]], 0), Err(TreeError::EmptyStage { .. })));
    }

    #[test]
    fn initial_information_refines_the_first_partition() {
        let tree = build_tree(Some(&pm_one()), &[pm_one()], 1).unwrap();
        assert_eq!(tree.partition(1).len(), 2);
        assert_eq!(tree.partition(2).len(), 4);
        assert_eq!(tree.noise().unwrap().initial.as_ref().unwrap()[3], vec![-1.0]);
    }

    #[test]
    fn cond_expect_examples() {
        let tree = ScenarioTree::new(vec![0.5, 0.5], 0, vec![vec![vec![0, 1]], vec![vec![0], vec![1]]]).unwrap();
        let out = tree.cond_expect(&[vec![1.0], vec![3.0]], 0).unwrap();
        assert_eq!(out, vec![vec![2.0], vec![2.0]]);
        let same = tree.cond_expect(&[vec![1.0], vec![3.0]], 1).unwrap();
        assert_eq!(same, vec![vec![1.0], vec![3.0]]);

        let skew = ScenarioTree::new(vec![0.25, 0.75], 0, vec![vec![vec![0, 1]], vec![vec![0], vec![1]]]).unwrap();
        let out = skew.cond_expect(&[vec![0.0], vec![4.0]], 0).unwrap();
        assert_eq!(out, vec![vec![3.0], vec![3.0]]);
        assert!(matches!(skew.cond_expect(&[vec![0.0], vec![4.0]], 5), Err(TreeError::TimeOutOfRange { .. })));
    }

    #[test]
    fn expect_pair_examples() {
        let tree = ScenarioTree::new(vec![0.5, 0.5], 0, vec![vec![vec![0, 1]], vec![vec![0], vec![1]]]).unwrap();
        let y = Process { dim: 1, first: 1, last: 1, values: vec![vec![vec![1.0], vec![1.0]]] };
        let x = Process { dim: 1, first: 1, last: 1, values: vec![vec![vec![2.0], vec![4.0]]] };
        assert_eq!(expect_pair(&tree, &y, &x).unwrap(), 3.0);
        let zero = Process::zeros(1, 1, 1, 2);
        assert_eq!(expect_pair(&tree, &zero, &x).unwrap(), 0.0);

        let det = ScenarioTree::deterministic(0, 1);
        let ones = Process { dim: 1, first: 0, last: 1, values: vec![vec![vec![1.0]]; 2] };
        assert_eq!(expect_pair(&det, &ones, &ones).unwrap(), 2.0);
        let bad = Process::zeros(2, 0, 1, 1);
        assert!(expect_pair(&det, &bad, &ones).is_err());
    }

    #[test]
    fn adaptedness_schedules() {
        let tree = build_tree(None, &[pm_one()], 0).unwrap();
        let constant = Process { dim: 1, first: 0, last: 1, values: vec![vec![vec![3.0]; 2]; 2] };
        for s in [Schedule::Primal, Schedule::Dual] {
            let r = check_adapted(&tree, &constant, s);
            assert!(r.adapted);
            assert_eq!(r.deviation, 0.0);
        }
        // varies inside the trivial cell at time 0
        let mut x = constant.clone();
        x.at_mut(0)[1][0] = 4.0;
        let r = check_adapted(&tree, &x, Schedule::Primal);
        assert!(!r.adapted && r.deviation > 0.0);
        // p_T must be constant under the dual schedule
        let mut p = constant.clone();
        p.at_mut(1)[0][0] = 5.0;
        assert!(!check_adapted(&tree, &p, Schedule::Dual).adapted);
        assert!(check_adapted(&tree, &p, Schedule::Primal).adapted);
    }

    #[test]
    fn refinement_is_enforced() {
        let bad = ScenarioTree::new(
            vec![0.25; 4],
            0,
            vec![vec![vec![0, 1], vec![2, 3]], vec![vec![0, 2], vec![1, 3]]],
        );
        assert!(matches!(bad, Err(TreeError::NotRefining { .. })));
    }

    #[test]
    fn tree_json_round_trip_validates() {
        let tree = build_tree(None, &[pm_one()], 0).unwrap();
        let json = serde_json::to_string(&tree).unwrap();
        let back: ScenarioTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tree);
        let bad = r#"{"probs":[0.5,0.6],"start":0,"partitions":[[[0,1]],[[0],[1]]]}"#;
        assert!(serde_json::from_str::<ScenarioTree>(bad).is_err());
    }
}
