use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outer folds `I_1..I_J` plus, for every fold, a bipartition of its
/// complement into the two halves used for nuisance cross-fitting.
///
/// Indices are zero-based; member lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
    halves: Vec<[Vec<usize>; 2]>,
}

/// Seeded shuffle, round-robin fold assignment, and halves formed by
/// alternating positions of the shuffled complement.
pub fn make_fold_plan(n: usize, folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds == 0 {
        return Err(Error::InvalidConfig("number of folds must be positive".into()));
    }
    if n < 2 * folds {
        return Err(Error::InvalidConfig(format!(
            "{n} samples cannot be split into {folds} folds (need at least {})",
            2 * folds
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds;
    }
    let mut members = vec![Vec::new(); folds];
    for (i, &j) in assignment.iter().enumerate() {
        members[j].push(i);
    }
    let halves = (0..folds)
        .map(|j| {
            let mut pair = [Vec::new(), Vec::new()];
            for (pos, &i) in order.iter().filter(|&&i| assignment[i] != j).enumerate() {
                pair[pos % 2].push(i);
            }
            pair[0].sort_unstable();
            pair[1].sort_unstable();
            pair
        })
        .collect();
    Ok(FoldPlan { assignment, members, halves })
}

impl FoldPlan {
    /// A single fold holding every sample, with empty halves. Only useful
    /// when nuisances are supplied externally.
    pub fn single(n: usize) -> Self {
        Self {
            assignment: vec![0; n],
            members: vec![(0..n).collect()],
            halves: vec![[Vec::new(), Vec::new()]],
        }
    }

    /// Plan from an explicit fold assignment; halves alternate over the
    /// complement in index order.
    pub fn from_assignment(assignment: Vec<usize>, folds: usize) -> Result<Self> {
        if folds == 0 || assignment.iter().any(|&j| j >= folds) {
            return Err(Error::InvalidConfig("fold index out of range".into()));
        }
        let mut members = vec![Vec::new(); folds];
        for (i, &j) in assignment.iter().enumerate() {
            members[j].push(i);
        }
        if members.iter().any(Vec::is_empty) {
            return Err(Error::InvalidConfig("every fold needs at least one sample".into()));
        }
        let halves = (0..folds)
            .map(|j| {
                let mut pair = [Vec::new(), Vec::new()];
                for (pos, i) in (0..assignment.len()).filter(|&i| assignment[i] != j).enumerate() {
                    pair[pos % 2].push(i);
                }
                pair
            })
            .collect();
        Ok(Self { assignment, members, halves })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn folds(&self) -> usize {
        self.members.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Members of fold `j`.
    pub fn fold(&self, j: usize) -> &[usize] {
        &self.members[j]
    }

    /// Both halves of the complement of fold `j`.
    pub fn halves(&self, j: usize) -> &[Vec<usize>; 2] {
        &self.halves[j]
    }

    /// Everything outside fold `j`, sorted.
    pub fn complement(&self, j: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != j).collect()
    }
}
