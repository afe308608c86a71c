//! Three-way cross-fold plans.
//!
//! Folds are contiguous blocks of a random permutation: fold `k` (0-based)
//! holds permutation positions `ceil(k n / K) .. ceil((k+1) n / K)`. For each
//! fold the remaining folds are split into `h1` (initial-estimate folds) and
//! `h2` (localized-nuisance folds):
//!
//! ```text
//! cut = K' + [k <= K']            (1-based k)
//! h1  = {1, .., cut} \ {k}
//! h2  = {cut + 1, .., K} \ {k}
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LdmlError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    k_prime: usize,
    seed: u64,
    permutation: Vec<usize>,
    bounds: Vec<usize>,
    fold_of: Vec<usize>,
    h1: Vec<Vec<usize>>,
    h2: Vec<Vec<usize>>,
}

/// Build a plan over `n` rows. With `stratify`, each fold's treated count
/// differs from its proportional share by less than one unit.
pub fn make_fold_plan(n: usize, k: usize, k_prime: usize, seed: u64, stratify: Option<&[bool]>) -> Result<FoldPlan> {
    if k < 3 || k_prime < 1 || k_prime + 2 > k {
        return Err(LdmlError::InvalidKPrime { k, k_prime });
    }
    if n < k {
        return Err(LdmlError::TooFewRows { n, k });
    }
    if let Some(flags) = stratify {
        if flags.len() != n {
            return Err(LdmlError::DimensionMismatch {
                expected: n,
                got: flags.len(),
            });
        }
    }

    let bounds: Vec<usize> = (0..=k).map(|j| (j * n).div_ceil(k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let permutation = match stratify {
        None => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            perm
        }
        Some(flags) => stratified_permutation(flags, &bounds, &mut rng),
    };

    let mut fold_of = vec![0; n];
    for fold in 0..k {
        for &i in &permutation[bounds[fold]..bounds[fold + 1]] {
            fold_of[i] = fold;
        }
    }

    let (h1, h2) = (1..=k)
        .map(|kk| {
            let cut = k_prime + usize::from(kk <= k_prime);
            let h1 = (1..=cut).filter(|&j| j != kk).map(|j| j - 1).collect();
            let h2 = (cut + 1..=k).filter(|&j| j != kk).map(|j| j - 1).collect();
            (h1, h2)
        })
        .unzip();

    Ok(FoldPlan {
        k,
        k_prime,
        seed,
        permutation,
        bounds,
        fold_of,
        h1,
        h2,
    })
}

fn stratified_permutation(flags: &[bool], bounds: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = flags.len();
    let mut treated: Vec<usize> = (0..n).filter(|&i| flags[i]).collect();
    let mut control: Vec<usize> = (0..n).filter(|&i| !flags[i]).collect();
    treated.shuffle(rng);
    control.shuffle(rng);
    let n1 = treated.len();

    // cumulative treated quota floor(bound * n1 / n) keeps every fold within one unit
    let quota = |b: usize| b * n1 / n;
    let (mut ti, mut ci) = (0, 0);
    let mut perm = Vec::with_capacity(n);
    for w in bounds.windows(2) {
        let size = w[1] - w[0];
        let n_treated = quota(w[1]) - quota(w[0]);
        let start = perm.len();
        perm.extend_from_slice(&treated[ti..ti + n_treated]);
        perm.extend_from_slice(&control[ci..ci + size - n_treated]);
        ti += n_treated;
        ci += size - n_treated;
        perm[start..].shuffle(rng);
    }
    perm
}

impl FoldPlan {
    pub fn n(&self) -> usize {
        self.permutation.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn k_prime(&self) -> usize {
        self.k_prime
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Row indices of fold `k` (0-based).
    pub fn fold(&self, k: usize) -> &[usize] {
        &self.permutation[self.bounds[k]..self.bounds[k + 1]]
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.fold_of[row]
    }

    pub fn h1(&self, k: usize) -> &[usize] {
        &self.h1[k]
    }

    pub fn h2(&self, k: usize) -> &[usize] {
        &self.h2[k]
    }

    /// Concatenated rows of the given folds, in fold order.
    pub fn rows_of(&self, folds: &[usize]) -> Vec<usize> {
        folds.iter().flat_map(|&f| self.fold(f).iter().copied()).collect()
    }

    /// Rows of every fold except `k`.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        let others: Vec<usize> = (0..self.k).filter(|&f| f != k).collect();
        self.rows_of(&others)
    }
}
