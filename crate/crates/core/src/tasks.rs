//! Synthetic task families: continuous linear regression and discrete
//! feature-to-label lookup tables. Demonstration sampling, prompt layout and
//! reordering live here too.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, Matrix, SeededRng};

pub type TokenId = u32;

/// A permutation of `0..n`; position `i` of the reordered set holds element `perm[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ordering(Vec<usize>);

impl Ordering {
    pub fn identity(n: usize) -> Self {
        Ordering((0..n).collect())
    }

    pub fn reversed(n: usize) -> Self {
        Ordering((0..n).rev().collect())
    }

    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Ordering(perm))
    }

    pub(crate) fn from_perm_unchecked(perm: Vec<usize>) -> Self {
        Ordering(perm)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn inverse(&self) -> Ordering {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Ordering(inv)
    }
}

/// A task family member: knows its identity, how to draw a compatible input,
/// and how to label it.
pub trait Task {
    type Pair: Clone;

    fn id(&self) -> u64;

    fn sample_pair(&self, rng: &mut SeededRng) -> Self::Pair;

    fn is_consistent(&self, pair: &Self::Pair) -> bool;
}

// ---------------------------------------------------------------------------
// Continuous family

/// `y = W* x` with Gaussian inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTask {
    pub id: u64,
    pub w_star: Matrix,
    pub input_std: f64,
}

/// One continuous demonstration; `x` and `y` are column matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionPair {
    pub x: Matrix,
    pub y: Matrix,
}

impl RegressionPair {
    /// Lexicographic order on `(x, y)` entries under `f64::total_cmp`; the
    /// canonical order for order-independent reductions.
    pub fn canonical_cmp(&self, other: &Self) -> CmpOrdering {
        cmp_slices(self.x.data(), other.x.data()).then_with(|| cmp_slices(self.y.data(), other.y.data()))
    }
}

pub(crate) fn cmp_slices(a: &[f64], b: &[f64]) -> CmpOrdering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            CmpOrdering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

impl RegressionTask {
    pub fn d_x(&self) -> usize {
        self.w_star.cols()
    }

    pub fn d_y(&self) -> usize {
        self.w_star.rows()
    }

    pub fn label(&self, x: &Matrix) -> Result<Matrix> {
        crate::numerics::matmul(&self.w_star, x)
    }
}

impl Task for RegressionTask {
    type Pair = RegressionPair;

    fn id(&self) -> u64 {
        self.id
    }

    fn sample_pair(&self, rng: &mut SeededRng) -> RegressionPair {
        let x = sample_gaussian(rng, self.d_x(), 1, 0.0, self.input_std).expect("validated input_std");
        let y = self.label(&x).expect("shapes fixed by the task");
        RegressionPair { x, y }
    }

    fn is_consistent(&self, pair: &RegressionPair) -> bool {
        self.label(&pair.x).map_or(false, |y| y == pair.y)
    }
}

pub fn sample_regression_task(
    d_x: usize,
    d_y: usize,
    weight_std: f64,
    input_std: f64,
    rng: &mut SeededRng,
) -> Result<RegressionTask> {
    if d_x == 0 || d_y == 0 {
        return Err(Error::invalid(format!("regression dims must be >= 1, got d_x={d_x} d_y={d_y}")));
    }
    if !(input_std > 0.0) || !input_std.is_finite() {
        return Err(Error::invalid(format!("input_std must be > 0, got {input_std}")));
    }
    if !(weight_std >= 0.0) || !weight_std.is_finite() {
        return Err(Error::invalid(format!("weight_std must be >= 0, got {weight_std}")));
    }
    let id = rng.next_id();
    let w_star = sample_gaussian(rng, d_y, d_x, 0.0, weight_std)?;
    Ok(RegressionTask { id, w_star, input_std })
}

// ---------------------------------------------------------------------------
// Discrete family

/// Vocabulary layout shared by every lookup-table task of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFamily {
    pub vocab_size: usize,
    pub delimiter: TokenId,
    pub features: Vec<TokenId>,
    pub labels: Vec<TokenId>,
}

impl Default for TokenFamily {
    /// 8 feature tokens and 4 label tokens inside a 32-token vocabulary, with
    /// token 0 as the delimiter.
    fn default() -> Self {
        TokenFamily { vocab_size: 32, delimiter: 0, features: (1..=8).collect(), labels: (9..=12).collect() }
    }
}

impl TokenFamily {
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size as TokenId;
        if self.features.is_empty() || self.labels.is_empty() {
            return Err(Error::invalid("token family needs non-empty feature and label alphabets"));
        }
        let f: BTreeSet<_> = self.features.iter().copied().collect();
        let l: BTreeSet<_> = self.labels.iter().copied().collect();
        if f.len() != self.features.len() || l.len() != self.labels.len() {
            return Err(Error::invalid("token alphabets contain duplicates"));
        }
        if !f.is_disjoint(&l) || f.contains(&self.delimiter) || l.contains(&self.delimiter) {
            return Err(Error::invalid("feature, label and delimiter tokens must be disjoint"));
        }
        if let Some(&bad) = f.iter().chain(&l).chain(std::iter::once(&self.delimiter)).find(|&&t| t >= v) {
            return Err(Error::UnknownToken(bad));
        }
        Ok(())
    }
}

/// A random total map from the feature alphabet onto the label alphabet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenTask {
    pub id: u64,
    pub family: TokenFamily,
    /// Serialised as a list of `[x, y]` pairs.
    #[serde(with = "table_pairs")]
    pub table: BTreeMap<TokenId, TokenId>,
}

mod table_pairs {
    use super::TokenId;
    use serde::{Deserialize, Deserializer, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(table: &BTreeMap<TokenId, TokenId>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(table.iter().map(|(&x, &y)| [x, y]))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<TokenId, TokenId>, D::Error> {
        let pairs = Vec::<[TokenId; 2]>::deserialize(d)?;
        Ok(pairs.into_iter().map(|[x, y]| (x, y)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenPair {
    pub x: TokenId,
    pub y: TokenId,
}

impl TokenTask {
    pub fn label(&self, x: TokenId) -> Option<TokenId> {
        self.table.get(&x).copied()
    }

    pub fn features(&self) -> &[TokenId] {
        &self.family.features
    }
}

impl Task for TokenTask {
    type Pair = TokenPair;

    fn id(&self) -> u64 {
        self.id
    }

    fn sample_pair(&self, rng: &mut SeededRng) -> TokenPair {
        let f = &self.family.features;
        let x = f[rng.below(f.len())];
        TokenPair { x, y: self.table[&x] }
    }

    fn is_consistent(&self, pair: &TokenPair) -> bool {
        self.label(pair.x) == Some(pair.y)
    }
}

pub fn sample_token_task(family: &TokenFamily, rng: &mut SeededRng) -> Result<TokenTask> {
    family.validate()?;
    let id = rng.next_id();
    let table = family
        .features
        .iter()
        .map(|&x| (x, family.labels[rng.below(family.labels.len())]))
        .collect();
    Ok(TokenTask { id, family: family.clone(), table })
}

// ---------------------------------------------------------------------------
// Demonstrations

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet<P> {
    pub task_id: u64,
    pub pairs: Vec<P>,
}

pub type RegressionDemos = DemonstrationSet<RegressionPair>;
pub type TokenDemos = DemonstrationSet<TokenPair>;

impl<P> DemonstrationSet<P> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `n` i.i.d. pairs labelled by the task. Continuous inputs are Gaussian;
/// discrete inputs are drawn uniformly (with replacement) from the feature
/// alphabet.
pub fn sample_demonstrations<T: Task>(task: &T, n: usize, rng: &mut SeededRng) -> DemonstrationSet<T::Pair> {
    DemonstrationSet { task_id: task.id(), pairs: (0..n).map(|_| task.sample_pair(rng)).collect() }
}

/// Discrete test pairs whose inputs do not occur in `train`. Fails when the
/// training set already covers the whole feature alphabet.
pub fn sample_token_test_pairs(
    task: &TokenTask,
    train: &TokenDemos,
    n: usize,
    rng: &mut SeededRng,
) -> Result<TokenDemos> {
    let seen: BTreeSet<TokenId> = train.pairs.iter().map(|p| p.x).collect();
    if task.features().iter().all(|x| seen.contains(x)) && n > 0 {
        return Err(Error::invalid("training demonstrations cover every feature; no disjoint test input exists"));
    }
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let p = task.sample_pair(rng);
        if !seen.contains(&p.x) {
            pairs.push(p);
        }
    }
    Ok(DemonstrationSet { task_id: task.id, pairs })
}

/// Token matrix with one column per demonstration, `(x_j; y_j)`, followed by
/// the query column `(x_q; 0)`.
pub fn embed_regression_tokens(demos: &RegressionDemos, query_x: &Matrix) -> Result<Matrix> {
    let d_x = query_x.rows();
    if query_x.cols() != 1 {
        return Err(Error::mismatch("embed_regression_tokens", query_x.shape(), (d_x, 1)));
    }
    let d_y = match demos.pairs.first() {
        Some(p) => p.y.rows(),
        None => 1,
    };
    let mut tokens = Matrix::zeros(d_x + d_y, demos.len() + 1);
    for (j, p) in demos.pairs.iter().enumerate() {
        if p.x.shape() != (d_x, 1) || p.y.shape() != (d_y, 1) {
            return Err(Error::mismatch("embed_regression_tokens", p.x.shape(), (d_x, 1)));
        }
        for r in 0..d_x {
            tokens[(r, j)] = p.x[(r, 0)];
        }
        for r in 0..d_y {
            tokens[(d_x + r, j)] = p.y[(r, 0)];
        }
    }
    let q = demos.len();
    for r in 0..d_x {
        tokens[(r, q)] = query_x[(r, 0)];
    }
    Ok(tokens)
}

/// `x_s1 y_s1 ∘ x_s2 y_s2 ∘ ... ∘ x_sN y_sN ∘ query` with `∘` the delimiter.
pub fn build_prompt(
    demos: &TokenDemos,
    query_x: TokenId,
    ordering: &Ordering,
    delimiter: TokenId,
) -> Result<Vec<TokenId>> {
    if ordering.len() != demos.len() {
        return Err(Error::invalid(format!(
            "ordering of length {} does not match {} demonstrations",
            ordering.len(),
            demos.len()
        )));
    }
    let mut seq = Vec::with_capacity(3 * demos.len() + 1);
    for &i in ordering.as_slice() {
        let p = demos.pairs[i];
        seq.extend([p.x, p.y, delimiter]);
    }
    seq.push(query_x);
    Ok(seq)
}

pub fn apply_ordering<P: Clone>(demos: &DemonstrationSet<P>, ordering: &Ordering) -> Result<DemonstrationSet<P>> {
    if ordering.len() != demos.len() {
        return Err(Error::invalid(format!(
            "ordering of length {} does not match {} demonstrations",
            ordering.len(),
            demos.len()
        )));
    }
    Ok(DemonstrationSet {
        task_id: demos.task_id,
        pairs: ordering.as_slice().iter().map(|&i| demos.pairs[i].clone()).collect(),
    })
}

// ---------------------------------------------------------------------------
// JSON records

/// Serialized task plus demonstrations, tagged by family `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskRecord {
    Regression {
        seed: u64,
        d_x: usize,
        d_y: usize,
        task: RegressionTask,
        pairs: Vec<RegressionPair>,
    },
    Token {
        seed: u64,
        vocab_size: usize,
        task: TokenTask,
        pairs: Vec<TokenPair>,
    },
}

impl TaskRecord {
    pub fn regression(task: &RegressionTask, demos: &RegressionDemos, seed: u64) -> Self {
        TaskRecord::Regression {
            seed,
            d_x: task.d_x(),
            d_y: task.d_y(),
            task: task.clone(),
            pairs: demos.pairs.clone(),
        }
    }

    pub fn token(task: &TokenTask, demos: &TokenDemos, seed: u64) -> Self {
        TaskRecord::Token { seed, vocab_size: task.family.vocab_size, task: task.clone(), pairs: demos.pairs.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl SeededRng {
    pub(crate) fn next_id(&mut self) -> u64 {
        rand::RngCore::next_u64(self)
    }
}
