//! Permutation algebra: representation, application to targets, composition,
//! and construction of every candidate family the trainer and search use.
//!
//! Listing convention (used everywhere, including files and logs): a
//! permutation is the array of source positions emitted at each output slot,
//! so the identity prints as `[0, 1, ..., L-1]` and `[4, 5, 6, 7, 8, 9, 0, 1,
//! 2, 3]` emits position 4 first.

use std::collections::HashSet;
use std::path::Path;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A bijection on target positions. `map[k]` is the forward-order position
/// whose token is emitted at output slot `k`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation {
    map: Vec<usize>,
}

impl std::fmt::Debug for Permutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.map)
    }
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &v in &map {
            if v >= n || seen[v] {
                return Err(Error::InvalidConfig(format!("not a bijection: {map:?}")));
            }
            seen[v] = true;
        }
        Ok(Permutation { map })
    }

    pub fn identity(len: usize) -> Self {
        Permutation { map: (0..len).collect() }
    }

    pub fn reverse(len: usize) -> Self {
        Permutation { map: (0..len).rev().collect() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(k, &v)| k == v)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    /// Reorders a target sequence: `out[k] = y[map[k]]`.
    pub fn apply<T: Copy>(&self, y: &[T]) -> Result<Vec<T>> {
        if y.len() != self.map.len() {
            return Err(Error::LengthMismatch { expected: self.map.len(), got: y.len() });
        }
        Ok(self.map.iter().map(|&src| y[src]).collect())
    }

    /// Right-composition: the returned permutation first applies `self`, then
    /// `other` on the output slots, i.e.
    /// `compose(p, q).apply(y) == q.apply(&p.apply(y))`.
    pub fn compose(&self, other: &Permutation) -> Result<Permutation> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: other.len() });
        }
        Ok(Permutation { map: other.map.iter().map(|&k| self.map[k]).collect() })
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0usize; self.map.len()];
        for (k, &src) in self.map.iter().enumerate() {
            inv[src] = k;
        }
        Permutation { map: inv }
    }
}

/// Contiguous, disjoint, exhaustive half-open ranges over 0..L.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    bounds: Vec<(usize, usize)>,
}

impl BlockPartition {
    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    pub fn block_count(&self) -> usize {
        self.bounds.len()
    }

    pub fn total_len(&self) -> usize {
        self.bounds.last().map_or(0, |&(_, e)| e)
    }

    pub fn block_size(&self, i: usize) -> usize {
        let (s, e) = self.bounds[i];
        e - s
    }
}

/// Splits 0..L into k contiguous blocks; the first (L mod k) blocks get the
/// extra element, so larger blocks come first.
pub fn split_blocks(len: usize, k: usize) -> Result<BlockPartition> {
    if k == 0 || k > len {
        return Err(Error::BadBlockCount { len, k });
    }
    let base = len / k;
    let rem = len % k;
    let mut bounds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let sz = base + usize::from(i < rem);
        bounds.push((start, start + sz));
        start += sz;
    }
    Ok(BlockPartition { bounds })
}

/// Splits 0..L into blocks of size l; when l does not divide L the remaining
/// L mod l positions form one extra trailing block.
pub fn split_into_len(len: usize, l: usize) -> Result<BlockPartition> {
    if l == 0 || l > len {
        return Err(Error::BadBlockCount { len, k: l });
    }
    let mut bounds = Vec::new();
    let mut start = 0;
    while start + l <= len {
        bounds.push((start, start + l));
        start += l;
    }
    if start < len {
        bounds.push((start, len));
    }
    Ok(BlockPartition { bounds })
}

pub fn factorial_checked(n: usize) -> Option<u64> {
    (1..=n as u64).try_fold(1u64, |acc, v| acc.checked_mul(v))
}

fn factorial_u128(n: usize) -> Option<u128> {
    (1..=n as u128).try_fold(1u128, |acc, v| acc.checked_mul(v))
}

fn arrangement_to_perm(partition: &BlockPartition, order: &[usize]) -> Permutation {
    let mut map = Vec::with_capacity(partition.total_len());
    for &bi in order {
        let (s, e) = partition.bounds[bi];
        map.extend(s..e);
    }
    Permutation { map }
}

/// All k! token-level permutations that reorder whole blocks while preserving
/// intra-block order, in lexicographic order of the block arrangement (the
/// identity arrangement first).
pub fn block_perms(partition: &BlockPartition, cap: u64) -> Result<Vec<Permutation>> {
    let k = partition.block_count();
    match factorial_checked(k) {
        Some(f) if f <= cap => {}
        _ => return Err(Error::FactorialOverBudget(k, cap)),
    }
    Ok((0..k).permutations(k).map(|order| arrangement_to_perm(partition, &order)).collect())
}

/// All l! permutations acting inside block `block_index` and fixing every
/// position outside it, in lexicographic order of the within-block arrangement.
pub fn intra_block_perms(partition: &BlockPartition, block_index: usize, cap: u64) -> Result<Vec<Permutation>> {
    let (s, e) = partition.bounds[block_index];
    let l = e - s;
    match factorial_checked(l) {
        Some(f) if f <= cap => {}
        _ => return Err(Error::FactorialOverBudget(l, cap)),
    }
    let total = partition.total_len();
    Ok((s..e)
        .permutations(l)
        .map(|inner| {
            let mut map: Vec<usize> = (0..total).collect();
            map[s..e].copy_from_slice(&inner);
            Permutation { map }
        })
        .collect())
}

/// The `count` cyclic rotations of the block sequence (r = 0 is the
/// identity): rotation r emits blocks r, r+1, ..., wrapping around.
pub fn block_rotations(partition: &BlockPartition, count: usize) -> Vec<Permutation> {
    let k = partition.block_count();
    (0..count.min(k.max(1)))
        .map(|r| {
            let order: Vec<usize> = (0..k).map(|i| (i + r) % k).collect();
            arrangement_to_perm(partition, &order)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    /// Single-cut block swaps of the forward and reverse orders.
    F,
    /// Uniform random permutations.
    R,
    /// Forward permutation (id 0) plus random permutations.
    G,
    /// Length-b block rearrangements of the forward and reverse orders.
    B,
    /// Loaded from an explicit file.
    Explicit,
}

impl std::str::FromStr for SetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f" => Ok(SetKind::F),
            "r" => Ok(SetKind::R),
            "g" => Ok(SetKind::G),
            "b" => Ok(SetKind::B),
            other => Err(Error::InvalidConfig(format!("unknown permutation set kind: {other}"))),
        }
    }
}

/// An ordered list of distinct permutations with stable integer ids
/// (a permutation's id is its index).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PermutationSet {
    pub kind: SetKind,
    pub perms: Vec<Permutation>,
    pub block_len: Option<usize>,
    pub seed: Option<u64>,
}

impl PermutationSet {
    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn explicit(perms: Vec<Permutation>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &perms {
            if !seen.insert(p.clone()) {
                return Err(Error::InvalidConfig("duplicate permutation in explicit set".into()));
            }
        }
        Ok(PermutationSet { kind: SetKind::Explicit, perms, block_len: None, seed: None })
    }
}

fn random_perm(len: usize, rng: &mut ChaCha8Rng) -> Permutation {
    let mut map: Vec<usize> = (0..len).collect();
    map.shuffle(rng);
    Permutation { map }
}

fn sample_distinct(
    len: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
    mut seen: HashSet<Permutation>,
    out: &mut Vec<Permutation>,
) -> Result<()> {
    let available = factorial_u128(len).unwrap_or(u128::MAX);
    let need = (seen.len() + count) as u128;
    if need > available {
        return Err(Error::SetExhausted { requested: count, available: available.saturating_sub(seen.len() as u128) });
    }
    let target = out.len() + count;
    while out.len() < target {
        let p = random_perm(len, rng);
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    Ok(())
}

fn make_set_f(len: usize, count: usize) -> Result<Vec<Permutation>> {
    let forward = Permutation::identity(len);
    let reverse = Permutation::reverse(len);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for base in [&forward, &reverse] {
        for cut in 1..len {
            let mut map = Vec::with_capacity(len);
            map.extend_from_slice(&base.map[cut..]);
            map.extend_from_slice(&base.map[..cut]);
            let p = Permutation { map };
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
    }
    if count > out.len() {
        return Err(Error::SetExhausted { requested: count, available: out.len() as u128 });
    }
    out.truncate(count);
    Ok(out)
}

fn make_set_b(len: usize, count: usize, block_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Permutation>> {
    if block_len == 0 || block_len > len {
        return Err(Error::BadBlockCount { len, k: block_len });
    }
    let partition = split_into_len(len, block_len)?;
    let k = partition.block_count();
    let per_base = factorial_u128(k).unwrap_or(u128::MAX);
    // Forward and reverse block rearrangements never coincide for b >= 2.
    let available = if block_len >= 2 { per_base.saturating_mul(2) } else { factorial_u128(len).unwrap_or(u128::MAX) };
    if count as u128 > available {
        return Err(Error::SetExhausted { requested: count, available });
    }
    let bases = [Permutation::identity(len), Permutation::reverse(len)];
    let mut out = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    if per_base <= 4096 {
        // Small space: enumerate every member, then sample without replacement.
        let mut all = Vec::new();
        for base in &bases {
            for order in (0..k).permutations(k) {
                let q = arrangement_to_perm(&partition, &order);
                let p = base.compose(&q).expect("equal lengths");
                if seen.insert(p.clone()) {
                    all.push(p);
                }
            }
        }
        if count > all.len() {
            return Err(Error::SetExhausted { requested: count, available: all.len() as u128 });
        }
        all.shuffle(rng);
        all.truncate(count);
        out = all;
    } else {
        while out.len() < count {
            let base = &bases[rng.random_range(0..2usize)];
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(rng);
            let p = base.compose(&arrangement_to_perm(&partition, &order)).expect("equal lengths");
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Builds one of the four standard candidate sets.
///
/// * `R`: `count` distinct uniform-random permutations.
/// * `G`: the forward (identity) permutation at id 0 plus `count - 1` distinct
///   random permutations.
/// * `F`: single-cut block swaps of the forward and reverse orders, cuts
///   enumerated left to right (forward base first), truncated to `count`.
/// * `B`: the forward and reverse orders cut into length-`block_len` blocks
///   with block-level rearrangements applied; a seeded sample of `count`
///   distinct members.
pub fn make_set(kind: SetKind, len: usize, count: usize, seed: u64, block_len: Option<usize>) -> Result<PermutationSet> {
    if count < 1 {
        return Err(Error::InvalidConfig("permutation set size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms = match kind {
        SetKind::R => {
            let mut out = Vec::with_capacity(count);
            sample_distinct(len, count, &mut rng, HashSet::new(), &mut out)?;
            out
        }
        SetKind::G => {
            let ident = Permutation::identity(len);
            let mut out = vec![ident.clone()];
            let mut seen = HashSet::new();
            seen.insert(ident);
            sample_distinct(len, count - 1, &mut rng, seen, &mut out)?;
            out
        }
        SetKind::F => make_set_f(len, count)?,
        SetKind::B => make_set_b(len, count, block_len.unwrap_or(5), &mut rng)?,
        SetKind::Explicit => return Err(Error::InvalidConfig("explicit sets are built from files".into())),
    };
    Ok(PermutationSet {
        kind,
        perms,
        block_len: if kind == SetKind::B { Some(block_len.unwrap_or(5)) } else { None },
        seed: match kind {
            SetKind::R | SetKind::G | SetKind::B => Some(seed),
            _ => None,
        },
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PermSetMeta {
    pub kind: SetKind,
    pub len: usize,
    pub count: usize,
    pub seed: Option<u64>,
    pub block_len: Option<usize>,
}

/// Writes `{prefix}.json` as a JSON array of permutation arrays plus
/// `{prefix}.meta.json`.
pub fn write_perm_set(set: &PermutationSet, prefix: &Path) -> Result<()> {
    let arrays: Vec<&[usize]> = set.perms.iter().map(|p| p.as_slice()).collect();
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(prefix.with_extension("json"), serde_json::to_string(&arrays)?)?;
    let meta = PermSetMeta {
        kind: set.kind,
        len: set.perms.first().map_or(0, |p| p.len()),
        count: set.perms.len(),
        seed: set.seed,
        block_len: set.block_len,
    };
    std::fs::write(prefix.with_extension("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a JSON array-of-arrays permutation file (sidecar optional).
pub fn read_perm_file(path: &Path) -> Result<Vec<Permutation>> {
    let arrays: Vec<Vec<usize>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    arrays.into_iter().map(Permutation::new).collect()
}
