//! Order-sensitive task generators, datasets, and the token vocabulary.
//!
//! Four tasks share one shape: an integer input sequence X and a fixed-length
//! target Y produced by an exact recurrence (or, for Prod, long
//! multiplication). Every generator doubles as the evaluation oracle: targets
//! are recomputable from inputs at any time.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Relu,
    Square19,
    Index,
    Prod,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Relu => "relu",
            TaskKind::Square19 => "square19",
            TaskKind::Index => "index",
            TaskKind::Prod => "prod",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(TaskKind::Relu),
            "square19" | "square-19" | "square" => Ok(TaskKind::Square19),
            "index" => Ok(TaskKind::Index),
            "prod" => Ok(TaskKind::Prod),
            other => Err(Error::InvalidConfig(format!("unknown task kind: {other}"))),
        }
    }
}

/// Full description of one task instance; fixes the target length L and the
/// input sampling bounds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Target length L.
    pub target_len: usize,
    /// Index only: history window d.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Prod only: digits per operand; target_len = 2 * operand_digits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operand_digits: Option<usize>,
    /// Inclusive sampling bounds for input values.
    pub input_low: i64,
    pub input_high: i64,
}

impl TaskSpec {
    pub fn relu(target_len: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Relu,
            target_len,
            window: None,
            operand_digits: None,
            input_low: -9,
            input_high: 9,
        }
    }

    pub fn square19(target_len: usize) -> Self {
        TaskSpec { kind: TaskKind::Square19, ..TaskSpec::relu(target_len) }
    }

    pub fn index(target_len: usize, window: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Index,
            target_len,
            window: Some(window),
            operand_digits: None,
            input_low: 0,
            input_high: target_len as i64 - 1,
        }
    }

    pub fn prod(operand_digits: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Prod,
            target_len: 2 * operand_digits,
            window: None,
            operand_digits: Some(operand_digits),
            input_low: 0,
            input_high: 9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_len < 2 {
            return Err(Error::InvalidConfig("target_len must be >= 2".into()));
        }
        if self.input_low > self.input_high {
            return Err(Error::InvalidConfig("input_low > input_high".into()));
        }
        match self.kind {
            TaskKind::Index => {
                let d = self.window.ok_or_else(|| Error::InvalidConfig("index task needs a window".into()))?;
                if d < 1 || d > self.target_len {
                    return Err(Error::InvalidConfig(format!(
                        "index window must satisfy 1 <= d <= L, got d={d}, L={}",
                        self.target_len
                    )));
                }
            }
            TaskKind::Prod => {
                let k = self
                    .operand_digits
                    .ok_or_else(|| Error::InvalidConfig("prod task needs operand_digits".into()))?;
                if self.target_len != 2 * k {
                    return Err(Error::InvalidConfig(format!(
                        "prod requires target_len = 2 * operand_digits, got L={}, digits={k}",
                        self.target_len
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Length of the raw input sequence stored in an Example.
    pub fn input_len(&self) -> usize {
        match self.kind {
            TaskKind::Prod => 2 * self.operand_digits.unwrap_or(0),
            _ => self.target_len,
        }
    }

    /// Runs the matching oracle on a raw input sequence.
    pub fn oracle(&self, x: &[i64]) -> Result<Vec<i64>> {
        match self.kind {
            TaskKind::Relu => gen_relu(x),
            TaskKind::Square19 => gen_square19(x),
            TaskKind::Index => gen_index(x, self.window.unwrap_or(1)),
            TaskKind::Prod => {
                let k = self.operand_digits.unwrap_or(x.len() / 2);
                gen_prod(&x[..k], &x[k..])
            }
        }
    }
}

/// One input/target pair. For Prod, `x` holds the digits of both operands
/// concatenated (most-significant-first, a then b).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<i64>,
    pub y: Vec<i64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Eval,
}

/// An immutable, reproducible set of examples sharing one TaskSpec.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub seed: u64,
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Running rectified sum: y1 = x1, yi = max(xi + y_{i-1}, 0).
pub fn gen_relu(x: &[i64]) -> Result<Vec<i64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut y = Vec::with_capacity(x.len());
    y.push(x[0]);
    for i in 1..x.len() {
        y.push((x[i] + y[i - 1]).max(0));
    }
    Ok(y)
}

/// Symmetric mod-19 representative in {-9, ..., 9}.
#[inline]
pub fn smod19(z: i64) -> i64 {
    (z + 9).rem_euclid(19) - 9
}

/// Squared accumulation modulo 19: y1 = x1, yi = smod19(xi^2 + y_{i-1}^2).
pub fn gen_square19(x: &[i64]) -> Result<Vec<i64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut y = Vec::with_capacity(x.len());
    y.push(x[0]);
    for i in 1..x.len() {
        let prev = y[i - 1];
        y.push(smod19(x[i] * x[i] + prev * prev));
    }
    Ok(y)
}

/// Output history as a pointer into the input: y1 = x1, and for i >= 2,
/// p = (sum of the last min(d, i-1) outputs) mod L, yi = x[p] (0-based).
pub fn gen_index(x: &[i64], d: usize) -> Result<Vec<i64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let len = x.len() as i64;
    if d < 1 || d > x.len() {
        return Err(Error::InvalidConfig(format!("index window must satisfy 1 <= d <= L, got {d}")));
    }
    for &v in x {
        if v < 0 || v >= len {
            return Err(Error::IndexInputOutOfRange(v));
        }
    }
    let mut y = Vec::with_capacity(x.len());
    y.push(x[0]);
    for i in 1..x.len() {
        let hist = d.min(i);
        let p = y[i - hist..i].iter().sum::<i64>().rem_euclid(len);
        y.push(x[p as usize]);
    }
    Ok(y)
}

/// Long multiplication of two equal-width digit sequences
/// (most-significant-first in), emitting the product's digits
/// least-significant-first, zero-padded to 2x the operand width.
pub fn gen_prod(a: &[i64], b: &[i64]) -> Result<Vec<i64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput);
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    for &d in a.iter().chain(b) {
        if !(0..=9).contains(&d) {
            return Err(Error::NonDigit(d));
        }
    }
    let k = a.len();
    // Least-significant-first copies for schoolbook multiplication.
    let al: Vec<i64> = a.iter().rev().copied().collect();
    let bl: Vec<i64> = b.iter().rev().copied().collect();
    let mut out = vec![0i64; 2 * k];
    for (i, &ad) in al.iter().enumerate() {
        for (j, &bd) in bl.iter().enumerate() {
            out[i + j] += ad * bd;
        }
    }
    let mut carry = 0i64;
    for digit in out.iter_mut() {
        let v = *digit + carry;
        *digit = v % 10;
        carry = v / 10;
    }
    debug_assert_eq!(carry, 0, "product cannot exceed 2k digits");
    Ok(out)
}

fn sample_input(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let n = spec.input_len();
    (0..n).map(|_| rng.random_range(spec.input_low..=spec.input_high)).collect()
}

/// Generates a reproducible dataset: inputs are sampled i.i.d. from the
/// spec's bounds on a per-example seeded stream, targets come from the
/// matching oracle. Identical (spec, size, seed) always reproduce the same
/// dataset, independent of iteration order.
pub fn gen_dataset(spec: &TaskSpec, size: usize, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if size < 1 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let mut examples = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let x = sample_input(spec, &mut rng);
        let y = spec.oracle(&x)?;
        examples.push(Example { x, y });
    }
    Ok(Dataset { spec: spec.clone(), seed, split, examples })
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
pub const N_SPECIALS: usize = 4;

/// Frozen token vocabulary: the four specials plus every integer value
/// occurring in any dataset it was built from, sorted ascending. Value ids
/// start at `N_SPECIALS`; id assignment depends only on the value set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    values: Vec<i64>,
}

impl Vocabulary {
    pub fn build(datasets: &[&Dataset]) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut set = BTreeSet::new();
        for ds in datasets {
            for ex in &ds.examples {
                set.extend(ex.x.iter().copied());
                set.extend(ex.y.iter().copied());
            }
        }
        Ok(Vocabulary { values: set.into_iter().collect() })
    }

    pub fn from_values(mut values: Vec<i64>) -> Self {
        values.sort_unstable();
        values.dedup();
        Vocabulary { values }
    }

    pub fn size(&self) -> usize {
        N_SPECIALS + self.values.len()
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn id_of(&self, v: i64) -> Result<u32> {
        self.values
            .binary_search(&v)
            .map(|i| (i + N_SPECIALS) as u32)
            .map_err(|_| Error::OutOfVocab(v))
    }

    pub fn value_of(&self, id: u32) -> Option<i64> {
        let idx = (id as usize).checked_sub(N_SPECIALS)?;
        self.values.get(idx).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < N_SPECIALS
    }
}

/// Sidecar metadata stored next to a dataset's JSON-lines file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: TaskSpec,
    pub seed: u64,
    pub split: Split,
    pub size: usize,
    pub vocabulary: Vocabulary,
}

/// Writes `{prefix}.jsonl` (one `{"x": [...], "y": [...]}` object per line)
/// and `{prefix}.meta.json`.
pub fn write_dataset(ds: &Dataset, prefix: &Path) -> Result<()> {
    let jsonl = prefix.with_extension("jsonl");
    if let Some(dir) = jsonl.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(&jsonl)?);
    for ex in &ds.examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let meta = DatasetMeta {
        spec: ds.spec.clone(),
        seed: ds.seed,
        split: ds.split,
        size: ds.examples.len(),
        vocabulary: Vocabulary::build(&[ds])?,
    };
    let meta_path = prefix.with_extension("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_dataset(prefix: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("meta.json"))?)?;
    let file = std::fs::File::open(prefix.with_extension("jsonl"))?;
    let mut examples = Vec::with_capacity(meta.size);
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(serde_json::from_str(&line)?);
    }
    let ds = Dataset { spec: meta.spec.clone(), seed: meta.seed, split: meta.split, examples };
    Ok((ds, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent recurrence evaluators, written directly from the task
    // definitions and kept separate from the generators they check.
    fn oracle_relu(x: &[i64]) -> Vec<i64> {
        let mut y = vec![x[0]];
        for i in 1..x.len() {
            y.push(std::cmp::max(x[i] + y[i - 1], 0));
        }
        y
    }

    fn oracle_square19(x: &[i64]) -> Vec<i64> {
        let mut y = vec![x[0]];
        for i in 1..x.len() {
            let z = x[i] * x[i] + y[i - 1] * y[i - 1];
            let mut m = z % 19;
            while m > 9 {
                m -= 19;
            }
            while m < -9 {
                m += 19;
            }
            y.push(m);
        }
        y
    }

    fn oracle_index(x: &[i64], d: usize) -> Vec<i64> {
        let len = x.len() as i64;
        let mut y = vec![x[0]];
        for i in 1..x.len() {
            let mut s = 0i64;
            for j in 1..=d.min(i) {
                s += y[i - j];
            }
            y.push(x[s.rem_euclid(len) as usize]);
        }
        y
    }

    #[test]
    fn relu_paper_row() {
        // First ten elements of the ReLU reference sample.
        let x = [4, -7, -7, -3, 8, 1, -8, -9, 8, 6];
        assert_eq!(gen_relu(&x).unwrap(), vec![4, 0, 0, 0, 8, 9, 1, 0, 8, 14]);
    }

    #[test]
    fn relu_zero_fixed_point() {
        assert_eq!(gen_relu(&[0, 0, 0]).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn relu_alternating_matches_oracle() {
        let x = [-9, 9, -9, 9];
        let want = oracle_relu(&x); // frozen: [-9, 0, 0, 9]
        assert_eq!(want, vec![-9, 0, 0, 9]);
        assert_eq!(gen_relu(&x).unwrap(), want);
    }

    #[test]
    fn relu_empty_errors() {
        assert!(matches!(gen_relu(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn square19_worked_example() {
        let x = [7, -2, 4, 1, 3];
        assert_eq!(gen_square19(&x).unwrap(), vec![7, -4, -6, -1, -9]);
    }

    #[test]
    fn square19_single_element() {
        assert_eq!(gen_square19(&[0]).unwrap(), vec![0]);
    }

    #[test]
    fn square19_matches_independent_oracle() {
        let x = [-5, -9, 8, 7, 8, -7, 5, -9, -6, 9];
        assert_eq!(gen_square19(&x).unwrap(), oracle_square19(&x));
    }

    #[test]
    fn smod19_range_and_representatives() {
        for z in -500..500 {
            let m = smod19(z);
            assert!((-9..=9).contains(&m));
            assert_eq!((z - m).rem_euclid(19), 0);
        }
        assert_eq!(smod19(53), -4);
    }

    #[test]
    fn index_window_two() {
        assert_eq!(gen_index(&[1, 0, 3, 2, 4], 2).unwrap(), vec![1, 0, 0, 1, 0]);
    }

    #[test]
    fn index_all_zero() {
        assert_eq!(gen_index(&[0, 0, 0, 0], 3).unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn index_window_one() {
        assert_eq!(gen_index(&[2, 1, 0], 1).unwrap(), vec![2, 0, 2]);
    }

    #[test]
    fn index_rejects_out_of_range() {
        assert!(matches!(gen_index(&[0, 5, 1], 2), Err(Error::IndexInputOutOfRange(5))));
        assert!(matches!(gen_index(&[0, -1, 1], 2), Err(Error::IndexInputOutOfRange(-1))));
    }

    #[test]
    fn prod_paper_row() {
        // 203 x 2637 = 535311, least-significant-first, padded to 10.
        let a = [0, 0, 2, 0, 3];
        let b = [0, 2, 6, 3, 7];
        assert_eq!(gen_prod(&a, &b).unwrap(), vec![1, 1, 3, 5, 3, 5, 0, 0, 0, 0]);
    }

    #[test]
    fn prod_by_zero() {
        assert_eq!(gen_prod(&[0; 5], &[9; 5]).unwrap(), vec![0; 10]);
    }

    #[test]
    fn prod_small_matches_bigint_oracle() {
        // 12 x 34 = 408.
        let a = [0, 0, 0, 1, 2];
        let b = [0, 0, 0, 3, 4];
        let got = gen_prod(&a, &b).unwrap();
        assert_eq!(got, vec![8, 0, 4, 0, 0, 0, 0, 0, 0, 0]);
        // Independent route: u128 arithmetic.
        let to_num = |d: &[i64]| d.iter().fold(0u128, |acc, &v| acc * 10 + v as u128);
        let mut prod = to_num(&a) * to_num(&b);
        let mut digits = Vec::new();
        for _ in 0..10 {
            digits.push((prod % 10) as i64);
            prod /= 10;
        }
        assert_eq!(got, digits);
    }

    #[test]
    fn prod_rejects_non_digit() {
        assert!(matches!(gen_prod(&[0, 12], &[1, 1]), Err(Error::NonDigit(12))));
    }

    #[test]
    fn dataset_determinism() {
        let spec = TaskSpec::relu(5);
        let a = gen_dataset(&spec, 3, 42, Split::Train).unwrap();
        let b = gen_dataset(&spec, 3, 42, Split::Train).unwrap();
        assert_eq!(a.examples, b.examples);
        let c = gen_dataset(&spec, 3, 43, Split::Train).unwrap();
        assert_ne!(a.examples, c.examples);
    }

    #[test]
    fn dataset_prefix_stability() {
        // Growing a dataset keeps earlier examples unchanged (per-index streams).
        let spec = TaskSpec::square19(7);
        let small = gen_dataset(&spec, 10, 9, Split::Train).unwrap();
        let big = gen_dataset(&spec, 50, 9, Split::Train).unwrap();
        assert_eq!(small.examples[..], big.examples[..10]);
    }

    #[test]
    fn square19_dataset_range() {
        let spec = TaskSpec::square19(5);
        let ds = gen_dataset(&spec, 1000, 42, Split::Train).unwrap();
        for ex in &ds.examples {
            assert!(ex.y.iter().all(|v| (-9..=9).contains(v)));
        }
    }

    #[test]
    fn index_dataset_verifies_against_oracle() {
        let spec = TaskSpec::index(13, 2);
        let ds = gen_dataset(&spec, 100, 7, Split::Train).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.y, oracle_index(&ex.x, 2));
            // Index outputs are elements of x.
            assert!(ex.y.iter().all(|v| ex.x.contains(v)));
        }
    }

    #[test]
    fn oracle_idempotence_all_tasks() {
        for spec in [TaskSpec::relu(8), TaskSpec::square19(8), TaskSpec::index(8, 3), TaskSpec::prod(4)] {
            let ds = gen_dataset(&spec, 50, 11, Split::Train).unwrap();
            for ex in &ds.examples {
                assert_eq!(spec.oracle(&ex.x).unwrap(), ex.y);
                assert_eq!(ex.y.len(), spec.target_len);
            }
        }
    }

    #[test]
    fn prefix_causality_relu_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<i64> = (0..12).map(|_| rng.random_range(-9..=9)).collect();
            for k in 1..=x.len() {
                let full_r = gen_relu(&x).unwrap();
                let trunc_r = gen_relu(&x[..k]).unwrap();
                assert_eq!(&full_r[..k], &trunc_r[..]);
                let full_s = gen_square19(&x).unwrap();
                let trunc_s = gen_square19(&x[..k]).unwrap();
                assert_eq!(&full_s[..k], &trunc_s[..]);
            }
        }
    }

    #[test]
    fn relu_outputs_nonnegative_after_first() {
        let ds = gen_dataset(&TaskSpec::relu(20), 200, 3, Split::Train).unwrap();
        for ex in &ds.examples {
            assert!(ex.y[1..].iter().all(|&v| v >= 0));
        }
    }

    #[test]
    fn vocab_construction() {
        let spec = TaskSpec::index(4, 2);
        let mut ds = gen_dataset(&spec, 5, 1, Split::Train).unwrap();
        ds.examples = vec![Example { x: vec![0, 1, 1, 0], y: vec![0, 0, 1, 1] }];
        let v = Vocabulary::build(&[&ds]).unwrap();
        assert_eq!(v.size(), 2 + N_SPECIALS);
        assert_eq!(v.id_of(0).unwrap(), 4);
        assert_eq!(v.id_of(1).unwrap(), 5);
        assert!(matches!(v.id_of(7), Err(Error::OutOfVocab(7))));
        assert_eq!(v.value_of(4), Some(0));
        assert_eq!(v.value_of(PAD), None);
    }

    #[test]
    fn vocab_order_independent() {
        let spec = TaskSpec::relu(5);
        let a = gen_dataset(&spec, 20, 1, Split::Train).unwrap();
        let b = gen_dataset(&spec, 20, 2, Split::Eval).unwrap();
        let v1 = Vocabulary::build(&[&a, &b]).unwrap();
        let v2 = Vocabulary::build(&[&b, &a]).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn vocab_covers_train_and_eval() {
        let spec = TaskSpec::relu(20);
        let train = gen_dataset(&spec, 500, 42, Split::Train).unwrap();
        let eval = gen_dataset(&spec, 200, 123, Split::Eval).unwrap();
        let v = Vocabulary::build(&[&train, &eval]).unwrap();
        for ex in train.examples.iter().chain(&eval.examples) {
            for &val in ex.x.iter().chain(&ex.y) {
                assert!(v.id_of(val).is_ok());
            }
        }
    }

    #[test]
    fn dataset_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("relu5");
        let ds = gen_dataset(&TaskSpec::relu(5), 25, 42, Split::Train).unwrap();
        write_dataset(&ds, &prefix).unwrap();
        let (back, meta) = read_dataset(&prefix).unwrap();
        assert_eq!(back.examples, ds.examples);
        assert_eq!(meta.size, 25);
        assert_eq!(meta.spec, ds.spec);
    }
}
