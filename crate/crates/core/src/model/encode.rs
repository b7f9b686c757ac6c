//! Turning examples into decoder token streams.
//!
//! Row layout: `BOS, input tokens, SEP, permuted target tokens, EOS`. For
//! Prod the input tokens are `digits(a), SEP, digits(b)`. The loss mask marks
//! the positions whose next token is a target token or the EOS, i.e. exactly
//! L+1 prediction positions per row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perm::Permutation;
use crate::taskgen::{Example, TaskKind, TaskSpec, Vocabulary, BOS, EOS, SEP};

/// Token-id matrix with the prediction mask and per-row permutation ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodedBatch {
    pub n_rows: usize,
    pub t_len: usize,
    /// Row-major [n_rows, t_len].
    pub tokens: Vec<u32>,
    /// Row-major [n_rows, t_len]; true at positions that predict a target or EOS.
    pub mask: Vec<bool>,
    pub perm_ids: Vec<u32>,
}

impl EncodedBatch {
    pub fn row(&self, r: usize) -> &[u32] {
        &self.tokens[r * self.t_len..(r + 1) * self.t_len]
    }

    pub fn mask_row(&self, r: usize) -> &[bool] {
        &self.mask[r * self.t_len..(r + 1) * self.t_len]
    }

    pub fn masked_per_row(&self) -> usize {
        if self.n_rows == 0 {
            0
        } else {
            self.mask_row(0).iter().filter(|&&b| b).count()
        }
    }
}

/// Number of input tokens as encoded (Prod inserts a SEP between operands).
pub fn encoded_input_len(spec: &TaskSpec) -> usize {
    match spec.kind {
        TaskKind::Prod => spec.input_len() + 1,
        _ => spec.input_len(),
    }
}

/// Total decoder length L' = BOS + inputs + SEP + L targets + EOS.
pub fn encoded_len(spec: &TaskSpec) -> usize {
    1 + encoded_input_len(spec) + 1 + spec.target_len + 1
}

/// Index of the first target slot in a row.
pub fn target_start(spec: &TaskSpec) -> usize {
    1 + encoded_input_len(spec) + 1
}

fn encode_input_tokens(spec: &TaskSpec, x: &[i64], vocab: &Vocabulary, out: &mut Vec<u32>) -> Result<()> {
    match spec.kind {
        TaskKind::Prod => {
            let k = spec.operand_digits.unwrap_or(x.len() / 2);
            for &v in &x[..k] {
                out.push(vocab.id_of(v)?);
            }
            out.push(SEP);
            for &v in &x[k..] {
                out.push(vocab.id_of(v)?);
            }
        }
        _ => {
            for &v in x {
                out.push(vocab.id_of(v)?);
            }
        }
    }
    Ok(())
}

/// Encodes the decoder prefix (everything before the first target token):
/// `BOS, inputs, SEP`.
pub fn encode_prefix(spec: &TaskSpec, x: &[i64], vocab: &Vocabulary) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(target_start(spec));
    out.push(BOS);
    encode_input_tokens(spec, x, vocab, &mut out)?;
    out.push(SEP);
    Ok(out)
}

fn encode_row_into(
    spec: &TaskSpec,
    ex: &Example,
    perm: &Permutation,
    vocab: &Vocabulary,
    tokens: &mut Vec<u32>,
    mask: &mut Vec<bool>,
) -> Result<()> {
    let l = spec.target_len;
    if ex.y.len() != l {
        return Err(Error::LengthMismatch { expected: l, got: ex.y.len() });
    }
    let row_start = tokens.len();
    tokens.push(BOS);
    encode_input_tokens(spec, &ex.x, vocab, tokens)?;
    tokens.push(SEP);
    let reordered = perm.apply(&ex.y)?;
    for v in reordered {
        tokens.push(vocab.id_of(v)?);
    }
    tokens.push(EOS);
    let t_len = tokens.len() - row_start;
    debug_assert_eq!(t_len, encoded_len(spec));
    // Prediction positions: the SEP predicts the first target; each target
    // predicts the next; the last target predicts EOS.
    let ts = target_start(spec);
    for p in 0..t_len {
        mask.push(p + 1 >= ts && p + 1 <= ts + l);
    }
    Ok(())
}

/// Encodes a batch where every row shares one permutation.
pub fn encode_batch(
    spec: &TaskSpec,
    examples: &[Example],
    perm: &Permutation,
    vocab: &Vocabulary,
) -> Result<EncodedBatch> {
    if perm.len() != spec.target_len {
        return Err(Error::LengthMismatch { expected: spec.target_len, got: perm.len() });
    }
    let t_len = encoded_len(spec);
    let mut tokens = Vec::with_capacity(examples.len() * t_len);
    let mut mask = Vec::with_capacity(examples.len() * t_len);
    for ex in examples {
        encode_row_into(spec, ex, perm, vocab, &mut tokens, &mut mask)?;
    }
    Ok(EncodedBatch { n_rows: examples.len(), t_len, tokens, mask, perm_ids: vec![0; examples.len()] })
}

/// One row of a mixed-order batch: an example paired with the permutation
/// (and its id) used to reorder its target.
pub struct MixedRow<'a> {
    pub example: &'a Example,
    pub perm: &'a Permutation,
    pub perm_id: u32,
}

/// Encodes a batch whose rows may carry different permutations.
pub fn encode_rows(spec: &TaskSpec, rows: &[MixedRow<'_>], vocab: &Vocabulary) -> Result<EncodedBatch> {
    let t_len = encoded_len(spec);
    let mut tokens = Vec::with_capacity(rows.len() * t_len);
    let mut mask = Vec::with_capacity(rows.len() * t_len);
    let mut perm_ids = Vec::with_capacity(rows.len());
    for row in rows {
        encode_row_into(spec, row.example, row.perm, vocab, &mut tokens, &mut mask)?;
        perm_ids.push(row.perm_id);
    }
    Ok(EncodedBatch { n_rows: rows.len(), t_len, tokens, mask, perm_ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_dataset, Split};

    fn setup(l: usize) -> (TaskSpec, crate::taskgen::Dataset, Vocabulary) {
        let spec = TaskSpec::relu(l);
        let ds = gen_dataset(&spec, 8, 42, Split::Train).unwrap();
        let vocab = Vocabulary::build(&[&ds]).unwrap();
        (spec, ds, vocab)
    }

    #[test]
    fn identity_roundtrip() {
        let (spec, ds, vocab) = setup(5);
        let batch = encode_batch(&spec, &ds.examples, &Permutation::identity(5), &vocab).unwrap();
        let ts = target_start(&spec);
        for (r, ex) in ds.examples.iter().enumerate() {
            let row = batch.row(r);
            assert_eq!(row[0], BOS);
            assert_eq!(row[ts - 1], SEP);
            assert_eq!(*row.last().unwrap(), EOS);
            let decoded: Vec<i64> = row[ts..ts + 5].iter().map(|&id| vocab.value_of(id).unwrap()).collect();
            assert_eq!(decoded, ex.y);
        }
    }

    #[test]
    fn reverse_reorders_targets() {
        let spec = TaskSpec::relu(3);
        let ex = Example { x: vec![1, 2, 3], y: vec![1, 2, 3] };
        let ds = crate::taskgen::Dataset { spec: spec.clone(), seed: 0, split: Split::Train, examples: vec![ex] };
        let vocab = Vocabulary::build(&[&ds]).unwrap();
        let batch = encode_batch(&spec, &ds.examples, &Permutation::reverse(3), &vocab).unwrap();
        let ts = target_start(&spec);
        let decoded: Vec<i64> =
            batch.row(0)[ts..ts + 3].iter().map(|&id| vocab.value_of(id).unwrap()).collect();
        assert_eq!(decoded, vec![3, 2, 1]);
    }

    #[test]
    fn mask_counts_l_plus_one() {
        let (spec, ds, vocab) = setup(7);
        let batch = encode_batch(&spec, &ds.examples, &Permutation::reverse(7), &vocab).unwrap();
        for r in 0..batch.n_rows {
            let count = batch.mask_row(r).iter().filter(|&&b| b).count();
            assert_eq!(count, 8);
            // The final position (EOS itself) predicts nothing.
            assert!(!batch.mask_row(r)[batch.t_len - 1]);
        }
    }

    #[test]
    fn prod_row_has_operand_separator() {
        let spec = TaskSpec::prod(2);
        let ds = gen_dataset(&spec, 3, 1, Split::Train).unwrap();
        let vocab = Vocabulary::build(&[&ds]).unwrap();
        let batch = encode_batch(&spec, &ds.examples, &Permutation::identity(4), &vocab).unwrap();
        assert_eq!(batch.t_len, 1 + 5 + 1 + 4 + 1);
        let row = batch.row(0);
        assert_eq!(row[3], SEP); // between the two operands
        assert_eq!(row[6], SEP); // before the targets
    }

    #[test]
    fn out_of_vocab_is_an_error() {
        let (spec, ds, _) = setup(5);
        let tiny_vocab = Vocabulary::from_values(vec![0]);
        let err = encode_batch(&spec, &ds.examples, &Permutation::identity(5), &tiny_vocab);
        assert!(matches!(err, Err(Error::OutOfVocab(_))));
    }
}
