//! Visual-linguistic contrasting head: logits are scaled cosines between
//! the pair feature and each candidate social prompt embedding, trained
//! with softmax cross-entropy.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Differentiable logits `z_c = scale * cos(u, prompt_c)` on the tape.
pub fn classify_logits<F: Scalar>(
    tape: &mut Tape<F>,
    pair: Var,
    prompt_embeds: &[Var],
    logit_scale: F,
) -> Result<Var> {
    if prompt_embeds.is_empty() {
        return Err(Error::Precondition("no prompt embeddings".into()));
    }
    let cosines = prompt_embeds
        .iter()
        .map(|&p| tape.cosine(pair, p))
        .collect::<Result<Vec<_>>>()?;
    let row = tape.concat_cols(&cosines);
    Ok(tape.scale(row, logit_scale))
}

/// Cross-entropy of `softmax(logits)` at the target class, on the tape.
pub fn loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, target: usize) -> Result<Var> {
    tape.cross_entropy(logits, target)
}

/// Array route of [`classify_logits`]; the two routes are cross-checked
/// in tests.
pub fn classify_logits_plain<F: Scalar>(
    pair: &Array1<F>,
    prompt_embeds: &Array2<F>,
    logit_scale: F,
) -> Result<Array1<F>> {
    if prompt_embeds.nrows() == 0 {
        return Err(Error::Precondition("no prompt embeddings".into()));
    }
    if prompt_embeds.ncols() != pair.len() {
        return Err(Error::Shape(format!(
            "pair has {} dims, prompts have {}",
            pair.len(),
            prompt_embeds.ncols()
        )));
    }
    let nu: F = pair.iter().map(|&x| x * x).sum::<F>().sqrt();
    if nu == F::zero() {
        return Err(Error::Numeric("zero-norm pair feature".into()));
    }
    let mut out = Array1::zeros(prompt_embeds.nrows());
    for (c, row) in prompt_embeds.rows().into_iter().enumerate() {
        let nt: F = row.iter().map(|&x| x * x).sum::<F>().sqrt();
        if nt == F::zero() {
            return Err(Error::Numeric(format!("zero-norm prompt embedding {c}")));
        }
        let dot: F = pair.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
        out[c] = logit_scale * dot / (nu * nt);
    }
    Ok(out)
}

/// Array route of the cross-entropy, numerically stabilized.
pub fn loss_plain<F: Scalar>(logits: &Array1<F>, target: usize) -> Result<F> {
    if target >= logits.len() {
        return Err(Error::Precondition(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
    Ok(lse - logits[target])
}

/// Softmax probabilities of a logit row.
pub fn softmax_plain<F: Scalar>(logits: &Array1<F>) -> Array1<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum: F = out.iter().copied().sum();
    out.mapv_inplace(|x| x / sum);
    out
}
