//! Classification losses shared by pretraining, synthesis and evaluation.

use crate::engine::{Array, Tape, Var};
use crate::error::{Error, Result};

/// `[labels.len(), classes]` one-hot rows.
pub fn one_hot(labels: &[usize], classes: usize) -> Array {
    let mut a = Array::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        a.data_mut()[i * classes + y] = 1.0;
    }
    a
}

/// Mean cross-entropy of `logits: [B, K]` against hard labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {s:?} with {} labels", labels.len()),
        ));
    }
    let ls = tape.log_softmax(logits)?;
    let y = tape.constant(one_hot(labels, s[1]));
    let picked = tape.mul(ls, y)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}
