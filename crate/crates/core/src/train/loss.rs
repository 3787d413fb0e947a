//! L1 objectives recorded on the tape.
//!
//! The subgradient of `|x|` at `x = 0` is taken as 0.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

fn check(k: usize, labels: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("loss over zero samples".into()));
    }
    if k != labels {
        return Err(Error::Contract(format!("{k} predictions for {labels} labels")));
    }
    Ok(())
}

fn abs_residual(tape: &mut Tape, pred: Var, label: f32) -> Result<Var> {
    if tape.shape(pred).numel() != 1 {
        return Err(Error::Contract(format!(
            "prediction must be a scalar, got {:?}",
            tape.dims(pred)
        )));
    }
    let r = tape.add_scalar(pred, -label);
    Ok(tape.abs(r))
}

fn total(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Contract("empty sum".into()))?;
    it.try_fold(first, |acc, t| tape.add(acc, t))
}

/// `(1/K) Σ_k |ŷ_k − y_k|`.
pub fn loss_multi(tape: &mut Tape, preds: &[Var], labels: &[f32]) -> Result<Var> {
    check(preds.len(), labels.len())?;
    let terms = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| abs_residual(tape, p, y))
        .collect::<Result<Vec<_>>>()?;
    let s = total(tape, terms)?;
    Ok(tape.scale(s, 1.0 / preds.len() as f32))
}

/// `(1/K) Σ_k Σ_m |ŷ_{k,m} − y_k|`: summed over modalities, averaged over
/// samples only.
pub fn loss_uni(tape: &mut Tape, preds: &[Vec<Var>], labels: &[f32]) -> Result<Var> {
    check(preds.len(), labels.len())?;
    let mut terms = Vec::new();
    for (per_mod, &y) in preds.iter().zip(labels) {
        if per_mod.is_empty() {
            return Err(Error::Contract("no unimodal predictions for a sample".into()));
        }
        for &p in per_mod {
            terms.push(abs_residual(tape, p, y)?);
        }
    }
    let s = total(tape, terms)?;
    Ok(tape.scale(s, 1.0 / preds.len() as f32))
}

/// `L_multi + λ·L_uni`; without a unimodal term the multimodal loss is
/// returned as is.
pub fn loss_total(tape: &mut Tape, l_multi: Var, l_uni: Option<Var>, lambda: f32) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda = {lambda} must be >= 0")));
    }
    match l_uni {
        None => Ok(l_multi),
        Some(u) => {
            let weighted = tape.scale(u, lambda);
            tape.add(l_multi, weighted)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(tape: &mut Tape, v: &[f32]) -> Vec<Var> {
        v.iter().map(|&x| tape.constant(&[1, 1], vec![x]).unwrap()).collect()
    }

    #[test]
    fn multi_examples() {
        let mut tape = Tape::new();
        let p = scalars(&mut tape, &[0.5, -1.5]);
        let l = loss_multi(&mut tape, &p, &[0.5, -1.5]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let p = scalars(&mut tape, &[1.0, -1.0]);
        let l = loss_multi(&mut tape, &p, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        assert!(loss_multi(&mut tape, &[], &[]).is_err());
    }

    #[test]
    fn uni_examples() {
        let mut tape = Tape::new();
        let p = scalars(&mut tape, &[1.0, 2.0, 3.0]);
        let l = loss_uni(&mut tape, &[p], &[0.0]).unwrap();
        assert_eq!(tape.scalar(l), 6.0);

        let labels = [0.3, -2.0, 1.1];
        let preds = [1.0, 0.5, -0.25];
        let multi_in = scalars(&mut tape, &preds);
        let lm = loss_multi(&mut tape, &multi_in, &labels).unwrap();
        let uni_in: Vec<Vec<Var>> = preds.iter().map(|&x| scalars(&mut tape, &[x, x, x])).collect();
        let lu = loss_uni(&mut tape, &uni_in, &labels).unwrap();
        assert!((tape.scalar(lu) - 3.0 * tape.scalar(lm)).abs() < 1e-6);
    }

    #[test]
    fn total_examples() {
        let mut tape = Tape::new();
        let m = tape.constant(&[], vec![1.0]).unwrap();
        let u = tape.constant(&[], vec![6.0]).unwrap();
        let t = loss_total(&mut tape, m, Some(u), 0.5).unwrap();
        assert_eq!(tape.scalar(t), 4.0);
        let t0 = loss_total(&mut tape, m, Some(u), 0.0).unwrap();
        assert_eq!(tape.scalar(t0).to_bits(), tape.scalar(m).to_bits());
        assert!(loss_total(&mut tape, m, Some(u), -1.0).is_err());
    }

    #[test]
    fn subgradient_is_zero_at_equality() {
        use crate::tensor::Tensor;
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[1, 1], vec![2.0]).unwrap().with_requires_grad(true));
        let l = loss_multi(&mut tape, &[x], &[2.0]).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }
}
