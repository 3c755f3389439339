//! Temperature-scaled InfoNCE over cosine similarities.

use crate::tensor::{l2_norm, Mat, Tape, Var};
use crate::{Error, Result};

/// Validates InfoNCE inputs: equal shapes, at least one row, finite values,
/// no zero rows, positive temperature.
pub fn check_info_nce_inputs(z1: &Mat, z2: &Mat, tau: f64) -> Result<()> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if z1.shape() != z2.shape() {
        return Err(Error::Shape(format!("views differ in shape: {:?} vs {:?}", z1.shape(), z2.shape())));
    }
    if z1.rows == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if !z1.is_finite() || !z2.is_finite() {
        return Err(Error::DegenerateInput("non-finite embedding".into()));
    }
    for z in [z1, z2] {
        if (0..z.rows).any(|r| l2_norm(z.row(r)) == 0.0) {
            return Err(Error::DegenerateInput("embedding row with zero norm".into()));
        }
    }
    Ok(())
}

/// Row-wise cosine similarity matrix `B × B` between two batches, divided by `tau`.
pub fn cosine_logits(tape: &mut Tape, z1: Var, z2: Var, tau: f64) -> Var {
    let a = tape.l2_normalize_rows(z1);
    let b = tape.l2_normalize_rows(z2);
    let bt = tape.transpose(b);
    let s = tape.matmul(a, bt);
    tape.scale(s, 1.0 / tau)
}

/// Mean over rows of `−log softmax(logits)[i, i]`. Row maxima are subtracted
/// before exponentiation.
pub fn diagonal_nce(tape: &mut Tape, logits: Var) -> Var {
    let (rows, cols) = tape.shape(logits);
    assert_eq!(rows, cols, "square logits expected");
    let lp = tape.log_softmax_rows(logits);
    let diag: Vec<usize> = (0..rows).collect();
    let picked = tape.pick_cols(lp, &diag);
    let m = tape.mean_all(picked);
    tape.scale(m, -1.0)
}

/// InfoNCE of `z1[i]` against all of `z2`, positives on the diagonal.
pub fn info_nce(tape: &mut Tape, z1: Var, z2: Var, tau: f64) -> Var {
    let logits = cosine_logits(tape, z1, z2, tau);
    diagonal_nce(tape, logits)
}

/// Loss value for two plain matrices.
pub fn info_nce_loss(z1: &Mat, z2: &Mat, tau: f64) -> Result<f64> {
    check_info_nce_inputs(z1, z2, tau)?;
    let mut t = Tape::new();
    let a = t.constant(z1.clone());
    let b = t.constant(z2.clone());
    let l = info_nce(&mut t, a, b, tau);
    Ok(t.value(l).item())
}

/// Loss and its gradient with respect to `z1`.
pub fn info_nce_grad(z1: &Mat, z2: &Mat, tau: f64) -> Result<(f64, Mat)> {
    check_info_nce_inputs(z1, z2, tau)?;
    let mut t = Tape::new();
    let a = t.input(z1.clone(), true);
    let b = t.constant(z2.clone());
    let l = info_nce(&mut t, a, b, tau);
    let g = t.backward(l);
    Ok((t.value(l).item(), g.wrt(a).cloned().unwrap_or_else(|| Mat::zeros(z1.rows, z1.cols))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_row_is_zero() {
        let z = Mat::from_rows(&[[0.3, -1.0, 2.0]]);
        assert_eq!(info_nce_loss(&z, &z, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pair() {
        let z = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((info_nce_loss(&z, &z, 1.0).unwrap() - want).abs() < 1e-12);
        assert!(info_nce_loss(&z, &z, 0.01).unwrap() < 1e-3);
    }

    #[test]
    fn input_errors() {
        let z = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(info_nce_loss(&z, &z, 0.0), Err(Error::Domain(_))));
        let zero = Mat::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(info_nce_loss(&zero, &z, 1.0), Err(Error::DegenerateInput(_))));
    }

    fn batch(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
        prop::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_filter("non-zero rows", move |v| v.chunks(cols).all(|r| r.iter().any(|x| x.abs() > 1e-3)))
            .prop_map(move |v| Mat::from_vec(rows, cols, v))
    }

    proptest! {
        #[test]
        fn bounded_above(z1 in batch(5, 4), z2 in batch(5, 4), tau in 0.05f64..2.0) {
            let l = info_nce_loss(&z1, &z2, tau).unwrap();
            prop_assert!(l <= (5.0f64).ln() + 2.0 / tau + 1e-9);
        }
    }
}
