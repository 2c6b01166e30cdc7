use crate::diff::Var;
use crate::error::{Error, Result};

/// Norm guard for cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

/// Logits `temperature · cos(f_I[i], f_T[j])` together with a flag that is
/// set when some row of either side is all zeros (its cosines are 0).
pub fn alignment_logits<'t>(image: Var<'t>, text: Var<'t>, temperature: f64) -> Result<(Var<'t>, bool)> {
    let (si, st) = (image.shape(), text.shape());
    if si.len() != 2 || st.len() != 2 || si[1] != st[1] {
        return Err(Error::Shape {
            op: "alignment_logits",
            left: si,
            right: st,
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let (a, da) = normalize_rows(image)?;
    let (b, db) = normalize_rows(text)?;
    Ok((a.matmul(b.t()?)?.scale(temperature)?, da || db))
}

/// Rows divided by `‖row‖ + ε`; zero rows stay zero.
pub fn normalize_rows(x: Var<'_>) -> Result<(Var<'_>, bool)> {
    let norms = x.row_norms()?;
    let degenerate = norms.value().data().iter().any(|&n| n < COSINE_EPS);
    Ok((x.div(norms.add_scalar(COSINE_EPS)?)?, degenerate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Tape, Tensor};

    fn logits(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> (Tensor, bool) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&a).unwrap());
        let y = tape.constant(Tensor::from_rows(&b).unwrap());
        let (l, flag) = alignment_logits(x, y, 10.0).unwrap();
        (l.eval(), flag)
    }

    #[test]
    fn analytic_cosines() {
        let (l, flag) = logits(vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert!(!flag);
        assert!((l.at(0, 0) - 10.0).abs() < 1e-10);
        assert_eq!(l.at(0, 1), 0.0);
        assert!((l.at(0, 2) - 10.0 / 2f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn zero_row_is_flagged_and_zero() {
        let (l, flag) = logits(vec![vec![0.0, 0.0], vec![3.0, 4.0]], vec![vec![1.0, 0.0]]);
        assert!(flag);
        assert_eq!(l.at(0, 0), 0.0);
        assert!((l.at(1, 0) - 6.0).abs() < 1e-10);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let y = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(alignment_logits(x, y, 1.0), Err(Error::Shape { .. })));
        assert!(alignment_logits(x, x, 0.0).is_err());
    }
}
