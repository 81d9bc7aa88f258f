//! TIES-Merging over dense task vectors: trim, elect sign, disjoint mean.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Number of entries kept by [`trim`]: `round(keep_frac · N)`, at least one.
pub fn keep_count(len: usize, keep_frac: f64) -> usize {
    ((keep_frac * len as f64).round() as usize).clamp(1, len)
}

/// Keep the largest-magnitude entries and zero the rest. Equal magnitudes at
/// the cut are resolved in favour of the lower flat index.
pub fn trim(tv: &Matrix, keep_frac: f64) -> Matrix {
    let data = tv.data();
    let keep = keep_count(data.len(), keep_frac);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&i, &j| data[j].abs().total_cmp(&data[i].abs()).then(i.cmp(&j)));
    let mut out = Matrix::zeros(tv.rows(), tv.cols());
    for &i in &order[..keep] {
        out.data_mut()[i] = data[i];
    }
    out
}

/// Merged task vector: `λ ·` mean of the trimmed entries agreeing with the
/// elected sign. An elected sign of zero, or no agreeing entry, gives zero.
pub fn ties_merge(task_vectors: &[Matrix], keep_frac: f64, lambda: f64) -> Result<Matrix> {
    let first = task_vectors
        .first()
        .ok_or_else(|| Error::Empty("TIES merge of zero task vectors".into()))?;
    if !(keep_frac > 0.0 && keep_frac <= 1.0) {
        return Err(Error::Config(format!(
            "keep_frac {keep_frac} outside (0, 1]"
        )));
    }
    let shape = first.shape();
    if let Some(bad) = task_vectors.iter().find(|t| t.shape() != shape) {
        return Err(Error::dim(format!(
            "task vectors of shape {:?} and {:?}",
            shape,
            bad.shape()
        )));
    }
    let trimmed: Vec<Matrix> = task_vectors.iter().map(|t| trim(t, keep_frac)).collect();
    let mut out = Matrix::zeros(shape.0, shape.1);
    for (e, slot) in out.data_mut().iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|t| t.data()[e]).sum();
        if total == 0.0 {
            continue;
        }
        let sign = total.signum();
        let (mut sum, mut count) = (0.0, 0usize);
        for t in &trimmed {
            let x = t.data()[e];
            if x != 0.0 && x.signum() == sign {
                sum += x;
                count += 1;
            }
        }
        if count > 0 {
            *slot = lambda * sum / count as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trim_breaks_ties_by_index() {
        let m = Matrix::from_rows(&[&[1.0, -1.0], &[1.0, 0.5]]);
        let t = trim(&m, 0.5);
        assert_eq!(t.data(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_vector_is_its_trimmed_self() {
        let m = Matrix::from_rows(&[&[0.1, -3.0, 2.0], &[0.0, 0.5, -0.2]]);
        assert_eq!(
            ties_merge(std::slice::from_ref(&m), 0.5, 1.0).unwrap(),
            trim(&m, 0.5)
        );
        assert_eq!(ties_merge(std::slice::from_ref(&m), 1.0, 1.0).unwrap(), m);
    }

    #[test]
    fn opposite_entries_cancel() {
        let a = Matrix::from_rows(&[&[2.0]]);
        let b = Matrix::from_rows(&[&[-2.0]]);
        assert_eq!(ties_merge(&[a, b], 1.0, 1.0).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn disjoint_mean_ignores_dissenters() {
        let a = Matrix::from_rows(&[&[3.0]]);
        let b = Matrix::from_rows(&[&[1.0]]);
        let c = Matrix::from_rows(&[&[-2.0]]);
        // Sum 2 → positive; agreeing entries 3 and 1.
        assert_eq!(ties_merge(&[a, b, c], 1.0, 1.0).unwrap().get(0, 0), 2.0);
    }
}
