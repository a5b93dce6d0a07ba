use crate::error::{Error, Result};
use crate::kernels::criterion::check_targets;
use crate::numerics::{Real, Tensor};
use crate::par;

/// `dL/dh_i = q_i - alpha/V - 1 + alpha` at the target index, `q_i - alpha/V`
/// elsewhere. Pad rows get zeros.
pub fn ls_cross_entropy_backward<T: Real>(
    q: &Tensor<T>,
    targets: &[usize],
    alpha: f64,
    pad_id: Option<usize>,
) -> Result<Tensor<T>> {
    let v = q.cols();
    if targets.len() != q.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} rows",
            targets.len(),
            q.rows()
        )));
    }
    check_targets(targets, v, pad_id)?;
    let a = T::from_f64(alpha);
    let off = a / T::from_usize(v);
    let mut dh = Tensor::zeros(q.shape())?;
    let qd = q.data();
    par::for_each_row(dh.data_mut(), v, |r, row| {
        let k = targets[r];
        if Some(k) == pad_id {
            return;
        }
        for (i, g) in row.iter_mut().enumerate() {
            *g = if i == k {
                qd[r * v + i] - off - T::one() + a
            } else {
                qd[r * v + i] - off
            };
        }
    });
    Ok(dh)
}
