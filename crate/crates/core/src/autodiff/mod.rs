//! Dense tensors, sparse operators and a reverse-mode tape.

pub mod sparse;
pub mod tape;
pub mod tensor;

pub use sparse::{relative_residual, BandedLu, SparseMatrix};
pub use tape::{CustomOp, Gradients, NodeId, Tape};
pub use tensor::Tensor;

/// Central-difference gradient of a scalar function, used as an
/// independent oracle for the tape.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// max_i |a_i − b_i| / max(max_i |b_i|, floor)
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(floor, |m, y| m.max(y.abs()));
    num / den
}
