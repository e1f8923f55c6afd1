use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

/// `rows × cols` matrix with i.i.d. N(0, scale²) entries.
pub fn scaled_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            scale * x
        })
        .collect::<Vec<f64>>();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is
/// fewer), times `gain`. Gram–Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Tensor {
    let (short, long) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (k, b) in basis.iter().enumerate() {
        for (l, &x) in b.iter().enumerate() {
            let (r, c) = if rows <= cols { (k, l) } else { (l, k) };
            data[r * cols + c] = gain * x;
        }
    }
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}
