use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;
use crate::error::{Error, Result};

/// Orthogonal initialization.
///
/// The shape is flattened to `shape[0] × product(shape[1..])` (a conv kernel
/// `[K, C, kh, kw]` becomes `K × C·kh·kw`). Whichever of rows or columns is
/// the shorter axis comes out orthonormal, so `W·Wᵀ = I` for wide matrices
/// and `Wᵀ·W = I` for tall ones.
pub fn orthogonal(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    orthogonal_with(shape, &mut rng)
}

pub(crate) fn orthogonal_with(shape: &[usize], rng: &mut impl rand::Rng) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(
            "orthogonal_init",
            "shape",
            format!("cannot orthogonalize shape {shape:?}"),
        ));
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    // Orthonormalize `short` vectors of length `long`, then lay them out as
    // rows (wide case) or columns (tall case).
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        // Two Gram-Schmidt passes keep the result orthonormal to rounding.
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    if rows <= cols {
        for (r, q) in basis.iter().enumerate() {
            data[r * cols..(r + 1) * cols].copy_from_slice(q);
        }
    } else {
        for (c, q) in basis.iter().enumerate() {
            for (r, &v) in q.iter().enumerate() {
                data[r * cols + c] = v;
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}
