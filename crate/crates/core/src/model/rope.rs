//! Rotary position embedding over interleaved coordinate pairs.

use ndarray::{ArrayViewMut2, Axis};

use crate::scalar::Scalar;

/// Per-position cos/sin tables for one head dimension.
#[derive(Clone, Debug)]
pub struct Rope<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Rope<T> {
    pub fn new(head_dim: usize, max_seq: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_seq * half);
        let mut sin = Vec::with_capacity(max_seq * half);
        for pos in 0..max_seq {
            for i in 0..half {
                let freq = base.powf(-((2 * i) as f64) / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates each row `p` of `x` (shape `(len, head_dim)`) by position `p`.
    /// `inverse` applies the transpose rotation, which is also the backward map.
    pub fn apply(&self, mut x: ArrayViewMut2<'_, T>, inverse: bool) {
        for (pos, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            let base = pos * self.half;
            for i in 0..self.half {
                let (c, mut s) = (self.cos[base + i], self.sin[base + i]);
                if inverse {
                    s = -s;
                }
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = a * c - b * s;
                row[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotate_at(rope: &Rope<f64>, v: &[f64], pos: usize, max: usize) -> Vec<f64> {
        let mut m = Array2::<f64>::zeros((max, v.len()));
        m.row_mut(pos).assign(&ndarray::ArrayView1::from(v));
        rope.apply(m.view_mut(), false);
        m.row(pos).to_vec()
    }

    #[test]
    fn dot_product_depends_only_on_offset() {
        let (dh, max) = (16, 40);
        let rope = Rope::<f64>::new(dh, max, 10_000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
            let delta = rng.random_range(0..10);
            let reference: f64 = {
                let (a, b) = (
                    rotate_at(&rope, &q, 0, max),
                    rotate_at(&rope, &k, delta, max),
                );
                a.iter().zip(&b).map(|(x, y)| x * y).sum()
            };
            for p in 1..(max - delta) {
                let (a, b) = (
                    rotate_at(&rope, &q, p, max),
                    rotate_at(&rope, &k, p + delta, max),
                );
                let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                assert!((dot - reference).abs() < 1e-6, "p={p} delta={delta}");
            }
        }
    }

    #[test]
    fn inverse_undoes_rotation_and_preserves_norm() {
        let rope = Rope::<f64>::new(8, 5, 10_000.0);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 1.0);
        let mut y = x.clone();
        rope.apply(y.view_mut(), false);
        for (a, b) in x.rows().into_iter().zip(y.rows()) {
            assert!((a.dot(&a) - b.dot(&b)).abs() < 1e-12);
        }
        rope.apply(y.view_mut(), true);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
        // position 0 is the identity
        let mut z = x.clone();
        rope.apply(z.view_mut(), false);
        assert_eq!(z.row(0), x.row(0));
    }
}
