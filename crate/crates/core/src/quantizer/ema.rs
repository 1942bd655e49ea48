//! Conventional RVQ baseline with exponential-moving-average codeword updates.

use nalgebra::{DMatrix, DVector};

use super::{CodeStack, Codebook, EmbeddingTable, QuantizeResult};
use crate::error::{Error, Result};

/// Running cluster statistics, one entry per depth and codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub cluster_size: Vec<Vec<f64>>,
    /// `dim x vocab` per depth.
    pub cluster_sum: Vec<DMatrix<f64>>,
    pub decay: f64,
    pub epsilon: f64,
}

/// Baseline quantizer holding raw (unnormalized, unscaled) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaQuantizer {
    table: EmbeddingTable,
    state: EmaState,
}

impl EmaQuantizer {
    /// Starts from the effective embeddings of `cb`, so both quantizers share an
    /// initialization. Each codeword begins as a unit-mass cluster at its own
    /// position, which makes the initial table a fixed point of the update.
    pub fn from_codebook(cb: &Codebook, decay: f64, epsilon: f64) -> Result<Self> {
        EmaQuantizer::from_table(cb.embeddings(), decay, epsilon)
    }

    pub fn from_table(table: EmbeddingTable, decay: f64, epsilon: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::usage(format!("EMA decay {decay} must lie in (0, 1)")));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::usage("EMA epsilon must be non-negative"));
        }
        let depth = table.depth();
        let vocab = table.vocab();
        let state = EmaState {
            cluster_size: vec![vec![1.0; vocab]; depth],
            cluster_sum: (0..depth)
                .map(|d| table.depth_table(d) * (1.0 + epsilon))
                .collect(),
            decay,
            epsilon,
        };
        Ok(EmaQuantizer { table, state })
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn state(&self) -> &EmaState {
        &self.state
    }

    pub fn quantize(&self, z: &DVector<f64>) -> Result<QuantizeResult> {
        self.table.quantize(z)
    }

    /// One EMA step over a batch. Targets at depth `d` are the residuals left
    /// by depths before `d` under the current table.
    pub fn update(&mut self, batch: &[(DVector<f64>, CodeStack)]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::usage("EMA update needs a non-empty batch"));
        }
        let (depth, vocab, m) = (self.table.depth(), self.table.vocab(), self.table.dim());
        let mut counts = vec![vec![0.0f64; vocab]; depth];
        let mut sums = vec![DMatrix::<f64>::zeros(m, vocab); depth];
        for (z, stack) in batch {
            if z.len() != m || stack.depth() != depth {
                return Err(Error::usage("batch entry does not match the quantizer shape"));
            }
            let mut residual = z.clone();
            for (d, &c) in stack.codes().iter().enumerate() {
                if c >= vocab {
                    return Err(Error::usage("code out of range"));
                }
                counts[d][c] += 1.0;
                let mut col = sums[d].column_mut(c);
                col += &residual;
                for (r, e) in residual.iter_mut().zip(self.table.embedding(d, c)) {
                    *r -= e;
                }
            }
        }
        let (gamma, eps) = (self.state.decay, self.state.epsilon);
        for d in 0..depth {
            let size = &mut self.state.cluster_size[d];
            let sum = &mut self.state.cluster_sum[d];
            for c in 0..vocab {
                size[c] = gamma * size[c] + (1.0 - gamma) * counts[d][c];
            }
            *sum *= gamma;
            *sum += &sums[d] * (1.0 - gamma);
            let table = self.table.depth_table_mut(d);
            for c in 0..vocab {
                let denom = size[c] + eps;
                for i in 0..m {
                    table[(i, c)] = sum[(i, c)] / denom;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn table_1d(points: &[[f64; 2]]) -> EmbeddingTable {
        let flat: Vec<f64> = points.iter().flatten().cloned().collect();
        EmbeddingTable::new(vec![DMatrix::from_column_slice(2, points.len(), &flat)]).unwrap()
    }

    #[test]
    fn rejects_bad_decay_and_empty_batch() {
        let t = table_1d(&[[1.0, 0.0]]);
        assert!(EmaQuantizer::from_table(t.clone(), 1.0, 1e-5).is_err());
        let mut q = EmaQuantizer::from_table(t, 0.99, 1e-5).unwrap();
        assert!(matches!(q.update(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_assignment_converges_to_target() {
        let mut q = EmaQuantizer::from_table(table_1d(&[[1.0, 0.0], [-1.0, 0.0]]), 0.9, 1e-5)
            .unwrap();
        let z = DVector::from_vec(vec![0.3, 0.4]);
        for _ in 0..500 {
            let stack = q.quantize(&z).unwrap().stack;
            assert_eq!(stack.codes(), &[0]);
            q.update(&[(z.clone(), stack)]).unwrap();
        }
        let e = q.table().embedding(0, 0);
        assert!((e[0] - 0.3).abs() < 1e-4 && (e[1] - 0.4).abs() < 1e-4);
    }

    #[test]
    fn unassigned_codewords_keep_their_value() {
        let mut q = EmaQuantizer::from_table(table_1d(&[[1.0, 0.0], [-5.0, 2.0]]), 0.99, 1e-5)
            .unwrap();
        let z = DVector::from_vec(vec![0.8, 0.1]);
        for _ in 0..100 {
            let stack = q.quantize(&z).unwrap().stack;
            q.update(&[(z.clone(), stack)]).unwrap();
        }
        let e = q.table().embedding(0, 1);
        assert!((e[0] + 5.0).abs() < 5e-3 && (e[1] - 2.0).abs() < 2e-3);
    }

    #[test]
    fn two_clusters_converge_to_their_means() {
        // Points are drawn uniformly from squares of half-width 0.2 centred at
        // (2, 0) and (-2, 0), so the cluster means are exactly those centres.
        let mut q = EmaQuantizer::from_table(table_1d(&[[1.0, 0.5], [-1.0, -0.5]]), 0.99, 1e-5)
            .unwrap();
        let mut r = rng::stream(21, &[0]);
        for _ in 0..1000 {
            let batch: Vec<_> = (0..32)
                .map(|i| {
                    let cx = if i % 2 == 0 { 2.0 } else { -2.0 };
                    let z = DVector::from_vec(vec![
                        cx + r.random_range(-0.2..0.2),
                        r.random_range(-0.2..0.2),
                    ]);
                    let s = q.quantize(&z).unwrap().stack;
                    (z, s)
                })
                .collect();
            q.update(&batch).unwrap();
        }
        let a = q.table().embedding(0, 0);
        let b = q.table().embedding(0, 1);
        assert!((a[0] - 2.0).abs() < 1e-2 && a[1].abs() < 1e-2, "{a:?}");
        assert!((b[0] + 2.0).abs() < 1e-2 && b[1].abs() < 1e-2, "{b:?}");
    }
}
