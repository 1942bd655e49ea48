//! Probabilistic residual vector quantization.
//!
//! A [`Codebook`] stores, per depth, `V` direction vectors together with a
//! depth-decaying scale schedule. The effective codeword at depth `d` is
//! `alpha_d * dir / |dir|`, where `alpha_d` is `exp(max_scale_logit)` times
//! the tail mass `sum_{i >= d} softmax(scale_logits)_i`, so scales shrink
//! strictly with depth. Quantization is the usual greedy residual lookup;
//! the probabilistic part lives in [`posterior`], which scores every
//! codeword of one depth against the residual left when that depth's
//! greedy choice is removed.

mod ema;
mod posterior;
mod usage;

pub use ema::{EmaQuantizer, EmaState};
pub use posterior::{
    codebook_grad, codebook_grad_with_weights, codebook_loss, codebook_loss_with_weights,
    depth_posterior, depth_posteriors, BatchObjective, CodebookGrad, EmbeddingGrad,
};
pub use usage::{deep_quartile_mean, quartile_depths, utilization, CodeHistogram, DepthUsage};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;

/// Smallest direction norm allowed before a direction is re-projected.
pub const MIN_DIRECTION_NORM: f64 = 1e-8;

/// The `D` codes assigned to a single latent vector, one per depth.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeStack(Vec<usize>);

impl CodeStack {
    pub fn new(codes: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some((d, &c)) = codes.iter().enumerate().find(|(_, &c)| c >= vocab) {
            return Err(Error::usage(format!(
                "code {c} at depth {d} is out of range for vocab {vocab}"
            )));
        }
        Ok(CodeStack(codes))
    }

    pub fn codes(&self) -> &[usize] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

/// Output of greedy residual quantization.
#[derive(Debug, Clone)]
pub struct QuantizeResult {
    pub stack: CodeStack,
    /// Sum of the selected embeddings.
    pub quantized: DVector<f64>,
    /// `residuals[0]` is the input, `residuals[D]` the final residual.
    pub residuals: Vec<DVector<f64>>,
}

impl QuantizeResult {
    pub fn final_residual(&self) -> &DVector<f64> {
        self.residuals.last().expect("residuals always hold the input")
    }
}

/// Dense per-depth embedding tables, `dim x vocab` with one codeword per column.
///
/// This is the form both quantizers search. For the probabilistic codebook it
/// is derived from the direction/scale parameters; the EMA baseline owns one
/// directly.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tables: Vec<DMatrix<f64>>,
}

impl EmbeddingTable {
    pub fn new(tables: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = tables
            .first()
            .ok_or_else(|| Error::usage("embedding table needs at least one depth"))?;
        let (dim, vocab) = first.shape();
        if dim == 0 || vocab == 0 {
            return Err(Error::usage("embedding tables must be non-empty"));
        }
        if tables.iter().any(|t| t.shape() != (dim, vocab)) {
            return Err(Error::usage("all depths must share the same table shape"));
        }
        Ok(EmbeddingTable { tables })
    }

    pub fn depth(&self) -> usize {
        self.tables.len()
    }

    pub fn vocab(&self) -> usize {
        self.tables[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.tables[0].nrows()
    }

    pub fn embedding(&self, d: usize, c: usize) -> &[f64] {
        let m = self.dim();
        &self.tables[d].as_slice()[c * m..(c + 1) * m]
    }

    pub fn depth_table(&self, d: usize) -> &DMatrix<f64> {
        &self.tables[d]
    }

    pub(crate) fn depth_table_mut(&mut self, d: usize) -> &mut DMatrix<f64> {
        &mut self.tables[d]
    }

    /// Sum of the embeddings named by `stack`.
    pub fn reconstruct(&self, stack: &CodeStack) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (d, &c) in stack.codes().iter().enumerate() {
            for (o, e) in out.iter_mut().zip(self.embedding(d, c)) {
                *o += e;
            }
        }
        out
    }

    /// Index of the codeword nearest to `target` at depth `d`; ties go to the lowest index.
    pub fn nearest(&self, d: usize, target: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for c in 0..self.vocab() {
            let dist = math::sq_dist(target, self.embedding(d, c));
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        best
    }

    /// Greedy residual quantization.
    pub fn quantize(&self, z: &DVector<f64>) -> Result<QuantizeResult> {
        if z.len() != self.dim() {
            return Err(Error::usage(format!(
                "latent has length {}, codebook dim is {}",
                z.len(),
                self.dim()
            )));
        }
        if !math::all_finite(z) {
            return Err(Error::data("latent contains non-finite values"));
        }
        let mut codes = Vec::with_capacity(self.depth());
        let mut residuals = Vec::with_capacity(self.depth() + 1);
        let mut quantized = DVector::zeros(self.dim());
        residuals.push(z.clone());
        for d in 0..self.depth() {
            let prev = residuals.last().unwrap();
            let c = self.nearest(d, prev.as_slice());
            let e = self.embedding(d, c);
            let mut next = prev.clone();
            for i in 0..next.len() {
                next[i] -= e[i];
                quantized[i] += e[i];
            }
            codes.push(c);
            residuals.push(next);
        }
        Ok(QuantizeResult {
            stack: CodeStack(codes),
            quantized,
            residuals,
        })
    }
}

/// Learnable state of the probabilistic quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    directions: Vec<DMatrix<f64>>,
    scale_logits: Vec<f64>,
    max_scale_logit: f64,
    log_sigma: f64,
}

impl Codebook {
    /// Unit-normalized Gaussian directions, flat scale logits, `sigma = 1`.
    pub fn random(depth: usize, vocab: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if depth == 0 || vocab == 0 || dim == 0 {
            return Err(Error::usage("codebook dimensions must be positive"));
        }
        let directions = (0..depth)
            .map(|_| DMatrix::from_fn(dim, vocab, |_, _| StandardNormal.sample(rng)))
            .collect();
        Codebook::from_parts(directions, vec![0.0; depth], 0.0, 0.0)
    }

    pub fn from_parts(
        mut directions: Vec<DMatrix<f64>>,
        scale_logits: Vec<f64>,
        max_scale_logit: f64,
        log_sigma: f64,
    ) -> Result<Self> {
        let first = directions
            .first()
            .ok_or_else(|| Error::usage("codebook needs at least one depth"))?;
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::usage("codebook dimensions must be positive"));
        }
        if directions.iter().any(|t| t.shape() != shape) {
            return Err(Error::usage("all depths must share the same direction shape"));
        }
        if scale_logits.len() != directions.len() {
            return Err(Error::usage(format!(
                "{} scale logits for {} depths",
                scale_logits.len(),
                directions.len()
            )));
        }
        let finite = directions.iter().all(|t| t.iter().all(|x| x.is_finite()))
            && scale_logits.iter().all(|x| x.is_finite())
            && max_scale_logit.is_finite()
            && log_sigma.is_finite();
        if !finite {
            return Err(Error::data("codebook parameters must be finite"));
        }
        for t in &mut directions {
            normalize_columns(t);
        }
        Ok(Codebook {
            directions,
            scale_logits,
            max_scale_logit,
            log_sigma,
        })
    }

    /// Like [`Codebook::from_parts`] but keeps directions exactly as given, so
    /// values restored from storage are not perturbed by renormalization.
    pub fn from_raw_parts(
        directions: Vec<DMatrix<f64>>,
        scale_logits: Vec<f64>,
        max_scale_logit: f64,
        log_sigma: f64,
    ) -> Result<Self> {
        let mut cb = Codebook::from_parts(directions.clone(), scale_logits, max_scale_logit, log_sigma)?;
        if directions
            .iter()
            .any(|t| t.column_iter().any(|c| c.norm() < MIN_DIRECTION_NORM))
        {
            return Err(Error::data("direction norm below minimum"));
        }
        cb.directions = directions;
        Ok(cb)
    }

    pub fn depth(&self) -> usize {
        self.directions.len()
    }

    pub fn vocab(&self) -> usize {
        self.directions[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.directions[0].nrows()
    }

    pub fn directions(&self) -> &[DMatrix<f64>] {
        &self.directions
    }

    pub fn scale_logits(&self) -> &[f64] {
        &self.scale_logits
    }

    pub fn max_scale_logit(&self) -> f64 {
        self.max_scale_logit
    }

    pub fn log_sigma(&self) -> f64 {
        self.log_sigma
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn set_log_sigma(&mut self, log_sigma: f64) {
        self.log_sigma = log_sigma;
    }

    pub fn set_scale_logits(&mut self, logits: Vec<f64>, max_scale_logit: f64) -> Result<()> {
        if logits.len() != self.depth() {
            return Err(Error::usage("scale logit count must equal depth"));
        }
        self.scale_logits = logits;
        self.max_scale_logit = max_scale_logit;
        Ok(())
    }

    /// Overwrite one direction; it is stored unit-normalized.
    pub fn set_direction(&mut self, d: usize, c: usize, dir: &[f64]) -> Result<()> {
        self.check_index(d, c)?;
        if dir.len() != self.dim() {
            return Err(Error::usage("direction has the wrong length"));
        }
        let fallback = c % self.dim();
        let mut col = self.directions[d].column_mut(c);
        col.copy_from_slice(dir);
        normalize_column(col, fallback);
        Ok(())
    }

    /// Per-depth scales `alpha_d`.
    pub fn scales(&self) -> Vec<f64> {
        let p = math::softmax(&self.scale_logits);
        let base = self.max_scale_logit.exp();
        let mut tail = 0.0;
        let mut out = vec![0.0; p.len()];
        for d in (0..p.len()).rev() {
            tail += p[d];
            out[d] = base * tail;
        }
        out
    }

    fn check_index(&self, d: usize, c: usize) -> Result<()> {
        if d >= self.depth() || c >= self.vocab() {
            return Err(Error::usage(format!(
                "index (depth {d}, code {c}) out of range for D={}, V={}",
                self.depth(),
                self.vocab()
            )));
        }
        Ok(())
    }

    pub fn embeddings(&self) -> EmbeddingTable {
        let scales = self.scales();
        let tables = self
            .directions
            .iter()
            .zip(&scales)
            .map(|(dirs, &alpha)| {
                let mut t = dirs.clone();
                for mut col in t.column_iter_mut() {
                    let norm = col.norm();
                    col *= alpha / norm;
                }
                t
            })
            .collect();
        EmbeddingTable { tables }
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.depth() * self.vocab() * self.dim() + self.depth() + 2
    }

    /// Parameters flattened as directions (depth-major, column-major), scale
    /// logits, max scale logit, log sigma.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.directions {
            out.extend_from_slice(t.as_slice());
        }
        out.extend_from_slice(&self.scale_logits);
        out.push(self.max_scale_logit);
        out.push(self.log_sigma);
        out
    }

    /// Rebuild a codebook of this shape from a flat parameter vector.
    ///
    /// Directions are taken as given (not renormalized) so the result is a
    /// faithful point for finite-difference probes.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Codebook> {
        if flat.len() != self.num_params() {
            return Err(Error::usage("flat parameter length mismatch"));
        }
        let (m, v, depth) = (self.dim(), self.vocab(), self.depth());
        let mut offset = 0;
        let mut directions = Vec::with_capacity(depth);
        for _ in 0..depth {
            directions.push(DMatrix::from_column_slice(m, v, &flat[offset..offset + m * v]));
            offset += m * v;
        }
        for t in &directions {
            if t.column_iter().any(|c| c.norm() < MIN_DIRECTION_NORM) {
                return Err(Error::data("direction norm below minimum"));
            }
        }
        let scale_logits = flat[offset..offset + depth].to_vec();
        offset += depth;
        Ok(Codebook {
            directions,
            scale_logits,
            max_scale_logit: flat[offset],
            log_sigma: flat[offset + 1],
        })
    }
}

fn normalize_column(mut col: nalgebra::DVectorViewMut<'_, f64>, fallback_axis: usize) {
    let norm = col.norm();
    if norm < MIN_DIRECTION_NORM || !norm.is_finite() {
        col.fill(0.0);
        col[fallback_axis] = 1.0;
    } else {
        col /= norm;
    }
}

fn normalize_columns(t: &mut DMatrix<f64>) {
    let m = t.nrows();
    for (c, col) in t.column_iter_mut().enumerate() {
        normalize_column(col, c % m);
    }
}

/// Effective codeword `alpha_d * dir / |dir|`.
pub fn embed_code(cb: &Codebook, d: usize, c: usize) -> Result<DVector<f64>> {
    cb.check_index(d, c)?;
    let alpha = cb.scales()[d];
    let dir = cb.directions[d].column(c);
    Ok(dir.into_owned() * (alpha / dir.norm()))
}

/// Greedy residual quantization against the codebook's effective embeddings.
pub fn quantize(cb: &Codebook, z: &DVector<f64>) -> Result<QuantizeResult> {
    cb.embeddings().quantize(z)
}

/// Adam state for every codebook parameter group.
#[derive(Debug, Clone)]
pub struct CodebookOptimizer {
    directions: Vec<Adam>,
    scale_logits: Adam,
    max_scale_logit: Adam,
    log_sigma: Adam,
}

impl CodebookOptimizer {
    pub fn new(cb: &Codebook, config: AdamConfig) -> Self {
        let per_depth = cb.vocab() * cb.dim();
        CodebookOptimizer {
            directions: (0..cb.depth()).map(|_| Adam::new(config, per_depth)).collect(),
            scale_logits: Adam::new(config, cb.depth()),
            max_scale_logit: Adam::new(config, 1),
            log_sigma: Adam::new(config, 1),
        }
    }

    /// One update; directions are renormalized afterwards.
    pub fn step(&mut self, cb: &mut Codebook, grad: &CodebookGrad) {
        for (d, adam) in self.directions.iter_mut().enumerate() {
            adam.step(cb.directions[d].as_mut_slice(), grad.directions[d].as_slice());
            normalize_columns(&mut cb.directions[d]);
        }
        self.scale_logits
            .step(&mut cb.scale_logits, &grad.scale_logits);
        let mut a = [cb.max_scale_logit];
        self.max_scale_logit.step(&mut a, &[grad.max_scale_logit]);
        cb.max_scale_logit = a[0];
        let mut s = [cb.log_sigma];
        self.log_sigma.step(&mut s, &[grad.log_sigma]);
        cb.log_sigma = s[0];
    }
}
