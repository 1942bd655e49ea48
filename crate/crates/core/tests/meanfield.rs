//! Mean-field oracle properties checked against direct enumeration.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use clam::meanfield::{coordinate_ascent, elbo, joint_posterior, FactorizedPosterior};
use clam::quantizer::{embed_code, quantize, Codebook};
use clam::rng::Rng;

use common::{case_rng, normal, normal_vec};

fn instance(r: &mut Rng, log_sigma: Option<f64>) -> (Codebook, DVector<f64>) {
    let depth = r.random_range(1..=3);
    let vocab = r.random_range(2..=6);
    let dim = r.random_range(2..=4);
    let mut cb = Codebook::random(depth, vocab, dim, r).unwrap();
    let logits: Vec<f64> = (0..depth).map(|_| normal(r)).collect();
    cb.set_scale_logits(logits, 0.5 * normal(r)).unwrap();
    cb.set_log_sigma(log_sigma.unwrap_or_else(|| r.random_range(-1.2..0.3)));
    let mut z = normal_vec(r, dim) * 0.3;
    for d in 0..depth {
        z += embed_code(&cb, d, r.random_range(0..vocab)).unwrap();
    }
    (cb, z)
}

fn random_posterior(r: &mut Rng, depth: usize, vocab: usize) -> FactorizedPosterior {
    let q = (0..depth)
        .map(|_| {
            let w: Vec<f64> = (0..vocab).map(|_| r.random_range(0.0..1.0f64).powi(3) + 1e-6).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    FactorizedPosterior::new(q).unwrap()
}

/// Every code combination with its log density `log p(z | c)`.
fn enumerate(cb: &Codebook, z: &DVector<f64>) -> Vec<(Vec<usize>, f64)> {
    let (depth, vocab, m) = (cb.depth(), cb.vocab(), cb.dim() as f64);
    let sigma2 = cb.sigma() * cb.sigma();
    let total = vocab.pow(depth as u32);
    (0..total)
        .map(|mut i| {
            let mut codes = vec![0; depth];
            for d in (0..depth).rev() {
                codes[d] = i % vocab;
                i /= vocab;
            }
            let mut recon = DVector::zeros(cb.dim());
            for (d, &c) in codes.iter().enumerate() {
                recon += embed_code(cb, d, c).unwrap();
            }
            let sq = (z - recon).norm_squared();
            let ll = -sq / (2.0 * sigma2) - 0.5 * m * (2.0 * std::f64::consts::PI * sigma2).ln();
            (codes, ll)
        })
        .collect()
}

fn log_evidence(cb: &Codebook, z: &DVector<f64>) -> f64 {
    let prior = -(cb.depth() as f64) * (cb.vocab() as f64).ln();
    let terms: Vec<f64> = enumerate(cb, z).into_iter().map(|(_, ll)| ll + prior).collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

#[test]
fn joint_table_matches_enumeration() {
    for case in 0..50 {
        let mut r = case_rng(201, case);
        let (cb, z) = instance(&mut r, None);
        let joint = joint_posterior(&cb, &z).unwrap();
        let evidence = log_evidence(&cb, &z);
        assert!((joint.log_evidence() - evidence).abs() < 1e-9);
        let prior = -(cb.depth() as f64) * (cb.vocab() as f64).ln();
        for (codes, ll) in enumerate(&cb, &z) {
            let p = (ll + prior - evidence).exp();
            assert!((joint.prob(&codes) - p).abs() < 1e-12, "case {case} codes {codes:?}");
        }
        let s: f64 = joint.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn elbo_never_exceeds_log_evidence() {
    for case in 0..200 {
        let mut r = case_rng(202, case);
        let (cb, z) = instance(&mut r, None);
        let evidence = log_evidence(&cb, &z);
        let q = random_posterior(&mut r, cb.depth(), cb.vocab());
        let e = elbo(&cb, &z, &q).unwrap();
        assert!(e <= evidence + 1e-9, "case {case}: elbo {e} > evidence {evidence}");
        let (fixed, _) = coordinate_ascent(&cb, &z, 50, q).unwrap();
        let e = elbo(&cb, &z, &fixed).unwrap();
        assert!(e <= evidence + 1e-9, "case {case}: fixed-point elbo {e} > evidence {evidence}");
    }
}

#[test]
fn elbo_is_nondecreasing_at_depth_two_vocab_four() {
    for case in 0..100 {
        let mut r = case_rng(203, case);
        let mut cb = Codebook::random(2, 4, 3, &mut r).unwrap();
        cb.set_log_sigma(r.random_range(-1.0..0.0));
        let z = normal_vec(&mut r, 3);
        let q = random_posterior(&mut r, 2, 4);
        let start = elbo(&cb, &z, &q).unwrap();
        let (_, trace) = coordinate_ascent(&cb, &z, 30, q).unwrap();
        let mut prev = start;
        for e in trace {
            assert!(e >= prev - 1e-10, "case {case}: {e} < {prev}");
            prev = e;
        }
    }
}

#[test]
fn orthogonal_depths_recover_exact_marginals() {
    for case in 0..30 {
        let mut r = case_rng(204, case);
        let vocab = r.random_range(2..=5);
        let mut d0 = DMatrix::zeros(4, vocab);
        let mut d1 = DMatrix::zeros(4, vocab);
        for c in 0..vocab {
            for i in 0..2 {
                d0[(i, c)] = normal(&mut r);
                d1[(i + 2, c)] = normal(&mut r);
            }
        }
        let cb = Codebook::from_parts(vec![d0, d1], vec![normal(&mut r), normal(&mut r)], 0.5, -0.4)
            .unwrap();
        let z = normal_vec(&mut r, 4);
        let joint = joint_posterior(&cb, &z).unwrap();
        // Independent depths: the joint is the outer product of its marginals.
        let m = joint.marginals();
        for a in 0..vocab {
            for b in 0..vocab {
                assert!((joint.prob(&[a, b]) - m.at(0)[a] * m.at(1)[b]).abs() < 1e-12);
            }
        }
        let (q, _) = coordinate_ascent(&cb, &z, 5, FactorizedPosterior::uniform(2, vocab)).unwrap();
        assert!(q.sup_distance(&m) < 1e-8, "case {case}: {}", q.sup_distance(&m));
    }
}

#[test]
fn greedy_stack_ranks_in_the_joint_top_five() {
    let cases = 200;
    let mut failures = Vec::new();
    for case in 0..cases {
        let mut r = case_rng(205, case);
        let (cb, z) = instance(&mut r, Some(0.5f64.ln()));
        let stack = quantize(&cb, &z).unwrap().stack;
        let joint = joint_posterior(&cb, &z).unwrap();
        let rank = joint.rank(stack.codes());
        if rank >= 5 {
            failures.push((case, rank));
        }
    }
    println!("greedy stack outside the top 5 in {}/{cases} instances: {failures:?}", failures.len());
    assert!(failures.len() as f64 <= 0.05 * cases as f64);
}
