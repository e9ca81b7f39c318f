//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::ops::{Add, Mul, Sub};

use cmpc_core::clustering::{Clustering, PrototypeSet};
use cmpc_core::losses::{cmpc_loss, LossConfig, SimilarityBatch};
use cmpc_core::nn::{Matrix, MlpEncoder};
use cmpc_core::rng::substream;
use rand::Rng;

/// Forward-mode dual number `re + eps·ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn constant(re: f64) -> Self {
        Self { re, eps: 0.0 }
    }

    pub fn variable(re: f64) -> Self {
        Self { re, eps: 1.0 }
    }

    pub fn exp(self) -> Self {
        let e = self.re.exp();
        Self { re: e, eps: self.eps * e }
    }

    pub fn ln(self) -> Self {
        Self {
            re: self.re.ln(),
            eps: self.eps / self.re,
        }
    }

    pub fn scale(self, k: f64) -> Self {
        Self {
            re: self.re * k,
            eps: self.eps * k,
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            re: self.re + o.re,
            eps: self.eps + o.eps,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            re: self.re - o.re,
            eps: self.eps - o.eps,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            re: self.re * o.re,
            eps: self.re * o.eps + self.eps * o.re,
        }
    }
}

/// InfoNCE of one anchor written directly from its definition:
/// `−log( exp(s⁺/τ) / (exp(s⁺/τ) + Σ_k exp(s⁻_k/τ)) )`, shifted by a
/// constant for range safety.
pub fn infonce(pos: Dual, negs: &[Dual], tau: f64) -> Dual {
    let shift = Dual::constant(
        negs.iter()
            .map(|d| d.re)
            .fold(pos.re, f64::max)
            / tau,
    );
    let num = (pos.scale(1.0 / tau) - shift).exp();
    let den = negs
        .iter()
        .fold(num, |acc, &n| acc + (n.scale(1.0 / tau) - shift).exp());
    Dual::constant(0.0) - (num.ln() - den.ln())
}

/// Derivatives of each anchor's loss w.r.t. its positive and negative
/// similarities, one dual seed per input.
pub fn autodiff_similarity_grads(batch: &SimilarityBatch, tau: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut dpos = Vec::new();
    let mut dneg = Vec::new();
    for (i, &p) in batch.positive.iter().enumerate() {
        let negs = &batch.negatives[i];
        let consts: Vec<Dual> = negs.iter().map(|&s| Dual::constant(s)).collect();
        dpos.push(infonce(Dual::variable(p), &consts, tau).eps);
        dneg.push(
            (0..negs.len())
                .map(|k| {
                    let mut seeded = consts.clone();
                    seeded[k] = Dual::variable(negs[k]);
                    infonce(Dual::constant(p), &seeded, tau).eps
                })
                .collect(),
        );
    }
    (dpos, dneg)
}

/// AUC by counting every (positive, negative) pair.
pub fn auc_pairwise(pos: &[f64], neg: &[f64]) -> f64 {
    let mut count = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                count += 1.0;
            } else if p == n {
                count += 0.5;
            }
        }
    }
    count / (pos.len() * neg.len()) as f64
}

/// Average precision without sorting: an item's rank is one plus the number
/// of items ahead of it (higher score, or equal score and smaller id).
pub fn ap_by_enumeration(scores: &[f64], ids: &[usize], relevant: &[bool]) -> f64 {
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]);
    let mut sum = 0.0;
    let mut hits = 0;
    for i in 0..scores.len() {
        if !relevant[i] {
            continue;
        }
        hits += 1;
        let rank = 1 + (0..scores.len()).filter(|&j| ahead(j, i)).count();
        let rel_at_or_above = 1 + (0..scores.len()).filter(|&j| relevant[j] && ahead(j, i)).count();
        sum += rel_at_or_above as f64 / rank as f64;
    }
    sum / hits as f64
}

/// Lowest spherical 2-means inertia over every split into two non-empty
/// groups. For a group `G` the best unit centroid is its normalized sum, so
/// its inertia is `|G| − ‖Σ_G x‖`.
pub fn brute_force_two_means(points: &Matrix) -> f64 {
    let n = points.rows();
    let d = points.cols();
    let group_cost = |mask: u32, want: bool| {
        let mut sum = vec![0.0; d];
        let mut count = 0;
        for i in 0..n {
            if ((mask >> i) & 1 == 1) == want {
                count += 1;
                sum.iter_mut().zip(points.row(i)).for_each(|(s, x)| *s += x);
            }
        }
        count as f64 - sum.iter().map(|s| s * s).sum::<f64>().sqrt()
    };
    // fixing point 0 in group "false" enumerates each partition once
    (1..(1u32 << n))
        .filter(|m| m & 1 == 0)
        .map(|m| group_cost(m, true) + group_cost(m, false))
        .fold(f64::INFINITY, f64::min)
}

pub fn random_unit<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut m = Matrix::from_vec(rows, cols, data).unwrap();
    m.normalize_rows();
    m
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Worst disagreement between backprop and central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Max `|a − n| / max(|a|, |n|)` over entries with `max(|a|, |n|) > 1e-6`.
    pub max_rel: f64,
    /// Max `|a − n|` over the remaining near-zero entries.
    pub max_abs_small: f64,
    pub entries: usize,
}

fn random_prototypes<R: Rng>(ks: &[usize], n: usize, d: usize, rng: &mut R) -> PrototypeSet {
    PrototypeSet::new(
        ks.iter()
            .map(|&k| Clustering {
                centroids: random_unit(k, d, rng),
                assignments: (0..n).map(|_| rng.random_range(0..k)).collect(),
                inertia: 0.0,
            })
            .collect(),
    )
}

/// Full CMPC objective through both encoders on a seeded batch of 5
/// instances with 8-dimensional inputs, optionally with random instance
/// coefficients, checked against central differences with step `h`.
pub fn encoder_gradient_check(seed: u64, tau: f64, weighted: bool, h: f64) -> GradCheck {
    let (n, d_in, d_out) = (5, 8, 8);
    let mut rng = substream(seed, "gradcheck", 0);
    let voice = MlpEncoder::new(&[d_in, 10, d_out], &mut rng).unwrap();
    let face = MlpEncoder::new(&[d_in, 10, d_out], &mut rng).unwrap();
    let xv = random_matrix(n, d_in, &mut rng);
    let xf = random_matrix(n, d_in, &mut rng);
    let ids: Vec<usize> = (0..n).collect();
    let pv = random_prototypes(&[2, 3], n, d_out, &mut rng);
    let pf = random_prototypes(&[2, 3], n, d_out, &mut rng);
    let coeffs: Option<Vec<f64>> = weighted.then(|| {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    });
    let cfg = LossConfig::new(tau).unwrap();
    let objective = |v: &MlpEncoder, f: &MlpEncoder| {
        cmpc_loss(
            &v.forward(&xv).unwrap(),
            &f.forward(&xf).unwrap(),
            &ids,
            &pv,
            &pf,
            &cfg,
            coeffs.as_deref(),
        )
        .unwrap()
        .breakdown
        .objective
    };

    let cv = voice.forward_cached(&xv).unwrap();
    let cf = face.forward_cached(&xf).unwrap();
    let out = cmpc_loss(cv.output(), cf.output(), &ids, &pv, &pf, &cfg, coeffs.as_deref()).unwrap();
    let gv = voice.backward_cached(&cv, &out.grad_v).unwrap();
    let gf = face.backward_cached(&cf, &out.grad_f).unwrap();

    let mut check = GradCheck {
        max_rel: 0.0,
        max_abs_small: 0.0,
        entries: 0,
    };
    for (which, grads) in [(0, gv.slices()), (1, gf.slices())] {
        for (p, g) in grads.iter().enumerate() {
            for e in 0..g.len() {
                let eval = |delta: f64| {
                    let (mut v, mut f) = (voice.clone(), face.clone());
                    let target = if which == 0 { &mut v } else { &mut f };
                    target.parameters_mut()[p].1[e] += delta;
                    objective(&v, &f)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = g[e];
                let scale = a.abs().max(numeric.abs());
                if scale > 1e-6 {
                    check.max_rel = check.max_rel.max((a - numeric).abs() / scale);
                } else {
                    check.max_abs_small = check.max_abs_small.max((a - numeric).abs());
                }
                check.entries += 1;
            }
        }
    }
    check
}
