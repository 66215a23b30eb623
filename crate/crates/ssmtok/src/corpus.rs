//! Synthetic hierarchical token corpus.
//!
//! The coarse layer of every grid is an order-1 Markov chain over the
//! vocabulary, one transition matrix per condition class. Fine layers derive
//! from the coarse token — by a fixed per-layer permutation by default, or by
//! a categorical spread around it. Every reference quantity (stationary
//! marginal, entropy rate, fine maps) is computable from the config, which is
//! what the evaluation oracles check against.
//!
//! The default "banded" transitions step from state i to one of
//! {i+offset, …, i+offset+branching−1} (mod V) uniformly, with a per-class
//! offset. These are doubly stochastic, so the stationary marginal is uniform
//! and the entropy rate is exactly ln(branching).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rvq::TokenGrid;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TransitionSpec {
    /// Uniform over a window of `branching` states shifted per class.
    Banded { branching: usize },
    /// Explicit per-class row-stochastic matrices (class × V × V).
    Explicit { matrices: Vec<Vec<Vec<f64>>> },
}

impl Default for TransitionSpec {
    fn default() -> Self {
        TransitionSpec::Banded { branching: 4 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FineRule {
    /// fine layer ℓ at frame t = perm_ℓ(coarse_t); the permutations are
    /// derived from the corpus seed.
    Deterministic,
    /// Uniform over {perm_ℓ(coarse_t)+d mod V : d < spread}.
    Categorical { spread: usize },
}

impl Default for FineRule {
    fn default() -> Self {
        FineRule::Deterministic
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCorpusConfig {
    pub classes: usize,
    pub vocab: u32,
    pub k_layers: usize,
    pub t_frames: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub transitions: TransitionSpec,
    #[serde(default)]
    pub fine_rule: FineRule,
}

impl SynthCorpusConfig {
    /// A small default instance used by demos and the toy benchmark.
    pub fn toy() -> SynthCorpusConfig {
        SynthCorpusConfig {
            classes: 4,
            vocab: 64,
            k_layers: 4,
            t_frames: 24,
            train_size: 2048,
            val_size: 128,
            seed: 0,
            transitions: TransitionSpec::default(),
            fine_rule: FineRule::default(),
        }
    }
}

/// A validated corpus source with all analytic reference quantities.
pub struct SynthCorpus {
    cfg: SynthCorpusConfig,
    /// class × (V×V) row-major transition matrices
    matrices: Vec<Vec<Real>>,
    /// class × V stationary marginals
    stationary: Vec<Vec<Real>>,
    /// (k_layers − 1) × V fine permutations
    perms: Vec<Vec<u32>>,
}

impl SynthCorpus {
    pub fn new(cfg: SynthCorpusConfig) -> Result<SynthCorpus> {
        let v = cfg.vocab as usize;
        if cfg.classes == 0 || v == 0 || cfg.k_layers == 0 || cfg.t_frames == 0 {
            return Err(Error::config("classes, vocab, k_layers, t_frames must be positive"));
        }
        let matrices: Vec<Vec<Real>> = match &cfg.transitions {
            TransitionSpec::Banded { branching } => {
                let w = *branching;
                if w == 0 || w > v {
                    return Err(Error::config(format!(
                        "branching {w} outside [1, {v}]"
                    )));
                }
                (0..cfg.classes)
                    .map(|c| {
                        let offset = if cfg.classes > 1 { c * v / cfg.classes } else { 0 };
                        let mut p = vec![0.0; v * v];
                        for i in 0..v {
                            for d in 0..w {
                                p[i * v + (i + offset + d) % v] = 1.0 / w as Real;
                            }
                        }
                        p
                    })
                    .collect()
            }
            TransitionSpec::Explicit { matrices } => {
                if matrices.len() != cfg.classes {
                    return Err(Error::config(format!(
                        "{} matrices for {} classes",
                        matrices.len(),
                        cfg.classes
                    )));
                }
                let mut out = Vec::with_capacity(cfg.classes);
                for (c, m) in matrices.iter().enumerate() {
                    if m.len() != v || m.iter().any(|row| row.len() != v) {
                        return Err(Error::config(format!("class {c}: matrix is not {v}×{v}")));
                    }
                    let mut p = Vec::with_capacity(v * v);
                    for (i, row) in m.iter().enumerate() {
                        let sum: f64 = row.iter().sum();
                        if row.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                            return Err(Error::config(format!(
                                "class {c} row {i}: not a probability row (sum {sum})"
                            )));
                        }
                        p.extend(row.iter().map(|&x| x as Real));
                    }
                    out.push(p);
                }
                out
            }
        };
        let stationary = matrices
            .iter()
            .map(|p| stationary_distribution(p, v))
            .collect();
        let perms = (0..cfg.k_layers.saturating_sub(1))
            .map(|layer| {
                use rand::seq::SliceRandom;
                let mut rng = crate::stream_rng(cfg.seed, "fine-perm", layer as u64);
                let mut idx: Vec<u32> = (0..cfg.vocab).collect();
                idx.shuffle(&mut rng);
                idx
            })
            .collect();
        Ok(SynthCorpus {
            cfg,
            matrices,
            stationary,
            perms,
        })
    }

    pub fn config(&self) -> &SynthCorpusConfig {
        &self.cfg
    }

    pub fn transition(&self, class: usize) -> &[Real] {
        &self.matrices[class]
    }

    /// Stationary coarse marginal of a class (the analytic unigram).
    pub fn stationary(&self, class: usize) -> &[Real] {
        &self.stationary[class]
    }

    /// Entropy rate of the class chain: −Σᵢ πᵢ Σⱼ Pᵢⱼ ln Pᵢⱼ, in nats.
    pub fn entropy_rate(&self, class: usize) -> Real {
        let v = self.cfg.vocab as usize;
        let p = &self.matrices[class];
        let pi = &self.stationary[class];
        let mut h = 0.0;
        for i in 0..v {
            for j in 0..v {
                let pij = p[i * v + j];
                if pij > 0.0 {
                    h -= pi[i] * pij * pij.ln();
                }
            }
        }
        h
    }

    /// Deterministic coarse → fine map of fine layer ℓ (grid layer ℓ+1).
    pub fn fine_map(&self, fine_layer: usize, coarse: u32) -> u32 {
        self.perms[fine_layer][coarse as usize]
    }

    /// Analytic unigram of a fine layer: the permuted (and, for the
    /// categorical rule, spread-convolved) stationary marginal.
    pub fn fine_marginal(&self, class: usize, fine_layer: usize) -> Vec<Real> {
        let v = self.cfg.vocab as usize;
        let pi = &self.stationary[class];
        let mut out = vec![0.0; v];
        match self.cfg.fine_rule {
            FineRule::Deterministic => {
                for i in 0..v {
                    out[self.perms[fine_layer][i] as usize] += pi[i];
                }
            }
            FineRule::Categorical { spread } => {
                let s = spread.max(1);
                for i in 0..v {
                    let base = self.perms[fine_layer][i] as usize;
                    for d in 0..s {
                        out[(base + d) % v] += pi[i] / s as Real;
                    }
                }
            }
        }
        out
    }

    /// Sample one grid for a class.
    pub fn sample_grid(&self, rng: &mut ChaCha8Rng, class: usize) -> TokenGrid {
        let v = self.cfg.vocab as usize;
        let t_frames = self.cfg.t_frames;
        let k = self.cfg.k_layers;
        let p = &self.matrices[class];
        let mut coarse = Vec::with_capacity(t_frames);
        let mut state = sample_categorical(&self.stationary[class], rng);
        coarse.push(state as u32);
        for _ in 1..t_frames {
            state = sample_categorical(&p[state * v..(state + 1) * v], rng);
            coarse.push(state as u32);
        }
        let mut tokens = coarse.clone();
        for layer in 0..k - 1 {
            for t in 0..t_frames {
                let mapped = self.perms[layer][coarse[t] as usize];
                let tok = match self.cfg.fine_rule {
                    FineRule::Deterministic => mapped,
                    FineRule::Categorical { spread } => {
                        let s = spread.max(1) as u32;
                        (mapped + rng.gen_range(0..s)) % self.cfg.vocab
                    }
                };
                tokens.push(tok);
            }
        }
        TokenGrid::new(k, t_frames, self.cfg.vocab, tokens).expect("generated grid is valid")
    }

    fn sample_split(&self, label: &str, size: usize) -> Vec<(TokenGrid, u32)> {
        (0..size)
            .map(|i| {
                let mut rng = crate::stream_rng(self.cfg.seed, label, i as u64);
                let class = rng.gen_range(0..self.cfg.classes);
                (self.sample_grid(&mut rng, class), class as u32)
            })
            .collect()
    }

    /// Reproducible train and validation splits.
    pub fn generate(&self) -> (Vec<(TokenGrid, u32)>, Vec<(TokenGrid, u32)>) {
        (
            self.sample_split("train-seq", self.cfg.train_size),
            self.sample_split("val-seq", self.cfg.val_size),
        )
    }
}

fn sample_categorical(weights: &[Real], rng: &mut ChaCha8Rng) -> usize {
    let total: Real = weights.iter().sum();
    let mut draw = rng.gen::<f64>() as Real * total;
    for (i, &w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Stationary distribution of a row-stochastic matrix via Gaussian
/// elimination on (Pᵀ − I)π = 0 with Σπ = 1. Falls back to uniform when the
/// system is singular (e.g. the identity chain, where every distribution is
/// stationary).
fn stationary_distribution(p: &[Real], v: usize) -> Vec<Real> {
    // Build the (v+1) × v system: rows 0..v are Pᵀ − I, the last row is 1s.
    let mut a = vec![0.0; (v + 1) * v];
    let mut b = vec![0.0; v + 1];
    for i in 0..v {
        for j in 0..v {
            a[i * v + j] = p[j * v + i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..v {
        a[v * v + j] = 1.0;
    }
    b[v] = 1.0;
    // Least-squares normal equations AᵀA x = Aᵀb keep it square and handle
    // the redundancy among the Pᵀ − I rows.
    let mut ata = vec![0.0; v * v];
    let mut atb = vec![0.0; v];
    for i in 0..v {
        for j in 0..v {
            let mut s = 0.0;
            for r in 0..v + 1 {
                s += a[r * v + i] * a[r * v + j];
            }
            ata[i * v + j] = s;
        }
        let mut s = 0.0;
        for r in 0..v + 1 {
            s += a[r * v + i] * b[r];
        }
        atb[i] = s;
    }
    match solve_dense(&mut ata, &mut atb, v) {
        Some(mut pi) => {
            // Clean tiny negatives from roundoff and renormalise.
            let mut sum = 0.0;
            for x in pi.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
                sum += *x;
            }
            if sum <= 0.0 {
                return vec![1.0 / v as Real; v];
            }
            for x in pi.iter_mut() {
                *x /= sum;
            }
            pi
        }
        None => vec![1.0 / v as Real; v],
    }
}

/// In-place Gaussian elimination with partial pivoting; None when singular.
fn solve_dense(a: &mut [Real], b: &mut [Real], n: usize) -> Option<Vec<Real>> {
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f != 0.0 {
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in col + 1..n {
            s -= a[col * n + j] * x[j];
        }
        x[col] = s / a[col * n + col];
    }
    Some(x)
}
