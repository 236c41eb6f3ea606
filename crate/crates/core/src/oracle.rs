//! Exact information quantities for small finite-alphabet processes.
//!
//! A [`JointProcessSpec`] describes a causal chain: a source pmf over label
//! sequences `x^T`, one release kernel `p(z_t | x^t)` per step and one attacker
//! kernel `q(x̂_t | z^t)` per step. The full joint over `(x^T, z^T, x̂^T)` is
//! materialized and every quantity below is an exact sum over it, in nats.
//!
//! Sequences are encoded little-endian: the prefix `x^t` of a sequence with
//! index `i` has index `i mod |X|^t`. Release table `t` (0-based) is laid out
//! as `[prefix(x^{t+1})][z_t]`, attacker table `t` as `[prefix(z^{t+1})][x̂_t]`.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_STEPS: usize = 4;
pub const MAX_ALPHABET: usize = 4;
const NORMALIZATION_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct JointProcessSpec {
    pub steps: usize,
    pub label_size: usize,
    pub release_size: usize,
    pub guess_size: usize,
    /// `p(x^T)`, length `|X|^T`.
    pub source: Vec<f64>,
    /// `p(z_t | x^t)` for `t = 1..T`.
    pub release: Vec<Vec<f64>>,
    /// `q(x̂_t | z^t)` for `t = 1..T`.
    pub attacker: Vec<Vec<f64>>,
}

fn check_distribution(what: &str, rows: &[f64], width: usize) -> Result<()> {
    for (r, row) in rows.chunks(width).enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::config(format!(
                "{what}: row {r} has a negative or non-finite entry"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::config(format!(
                "{what}: row {r} sums to {total}, not 1"
            )));
        }
    }
    Ok(())
}

impl JointProcessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_STEPS).contains(&self.steps) {
            return Err(Error::config(format!(
                "horizon must lie in 1..={MAX_STEPS}, got {}",
                self.steps
            )));
        }
        for (name, size) in [
            ("label", self.label_size),
            ("release", self.release_size),
            ("guess", self.guess_size),
        ] {
            if !(1..=MAX_ALPHABET).contains(&size) {
                return Err(Error::config(format!(
                    "{name} alphabet must have 1..={MAX_ALPHABET} symbols, got {size}"
                )));
            }
        }
        let t = self.steps as u32;
        if self.source.len() != self.label_size.pow(t) {
            return Err(Error::config("source table has the wrong length"));
        }
        check_distribution("source pmf", &self.source, self.source.len())?;
        if self.release.len() != self.steps || self.attacker.len() != self.steps {
            return Err(Error::config("need one release and one attacker table per step"));
        }
        for s in 0..self.steps {
            let prefixes = self.label_size.pow(s as u32 + 1);
            if self.release[s].len() != prefixes * self.release_size {
                return Err(Error::config(format!("release table {} has the wrong length", s + 1)));
            }
            check_distribution(&format!("release table {}", s + 1), &self.release[s], self.release_size)?;
            let prefixes = self.release_size.pow(s as u32 + 1);
            if self.attacker[s].len() != prefixes * self.guess_size {
                return Err(Error::config(format!("attacker table {} has the wrong length", s + 1)));
            }
            check_distribution(&format!("attacker table {}", s + 1), &self.attacker[s], self.guess_size)?;
        }
        Ok(())
    }

    /// A spec with every table drawn uniformly from its probability simplex.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        steps: usize,
        label_size: usize,
        release_size: usize,
        guess_size: usize,
    ) -> Self {
        let t = steps as u32;
        let source = random_rows(rng, 1, label_size.pow(t));
        let release = (1..=t)
            .map(|s| random_rows(rng, label_size.pow(s), release_size))
            .collect();
        let attacker = (1..=t)
            .map(|s| random_rows(rng, release_size.pow(s), guess_size))
            .collect();
        Self {
            steps,
            label_size,
            release_size,
            guess_size,
            source,
            release,
            attacker,
        }
    }

    /// Same source and release, with the attacker replaced by the true
    /// posterior `p(x_t | z^t)`. Histories of probability zero get a uniform row.
    pub fn with_posterior_attacker(&self) -> Result<Self> {
        self.validate()?;
        if self.guess_size != self.label_size {
            return Err(Error::usage("posterior attacker needs equal label and guess alphabets"));
        }
        let joint = joint_pmf(self)?;
        let k = self.label_size;
        let attacker = (0..self.steps)
            .map(|s| {
                let mut vars = joint.release_vars(s + 1);
                vars.push(joint.label_var(s));
                let table = joint.marginal(&vars);
                // `table` is little-endian over (z^{t}, x_t): x_t is the slowest index.
                let histories = self.release_size.pow(s as u32 + 1);
                let mut out = vec![0.0; histories * k];
                for h in 0..histories {
                    let mass: f64 = (0..k).map(|x| table[h + x * histories]).sum();
                    for x in 0..k {
                        out[h * k + x] = if mass > 0.0 {
                            table[h + x * histories] / mass
                        } else {
                            1.0 / k as f64
                        };
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            attacker,
            ..self.clone()
        })
    }
}

fn random_rows<R: Rng + ?Sized>(rng: &mut R, rows: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let draws: Vec<f64> = (0..width).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        out.extend(draws.iter().map(|d| d / total));
    }
    out
}

/// The full joint table over `(x_1..x_T, z_1..z_T, x̂_1..x̂_T)`, little-endian
/// in that variable order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    steps: usize,
    sizes: Vec<usize>,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Alphabet size of each variable, in table order.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn label_var(&self, t: usize) -> usize {
        t
    }

    pub fn release_var(&self, t: usize) -> usize {
        self.steps + t
    }

    pub fn guess_var(&self, t: usize) -> usize {
        2 * self.steps + t
    }

    /// Variables `X_1..X_len`.
    pub fn label_vars(&self, len: usize) -> Vec<usize> {
        (0..len).map(|t| self.label_var(t)).collect()
    }

    pub fn release_vars(&self, len: usize) -> Vec<usize> {
        (0..len).map(|t| self.release_var(t)).collect()
    }

    pub fn guess_vars(&self, len: usize) -> Vec<usize> {
        (0..len).map(|t| self.guess_var(t)).collect()
    }

    /// Marginal table over `vars`, little-endian in the given order.
    pub fn marginal(&self, vars: &[usize]) -> Vec<f64> {
        let len: usize = vars.iter().map(|&v| self.sizes[v]).product();
        let mut out = vec![0.0; len];
        let mut digits = vec![0usize; self.sizes.len()];
        for &p in &self.probs {
            if p > 0.0 {
                let mut idx = 0;
                let mut stride = 1;
                for &v in vars {
                    idx += digits[v] * stride;
                    stride *= self.sizes[v];
                }
                out[idx] += p;
            }
            for (d, &size) in digits.iter_mut().zip(&self.sizes) {
                *d += 1;
                if *d < size {
                    break;
                }
                *d = 0;
            }
        }
        out
    }

    /// Shannon entropy of the marginal over `vars` (empty set → 0).
    pub fn entropy(&self, vars: &[usize]) -> f64 {
        self.marginal(vars)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// `H(A | C)`.
    pub fn conditional_entropy(&self, a: &[usize], c: &[usize]) -> f64 {
        self.entropy(&[c, a].concat()) - self.entropy(c)
    }

    /// `I(A; B | C)` through the entropy identity.
    pub fn conditional_mutual_information(&self, a: &[usize], b: &[usize], c: &[usize]) -> f64 {
        self.entropy(&[a, c].concat()) + self.entropy(&[b, c].concat())
            - self.entropy(&[a, b, c].concat())
            - self.entropy(c)
    }
}

/// Materializes the causal factorization
/// `p(x^T) · Π_t p(z_t | x^t) · q(x̂_t | z^t)`.
pub fn joint_pmf(spec: &JointProcessSpec) -> Result<JointTable> {
    spec.validate()?;
    let t_len = spec.steps;
    let (kx, kz, kg) = (spec.label_size, spec.release_size, spec.guess_size);
    let sizes: Vec<usize> = [kx, kz, kg]
        .iter()
        .flat_map(|&k| std::iter::repeat_n(k, t_len))
        .collect();
    let nx = kx.pow(t_len as u32);
    let nz = kz.pow(t_len as u32);
    let ng = kg.pow(t_len as u32);
    let mut probs = vec![0.0; nx * nz * ng];

    for xi in 0..nx {
        let px = spec.source[xi];
        if px == 0.0 {
            continue;
        }
        for zi in 0..nz {
            let mut pz = px;
            for s in 0..t_len {
                let x_prefix = xi % kx.pow(s as u32 + 1);
                let z_s = (zi / kz.pow(s as u32)) % kz;
                pz *= spec.release[s][x_prefix * kz + z_s];
            }
            if pz == 0.0 {
                continue;
            }
            for gi in 0..ng {
                let mut p = pz;
                for s in 0..t_len {
                    let z_prefix = zi % kz.pow(s as u32 + 1);
                    let g_s = (gi / kg.pow(s as u32)) % kg;
                    p *= spec.attacker[s][z_prefix * kg + g_s];
                }
                probs[xi + nx * (zi + nz * gi)] = p;
            }
        }
    }
    Ok(JointTable {
        steps: t_len,
        sizes,
        probs,
    })
}

/// `I(X^T → X̂^T) = Σ_t I(X^t; X̂_t | X̂^{t−1})`.
pub fn directed_information(joint: &JointTable) -> f64 {
    directed_information_terms(joint).iter().sum()
}

/// The per-step terms `I(X^t; X̂_t | X̂^{t−1})`.
pub fn directed_information_terms(joint: &JointTable) -> Vec<f64> {
    (0..joint.steps)
        .map(|t| {
            joint.conditional_mutual_information(
                &joint.label_vars(t + 1),
                &[joint.guess_var(t)],
                &joint.guess_vars(t),
            )
        })
        .collect()
}

/// Both forms of the causally conditional entropy `H(X̂^T ‖ Z^T)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CausalEntropy {
    /// `Σ_t H(X̂_t | X̂^{t−1}, Z^t)`.
    pub general: f64,
    /// `Σ_t H(X̂_t | Z^t)`.
    pub simplified: f64,
}

pub fn causally_conditional_entropy(joint: &JointTable) -> CausalEntropy {
    let mut general = 0.0;
    let mut simplified = 0.0;
    for t in 0..joint.steps {
        let guess = [joint.guess_var(t)];
        let z = joint.release_vars(t + 1);
        general += joint.conditional_entropy(&guess, &[joint.guess_vars(t), z.clone()].concat());
        simplified += joint.conditional_entropy(&guess, &z);
    }
    CausalEntropy {
        general,
        simplified,
    }
}

/// Every quantity in the directed-information upper-bound chain, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundChainReport {
    pub directed_information: f64,
    /// `Σ_t [H(X̂_t | X̂^{t−1}) − H(X̂_t | X̂^{t−1}, X^t, Z^t)]`.
    pub conditioned_bound: f64,
    /// `Σ_t [H(X̂_t | X̂^{t−1}) − H(X̂_t | Z^t)]`, equal to the previous line
    /// under the causal factorization.
    pub markov_bound: f64,
    /// `T·ln|X| − H(X̂^T ‖ Z^T)`.
    pub entropy_bound: f64,
    pub causal_entropy: CausalEntropy,
}

impl BoundChainReport {
    /// `conditioned_bound − directed_information`.
    pub fn conditioning_slack(&self) -> f64 {
        self.conditioned_bound - self.directed_information
    }

    /// `entropy_bound − markov_bound`.
    pub fn ceiling_slack(&self) -> f64 {
        self.entropy_bound - self.markov_bound
    }

    /// `|conditioned_bound − markov_bound|`, zero when the Markov chains hold.
    pub fn markov_gap(&self) -> f64 {
        (self.conditioned_bound - self.markov_bound).abs()
    }
}

pub fn verify_bound_chain(spec: &JointProcessSpec) -> Result<BoundChainReport> {
    if spec.guess_size != spec.label_size {
        return Err(Error::usage(
            "the bound chain needs the guess alphabet to equal the label alphabet",
        ));
    }
    let joint = joint_pmf(spec)?;
    let mut conditioned = 0.0;
    let mut markov = 0.0;
    for t in 0..joint.steps {
        let guess = [joint.guess_var(t)];
        let past = joint.guess_vars(t);
        let z = joint.release_vars(t + 1);
        let prior = joint.conditional_entropy(&guess, &past);
        let everything = [past.clone(), joint.label_vars(t + 1), z.clone()].concat();
        conditioned += prior - joint.conditional_entropy(&guess, &everything);
        markov += prior - joint.conditional_entropy(&guess, &z);
    }
    let causal_entropy = causally_conditional_entropy(&joint);
    Ok(BoundChainReport {
        directed_information: directed_information(&joint),
        conditioned_bound: conditioned,
        markov_bound: markov,
        entropy_bound: spec.steps as f64 * (spec.label_size as f64).ln() - causal_entropy.general,
        causal_entropy,
    })
}

/// The attacker cross-entropy against the two entropy rates it is compared with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct XentReport {
    /// `(1/T) Σ_t E[−ln q(X_t | Z^t)]` under the true `p(x_t, z^t)`.
    pub cross_entropy: f64,
    /// `(1/T) H(X̂^T ‖ Z^T)`, the attacker's own predictive entropy rate.
    pub guess_entropy_rate: f64,
    /// `(1/T) Σ_t H(X_t | Z^t)`, the entropy rate of the true labels.
    pub label_entropy_rate: f64,
}

impl XentReport {
    /// `cross_entropy − guess_entropy_rate`.
    pub fn guess_slack(&self) -> f64 {
        self.cross_entropy - self.guess_entropy_rate
    }

    /// `cross_entropy − label_entropy_rate`, a mean KL divergence (Gibbs).
    pub fn label_slack(&self) -> f64 {
        self.cross_entropy - self.label_entropy_rate
    }
}

/// Exact attacker cross-entropy and the entropy rates it is bounded against.
/// The cross-entropy is `+∞` when `q` puts zero mass on a label that occurs.
pub fn verify_xent_bound(spec: &JointProcessSpec) -> Result<XentReport> {
    if spec.guess_size != spec.label_size {
        return Err(Error::usage(
            "the cross-entropy bound needs the guess alphabet to equal the label alphabet",
        ));
    }
    let joint = joint_pmf(spec)?;
    let kx = spec.label_size;
    let mut cross_entropy = 0.0;
    let mut label_entropy = 0.0;
    for t in 0..spec.steps {
        let z = joint.release_vars(t + 1);
        // Little-endian over (z^t, x_t): the label is the slowest index.
        let table = joint.marginal(&[z.clone(), vec![joint.label_var(t)]].concat());
        let histories = spec.release_size.pow(t as u32 + 1);
        for h in 0..histories {
            for x in 0..kx {
                let p = table[h + x * histories];
                if p > 0.0 {
                    let q = spec.attacker[t][h * kx + x];
                    cross_entropy -= p * q.ln();
                }
            }
        }
        label_entropy += joint.conditional_entropy(&[joint.label_var(t)], &z);
    }
    let steps = spec.steps as f64;
    Ok(XentReport {
        cross_entropy: cross_entropy / steps,
        guess_entropy_rate: causally_conditional_entropy(&joint).general / steps,
        label_entropy_rate: label_entropy / steps,
    })
}

pub fn nats_to_bits(nats: f64) -> f64 {
    nats / LN_2
}
