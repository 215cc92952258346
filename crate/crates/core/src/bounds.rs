//! Error-rate estimates and the theoretical bounds on the per-entry error.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detector::{branch_log_ratios_batch, chain_batch, column_argmax, ANetModel};
use crate::error::{Error, Result};
use crate::mlp::{self, layer_norms, MlpModel};
use crate::problem::{make_binary_training_set, sample_pairs, BinaryTrainingSet, ProblemInstance};
use crate::seed;

const CHUNK: usize = 4096;

/// Type-I and Type-II error rates of one binary classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    /// `Pr(LR < 1 | x_n = +1)`.
    pub alpha: f64,
    /// `Pr(LR > 1 | x_n = -1)`.
    pub beta: f64,
    pub sample_count: usize,
}

impl ErrorRates {
    pub fn new(alpha: f64, beta: f64, sample_count: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid(format!("error rates must lie in [0, 1], got {alpha} and {beta}")));
        }
        Ok(Self {
            alpha,
            beta,
            sample_count,
        })
    }
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        Err(Error::invalid("trials must be at least 1"))
    } else {
        Ok(())
    }
}

/// Observations `Hx - r` with `x_n` pinned to `value`, the other entries
/// uniform and `r` from the problem's residual model.
fn pinned_batch<R: rand::Rng>(p: &ProblemInstance, n: usize, value: i32, count: usize, rng: &mut R) -> DMatrix<f64> {
    let mut ys = DMatrix::zeros(p.q(), count);
    for k in 0..count {
        let mut x = p.sample_x(rng);
        x[n] = value;
        let r = p.residual().sample(p.q(), rng);
        ys.set_column(k, &(p.apply(&x) - r));
    }
    ys
}

/// Monte-Carlo `alpha` and `beta` of the classifier for entry `n`, from
/// `trials` fresh draws under each hypothesis. Strict inequalities: a ratio
/// of exactly 1 is an error under neither.
pub fn estimate_adnn_errors(
    model: &MlpModel,
    p: &ProblemInstance,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<ErrorRates> {
    check_trials(trials)?;
    p.check_entry(n)?;
    if model.input_dim() != p.q() || !model.is_binary_head() {
        return Err(Error::invalid("classifier does not match the problem"));
    }
    let mut rng = seed::rng(seed);
    let (mut type1, mut type2) = (0usize, 0usize);
    let mut done = 0;
    while done < trials {
        let count = CHUNK.min(trials - done);
        let plus = pinned_batch(p, n, 1, count, &mut rng);
        let minus = pinned_batch(p, n, -1, count, &mut rng);
        type1 += mlp::log_likelihood_ratios(model, &plus).iter().filter(|&&l| l < 0.0).count();
        type2 += mlp::log_likelihood_ratios(model, &minus).iter().filter(|&&l| l > 0.0).count();
        done += count;
    }
    ErrorRates::new(type1 as f64 / trials as f64, type2 as f64 / trials as f64, trials)
}

/// Error rates and symbol error of one A-Net entry measured on common draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryErrors {
    pub rates: ErrorRates,
    /// `Pr(x_hat_n != x_n)` with `x_n` uniform on the alphabet.
    pub symbol_error: f64,
}

/// Measures `alpha`, `beta` and the symbol error of entry `n` on shared
/// draws. Each trial draws the other entries and the residual once, forms
/// `y_0 = H x - r` with `x_n = 0`, and evaluates the detector on
/// `y_s = y_0 + s h_n` for every symbol `s`; `alpha` and `beta` come from the
/// central branch at `y_{+1}` and `y_{-1}`.
pub fn estimate_entry_errors(model: &ANetModel, n: usize, trials: usize, seed: u64) -> Result<EntryErrors> {
    check_trials(trials)?;
    let p = model.problem();
    p.check_entry(n)?;
    let a = p.alphabet();
    let symbols = a.symbols();
    let centre = a.m_half() as usize;
    let h = p.column(n);
    let mut rng = seed::rng(seed);
    let (mut type1, mut type2, mut wrong) = (0usize, 0usize, 0usize);
    let mut done = 0;
    while done < trials {
        let count = CHUNK.min(trials - done);
        let y0 = pinned_batch(p, n, 0, count, &mut rng);
        let mut ys = DMatrix::zeros(p.q(), count * symbols.len());
        for k in 0..count {
            for (j, &s) in symbols.iter().enumerate() {
                let mut col = ys.column_mut(k * symbols.len() + j);
                col.copy_from(&y0.column(k));
                col.axpy(s as f64, &h, 1.0);
            }
        }
        let llr = branch_log_ratios_batch(model, &ys, n);
        let decisions = column_argmax(&chain_batch(&llr));
        for k in 0..count {
            let base = k * symbols.len();
            if llr[(centre, base + centre + 1)] < 0.0 {
                type1 += 1;
            }
            if llr[(centre, base + centre)] > 0.0 {
                type2 += 1;
            }
            wrong += (0..symbols.len()).filter(|&j| decisions[base + j] != j).count();
        }
        done += count;
    }
    Ok(EntryErrors {
        rates: ErrorRates::new(type1 as f64 / trials as f64, type2 as f64 / trials as f64, trials)?,
        symbol_error: wrong as f64 / (trials * symbols.len()) as f64,
    })
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::invalid(format!("rho must lie in [0, 1], got {rho}")))
    }
}

/// `1 - 1/(4M)`, or `1/2` for the binary alphabet.
pub fn neighbour_factor(m_half: u32) -> f64 {
    if m_half == 0 {
        0.5
    } else {
        1.0 - 1.0 / (4.0 * m_half as f64)
    }
}

/// `((1 - 1/(4M)) (alpha + beta))^rho`, clamped to `[0, 1]`.
pub fn union_bound(e: &ErrorRates, m_half: u32, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok((neighbour_factor(m_half) * (e.alpha + e.beta)).powf(rho).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub rho: f64,
    pub m_half: u32,
    pub delta: f64,
    /// Training set size.
    pub k: usize,
    /// Norm radius of the input layer's weights.
    pub b0: f64,
    /// `B_1 .. B_J`.
    pub norms: Vec<f64>,
    /// `L_1 .. L_J`.
    pub lipschitz: Vec<f64>,
    /// Input radius `R`.
    pub radius: f64,
}

impl BoundInputs {
    /// Inputs for a trained classifier: Frobenius norms of its weight
    /// matrices, `J` = layer count minus one, `K` and `R` from the binary
    /// training set it was fit to.
    pub fn for_classifier(model: &MlpModel, set: &BinaryTrainingSet, m_half: u32, rho: f64, delta: f64) -> Self {
        let norms = layer_norms(model);
        Self {
            rho,
            m_half,
            delta,
            k: set.len(),
            b0: norms[0].frobenius,
            norms: norms[1..].iter().map(|l| l.frobenius).collect(),
            lipschitz: norms[1..].iter().map(|l| l.lipschitz).collect(),
            radius: set.input_radius(),
        }
    }

    pub fn depth(&self) -> usize {
        self.norms.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.rho) {
            bad.push(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            bad.push(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.k == 0 {
            bad.push("k must be positive".to_string());
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            bad.push(format!("radius must be finite and non-negative, got {}", self.radius));
        }
        if self.norms.len() != self.lipschitz.len() {
            bad.push(format!(
                "{} layer norms but {} Lipschitz constants",
                self.norms.len(),
                self.lipschitz.len()
            ));
        }
        let all = std::iter::once(self.b0).chain(self.norms.iter().copied()).chain(self.lipschitz.iter().copied());
        if all.clone().any(|v| !(v >= 0.0 && v.is_finite())) {
            bad.push("norms and Lipschitz constants must be finite and non-negative".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// `prod_j (L_j B_j) * (B_0 R / sqrt(K) + (2R/K) sqrt(J ln 2))`.
pub fn rademacher_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let k = inputs.k as f64;
    let product: f64 = inputs.norms.iter().zip(&inputs.lipschitz).map(|(b, l)| l * b).product();
    let j = inputs.depth() as f64;
    Ok(product * (inputs.b0 * inputs.radius / k.sqrt() + 2.0 * inputs.radius / k * (j * 2f64.ln()).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBound {
    /// Bound clamped to `[0, 1]`.
    pub value: f64,
    /// Expression before the upper clamp (the base is floored at 0 before
    /// the power).
    pub raw: f64,
    /// `raw > 1`: the bound says nothing.
    pub vacuous: bool,
    pub rademacher: f64,
    /// `sqrt(ln(1/delta) / 2K)`.
    pub confidence: f64,
}

/// `((1 - 1/(4M)) (2 R_K + sqrt(ln(1/delta)/2K) - L))^rho` with the
/// Rademacher term from [`rademacher_bound`] and `L` the classifier's risk.
pub fn generalization_bound(inputs: &BoundInputs, risk: f64) -> Result<GeneralizationBound> {
    if !risk.is_finite() {
        return Err(Error::NonFinite("risk term"));
    }
    let rademacher = rademacher_bound(inputs)?;
    let confidence = ((1.0 / inputs.delta).ln() / (2.0 * inputs.k as f64)).sqrt();
    let base = neighbour_factor(inputs.m_half) * (2.0 * rademacher + confidence - risk);
    let raw = base.max(0.0).powf(inputs.rho);
    Ok(GeneralizationBound {
        value: raw.min(1.0),
        raw,
        vacuous: raw > 1.0,
        rademacher,
        confidence,
    })
}

/// Mean cross-entropy of the classifier for entry `n` on the shifted binary
/// set built from `samples` fresh tuples.
pub fn heldout_risk(model: &MlpModel, p: &ProblemInstance, n: usize, samples: usize, seed: u64) -> Result<f64> {
    check_trials(samples)?;
    let d = sample_pairs(p, samples, seed)?;
    let set = make_binary_training_set(p, &d, n)?;
    let risk = mlp::cross_entropy(model, &set.inputs, &set.classes());
    if risk.is_finite() {
        Ok(risk)
    } else {
        Err(Error::NonFinite("held-out risk"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    pub rho: f64,
    pub delta: f64,
    /// Monte-Carlo draws per hypothesis for `alpha` and `beta`.
    pub trials: usize,
    /// Fresh tuples for the held-out risk.
    pub heldout: usize,
    pub seed: u64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            delta: 0.05,
            trials: 10_000,
            heldout: 10_000,
            seed: 0,
        }
    }
}

/// Everything the bounds say about one entry of a trained A-Net.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryBound {
    pub entry: usize,
    pub alpha: f64,
    pub beta: f64,
    pub union_bound: f64,
    pub rademacher: f64,
    pub risk: f64,
    pub theorem2_bound: f64,
    pub theorem2_raw: f64,
    pub vacuous: bool,
}

/// Bound record for every entry of `model`, which was trained on `train`.
pub fn bound_report(model: &ANetModel, train: &crate::problem::Dataset, s: &BoundSettings) -> Result<Vec<EntryBound>> {
    check_rho(s.rho)?;
    let p = model.problem();
    (0..p.n())
        .map(|n| {
            let adnn = model.adnn(n);
            let rates = estimate_adnn_errors(adnn, p, n, s.trials, seed::derive(s.seed, seed::stream::ERROR_RATES, n as u64))?;
            let set = make_binary_training_set(p, train, n)?;
            let inputs = BoundInputs::for_classifier(adnn, &set, p.alphabet().m_half(), s.rho, s.delta);
            let risk = heldout_risk(adnn, p, n, s.heldout, seed::derive(s.seed, seed::stream::HELDOUT, n as u64))?;
            let g = generalization_bound(&inputs, risk)?;
            Ok(EntryBound {
                entry: n,
                alpha: rates.alpha,
                beta: rates.beta,
                union_bound: union_bound(&rates, p.alphabet().m_half(), s.rho)?,
                rademacher: g.rademacher,
                risk,
                theorem2_bound: g.value,
                theorem2_raw: g.raw,
                vacuous: g.vacuous,
            })
        })
        .collect()
}
