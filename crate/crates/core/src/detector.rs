//! Detectors assembled from per-entry binary classifiers.
//!
//! The A-Net keeps one binary classifier per entry `n`. Its `2M + 1`
//! branches evaluate that one classifier on shifted observations
//! `y + 2m h_n`, which turns the base `+1 / -1` likelihood ratio into the
//! ratio between the adjacent symbols `-2m + 1` and `-2m - 1`. Chaining the
//! branch ratios upward from the smallest symbol yields the full per-entry
//! posterior; entries are decided independently (marginal MAP).
//!
//! The B-, C- and D-Nets are the comparison architectures: the same branch
//! layout feeding one learned dense output layer (a `(2M + 2)`-way softmax
//! per entry) instead of the ratio chain. B reuses frozen A-Net classifiers and learns
//! only the combiner; C learns everything end to end with the branch weights
//! of an entry tied; D unties them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alphabet::IntegerAlphabet;
use crate::error::{Error, Result};
use crate::mlp::{
    self, log_likelihood_ratio, softmax_cross_entropy, Gradients, LayerSpec, MlpModel, TrainConfig,
    TrainReport,
};
use crate::problem::{make_binary_training_set, shift_along, Dataset, ProblemInstance};
use crate::seed;

/// Upper limit on `log2 |A^group|` for joint posteriors.
pub const MAX_JOINT_BITS: f64 = 20.0;

/// `y + 2m h_n`.
pub fn shifted_input(p: &ProblemInstance, y: &DVector<f64>, n: usize, m: i32) -> Result<DVector<f64>> {
    p.check_entry(n)?;
    if m.unsigned_abs() > p.alphabet().m_half() {
        return Err(Error::invalid(format!(
            "shift {m} outside the boundary range of M = {}",
            p.alphabet().m_half()
        )));
    }
    if y.len() != p.q() {
        return Err(Error::Dimension {
            what: "observation",
            expected: p.q(),
            actual: y.len(),
        });
    }
    Ok(shift_along(p, y, n, 2.0 * m as f64))
}

/// Every column of `ys` moved by `2m h_n`.
fn shifted_batch(p: &ProblemInstance, ys: &DMatrix<f64>, n: usize, m: i32) -> DMatrix<f64> {
    let mut out = ys.clone();
    let h = p.column(n);
    let coef = 2.0 * m as f64;
    for mut col in out.column_iter_mut() {
        col.axpy(coef, &h, 1.0);
    }
    out
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Posterior over the alphabet for one entry, in ascending symbol order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMass {
    pub entry_index: usize,
    pub alphabet: IntegerAlphabet,
    /// Unnormalized log-masses, anchored at 0 for the smallest symbol.
    pub log_masses: Vec<f64>,
    pub masses: Vec<f64>,
}

impl PosteriorMass {
    fn from_log_masses(entry_index: usize, alphabet: IntegerAlphabet, log_masses: Vec<f64>) -> Self {
        let max = log_masses.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + log_masses.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        let masses = log_masses.iter().map(|&l| (l - lse).exp()).collect();
        Self {
            entry_index,
            alphabet,
            log_masses,
            masses,
        }
    }

    /// Index of the most probable symbol; ties go to the smaller symbol.
    pub fn argmax_index(&self) -> usize {
        argmax_lowest(&self.log_masses)
    }

    pub fn argmax(&self) -> i32 {
        self.alphabet.symbol(self.argmax_index())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ANetModel {
    problem: ProblemInstance,
    adnns: Vec<MlpModel>,
}

impl ANetModel {
    pub fn new(problem: ProblemInstance, adnns: Vec<MlpModel>) -> Result<Self> {
        if adnns.len() != problem.n() {
            return Err(Error::Dimension {
                what: "per-entry classifiers",
                expected: problem.n(),
                actual: adnns.len(),
            });
        }
        for a in &adnns {
            if a.input_dim() != problem.q() {
                return Err(Error::Dimension {
                    what: "classifier input",
                    expected: problem.q(),
                    actual: a.input_dim(),
                });
            }
            if !a.is_binary_head() {
                return Err(Error::invalid("per-entry classifiers need a two-logit identity head"));
            }
        }
        Ok(Self { problem, adnns })
    }

    pub fn problem(&self) -> &ProblemInstance {
        &self.problem
    }

    pub fn adnns(&self) -> &[MlpModel] {
        &self.adnns
    }

    pub fn adnn(&self, n: usize) -> &MlpModel {
        &self.adnns[n]
    }

    pub fn parameter_count(&self) -> usize {
        self.adnns.iter().map(MlpModel::parameter_count).sum()
    }
}

/// Log-likelihood ratios of the `2M + 1` branches of entry `n`, in ascending
/// boundary order: element `i` compares symbol index `i + 1` against `i`,
/// evaluated on `shifted_input(y, n, M - i)`.
pub fn branch_log_ratios(model: &ANetModel, y: &DVector<f64>, n: usize) -> Result<Vec<f64>> {
    let p = &model.problem;
    p.check_entry(n)?;
    p.check_observation(y)?;
    let a = p.alphabet();
    (0..a.boundary_count())
        .map(|i| log_likelihood_ratio(&model.adnns[n], &shifted_input(p, y, n, a.shift_above(i))?))
        .collect()
}

fn chain(log_ratios: &[f64]) -> Vec<f64> {
    let mut log_masses = Vec::with_capacity(log_ratios.len() + 1);
    let mut acc = 0.0;
    log_masses.push(acc);
    for &l in log_ratios {
        acc += l;
        log_masses.push(acc);
    }
    log_masses
}

/// Per-entry posterior by chaining branch ratios upward from the smallest
/// symbol, whose unnormalized mass is fixed at 1.
pub fn entry_posterior(model: &ANetModel, y: &DVector<f64>, n: usize) -> Result<PosteriorMass> {
    let log_ratios = branch_log_ratios(model, y, n)?;
    let log_masses = chain(&log_ratios);
    if log_masses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("posterior chain"));
    }
    Ok(PosteriorMass::from_log_masses(n, model.problem.alphabet(), log_masses))
}

/// Marginal MAP decision for every entry.
pub fn detect(model: &ANetModel, y: &DVector<f64>) -> Result<Vec<i32>> {
    (0..model.problem.n())
        .map(|n| entry_posterior(model, y, n).map(|post| post.argmax()))
        .collect()
}

/// Branch log-likelihood ratios of entry `n` for a batch of observations
/// (columns of `ys`); row `i` is branch `i` in ascending boundary order, as in
/// [`branch_log_ratios`].
pub fn branch_log_ratios_batch(model: &ANetModel, ys: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let p = &model.problem;
    let a = p.alphabet();
    let mut out = DMatrix::zeros(a.boundary_count(), ys.ncols());
    for i in 0..a.boundary_count() {
        let llr = mlp::log_likelihood_ratios(&model.adnns[n], &shifted_batch(p, ys, n, a.shift_above(i)));
        out.row_mut(i).copy_from_slice(&llr);
    }
    out
}

/// Chains batched branch ratios into unnormalized log-posteriors,
/// `|A| x batch`.
pub fn chain_batch(log_ratios: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(log_ratios.nrows() + 1, log_ratios.ncols());
    for k in 0..log_ratios.ncols() {
        for i in 0..log_ratios.nrows() {
            out[(i + 1, k)] = out[(i, k)] + log_ratios[(i, k)];
        }
    }
    out
}

/// Index of the largest entry of every column; ties go to the lowest row.
pub fn column_argmax(values: &DMatrix<f64>) -> Vec<usize> {
    values
        .column_iter()
        .map(|c| {
            let mut best = 0;
            for i in 1..c.len() {
                if c[i] > c[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Unnormalized log-posteriors of entry `n` for a batch of observations,
/// `|A| x batch`. Same chain as [`entry_posterior`], evaluated with batched
/// forward passes.
pub fn entry_log_posteriors_batch(model: &ANetModel, ys: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    chain_batch(&branch_log_ratios_batch(model, ys, n))
}

/// Batched [`detect`]: one decision vector per column of `ys`.
pub fn detect_batch(model: &ANetModel, ys: &DMatrix<f64>) -> Vec<Vec<i32>> {
    let p = &model.problem;
    let a = p.alphabet();
    let mut out = vec![vec![0; p.n()]; ys.ncols()];
    for n in 0..p.n() {
        for (k, i) in column_argmax(&entry_log_posteriors_batch(model, ys, n)).into_iter().enumerate() {
            out[k][n] = a.symbol(i);
        }
    }
    out
}

/// Trains one classifier per entry on its shifted binary training set.
/// Entry `n` uses seed `cfg.seed + n`.
pub fn train_anet_reported(
    p: &ProblemInstance,
    d: &Dataset,
    cfg: &TrainConfig,
    specs: &[LayerSpec],
) -> Result<(ANetModel, Vec<TrainReport>)> {
    cfg.validate()?;
    d.check_against(p)?;
    let trained: Vec<_> = (0..p.n())
        .into_par_iter()
        .map(|n| {
            let set = make_binary_training_set(p, d, n)?;
            mlp::train(specs, &set, &cfg.with_seed(cfg.seed.wrapping_add(n as u64))).map_err(|e| Error::Entry {
                entry: n,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let reports = trained.iter().map(|t| t.report).collect();
    let adnns = trained.into_iter().map(|t| t.model).collect();
    Ok((ANetModel::new(p.clone(), adnns)?, reports))
}

pub fn train_anet(p: &ProblemInstance, d: &Dataset, cfg: &TrainConfig, specs: &[LayerSpec]) -> Result<ANetModel> {
    train_anet_reported(p, d, cfg, specs).map(|(m, _)| m)
}

/// Joint posterior over a group of entries, flattened with the first group
/// member as the most significant digit.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMass {
    pub group: Vec<usize>,
    pub alphabet: IntegerAlphabet,
    pub masses: Vec<f64>,
}

impl JointMass {
    /// Symbol indices for flat position `flat`.
    pub fn indices(&self, mut flat: usize) -> Vec<usize> {
        let base = self.alphabet.len();
        let mut out = vec![0; self.group.len()];
        for slot in out.iter_mut().rev() {
            *slot = flat % base;
            flat /= base;
        }
        out
    }

    /// Most probable assignment; ties go to the lexicographically smallest.
    pub fn argmax(&self) -> Vec<i32> {
        self.indices(argmax_lowest(&self.masses))
            .into_iter()
            .map(|i| self.alphabet.symbol(i))
            .collect()
    }

    /// Marginal over group position `pos`.
    pub fn marginal(&self, pos: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.alphabet.len()];
        for (flat, &m) in self.masses.iter().enumerate() {
            out[self.indices(flat)[pos]] += m;
        }
        out
    }
}

/// Joint posterior of `group` assembled from conditionals
/// `p(x_n | x_n', y) = p(x_n | y - x_n' h_n')`, peeling off the last member.
pub fn semi_decomposed_posterior(model: &ANetModel, y: &DVector<f64>, group: &[usize]) -> Result<JointMass> {
    let p = &model.problem;
    if group.is_empty() {
        return Err(Error::invalid("group must contain at least one entry"));
    }
    for (i, &n) in group.iter().enumerate() {
        p.check_entry(n)?;
        if group[..i].contains(&n) {
            return Err(Error::invalid(format!("entry {n} appears twice in the group")));
        }
    }
    let a = p.alphabet();
    let bits = group.len() as f64 * (a.len() as f64).log2();
    if bits > MAX_JOINT_BITS {
        return Err(Error::SearchTooLarge {
            size: 2f64.powf(bits),
            limit: 2f64.powf(MAX_JOINT_BITS),
        });
    }
    p.check_observation(y)?;
    let mut masses = joint_rec(model, y, group)?;
    if group.len() > 1 {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::NonFinite("joint posterior"));
        }
        masses.iter_mut().for_each(|m| *m /= total);
    }
    Ok(JointMass {
        group: group.to_vec(),
        alphabet: a,
        masses,
    })
}

fn joint_rec(model: &ANetModel, y: &DVector<f64>, group: &[usize]) -> Result<Vec<f64>> {
    let (&last, rest) = group.split_last().expect("non-empty group");
    let post = entry_posterior(model, y, last)?;
    if rest.is_empty() {
        return Ok(post.masses);
    }
    let a = model.problem.alphabet();
    let base = a.len();
    let sub_len = base.pow(rest.len() as u32);
    let mut out = vec![0.0; sub_len * base];
    for (v_idx, &pv) in post.masses.iter().enumerate() {
        let v = a.symbol(v_idx) as f64;
        let y_cond = shift_along(&model.problem, y, last, -v);
        let sub = joint_rec(model, &y_cond, rest)?;
        for (s, &ps) in sub.iter().enumerate() {
            out[s * base + v_idx] = pv * ps;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn name(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            other => Err(Error::invalid(format!("unknown detector variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// B/C/D-Net: the A-Net branch layout (`2M + 1` shifted inputs per entry)
/// with every branch's logit pair feeding one dense output layer that emits
/// a `(2M + 2)`-way softmax per entry. A linear layer over logits can express
/// the ratio chain exactly, so B contains A as a special case.
#[derive(Debug, Clone, PartialEq)]
pub struct BcdNetModel {
    variant: Variant,
    problem: ProblemInstance,
    /// Per entry: one network shared by all branches (B, C) or one per
    /// branch (D).
    branches: Vec<Vec<MlpModel>>,
    /// `2 (2M + 1) N` features to `(2M + 2) N` logits. Feature rows
    /// `2 (n (2M + 1) + i) + {0, 1}` hold the two head logits of branch `i`
    /// of entry `n`; logit rows `n (2M + 2) ..` belong to entry `n`.
    combiner: MlpModel,
}

impl BcdNetModel {
    pub fn new(
        variant: Variant,
        problem: ProblemInstance,
        branches: Vec<Vec<MlpModel>>,
        combiner: MlpModel,
    ) -> Result<Self> {
        if variant == Variant::A {
            return Err(Error::invalid("variant A is the chained detector, not a combiner network"));
        }
        if branches.len() != problem.n() {
            return Err(Error::Dimension {
                what: "entry branch sets",
                expected: problem.n(),
                actual: branches.len(),
            });
        }
        let a = problem.alphabet();
        let per_entry = if variant == Variant::D { a.boundary_count() } else { 1 };
        for set in &branches {
            if set.len() != per_entry {
                return Err(Error::Dimension {
                    what: "branch networks per entry",
                    expected: per_entry,
                    actual: set.len(),
                });
            }
            if set.iter().any(|b| b.input_dim() != problem.q() || !b.is_binary_head()) {
                return Err(Error::invalid("branch networks need input Q and a two-logit head"));
            }
        }
        let (fin, fout) = combiner_shape(&problem);
        if combiner.input_dim() != fin || combiner.output_dim() != fout {
            return Err(Error::invalid(format!(
                "combiner must map {fin} features to {fout} logits"
            )));
        }
        Ok(Self {
            variant,
            problem,
            branches,
            combiner,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn problem(&self) -> &ProblemInstance {
        &self.problem
    }

    pub fn branches(&self) -> &[Vec<MlpModel>] {
        &self.branches
    }

    pub fn combiner(&self) -> &MlpModel {
        &self.combiner
    }

    pub fn branch_parameter_count(&self) -> usize {
        self.branches.iter().flatten().map(MlpModel::parameter_count).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.branch_parameter_count() + self.combiner.parameter_count()
    }

    fn branch(&self, n: usize, i: usize) -> &MlpModel {
        let set = &self.branches[n];
        if set.len() == 1 {
            &set[0]
        } else {
            &set[i]
        }
    }

    fn logits(&self, inputs: &[Vec<DMatrix<f64>>]) -> DMatrix<f64> {
        let batch = inputs[0][0].ncols();
        let bc = self.problem.alphabet().boundary_count();
        let mut f = DMatrix::zeros(2 * bc * self.problem.n(), batch);
        for (n, per) in inputs.iter().enumerate() {
            for (i, x) in per.iter().enumerate() {
                f.rows_mut(2 * (n * bc + i), 2).copy_from(&self.branch(n, i).forward(x));
            }
        }
        self.combiner.forward(&f)
    }
}

/// Combiner that reproduces the A-Net posterior chain: the logit of symbol
/// `j` of entry `n` is the sum of that entry's branch log-ratios below `j`.
fn chain_combiner(p: &ProblemInstance) -> MlpModel {
    let (fin, fout) = combiner_shape(p);
    let a = p.alphabet();
    let (bc, classes) = (a.boundary_count(), a.len());
    let mut m = MlpModel::zeros(fin, &[LayerSpec::identity(fout)]).expect("combiner shape");
    let w = &mut m.layers_mut()[0].weights;
    for n in 0..p.n() {
        for j in 0..classes {
            for i in 0..j {
                w[(n * classes + j, 2 * (n * bc + i))] = 1.0;
                w[(n * classes + j, 2 * (n * bc + i) + 1)] = -1.0;
            }
        }
    }
    m
}

fn combiner_shape(p: &ProblemInstance) -> (usize, usize) {
    let a = p.alphabet();
    (2 * a.boundary_count() * p.n(), a.len() * p.n())
}

/// Shifted copies of `ys`, indexed `[entry][branch]`.
fn variant_inputs(p: &ProblemInstance, ys: &DMatrix<f64>) -> Vec<Vec<DMatrix<f64>>> {
    let a = p.alphabet();
    (0..p.n())
        .map(|n| {
            (0..a.boundary_count())
                .map(|i| shifted_batch(p, ys, n, a.shift_above(i)))
                .collect()
        })
        .collect()
}

/// Sum over entries of the mean multi-class cross-entropy, with its
/// gradient with respect to the stacked logits.
fn multi_head_cross_entropy(logits: &DMatrix<f64>, targets: &[Vec<usize>], classes: usize) -> (f64, DMatrix<f64>) {
    let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
    let mut loss = 0.0;
    for (n, t) in targets.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(&logits.rows(n * classes, classes).into_owned(), t);
        loss += l;
        grad.rows_mut(n * classes, classes).copy_from(&g);
    }
    (loss, grad)
}

fn variant_loss(net: &BcdNetModel, inputs: &[Vec<DMatrix<f64>>], targets: &[Vec<usize>]) -> f64 {
    multi_head_cross_entropy(&net.logits(inputs), targets, net.problem.alphabet().len()).0
}

/// Loss and gradients of a B/C/D-Net; branch gradients are skipped (left
/// empty) when `train_branches` is false.
fn variant_gradients(
    net: &BcdNetModel,
    inputs: &[Vec<DMatrix<f64>>],
    targets: &[Vec<usize>],
    train_branches: bool,
) -> (f64, Gradients, Vec<Vec<Gradients>>) {
    let a = net.problem.alphabet();
    let bc = a.boundary_count();
    let batch = inputs[0][0].ncols();
    let mut caches = Vec::with_capacity(inputs.len());
    let mut features = DMatrix::zeros(2 * bc * inputs.len(), batch);
    for (n, per) in inputs.iter().enumerate() {
        let mut cs = Vec::with_capacity(per.len());
        for (i, x) in per.iter().enumerate() {
            let c = net.branch(n, i).forward_cached(x);
            features.rows_mut(2 * (n * bc + i), 2).copy_from(c.output());
            cs.push(c);
        }
        caches.push(cs);
    }
    let comb_cache = net.combiner.forward_cached(&features);
    let (loss, d_logits) = multi_head_cross_entropy(comb_cache.output(), targets, a.len());
    let (comb_grads, d_features) = net.combiner.backward(&comb_cache, &d_logits);
    let mut branch_grads: Vec<Vec<Gradients>> = Vec::new();
    if train_branches {
        for (n, set) in net.branches.iter().enumerate() {
            let mut gs: Vec<Gradients> = set.iter().map(Gradients::zeros_like).collect();
            let tied = set.len() == 1;
            for i in 0..bc {
                let dz = d_features.rows(2 * (n * bc + i), 2).into_owned();
                let b = if tied { 0 } else { i };
                let (g, _) = set[b].backward(&caches[n][i], &dz);
                gs[b].add_assign(&g);
            }
            branch_grads.push(gs);
        }
    }
    (loss, comb_grads, branch_grads)
}

fn observation_matrix(d: &Dataset) -> DMatrix<f64> {
    let cols: Vec<_> = d.samples.iter().map(|s| s.y.clone()).collect();
    DMatrix::from_columns(&cols)
}

fn entry_targets(p: &ProblemInstance, d: &Dataset) -> Vec<Vec<usize>> {
    let a = p.alphabet();
    (0..p.n())
        .map(|n| {
            d.samples
                .iter()
                .map(|s| a.index_of(s.x[n]).expect("validated dataset"))
                .collect()
        })
        .collect()
}

/// Trains a benchmark variant on the same `K` tuples as the A-Net by
/// full-batch gradient descent on the summed per-entry cross-entropy,
/// returning the lowest-loss iterate. B needs the A-Net whose classifiers it
/// freezes; its combiner starts at the A-Net posterior chain and is the only
/// part trained. C and D learn everything from a random start.
pub fn train_variant(
    variant: Variant,
    p: &ProblemInstance,
    d: &Dataset,
    cfg: &TrainConfig,
    specs: &[LayerSpec],
    base: Option<&ANetModel>,
) -> Result<BcdNetModel> {
    cfg.validate()?;
    d.check_against(p)?;
    let a = p.alphabet();
    let branches: Vec<Vec<MlpModel>> = match variant {
        Variant::A => return Err(Error::invalid("use train_anet for variant A")),
        Variant::B => {
            let base = base.ok_or_else(|| Error::invalid("B-Net needs a trained A-Net to freeze"))?;
            if base.problem().q() != p.q() || base.problem().n() != p.n() || base.problem().alphabet() != a {
                return Err(Error::invalid("frozen A-Net does not match the problem"));
            }
            base.adnns().iter().map(|m| vec![m.clone()]).collect()
        }
        Variant::C | Variant::D => {
            let per_entry = if variant == Variant::D { a.boundary_count() } else { 1 };
            (0..p.n())
                .map(|n| {
                    let entry_seed = cfg.seed.wrapping_add(n as u64);
                    (0..per_entry)
                        .map(|b| {
                            MlpModel::init_uniform(
                                p.q(),
                                specs,
                                cfg.init_scale,
                                seed::derive(entry_seed, seed::stream::TRAINING, 1 + b as u64),
                            )
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?
        }
    };
    let combiner = if variant == Variant::B {
        chain_combiner(p)
    } else {
        let (fin, fout) = combiner_shape(p);
        MlpModel::init_uniform(
            fin,
            &[LayerSpec::identity(fout)],
            cfg.init_scale,
            seed::derive(cfg.seed, seed::stream::TRAINING, 0),
        )?
    };
    let mut net = BcdNetModel::new(variant, p.clone(), branches, combiner)?;
    let inputs = variant_inputs(p, &observation_matrix(d));
    let targets = entry_targets(p, d);
    let train_branches = variant != Variant::B;

    let mut best_loss = variant_loss(&net, &inputs, &targets);
    if !best_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            loss: best_loss,
        });
    }
    let mut best = net.clone();
    for epoch in 0..cfg.epochs {
        let (loss, comb_grads, branch_grads) = variant_gradients(&net, &inputs, &targets, train_branches);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        if loss < best_loss {
            best_loss = loss;
            best = net.clone();
        }
        if !comb_grads.is_finite() || branch_grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch, loss });
        }
        net.combiner.step(&comb_grads, cfg.learning_rate);
        for (set, gs) in net.branches.iter_mut().zip(&branch_grads) {
            for (b, g) in set.iter_mut().zip(gs) {
                b.step(g, cfg.learning_rate);
            }
        }
    }
    let last = variant_loss(&net, &inputs, &targets);
    if !last.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            loss: last,
        });
    }
    if last < best_loss {
        best = net;
    }
    Ok(best)
}

/// Decision of a B/C/D-Net; ties go to the smaller symbol.
pub fn detect_variant(model: &BcdNetModel, y: &DVector<f64>) -> Result<Vec<i32>> {
    model.problem.check_observation(y)?;
    let ys = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    Ok(detect_variant_batch(model, &ys).remove(0))
}

pub fn detect_variant_batch(model: &BcdNetModel, ys: &DMatrix<f64>) -> Vec<Vec<i32>> {
    let p = &model.problem;
    let a = p.alphabet();
    let logits = model.logits(&variant_inputs(p, ys));
    let mut out = vec![vec![0; p.n()]; ys.ncols()];
    for n in 0..p.n() {
        let pred = mlp::predict_classes(&logits.rows(n * a.len(), a.len()).into_owned());
        for (k, c) in pred.into_iter().enumerate() {
            out[k][n] = a.symbol(c);
        }
    }
    out
}
