//! Problem instances `minimize f(Hx - y) s.t. x_n in A`, the residual models
//! that generate data for them, and the shifted binary training sets the
//! per-entry classifiers learn from.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alphabet::IntegerAlphabet;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Gaussian,
    StudentT,
}

/// Distribution of the residual `r = Hx - y`, i.i.d. per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualModel {
    pub kind: ResidualKind,
    /// Multiplies a unit draw. Zero means noiseless.
    pub scale: f64,
    /// Degrees of freedom, Student-t only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

impl ResidualModel {
    pub fn gaussian(scale: f64) -> Self {
        Self {
            kind: ResidualKind::Gaussian,
            scale,
            nu: None,
        }
    }

    pub fn student_t(nu: f64, scale: f64) -> Self {
        Self {
            kind: ResidualKind::StudentT,
            scale,
            nu: Some(nu),
        }
    }

    pub fn noiseless(self) -> Self {
        Self { scale: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::invalid(format!(
                "residual scale must be finite and non-negative, got {}",
                self.scale
            )));
        }
        match (self.kind, self.nu) {
            (ResidualKind::StudentT, Some(nu)) if nu > 0.0 && nu.is_finite() => Ok(()),
            (ResidualKind::StudentT, nu) => Err(Error::invalid(format!(
                "student-t residual needs a positive degrees-of-freedom value, got {nu:?}"
            ))),
            (ResidualKind::Gaussian, _) => Ok(()),
        }
    }

    /// Per-component variance divided by `scale^2`.
    fn unit_variance(&self) -> Result<f64> {
        match self.kind {
            ResidualKind::Gaussian => Ok(1.0),
            ResidualKind::StudentT => {
                let nu = self.nu.unwrap_or(f64::NAN);
                if nu > 2.0 {
                    Ok(nu / (nu - 2.0))
                } else {
                    Err(Error::invalid(format!(
                        "student-t residual with nu = {nu} has no finite variance; SNR calibration needs nu > 2"
                    )))
                }
            }
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, q: usize, rng: &mut R) -> DVector<f64> {
        match self.kind {
            ResidualKind::Gaussian => DVector::from_fn(q, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                self.scale * z
            }),
            ResidualKind::StudentT => {
                let nu = self.nu.expect("validated student-t model");
                let chi = ChiSquared::new(nu).expect("validated degrees of freedom");
                DVector::from_fn(q, |_, _| {
                    let z: f64 = StandardNormal.sample(rng);
                    let c: f64 = chi.sample(rng);
                    self.scale * z / (c / nu).sqrt()
                })
            }
        }
    }
}

/// The objective `f` applied to the residual `Hx - y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `||r||_2`
    L2Norm,
    /// `sum_q log(1 + r_q^2 / nu)`
    LogSum { nu: f64 },
}

impl ObjectiveKind {
    pub fn evaluate(&self, residual: impl Iterator<Item = f64>) -> f64 {
        match *self {
            ObjectiveKind::L2Norm => residual.map(|r| r * r).sum::<f64>().sqrt(),
            ObjectiveKind::LogSum { nu } => residual.map(|r| (r * r / nu).ln_1p()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    h: DMatrix<f64>,
    alphabet: IntegerAlphabet,
    residual: ResidualModel,
    objective: ObjectiveKind,
}

impl ProblemInstance {
    pub fn new(
        h: DMatrix<f64>,
        alphabet: IntegerAlphabet,
        residual: ResidualModel,
        objective: ObjectiveKind,
    ) -> Result<Self> {
        let (q, n) = h.shape();
        if n == 0 || q < n {
            return Err(Error::invalid(format!(
                "channel matrix must satisfy Q >= N >= 1, got {q}x{n}"
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("channel matrix"));
        }
        if let Some(col) = (0..n).find(|&j| h.column(j).norm() <= 0.0) {
            return Err(Error::invalid(format!("column {col} of the channel matrix is zero")));
        }
        residual.validate()?;
        if let ObjectiveKind::LogSum { nu } = objective {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::invalid(format!("log-sum objective needs nu > 0, got {nu}")));
            }
        }
        Ok(Self {
            h,
            alphabet,
            residual,
            objective,
        })
    }

    /// I.i.d. standard-normal `q x n` channel.
    pub fn gaussian_channel<R: rand::Rng + ?Sized>(q: usize, n: usize, rng: &mut R) -> DMatrix<f64> {
        DMatrix::from_fn(q, n, |_, _| StandardNormal.sample(rng))
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn column(&self, n: usize) -> DVectorView<'_, f64> {
        self.h.column(n)
    }

    pub fn q(&self) -> usize {
        self.h.nrows()
    }

    pub fn n(&self) -> usize {
        self.h.ncols()
    }

    pub fn alphabet(&self) -> IntegerAlphabet {
        self.alphabet
    }

    pub fn residual(&self) -> &ResidualModel {
        &self.residual
    }

    pub fn objective(&self) -> ObjectiveKind {
        self.objective
    }

    pub fn with_residual(&self, residual: ResidualModel) -> Result<Self> {
        residual.validate()?;
        Ok(Self {
            residual,
            ..self.clone()
        })
    }

    pub(crate) fn check_entry(&self, n: usize) -> Result<()> {
        if n >= self.n() {
            return Err(Error::IndexOutOfRange {
                what: "entry",
                index: n,
                len: self.n(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_observation(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.q() {
            return Err(Error::Dimension {
                what: "observation",
                expected: self.q(),
                actual: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation"));
        }
        Ok(())
    }

    /// `E_x ||Hx||^2` with `x` uniform on `A^N`.
    pub fn mean_signal_energy(&self) -> f64 {
        self.alphabet.mean_square() * self.h.norm_squared()
    }

    /// Copy with the residual scale set so that `E{||Hx||^2 / ||r||^2}`
    /// equals the target SNR. An infinite SNR gives the noiseless model.
    ///
    /// For a Gaussian residual with `Q > 2` the expectation of the ratio is
    /// exact: `||r||^2 / sigma^2` is chi-square with `Q` degrees of freedom, so
    /// `E[1/||r||^2] = 1 / (sigma^2 (Q - 2))`. Otherwise the ratio of
    /// expectations is used, with the Student-t variance `nu/(nu-2) scale^2`.
    pub fn calibrated(&self, snr_db: f64) -> Result<Self> {
        if snr_db.is_nan() {
            return Err(Error::invalid("SNR must not be NaN"));
        }
        if snr_db == f64::INFINITY {
            return self.with_residual(self.residual.noiseless());
        }
        let snr = 10f64.powf(snr_db / 10.0);
        let q = self.q() as f64;
        let effective_dims = match self.residual.kind {
            ResidualKind::Gaussian if self.q() > 2 => q - 2.0,
            _ => q,
        };
        let unit_var = self.residual.unit_variance()?;
        let scale_sq = self.mean_signal_energy() / (snr * effective_dims * unit_var);
        self.with_residual(ResidualModel {
            scale: scale_sq.sqrt(),
            ..self.residual
        })
    }

    /// `Hx` for an integer vector.
    pub fn apply(&self, x: &[i32]) -> DVector<f64> {
        let mut out = DVector::zeros(self.q());
        for (j, &xj) in x.iter().enumerate() {
            out.axpy(xj as f64, &self.h.column(j), 1.0);
        }
        out
    }

    pub fn sample_x<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<i32> {
        let a = self.alphabet;
        (0..self.n()).map(|_| a.symbol(rng.random_range(0..a.len()))).collect()
    }

    /// One `(x, y, r)` draw: `x ~ U(A^N)`, `r ~ P(r)`, `y = Hx - r`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let x = self.sample_x(rng);
        let raw = self.residual.sample(self.q(), rng);
        let hx = self.apply(&x);
        let y = &hx - raw;
        // Record the residual as realized in floating point so that
        // `Hx - y == r` holds bit for bit.
        let r = &hx - &y;
        Sample { x, y, r }
    }

    /// `f(Hx - y)`.
    pub fn objective_value(&self, x: &[i32], y: &DVector<f64>) -> Result<f64> {
        if x.len() != self.n() {
            return Err(Error::Dimension {
                what: "integer vector",
                expected: self.n(),
                actual: x.len(),
            });
        }
        self.check_observation(y)?;
        Ok(self.objective_unchecked(x, y))
    }

    /// `f(Hx - y)` without validation; each residual component is
    /// accumulated over columns in index order.
    pub(crate) fn objective_unchecked(&self, x: &[i32], y: &DVector<f64>) -> f64 {
        let h = &self.h;
        self.objective.evaluate((0..self.q()).map(|row| {
            let mut acc = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                acc += h[(row, j)] * xj as f64;
            }
            acc - y[row]
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<i32>,
    pub y: DVector<f64>,
    pub r: DVector<f64>,
}

/// `K` tuples drawn from one problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub residual: ResidualModel,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn check_against(&self, p: &ProblemInstance) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        for (k, s) in self.samples.iter().enumerate() {
            if s.x.len() != p.n() || s.y.len() != p.q() {
                return Err(Error::invalid(format!(
                    "sample {k} has shape ({}, {}), problem expects ({}, {})",
                    s.x.len(),
                    s.y.len(),
                    p.n(),
                    p.q()
                )));
            }
            if let Some(bad) = s.x.iter().find(|&&v| !p.alphabet().contains(v)) {
                return Err(Error::invalid(format!("sample {k} has symbol {bad} outside the alphabet")));
            }
            if s.y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset observation"));
            }
        }
        Ok(())
    }
}

/// Draws `k` tuples from `p` as given (no SNR calibration).
pub fn sample_pairs(p: &ProblemInstance, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let samples = (0..k).map(|_| p.sample(&mut rng)).collect();
    Ok(Dataset {
        seed,
        residual: *p.residual(),
        samples,
    })
}

/// Calibrates the residual scale of `p` to the target SNR and draws `k`
/// tuples. The calibrated model is recorded in the returned dataset.
pub fn sample_dataset(p: &ProblemInstance, k: usize, target_snr_db: f64, seed: u64) -> Result<Dataset> {
    let calibrated = p.calibrated(target_snr_db)?;
    sample_pairs(&calibrated, k, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Plus,
    Minus,
}

impl Label {
    /// Output-logit index: 0 for `+1`, 1 for `-1`.
    pub fn class(self) -> usize {
        match self {
            Label::Plus => 0,
            Label::Minus => 1,
        }
    }

    pub fn sign(self) -> i32 {
        match self {
            Label::Plus => 1,
            Label::Minus => -1,
        }
    }
}

/// Labeled shifted observations for the classifier of one entry. Column `2k`
/// of `inputs` is `y + (1 - x_n) h_n` (label `+1`), column `2k + 1` is
/// `y + (-1 - x_n) h_n` (label `-1`).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTrainingSet {
    pub entry_index: usize,
    pub inputs: DMatrix<f64>,
    pub labels: Vec<Label>,
}

impl BinaryTrainingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.class()).collect()
    }

    /// Root-mean-square input norm, `sqrt(mean ||input||^2)`.
    pub fn input_radius(&self) -> f64 {
        (self.inputs.norm_squared() / self.len().max(1) as f64).sqrt()
    }
}

/// `y` moved along `h_n` by `coef`: `y + coef * h_n`.
pub(crate) fn shift_along(p: &ProblemInstance, y: &DVector<f64>, n: usize, coef: f64) -> DVector<f64> {
    let mut out = y.clone();
    out.axpy(coef, &p.column(n), 1.0);
    out
}

pub fn make_binary_training_set(p: &ProblemInstance, d: &Dataset, n: usize) -> Result<BinaryTrainingSet> {
    p.check_entry(n)?;
    d.check_against(p)?;
    let mut inputs = DMatrix::zeros(p.q(), 2 * d.len());
    let mut labels = Vec::with_capacity(2 * d.len());
    for (k, s) in d.samples.iter().enumerate() {
        let xn = s.x[n] as f64;
        inputs.set_column(2 * k, &shift_along(p, &s.y, n, 1.0 - xn));
        inputs.set_column(2 * k + 1, &shift_along(p, &s.y, n, -1.0 - xn));
        labels.push(Label::Plus);
        labels.push(Label::Minus);
    }
    Ok(BinaryTrainingSet {
        entry_index: n,
        inputs,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn identity_problem(m: u32) -> ProblemInstance {
        ProblemInstance::new(
            DMatrix::identity(2, 2),
            IntegerAlphabet::from_m(m),
            ResidualModel::gaussian(0.0),
            ObjectiveKind::L2Norm,
        )
        .unwrap()
    }

    fn random_problem(seed: u64, m: u32, residual: ResidualModel, objective: ObjectiveKind) -> ProblemInstance {
        let mut rng = seed::rng(seed);
        let h = ProblemInstance::gaussian_channel(8, 4, &mut rng);
        ProblemInstance::new(h, IntegerAlphabet::from_m(m), residual, objective).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        let a = IntegerAlphabet::binary();
        let res = ResidualModel::gaussian(1.0);
        assert!(ProblemInstance::new(DMatrix::zeros(2, 3), a, res, ObjectiveKind::L2Norm).is_err());
        let mut h = DMatrix::identity(3, 2);
        h[(1, 1)] = 0.0;
        assert!(ProblemInstance::new(h.clone(), a, res, ObjectiveKind::L2Norm).is_err());
        h[(1, 1)] = f64::NAN;
        assert!(ProblemInstance::new(h, a, res, ObjectiveKind::L2Norm).is_err());
        let bad_t = ResidualModel::student_t(-1.0, 1.0);
        assert!(ProblemInstance::new(DMatrix::identity(2, 2), a, bad_t, ObjectiveKind::L2Norm).is_err());
    }

    #[test]
    fn objective_hand_values() {
        let p = identity_problem(0);
        let y = DVector::from_vec(vec![0.0, 0.0]);
        assert_relative_eq!(p.objective_value(&[1, 1], &y).unwrap(), 2f64.sqrt());
        let exact = p.apply(&[1, -1]);
        assert_eq!(p.objective_value(&[1, -1], &exact).unwrap(), 0.0);

        let ls = ObjectiveKind::LogSum { nu: 3.0 };
        assert_relative_eq!(ls.evaluate([1.0, 0.0].into_iter()), (4.0f64 / 3.0).ln(), epsilon = 1e-15);
        let p = ProblemInstance::new(
            DMatrix::identity(2, 2),
            IntegerAlphabet::binary(),
            ResidualModel::student_t(3.0, 1.0),
            ls,
        )
        .unwrap();
        assert_eq!(p.objective_value(&[1, -1], &exact).unwrap(), 0.0);
    }

    #[test]
    fn objective_errors() {
        let p = identity_problem(0);
        assert!(p.objective_value(&[1], &DVector::zeros(2)).is_err());
        assert!(p.objective_value(&[1, 1], &DVector::zeros(3)).is_err());
        assert!(p.objective_value(&[1, 1], &DVector::from_vec(vec![f64::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn noiseless_identity_gives_lattice_points() {
        let p = identity_problem(0);
        let d = sample_pairs(&p, 50, 3).unwrap();
        for s in &d.samples {
            assert_eq!(s.y, p.apply(&s.x));
            assert!(s.y.iter().all(|&v| v == 1.0 || v == -1.0));
        }
        let d = sample_dataset(&p, 5, f64::INFINITY, 3).unwrap();
        assert_eq!(d.residual.scale, 0.0);
    }

    #[test]
    fn sampling_is_deterministic_and_round_trips() {
        let p = random_problem(1, 1, ResidualModel::gaussian(1.0), ObjectiveKind::L2Norm);
        let a = sample_dataset(&p, 30, 10.0, 99).unwrap();
        let b = sample_dataset(&p, 30, 10.0, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        for s in &a.samples {
            assert_eq!(p.apply(&s.x) - &s.y, s.r);
            assert!(s.x.iter().all(|&v| p.alphabet().contains(v)));
        }
        assert_ne!(a, sample_dataset(&p, 30, 10.0, 100).unwrap());
        assert!(sample_dataset(&p, 0, 10.0, 99).is_err());
    }

    fn mean_snr(p: &ProblemInstance, draws: usize, seed: u64) -> f64 {
        let mut rng = seed::rng(seed);
        let mut acc = 0.0;
        for _ in 0..draws {
            let s = p.sample(&mut rng);
            acc += p.apply(&s.x).norm_squared() / s.r.norm_squared();
        }
        acc / draws as f64
    }

    #[test]
    fn gaussian_snr_calibration_matches_mean_ratio() {
        let p = random_problem(5, 1, ResidualModel::gaussian(1.0), ObjectiveKind::L2Norm)
            .calibrated(10.0)
            .unwrap();
        let m = mean_snr(&p, 100_000, 17);
        assert!((m / 10.0 - 1.0).abs() < 0.05, "mean ratio {m}");
    }

    #[test]
    fn snr_within_factor_two_at_thirty_samples() {
        for residual in [ResidualModel::gaussian(1.0), ResidualModel::student_t(3.0, 1.0)] {
            let p = random_problem(8, 1, residual, ObjectiveKind::L2Norm).calibrated(10.0).unwrap();
            let d = sample_pairs(&p, 30, 4).unwrap();
            assert_eq!(d.len(), 30);
            // Median over many resamples of the ratio, robust to the heavy
            // student-t tail.
            let mut rng = seed::rng(21);
            let mut ratios: Vec<f64> = (0..10_000)
                .map(|_| {
                    let s = p.sample(&mut rng);
                    p.apply(&s.x).norm_squared() / s.r.norm_squared()
                })
                .collect();
            ratios.sort_by(f64::total_cmp);
            let med = ratios[ratios.len() / 2];
            assert!(med > 5.0 && med < 20.0, "{:?}: median ratio {med}", residual.kind);
        }
    }

    #[test]
    fn student_t_calibration_needs_finite_variance() {
        let p = random_problem(2, 0, ResidualModel::student_t(2.0, 1.0), ObjectiveKind::LogSum { nu: 2.0 });
        assert!(p.calibrated(10.0).is_err());
        assert!(p.calibrated(f64::INFINITY).is_ok());
    }

    #[test]
    fn binary_set_substitutions() {
        let p = identity_problem(1);
        let y = DVector::from_vec(vec![0.25, -0.5]);
        let mk = |x0: i32| Dataset {
            seed: 0,
            residual: *p.residual(),
            samples: vec![Sample {
                x: vec![x0, 1],
                y: y.clone(),
                r: DVector::zeros(2),
            }],
        };
        let h0 = p.column(0).into_owned();
        let set = make_binary_training_set(&p, &mk(1), 0).unwrap();
        assert_eq!(set.inputs.column(0).into_owned(), y);
        assert_eq!(set.inputs.column(1).into_owned(), &y - 2.0 * &h0);
        let set = make_binary_training_set(&p, &mk(-3), 0).unwrap();
        assert_eq!(set.inputs.column(0).into_owned(), &y + 4.0 * &h0);
        assert_eq!(set.inputs.column(1).into_owned(), &y + 2.0 * &h0);
        assert!(make_binary_training_set(&p, &mk(1), 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn binary_sets_are_balanced_and_shifted(seed in any::<u64>(), k in 1usize..40, m in 0u32..3) {
            let p = random_problem(seed, m, ResidualModel::gaussian(1.0), ObjectiveKind::L2Norm);
            let d = sample_dataset(&p, k, 10.0, seed ^ 1).unwrap();
            for n in 0..p.n() {
                let set = make_binary_training_set(&p, &d, n).unwrap();
                prop_assert_eq!(set.len(), 2 * k);
                prop_assert_eq!(set.labels.iter().filter(|l| **l == Label::Plus).count(), k);
                let two_h = 2.0 * p.column(n).into_owned();
                for j in 0..k {
                    let diff = set.inputs.column(2 * j) - set.inputs.column(2 * j + 1);
                    prop_assert!((diff - &two_h).amax() <= 1e-12 * (1.0 + set.inputs.amax()));
                }
            }
        }
    }
}
