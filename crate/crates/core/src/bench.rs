//! Experiment runner for the variant comparison tables and the
//! generalization-versus-K sweep.
//!
//! Channel `c` of a run with master seed `s` draws
//! - `H` from `derive(s, CHANNEL, c)`,
//! - training tuples from `derive(s, TRAIN_DATA, c)` (nested across K),
//! - test tuples from `derive(s, TEST_DATA, c)`,
//! - network initialisation from `derive(s, TRAINING, c)`,
//! - bound estimates from `derive(s, ERROR_RATES, c)`.
//!
//! Channels run in parallel and results are kept in channel order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{bound_report, BoundSettings, EntryBound};
use crate::config::Config;
use crate::detector::{detect_batch, detect_variant_batch, train_anet_reported, train_variant, ANetModel, Variant};
use crate::error::{Error, Result};
use crate::io::ModelBundle;
use crate::oracle::exhaustive_solve;
use crate::problem::{sample_pairs, Dataset, ProblemInstance};
use crate::seed::{self, stream};

/// Outcome of one variant on one channel realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub channel: u64,
    pub k: usize,
    pub variant: Variant,
    /// Training failure, if any; the rates are NaN in that case.
    pub error: Option<String>,
    /// Fraction of training tuples whose decision equals the drawn `x`.
    pub train_success: f64,
    /// Fraction of test observations whose decision equals the exhaustive
    /// minimizer.
    pub test_success_oracle: f64,
    /// Fraction of test observations whose decision equals the drawn `x`.
    pub test_success_truth: f64,
    /// Per-entry bound records; A-Net only and only when requested.
    pub bounds: Vec<EntryBound>,
    /// Seconds spent training and evaluating. Logged, never written to
    /// results files.
    #[serde(skip)]
    pub wall_time: f64,
}

impl TrialResult {
    fn failed(channel: u64, k: usize, variant: Variant, e: &Error, wall_time: f64) -> Self {
        Self {
            channel,
            k,
            variant,
            error: Some(e.to_string()),
            train_success: f64::NAN,
            test_success_oracle: f64::NAN,
            test_success_truth: f64::NAN,
            bounds: Vec::new(),
            wall_time,
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Per-variant aggregate over channels; failed trials are counted and left
/// out of the means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub channels: usize,
    pub failed: usize,
    pub train_success: f64,
    pub test_success_oracle: f64,
    pub test_success_oracle_q1: f64,
    pub test_success_oracle_median: f64,
    pub test_success_oracle_q3: f64,
    pub test_success_truth: f64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub union_bound: Option<f64>,
    pub theorem2_bound: Option<f64>,
    pub vacuous_fraction: Option<f64>,
}

/// Aggregate test error `1 - test_success_oracle` of the A-Net at one K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub channels: usize,
    pub failed: usize,
    pub mean_error: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// R² of the least-squares fit `a + b / sqrt(K)` to the means.
    pub r2_inv_sqrt: f64,
    /// R² of the least-squares fit `a + b / K` to the means.
    pub r2_inv: f64,
}

impl SweepReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].mean_error < w[0].mean_error)
    }
}

fn observations(d: &Dataset) -> DMatrix<f64> {
    DMatrix::from_columns(&d.samples.iter().map(|s| s.y.clone()).collect::<Vec<_>>())
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

struct Channel {
    id: u64,
    problem: ProblemInstance,
    test: Dataset,
    test_ys: DMatrix<f64>,
    oracle: Vec<Vec<i32>>,
}

impl Channel {
    fn new(cfg: &Config, id: u64) -> Result<Self> {
        let problem = cfg.instance(id)?;
        let test = sample_pairs(&problem, cfg.experiment.n_test, seed::derive(cfg.seed, stream::TEST_DATA, id))?;
        let test_ys = observations(&test);
        let oracle = test
            .samples
            .iter()
            .map(|s| exhaustive_solve(&problem, &s.y).map(|r| r.argmin_x))
            .collect::<Result<_>>()?;
        Ok(Self {
            id,
            problem,
            test,
            test_ys,
            oracle,
        })
    }

    fn train_set(&self, cfg: &Config, k: usize) -> Result<Dataset> {
        sample_pairs(&self.problem, k, seed::derive(cfg.seed, stream::TRAIN_DATA, self.id))
    }

    fn score(&self, train: &Dataset, train_out: &[Vec<i32>], test_out: &[Vec<i32>]) -> (f64, f64, f64) {
        let tr = train_out.iter().zip(&train.samples).filter(|(o, s)| **o == s.x).count();
        let to = test_out.iter().zip(&self.oracle).filter(|(o, x)| o == x).count();
        let tt = test_out.iter().zip(&self.test.samples).filter(|(o, s)| **o == s.x).count();
        (
            fraction(tr, train.len()),
            fraction(to, self.oracle.len()),
            fraction(tt, self.test.len()),
        )
    }

    /// Trains and scores every requested variant at training size `k`.
    fn run(&self, cfg: &Config, k: usize, variants: &[Variant], with_bounds: bool) -> Result<Vec<TrialResult>> {
        let train = self.train_set(cfg, k)?;
        let train_ys = observations(&train);
        let tcfg = cfg.train_config(seed::derive(cfg.seed, stream::TRAINING, self.id));
        let specs = cfg.layer_specs();
        let start = Instant::now();
        let anet: std::result::Result<ANetModel, Error> =
            train_anet_reported(&self.problem, &train, &tcfg, &specs).map(|(m, _)| m);
        let anet_time = start.elapsed().as_secs_f64();
        let mut out = Vec::with_capacity(variants.len());
        for &v in variants {
            let start = Instant::now();
            let trial = match v {
                Variant::A => match &anet {
                    Ok(model) => {
                        let (tr, to, tt) =
                            self.score(&train, &detect_batch(model, &train_ys), &detect_batch(model, &self.test_ys));
                        let bounds = if with_bounds {
                            let settings = BoundSettings {
                                rho: cfg.experiment.rho,
                                delta: cfg.experiment.delta,
                                trials: cfg.experiment.bound_trials,
                                heldout: cfg.experiment.heldout,
                                seed: seed::derive(cfg.seed, stream::ERROR_RATES, self.id),
                            };
                            bound_report(model, &train, &settings)?
                        } else {
                            Vec::new()
                        };
                        Ok((tr, to, tt, bounds))
                    }
                    Err(e) => Err(Error::invalid(format!("A-Net training failed: {e}"))),
                },
                _ => {
                    let base = if v == Variant::B { anet.as_ref().ok() } else { None };
                    if v == Variant::B && base.is_none() {
                        Err(Error::invalid("B-Net skipped: the A-Net it freezes failed to train"))
                    } else {
                        train_variant(v, &self.problem, &train, &tcfg, &specs, base).map(|m| {
                            let (tr, to, tt) = self.score(
                                &train,
                                &detect_variant_batch(&m, &train_ys),
                                &detect_variant_batch(&m, &self.test_ys),
                            );
                            (tr, to, tt, Vec::new())
                        })
                    }
                }
            };
            let mut wall = start.elapsed().as_secs_f64();
            if matches!(v, Variant::A | Variant::B) {
                wall += anet_time;
            }
            out.push(match trial {
                Ok((train_success, test_success_oracle, test_success_truth, bounds)) => TrialResult {
                    channel: self.id,
                    k,
                    variant: v,
                    error: None,
                    train_success,
                    test_success_oracle,
                    test_success_truth,
                    bounds,
                    wall_time: wall,
                },
                Err(e) => {
                    log::warn!("channel {} variant {v}: {e}", self.id);
                    TrialResult::failed(self.id, k, v, &e, wall)
                }
            });
        }
        Ok(out)
    }
}

/// Trains `cfg.experiment.variants` on each of `cfg.experiment.channels`
/// channel realizations with `k_train` tuples and scores them on `n_test`
/// fresh observations of the same channel. Results are ordered by channel,
/// then by variant as listed in the config.
pub fn run_table_experiment(cfg: &Config) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let start = Instant::now();
    let per_channel: Vec<Vec<TrialResult>> = (0..e.channels as u64)
        .into_par_iter()
        .map(|c| Channel::new(cfg, c)?.run(cfg, e.k_train, &e.variants, true))
        .collect::<Result<_>>()?;
    log::info!(
        "table experiment: {} channels in {:.1} s",
        e.channels,
        start.elapsed().as_secs_f64()
    );
    Ok(per_channel.into_iter().flatten().collect())
}

/// Trains the A-Net at each K of `k_values` on every channel; the training
/// sets for different K are prefixes of one draw and the test set is shared.
pub fn run_k_sweep(cfg: &Config, k_values: &[usize]) -> Result<(SweepReport, Vec<TrialResult>)> {
    cfg.validate()?;
    if k_values.is_empty() || k_values.contains(&0) || k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(vec![
            "k_values: must be non-empty, positive and strictly ascending".into(),
        ]));
    }
    let start = Instant::now();
    let per_channel: Vec<Vec<TrialResult>> = (0..cfg.experiment.channels as u64)
        .into_par_iter()
        .map(|c| {
            let ch = Channel::new(cfg, c)?;
            let mut v = Vec::with_capacity(k_values.len());
            for &k in k_values {
                v.extend(ch.run(cfg, k, &[Variant::A], false)?);
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    log::info!(
        "K sweep: {} channels x {} sizes in {:.1} s",
        cfg.experiment.channels,
        k_values.len(),
        start.elapsed().as_secs_f64()
    );
    let trials: Vec<TrialResult> = per_channel.into_iter().flatten().collect();
    let points: Vec<SweepPoint> = k_values
        .iter()
        .map(|&k| {
            let at_k: Vec<&TrialResult> = trials.iter().filter(|t| t.k == k).collect();
            let errs: Vec<f64> = at_k.iter().filter(|t| t.ok()).map(|t| 1.0 - t.test_success_oracle).collect();
            let [min, q1, median, q3, max] = five_numbers(&errs);
            SweepPoint {
                k,
                channels: at_k.len(),
                failed: at_k.len() - errs.len(),
                mean_error: mean(&errs),
                min,
                q1,
                median,
                q3,
                max,
            }
        })
        .collect();
    let ks: Vec<f64> = points.iter().map(|p| p.k as f64).collect();
    let means: Vec<f64> = points.iter().map(|p| p.mean_error).collect();
    let inv_sqrt: Vec<f64> = ks.iter().map(|k| 1.0 / k.sqrt()).collect();
    let inv: Vec<f64> = ks.iter().map(|k| 1.0 / k).collect();
    Ok((
        SweepReport {
            r2_inv_sqrt: linear_fit_r2(&inv_sqrt, &means),
            r2_inv: linear_fit_r2(&inv, &means),
            points,
        },
        trials,
    ))
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn five_numbers(v: &[f64]) -> [f64; 5] {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&s, q))
}

/// Coefficient of determination of the ordinary least-squares line
/// `y = a + b x`. A constant `y` that the line reproduces scores 1.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let sse: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    if syy == 0.0 {
        return if sse == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - sse / syy
}

/// Success rates of one trained model on fresh observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub variant: Variant,
    pub n_test: usize,
    pub success_oracle: f64,
    pub success_truth: f64,
}

/// Scores every requested variant of `bundle` on `n_test` observations drawn
/// from its problem with `seed`.
pub fn evaluate_bundle(bundle: &ModelBundle, variants: &[Variant], n_test: usize, seed: u64) -> Result<Vec<EvalRecord>> {
    let p = bundle.anet.problem();
    let test = sample_pairs(p, n_test, seed)?;
    let ys = observations(&test);
    let oracle: Vec<Vec<i32>> = test
        .samples
        .par_iter()
        .map(|s| exhaustive_solve(p, &s.y).map(|r| r.argmin_x))
        .collect::<Result<_>>()?;
    variants
        .iter()
        .map(|&v| {
            let out = match v {
                Variant::A => detect_batch(&bundle.anet, &ys),
                _ => detect_variant_batch(
                    bundle
                        .variant(v)
                        .ok_or_else(|| Error::invalid(format!("model file has no {v}-Net")))?,
                    &ys,
                ),
            };
            Ok(EvalRecord {
                variant: v,
                n_test,
                success_oracle: fraction(out.iter().zip(&oracle).filter(|(o, x)| o == x).count(), n_test),
                success_truth: fraction(out.iter().zip(&test.samples).filter(|(o, s)| **o == s.x).count(), n_test),
            })
        })
        .collect()
}

/// Aggregates trials per variant, in the order of `variants`.
pub fn summarize(trials: &[TrialResult], variants: &[Variant]) -> Vec<VariantSummary> {
    variants
        .iter()
        .map(|&v| {
            let all: Vec<&TrialResult> = trials.iter().filter(|t| t.variant == v).collect();
            let ok: Vec<&TrialResult> = all.iter().copied().filter(|t| t.ok()).collect();
            let pick = |f: fn(&TrialResult) -> f64| mean(&ok.iter().map(|t| f(t)).collect::<Vec<_>>());
            let oracle: Vec<f64> = ok.iter().map(|t| t.test_success_oracle).collect();
            let [_, q1, median, q3, _] = five_numbers(&oracle);
            let entries: Vec<&EntryBound> = ok.iter().flat_map(|t| &t.bounds).collect();
            let over = |f: fn(&EntryBound) -> f64| {
                (!entries.is_empty()).then(|| mean(&entries.iter().map(|b| f(b)).collect::<Vec<_>>()))
            };
            VariantSummary {
                variant: v,
                channels: all.len(),
                failed: all.len() - ok.len(),
                train_success: pick(|t| t.train_success),
                test_success_oracle: mean(&oracle),
                test_success_oracle_q1: q1,
                test_success_oracle_median: median,
                test_success_oracle_q3: q3,
                test_success_truth: pick(|t| t.test_success_truth),
                alpha: over(|b| b.alpha),
                beta: over(|b| b.beta),
                union_bound: over(|b| b.union_bound),
                theorem2_bound: over(|b| b.theorem2_bound),
                vacuous_fraction: over(|b| f64::from(u8::from(b.vacuous))),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct TrialRow<'a> {
    channel: u64,
    k: usize,
    variant: Variant,
    status: &'a str,
    train_success: f64,
    test_success_oracle: f64,
    test_success_truth: f64,
    alpha: String,
    beta: String,
    union_bound: String,
    rademacher: String,
    heldout_risk: String,
    theorem2_bound: String,
    vacuous: String,
}

fn joined(b: &[EntryBound], f: impl Fn(&EntryBound) -> String) -> String {
    b.iter().map(f).collect::<Vec<_>>().join(";")
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(format!("cannot write csv: {e}")))
}

/// Writes serializable records as comma-separated values with a header row.
pub fn write_records<T: Serialize, W: std::io::Write>(out: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", path.display())))
    })?;
    write_records(std::io::BufWriter::new(file), rows)
}

/// One row per trial; per-entry bound values are `;`-separated.
pub fn write_trials_csv(path: &Path, trials: &[TrialResult]) -> Result<()> {
    write_csv(
        path,
        trials.iter().map(|t| TrialRow {
            channel: t.channel,
            k: t.k,
            variant: t.variant,
            status: t.error.as_deref().unwrap_or("ok"),
            train_success: t.train_success,
            test_success_oracle: t.test_success_oracle,
            test_success_truth: t.test_success_truth,
            alpha: joined(&t.bounds, |b| b.alpha.to_string()),
            beta: joined(&t.bounds, |b| b.beta.to_string()),
            union_bound: joined(&t.bounds, |b| b.union_bound.to_string()),
            rademacher: joined(&t.bounds, |b| b.rademacher.to_string()),
            heldout_risk: joined(&t.bounds, |b| b.risk.to_string()),
            theorem2_bound: joined(&t.bounds, |b| b.theorem2_bound.to_string()),
            vacuous: joined(&t.bounds, |b| b.vacuous.to_string()),
        }),
    )
}

pub fn write_summary_csv(path: &Path, summary: &[VariantSummary]) -> Result<()> {
    write_csv(path, summary)
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    channels: usize,
    failed: usize,
    mean_error: f64,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
    r2_inv_sqrt: f64,
    r2_inv: f64,
}

pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> Result<()> {
    write_csv(
        path,
        report.points.iter().map(|p| SweepRow {
            k: p.k,
            channels: p.channels,
            failed: p.failed,
            mean_error: p.mean_error,
            min: p.min,
            q1: p.q1,
            median: p.median,
            q3: p.q3,
            max: p.max,
            r2_inv_sqrt: report.r2_inv_sqrt,
            r2_inv: report.r2_inv,
        }),
    )
}

/// `results.csv` -> `results.config.toml`.
pub fn sidecar_path(results: &Path) -> PathBuf {
    results.with_extension("config.toml")
}

/// `results.csv` -> `results.trials.csv`.
pub fn trials_path(results: &Path) -> PathBuf {
    results.with_extension("trials.csv")
}

pub fn write_resolved_config(path: &Path, cfg: &Config) -> Result<()> {
    std::fs::write(path, cfg.to_toml_string()).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot write {}: {e}", path.display()),
        ))
    })
}
