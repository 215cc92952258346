//! On-disk formats.
//!
//! * Dataset: newline-delimited JSON. The first line is a header holding the
//!   problem (Q, N, M, H row by row, residual model, objective) and the
//!   sampling seed; every further line is one `{"x": [...], "y": [...]}`.
//! * Model: one JSON document with the problem, the A-Net classifiers and any
//!   trained benchmark variants.
//! * Observations and decisions: comma-separated rows without a header, one
//!   vector per row.
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::alphabet::IntegerAlphabet;
use crate::detector::{ANetModel, BcdNetModel, Variant};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Layer, MlpModel};
use crate::problem::{Dataset, ObjectiveKind, ProblemInstance, ResidualModel, Sample};

const DATASET_FORMAT: &str = "adnn-dataset";
const MODEL_FORMAT: &str = "adnn-model";
const VERSION: u32 = 1;

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(what: &'static str, rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::format(
            what,
            format!("row {bad} has {} values, expected {ncols}", rows[bad].len()),
        ));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub q: usize,
    pub n: usize,
    pub m_half: u32,
    /// `H`, row by row.
    pub h: Vec<Vec<f64>>,
    pub residual: ResidualModel,
    pub objective: ObjectiveKind,
}

impl From<&ProblemInstance> for ProblemRecord {
    fn from(p: &ProblemInstance) -> Self {
        Self {
            q: p.q(),
            n: p.n(),
            m_half: p.alphabet().m_half(),
            h: rows(p.h()),
            residual: *p.residual(),
            objective: p.objective(),
        }
    }
}

impl ProblemRecord {
    pub fn to_problem(&self) -> Result<ProblemInstance> {
        if self.h.len() != self.q {
            return Err(Error::format(
                "problem record",
                format!("{} rows of H for q = {}", self.h.len(), self.q),
            ));
        }
        let h = from_rows("channel matrix", &self.h, self.n)?;
        ProblemInstance::new(h, IntegerAlphabet::from_m(self.m_half), self.residual, self.objective)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub activation: Activation,
    /// Output-by-input weights, row by row.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    pub input_dim: usize,
    pub layers: Vec<LayerRecord>,
}

impl From<&MlpModel> for MlpRecord {
    fn from(m: &MlpModel) -> Self {
        Self {
            input_dim: m.input_dim(),
            layers: m
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    activation: l.activation,
                    weights: rows(&l.weights),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl MlpRecord {
    pub fn to_model(&self) -> Result<MlpModel> {
        let mut fan_in = self.input_dim;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let weights = from_rows("layer weights", &l.weights, fan_in)?;
            fan_in = weights.nrows();
            layers.push(Layer {
                weights,
                bias: DVector::from_vec(l.bias.clone()),
                activation: l.activation,
            });
        }
        MlpModel::from_layers(self.input_dim, layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    seed: u64,
    k: usize,
    problem: ProblemRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    x: Vec<i32>,
    y: Vec<f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot create {}: {e}", path.display()),
        ))
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot open {}: {e}", path.display()),
        ))
    })
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("records serialize")
}

pub fn write_dataset(path: &Path, p: &ProblemInstance, d: &Dataset) -> Result<()> {
    d.check_against(p)?;
    let mut w = create(path)?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: VERSION,
        seed: d.seed,
        k: d.len(),
        problem: p.into(),
    };
    writeln!(w, "{}", json(&header))?;
    for s in &d.samples {
        let rec = SampleRecord {
            x: s.x.clone(),
            y: s.y.iter().copied().collect(),
        };
        writeln!(w, "{}", json(&rec))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file back into its problem and samples. The residual of
/// each sample is recomputed as `Hx - y`.
pub fn read_dataset(path: &Path) -> Result<(ProblemInstance, Dataset)> {
    let mut lines = open(path)?.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format("dataset", format!("{} is empty", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| Error::format("dataset", format!("{} line 1: {e}", path.display())))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::format(
            "dataset",
            format!("{} is a '{}' file, expected '{DATASET_FORMAT}'", path.display(), header.format),
        ));
    }
    let p = header.problem.to_problem()?;
    let mut samples = Vec::with_capacity(header.k);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("dataset", format!("{} line {}: {e}", path.display(), i + 2)))?;
        let y = DVector::from_vec(rec.y);
        let r = if y.len() == p.q() && rec.x.len() == p.n() {
            p.apply(&rec.x) - &y
        } else {
            DVector::zeros(0)
        };
        samples.push(Sample { x: rec.x, y, r });
    }
    if samples.len() != header.k {
        return Err(Error::format(
            "dataset",
            format!("header announces {} samples, found {}", header.k, samples.len()),
        ));
    }
    let d = Dataset {
        seed: header.seed,
        residual: *p.residual(),
        samples,
    };
    d.check_against(&p)?;
    Ok((p, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub variant: Variant,
    pub branches: Vec<Vec<MlpRecord>>,
    pub combiner: MlpRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    problem: ProblemRecord,
    adnns: Vec<MlpRecord>,
    #[serde(default)]
    variants: Vec<VariantRecord>,
}

/// A trained A-Net together with any benchmark variants trained beside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub anet: ANetModel,
    pub variants: Vec<BcdNetModel>,
}

impl ModelBundle {
    pub fn variant(&self, v: Variant) -> Option<&BcdNetModel> {
        self.variants.iter().find(|m| m.variant() == v)
    }

    /// Variants present, A first.
    pub fn available(&self) -> Vec<Variant> {
        std::iter::once(Variant::A)
            .chain(self.variants.iter().map(BcdNetModel::variant))
            .collect()
    }
}

pub fn model_to_json(bundle: &ModelBundle) -> String {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: VERSION,
        problem: bundle.anet.problem().into(),
        adnns: bundle.anet.adnns().iter().map(MlpRecord::from).collect(),
        variants: bundle
            .variants
            .iter()
            .map(|v| VariantRecord {
                variant: v.variant(),
                branches: v
                    .branches()
                    .iter()
                    .map(|set| set.iter().map(MlpRecord::from).collect())
                    .collect(),
                combiner: v.combiner().into(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("records serialize")
}

pub fn model_from_json(text: &str) -> Result<ModelBundle> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::format("model file", e))?;
    if file.format != MODEL_FORMAT {
        return Err(Error::format(
            "model file",
            format!("found a '{}' document, expected '{MODEL_FORMAT}'", file.format),
        ));
    }
    let p = file.problem.to_problem()?;
    let adnns = file.adnns.iter().map(MlpRecord::to_model).collect::<Result<_>>()?;
    let anet = ANetModel::new(p.clone(), adnns)?;
    let variants = file
        .variants
        .iter()
        .map(|v| {
            let branches = v
                .branches
                .iter()
                .map(|set| set.iter().map(MlpRecord::to_model).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?;
            BcdNetModel::new(v.variant, p.clone(), branches, v.combiner.to_model()?)
        })
        .collect::<Result<_>>()?;
    Ok(ModelBundle { anet, variants })
}

pub fn write_model(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(model_to_json(bundle).as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot read {}: {e}", path.display()),
        ))
    })?;
    model_from_json(&text).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

/// Reads observation vectors, one comma-separated row of `q` values each.
pub fn read_observations(path: &Path, q: usize) -> Result<Vec<DVector<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::format("observation file", format!("{}: {e}", path.display())))?;
        if row.len() != q {
            return Err(Error::format(
                "observation file",
                format!("{} row {}: {} values, expected {q}", path.display(), i + 1, row.len()),
            ));
        }
        let values = row
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|e| {
                    Error::format("observation file", format!("{} row {}: '{v}': {e}", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                "observation file",
                format!("{} row {}: non-finite value", path.display(), i + 1),
            ));
        }
        out.push(DVector::from_vec(values));
    }
    Ok(out)
}

/// Writes rows of numbers as header-less comma-separated values.
pub fn write_rows<T: ToString>(path: &Path, rows: &[Vec<T>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    for r in rows {
        w.write_record(r.iter().map(ToString::to_string))
            .map_err(|e| Error::format("csv output", e))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{train_anet, train_variant};
    use crate::mlp::{default_adnn_architecture, TrainConfig};
    use crate::problem::sample_dataset;
    use crate::seed;

    fn problem() -> ProblemInstance {
        let mut rng = seed::rng(4);
        let h = ProblemInstance::gaussian_channel(6, 2, &mut rng);
        ProblemInstance::new(
            h,
            IntegerAlphabet::from_m(1),
            ResidualModel::student_t(3.0, 1.0),
            ObjectiveKind::LogSum { nu: 3.0 },
        )
        .unwrap()
        .calibrated(10.0)
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let p = problem();
        let d = sample_dataset(&p, 25, 10.0, 7).unwrap();
        write_dataset(&path, &p, &d).unwrap();
        let (p2, d2) = read_dataset(&path).unwrap();
        assert_eq!(p, p2);
        assert_eq!(d, d2);
    }

    #[test]
    fn model_round_trip_is_exact() {
        let p = problem();
        let d = sample_dataset(&p, 10, 10.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        let specs = default_adnn_architecture();
        let anet = train_anet(&p, &d, &cfg, &specs).unwrap();
        let b = train_variant(Variant::B, &p, &d, &cfg, &specs, Some(&anet)).unwrap();
        let dn = train_variant(Variant::D, &p, &d, &cfg, &specs, None).unwrap();
        let bundle = ModelBundle {
            anet,
            variants: vec![b, dn],
        };
        let back = model_from_json(&model_to_json(&bundle)).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.available(), vec![Variant::A, Variant::B, Variant::D]);
        assert!(back.variant(Variant::C).is_none());
    }

    #[test]
    fn corrupt_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"format\": \"adnn-dataset\"\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
        assert!(matches!(
            read_dataset(&dir.path().join("missing.jsonl")),
            Err(Error::Io(_))
        ));
        assert!(matches!(model_from_json("[1, 2]"), Err(Error::Format { .. })));
        let ys = dir.path().join("y.csv");
        std::fs::write(&ys, "1.0, 2.0\n3.0\n").unwrap();
        assert!(read_observations(&ys, 2).is_err());
        std::fs::write(&ys, "1.0, 2.5\n# note\n-3, 0.125\n").unwrap();
        let obs = read_observations(&ys, 2).unwrap();
        assert_eq!(obs[1], DVector::from_vec(vec![-3.0, 0.125]));
    }

    #[test]
    fn truncated_dataset_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let p = problem();
        write_dataset(&path, &p, &sample_dataset(&p, 5, 10.0, 7).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&path, cut.join("\n")).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
    }
}
