//! TOML configuration.
//!
//! ```toml
//! q = 12
//! n = 3
//! m_half = 1
//! snr_db = 10.0
//! seed = 0
//! objective = "l2"          # or "log_sum" (uses residual.nu)
//!
//! [residual]
//! kind = "gaussian"         # or "student_t"
//! nu = 3.0
//!
//! [train]
//! epochs = 2000
//! batch_size = 4096
//! learning_rate = 0.05
//! init_scale = 1.0
//! hidden = [32, 32]
//!
//! [experiment]
//! k_train = 30
//! n_test = 2000
//! channels = 50
//! variants = ["A", "B", "C", "D"]
//! rho = 1.0
//! delta = 0.05
//! k_values = [10, 20, 30, 60, 120]
//! bound_trials = 10000
//! heldout = 10000
//! ```
//!
//! Every key is optional; missing keys take the defaults above. Parsing
//! reports every problem at once.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::alphabet::IntegerAlphabet;
use crate::detector::Variant;
use crate::error::{Error, Result};
use crate::mlp::{adnn_architecture, LayerSpec, TrainConfig};
use crate::problem::{ObjectiveKind, ProblemInstance, ResidualKind, ResidualModel};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    L2,
    LogSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSection {
    pub kind: ResidualKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub k_train: usize,
    pub n_test: usize,
    pub channels: usize,
    pub variants: Vec<Variant>,
    pub rho: f64,
    pub delta: f64,
    pub k_values: Vec<usize>,
    pub bound_trials: usize,
    pub heldout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub q: usize,
    pub n: usize,
    pub m_half: u32,
    pub snr_db: f64,
    pub seed: u64,
    pub objective: ObjectiveName,
    pub residual: ResidualSection,
    pub train: TrainSection,
    pub experiment: ExperimentSection,
}

/// The two residual/objective pairings of the benchmark tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TablePreset {
    Gaussian,
    StudentT,
}

impl std::str::FromStr for TablePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "1" => Ok(TablePreset::Gaussian),
            "student" | "student_t" | "student-t" | "2" => Ok(TablePreset::StudentT),
            other => Err(Error::invalid(format!(
                "unknown table '{other}' (expected gaussian or student_t)"
            ))),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            q: 12,
            n: 3,
            m_half: 1,
            snr_db: 10.0,
            seed: 0,
            objective: ObjectiveName::L2,
            residual: ResidualSection {
                kind: ResidualKind::Gaussian,
                nu: None,
            },
            train: TrainSection {
                epochs: 2000,
                batch_size: 4096,
                learning_rate: 0.05,
                init_scale: 1.0,
                hidden: vec![32, 32],
            },
            experiment: ExperimentSection {
                k_train: 30,
                n_test: 2000,
                channels: 50,
                variants: Variant::ALL.to_vec(),
                rho: 1.0,
                delta: 0.05,
                k_values: vec![10, 20, 30, 60, 120],
                bound_trials: 10_000,
                heldout: 10_000,
            },
        }
    }
}

impl Config {
    pub fn with_preset(mut self, preset: TablePreset) -> Self {
        match preset {
            TablePreset::Gaussian => {
                self.residual = ResidualSection {
                    kind: ResidualKind::Gaussian,
                    nu: None,
                };
                self.objective = ObjectiveName::L2;
            }
            TablePreset::StudentT => {
                self.residual = ResidualSection {
                    kind: ResidualKind::StudentT,
                    nu: Some(self.residual.nu.unwrap_or(3.0)),
                };
                self.objective = ObjectiveName::LogSum;
            }
        }
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("not valid TOML: {}", e.message())]))?;
        let mut r = Reader::default();
        let mut c = Config::default();
        r.known(&table, "", &["q", "n", "m_half", "snr_db", "seed", "objective", "residual", "train", "experiment"]);
        r.usize(&table, "q", &mut c.q);
        r.usize(&table, "n", &mut c.n);
        let mut m = c.m_half as usize;
        r.usize(&table, "m_half", &mut m);
        c.m_half = u32::try_from(m).unwrap_or_else(|_| {
            r.errors.push(format!("m_half: {m} is too large"));
            0
        });
        r.float(&table, "snr_db", &mut c.snr_db);
        let mut s = c.seed as usize;
        r.usize(&table, "seed", &mut s);
        c.seed = s as u64;
        if let Some(v) = r.string(&table, "objective") {
            match v.as_str() {
                "l2" | "l2_norm" => c.objective = ObjectiveName::L2,
                "log_sum" | "logsum" => c.objective = ObjectiveName::LogSum,
                other => r.errors.push(format!("objective: unknown value '{other}' (expected l2 or log_sum)")),
            }
        }
        if let Some(t) = r.section(&table, "residual") {
            r.known(t, "residual.", &["kind", "nu"]);
            if let Some(v) = r.string(t, "residual.kind") {
                match v.as_str() {
                    "gaussian" => c.residual.kind = ResidualKind::Gaussian,
                    "student_t" | "student" => c.residual.kind = ResidualKind::StudentT,
                    other => r
                        .errors
                        .push(format!("residual.kind: unknown value '{other}' (expected gaussian or student_t)")),
                }
            }
            if t.contains_key("nu") {
                let mut nu = 0.0;
                r.float(t, "residual.nu", &mut nu);
                c.residual.nu = Some(nu);
            }
        }
        if let Some(t) = r.section(&table, "train") {
            r.known(t, "train.", &["epochs", "batch_size", "learning_rate", "init_scale", "hidden"]);
            r.usize(t, "train.epochs", &mut c.train.epochs);
            r.usize(t, "train.batch_size", &mut c.train.batch_size);
            r.float(t, "train.learning_rate", &mut c.train.learning_rate);
            r.float(t, "train.init_scale", &mut c.train.init_scale);
            r.usize_list(t, "train.hidden", &mut c.train.hidden);
        }
        if let Some(t) = r.section(&table, "experiment") {
            r.known(
                t,
                "experiment.",
                &[
                    "k_train",
                    "n_test",
                    "channels",
                    "variants",
                    "rho",
                    "delta",
                    "k_values",
                    "bound_trials",
                    "heldout",
                ],
            );
            let e = &mut c.experiment;
            r.usize(t, "experiment.k_train", &mut e.k_train);
            r.usize(t, "experiment.n_test", &mut e.n_test);
            r.usize(t, "experiment.channels", &mut e.channels);
            r.float(t, "experiment.rho", &mut e.rho);
            r.float(t, "experiment.delta", &mut e.delta);
            r.usize_list(t, "experiment.k_values", &mut e.k_values);
            r.usize(t, "experiment.bound_trials", &mut e.bound_trials);
            r.usize(t, "experiment.heldout", &mut e.heldout);
            if let Some(v) = t.get("variants") {
                match v.as_array() {
                    Some(items) => {
                        let mut out = Vec::new();
                        for item in items {
                            match item.as_str().map(str::parse::<Variant>) {
                                Some(Ok(v)) => out.push(v),
                                _ => r.errors.push(format!("experiment.variants: '{item}' is not one of A, B, C, D")),
                            }
                        }
                        e.variants = out;
                    }
                    None => r.errors.push("experiment.variants: expected a list such as [\"A\", \"B\"]".into()),
                }
            }
        }
        r.errors.extend(c.violations());
        if r.errors.is_empty() {
            Ok(c)
        } else {
            Err(Error::Config(r.errors))
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read config {}: {e}", path.display()),
            ))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every semantic constraint the configuration breaks.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.n == 0 {
            bad.push("n: must be at least 1".to_string());
        }
        if self.q < self.n {
            bad.push(format!("q: must be at least n = {}, got {}", self.n, self.q));
        }
        if self.m_half > 1 << 20 {
            bad.push(format!("m_half: {} is unreasonably large", self.m_half));
        }
        if self.snr_db.is_nan() {
            bad.push("snr_db: must be a number".to_string());
        }
        let nu_needed = self.residual.kind == ResidualKind::StudentT || self.objective == ObjectiveName::LogSum;
        match self.residual.nu {
            Some(nu) if !(nu > 0.0 && nu.is_finite()) => bad.push(format!("residual.nu: must be positive, got {nu}")),
            Some(nu) if self.residual.kind == ResidualKind::StudentT && nu <= 2.0 => {
                bad.push(format!("residual.nu: SNR calibration needs nu > 2, got {nu}"))
            }
            None if nu_needed => bad.push("residual.nu: required for student_t residuals and the log_sum objective".into()),
            _ => {}
        }
        let t = &self.train;
        if t.batch_size == 0 {
            bad.push("train.batch_size: must be at least 1".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            bad.push(format!("train.learning_rate: must be positive, got {}", t.learning_rate));
        }
        if !(t.init_scale > 0.0 && t.init_scale.is_finite()) {
            bad.push(format!("train.init_scale: must be positive, got {}", t.init_scale));
        }
        if t.hidden.contains(&0) {
            bad.push("train.hidden: widths must be positive".into());
        }
        let e = &self.experiment;
        for (key, v) in [
            ("experiment.k_train", e.k_train),
            ("experiment.n_test", e.n_test),
            ("experiment.channels", e.channels),
            ("experiment.bound_trials", e.bound_trials),
            ("experiment.heldout", e.heldout),
        ] {
            if v == 0 {
                bad.push(format!("{key}: must be at least 1"));
            }
        }
        if e.variants.is_empty() {
            bad.push("experiment.variants: at least one variant is required".into());
        }
        if !(0.0..=1.0).contains(&e.rho) {
            bad.push(format!("experiment.rho: must lie in [0, 1], got {}", e.rho));
        }
        if !(e.delta > 0.0 && e.delta < 1.0) {
            bad.push(format!("experiment.delta: must lie in (0, 1), got {}", e.delta));
        }
        if e.k_values.is_empty() || e.k_values.contains(&0) || e.k_values.windows(2).any(|w| w[0] >= w[1]) {
            bad.push("experiment.k_values: must be positive and strictly ascending".into());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn alphabet(&self) -> IntegerAlphabet {
        IntegerAlphabet::from_m(self.m_half)
    }

    pub fn residual_model(&self) -> ResidualModel {
        match self.residual.kind {
            ResidualKind::Gaussian => ResidualModel::gaussian(1.0),
            ResidualKind::StudentT => ResidualModel::student_t(self.residual.nu.unwrap_or(3.0), 1.0),
        }
    }

    pub fn objective_kind(&self) -> ObjectiveKind {
        match self.objective {
            ObjectiveName::L2 => ObjectiveKind::L2Norm,
            ObjectiveName::LogSum => ObjectiveKind::LogSum {
                nu: self.residual.nu.unwrap_or(3.0),
            },
        }
    }

    /// Problem for channel realization `channel`: `H` with i.i.d. standard
    /// normal entries drawn from the channel stream of the master seed, and
    /// the residual scaled to the configured SNR.
    pub fn instance(&self, channel: u64) -> Result<ProblemInstance> {
        self.validate()?;
        let mut rng = seed::rng(seed::derive(self.seed, seed::stream::CHANNEL, channel));
        let h = ProblemInstance::gaussian_channel(self.q, self.n, &mut rng);
        ProblemInstance::new(h, self.alphabet(), self.residual_model(), self.objective_kind())?.calibrated(self.snr_db)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        adnn_architecture(&self.train.hidden)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed,
            init_scale: self.train.init_scale,
        }
    }
}

#[derive(Default)]
struct Reader {
    errors: Vec<String>,
}

fn leaf(key: &str) -> &str {
    key.rsplit('.').next().unwrap_or(key)
}

impl Reader {
    fn known(&mut self, t: &Table, prefix: &str, keys: &[&str]) {
        for k in t.keys() {
            if !keys.contains(&k.as_str()) {
                self.errors.push(format!("{prefix}{k}: unknown key"));
            }
        }
    }

    fn section<'a>(&mut self, t: &'a Table, key: &str) -> Option<&'a Table> {
        match t.get(key) {
            None => None,
            Some(Value::Table(s)) => Some(s),
            Some(_) => {
                self.errors.push(format!("{key}: expected a table"));
                None
            }
        }
    }

    fn usize(&mut self, t: &Table, key: &str, out: &mut usize) {
        match t.get(leaf(key)) {
            None => {}
            Some(Value::Integer(i)) if *i >= 0 => *out = *i as usize,
            Some(v) => self.errors.push(format!("{key}: expected a non-negative integer, got {v}")),
        }
    }

    fn float(&mut self, t: &Table, key: &str, out: &mut f64) {
        match t.get(leaf(key)) {
            None => {}
            Some(Value::Float(f)) => *out = *f,
            Some(Value::Integer(i)) => *out = *i as f64,
            Some(v) => self.errors.push(format!("{key}: expected a number, got {v}")),
        }
    }

    fn string(&mut self, t: &Table, key: &str) -> Option<String> {
        match t.get(leaf(key)) {
            None => None,
            Some(Value::String(s)) => Some(s.trim().to_ascii_lowercase()),
            Some(v) => {
                self.errors.push(format!("{key}: expected a string, got {v}"));
                None
            }
        }
    }

    fn usize_list(&mut self, t: &Table, key: &str, out: &mut Vec<usize>) {
        match t.get(leaf(key)) {
            None => {}
            Some(Value::Array(items)) => {
                let parsed: Option<Vec<usize>> = items
                    .iter()
                    .map(|v| v.as_integer().and_then(|i| usize::try_from(i).ok()))
                    .collect();
                match parsed {
                    Some(v) => *out = v,
                    None => self.errors.push(format!("{key}: expected a list of non-negative integers")),
                }
            }
            Some(v) => self.errors.push(format!("{key}: expected a list, got {v}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = Config::default();
        assert!(c.validate().is_ok());
        assert_eq!(Config::from_toml_str("").unwrap(), c);
        let s = Config::default().with_preset(TablePreset::StudentT);
        assert_eq!(Config::from_toml_str(&s.to_toml_string()).unwrap(), s);
        assert_eq!(s.objective_kind(), ObjectiveKind::LogSum { nu: 3.0 });
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn parses_every_key() {
        let text = r#"
            q = 8
            n = 4
            m_half = 0
            snr_db = 12.5
            seed = 99
            objective = "log_sum"
            [residual]
            kind = "student_t"
            nu = 4
            [train]
            epochs = 10
            batch_size = 16
            learning_rate = 0.1
            init_scale = 0.5
            hidden = [8]
            [experiment]
            k_train = 20
            n_test = 100
            channels = 3
            variants = ["A", "c"]
            rho = 0.5
            delta = 0.1
            k_values = [5, 10]
            bound_trials = 50
            heldout = 60
        "#;
        let c = Config::from_toml_str(text).unwrap();
        assert_eq!((c.q, c.n, c.m_half, c.seed), (8, 4, 0, 99));
        assert_eq!(c.residual.nu, Some(4.0));
        assert_eq!(c.train.hidden, vec![8]);
        assert_eq!(c.experiment.variants, vec![Variant::A, Variant::C]);
        assert_eq!(c.experiment.k_values, vec![5, 10]);
        let p = c.instance(0).unwrap();
        assert_eq!((p.q(), p.n()), (8, 4));
        assert_eq!(p, c.instance(0).unwrap());
        assert_ne!(p.h(), c.instance(1).unwrap().h());
    }

    #[test]
    fn lists_every_violation() {
        let text = r#"
            q = 2
            n = 3
            colour = "blue"
            objective = "huber"
            [residual]
            kind = "student_t"
            nu = 1.5
            [train]
            learning_rate = -1
            [experiment]
            n_test = 0
            variants = ["E"]
            delta = 1.0
            k_values = [30, 10]
        "#;
        let Err(Error::Config(msgs)) = Config::from_toml_str(text) else {
            panic!("expected config errors");
        };
        let joined = msgs.join("\n");
        for key in [
            "colour",
            "objective",
            "q:",
            "residual.nu",
            "train.learning_rate",
            "experiment.n_test",
            "experiment.variants",
            "experiment.delta",
            "experiment.k_values",
        ] {
            assert!(joined.contains(key), "missing {key} in\n{joined}");
        }
        assert!(matches!(Config::from_toml_str("q = "), Err(Error::Config(_))));
        assert!(Config::from_toml_str("objective = \"log_sum\"").is_err());
    }

    #[test]
    fn presets_parse() {
        assert_eq!("gaussian".parse::<TablePreset>().unwrap(), TablePreset::Gaussian);
        assert_eq!("student-t".parse::<TablePreset>().unwrap(), TablePreset::StudentT);
        assert!("laplace".parse::<TablePreset>().is_err());
    }
}
