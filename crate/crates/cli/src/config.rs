//! The TOML run document: engine settings plus evaluator selection.

use std::fmt;
use std::path::Path;

use augsearch::engine::{derive_seed, RunConfig, SeedStream};
use augsearch::evaluator::{connect_tcp, Evaluator, SyntheticLandscape, TrainerProcess, Utility};
use augsearch::{default_catalog, Catalog, Policy, PolicyParams, VariantKey};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum ConfigError {
    /// Syntax or schema error; the message carries line and column.
    Parse(String),
    /// Well-formed but out of bounds.
    Invalid(String),
    Io(std::io::Error),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigDoc {
    pub epochs: u64,
    pub policy: Policy,
    pub seed: u64,
    pub depth: usize,
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fixed_sequence: Vec<VariantKey>,
    pub params: PolicyParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog: Option<Catalog>,
    pub evaluator: EvaluatorSpec,
}

impl Default for ConfigDoc {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            epochs: run.epochs,
            policy: run.policy,
            seed: run.seed,
            depth: run.depth,
            checkpoint_every: run.checkpoint_every,
            fixed_sequence: run.fixed_sequence,
            params: run.params,
            catalog: None,
            evaluator: EvaluatorSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    Synthetic(SyntheticSpec),
    /// A trainer process spawned through `sh -c`, spoken to over stdio.
    Process { command: String },
    /// A trainer already listening on a TCP address.
    Tcp { address: String },
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        EvaluatorSpec::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub base_loss: f64,
    pub decay: f64,
    pub sigma: f64,
    /// Noise seed; derived from the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub utilities: Vec<Utility>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let l = SyntheticLandscape::default();
        Self {
            base_loss: l.base_loss,
            decay: l.decay,
            sigma: l.sigma,
            seed: None,
            utilities: l.utilities,
        }
    }
}

impl SyntheticSpec {
    pub fn landscape(&self, run_seed: u64) -> SyntheticLandscape {
        SyntheticLandscape {
            base_loss: self.base_loss,
            decay: self.decay,
            sigma: self.sigma,
            seed: self.seed.unwrap_or_else(|| derive_seed(run_seed, SeedStream::Landscape)),
            utilities: self.utilities.clone(),
        }
    }
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let doc: ConfigDoc = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config documents always serialize")
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            epochs: self.epochs,
            policy: self.policy,
            params: self.params.clone(),
            seed: self.seed,
            depth: self.depth,
            catalog: self.catalog.clone().unwrap_or_else(default_catalog),
            fixed_sequence: self.fixed_sequence.clone(),
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// Checks every bound, naming the offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.epochs == 0 {
            return invalid("epochs = 0 is out of range: >= 1".into());
        }
        if self.depth == 0 {
            return invalid("depth = 0 is out of range: >= 1".into());
        }
        if let Err(e) = self.params.validate_for_depth(self.depth) {
            return invalid(format!("params.{e}"));
        }
        if let Err(e) = self.run_config().validate() {
            return invalid(e.to_string());
        }
        match &self.evaluator {
            EvaluatorSpec::Synthetic(s) => {
                if let Err(e) = s.landscape(self.seed).validate() {
                    return invalid(format!("evaluator.{e}"));
                }
                if let Some(u) = s.utilities.iter().find(|u| !u.u.is_finite() || u.u <= -1.0) {
                    return invalid(format!(
                        "evaluator.utilities entry {} {:?} has u = {}: must be finite and > -1",
                        u.op, u.side, u.u
                    ));
                }
            }
            EvaluatorSpec::Process { command } if command.trim().is_empty() => {
                return invalid("evaluator.command must not be empty".into());
            }
            EvaluatorSpec::Tcp { address } if address.trim().is_empty() => {
                return invalid("evaluator.address must not be empty".into());
            }
            _ => {}
        }
        Ok(())
    }

    pub fn build_evaluator(&self) -> Result<Box<dyn Evaluator + Send>, augsearch::EvalError> {
        Ok(match &self.evaluator {
            EvaluatorSpec::Synthetic(s) => Box::new(s.landscape(self.seed)),
            EvaluatorSpec::Process { command } => Box::new(TrainerProcess::spawn(command)?),
            EvaluatorSpec::Tcp { address } => Box::new(connect_tcp(address.as_str())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let doc = ConfigDoc::parse("").unwrap();
        assert_eq!(doc, ConfigDoc::default());
        doc.validate().unwrap();
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = ConfigDoc::parse("epochs = 10\n[params]\nbeta = 0.5\ngamma = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gamma"), "{msg}");
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn out_of_range_names_field_and_bound() {
        let doc = ConfigDoc::parse("[params]\ntau = 0.0\n").unwrap();
        let msg = doc.validate().unwrap_err().to_string();
        assert!(msg.contains("params.tau") && msg.contains("> 0"), "{msg}");

        let doc = ConfigDoc::parse("[evaluator]\ntype = \"synthetic\"\ndecay = 1.5\n").unwrap();
        let msg = doc.validate().unwrap_err().to_string();
        assert!(msg.contains("evaluator.decay"), "{msg}");
    }

    #[test]
    fn evaluator_variants_parse() {
        let doc = ConfigDoc::parse("[evaluator]\ntype = \"tcp\"\naddress = \"127.0.0.1:9000\"\n").unwrap();
        assert_eq!(doc.evaluator, EvaluatorSpec::Tcp { address: "127.0.0.1:9000".into() });
        let doc = ConfigDoc::parse("[evaluator]\ntype = \"process\"\ncommand = \"trainer\"\n").unwrap();
        assert!(matches!(doc.evaluator, EvaluatorSpec::Process { .. }));
        assert!(ConfigDoc::parse("[evaluator]\ntype = \"tcp\"\naddress = \"x\"\nport = 1\n").is_err());
    }

    #[test]
    fn utilities_and_policy_parse() {
        let text = r#"
policy = "uniform_sample"
seed = 4
[evaluator]
type = "synthetic"
sigma = 0.01
utilities = [
  { op = "contrast_adjustment", side = "left", u = -0.1 },
  { op = "gaussian_noise", side = "single", u = 0.05 },
]
"#;
        let doc = ConfigDoc::parse(text).unwrap();
        doc.validate().unwrap();
        assert_eq!(doc.policy, Policy::UniformSample);
        let EvaluatorSpec::Synthetic(s) = &doc.evaluator else { panic!() };
        assert_eq!(s.utilities.len(), 2);
        assert_eq!(s.landscape(4).seed, derive_seed(4, SeedStream::Landscape));
    }

    #[test]
    fn toml_echo_round_trips() {
        let mut doc = ConfigDoc::default();
        doc.catalog = Some(default_catalog());
        doc.evaluator = EvaluatorSpec::Synthetic(SyntheticSpec {
            sigma: 0.01,
            seed: Some(9),
            ..Default::default()
        });
        let back = ConfigDoc::parse(&doc.to_toml()).unwrap();
        assert_eq!(back, doc);
    }
}
