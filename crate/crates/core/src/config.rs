//! Run configuration shared by every command.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{CsvSchema, Mode};
use crate::error::{Error, Result};
use crate::pipeline::EstimationConfig;
use crate::simulation::{CoverageConfig, DgpConfig, DgpConfigCate, DgpConfigCte, Shape};

pub const DEFAULT_SEED: u64 = 20_240_601;

/// The resolved configuration. `dgp` always matches `mode`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub estimation: EstimationConfig,
    pub dgp: DgpConfig,
    pub replications: usize,
    pub skip_failures: bool,
    /// Shapes swept by the coverage command; defaults to the design's own shape.
    pub shapes: Vec<Shape>,
    pub csv: CsvSchema,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Not echoed into outputs, so results do not depend on where they are written.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    mode: Mode,
    seed: u64,
    estimation: EstimationConfig,
    dgp: Option<Value>,
    replications: usize,
    skip_failures: bool,
    shapes: Option<Vec<Shape>>,
    csv: CsvSchema,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Default for RawConfig {
    fn default() -> Self {
        let d = RunConfig::default();
        Self {
            mode: d.mode,
            seed: d.seed,
            estimation: d.estimation,
            dgp: None,
            replications: d.replications,
            skip_failures: d.skip_failures,
            shapes: None,
            csv: d.csv,
            input: None,
            out: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cate,
            seed: DEFAULT_SEED,
            estimation: EstimationConfig::default(),
            dgp: DgpConfig::default(),
            replications: 500,
            skip_failures: false,
            shapes: vec![Shape::X],
            csv: CsvSchema::default(),
            input: None,
            out: None,
        }
    }
}

fn json_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "config".to_owned());
    Error::InvalidConfig { field, msg }
}

impl RunConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let dgp = match mode {
            Mode::Cate => DgpConfig::Cate(DgpConfigCate::default()),
            Mode::Cte => DgpConfig::Cte(DgpConfigCte::default()),
        };
        Self { mode, shapes: vec![dgp.shape()], dgp, ..Self::default() }
    }

    /// Parses and validates a JSON document. Missing fields take defaults;
    /// the `dgp` block is read as the design for `mode`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(json_error)?;
        let dgp = match raw.dgp {
            None => Self::for_mode(raw.mode).dgp,
            Some(mut v) => {
                let obj = v.as_object_mut().ok_or_else(|| Error::config("dgp", "must be a JSON object"))?;
                match obj.get("mode") {
                    Some(m) if m != &serde_json::to_value(raw.mode)? => {
                        return Err(Error::config("dgp.mode", "does not match the top-level mode"));
                    }
                    Some(_) => {}
                    None => {
                        obj.insert("mode".into(), serde_json::to_value(raw.mode)?);
                    }
                }
                serde_json::from_value(v).map_err(json_error)?
            }
        };
        let shapes = raw.shapes.unwrap_or_else(|| vec![DgpConfig::shape(&dgp)]);
        let cfg = Self {
            mode: raw.mode,
            seed: raw.seed,
            estimation: raw.estimation,
            dgp,
            replications: raw.replications,
            skip_failures: raw.skip_failures,
            shapes,
            csv: raw.csv,
            input: raw.input,
            out: raw.out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dgp.mode() != self.mode {
            return Err(Error::config("dgp", "design does not match mode"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications", "must be at least 1"));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("shapes", "list at least one shape"));
        }
        self.estimation.validate()?;
        self.dgp.validate()
    }

    pub fn coverage(&self, shape: Shape) -> CoverageConfig {
        CoverageConfig {
            dgp: self.dgp.with_shape(shape),
            estimation: self.estimation.clone(),
            replications: self.replications,
            skip_failures: self.skip_failures,
        }
    }
}
