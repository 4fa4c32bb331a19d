//! Flat `key = value` run configuration shared by every command.

use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::dig::{DigConfig, Distance, NoiseSharing, PatchGrid};
use crate::error::{Error, Result};
use crate::sampler::{FusionConfig, StepSpacing, WeightMode};
use crate::schedule::{make_linear_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
use crate::theory::InstanceKind;

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "inputs",
    "names",
    "reference",
    "out",
    "steps",
    "spacing",
    "spacing_exponent",
    "dig_interval",
    "dig_distance",
    "patch_grid",
    "temperature",
    "autoscale",
    "noise_sharing",
    "weight_mode",
    "guidance_scale",
    "seed",
    "seeds_for_bands",
    "oracle",
    "schedule_steps",
    "beta_start",
    "beta_end",
    "external_timeout",
    "metrics",
    "synthetic",
    "synthetic_size",
    "instances",
    "instance_kind",
    "instance_size",
    "permutations",
];

#[derive(Debug, Clone, PartialEq)]
pub enum OracleSpec {
    Gaussian,
    /// Atoms are the input modalities, or every image in the directory.
    Empirical(Option<PathBuf>),
    Spectral,
    External(PathBuf),
}

impl std::str::FromStr for OracleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(dir) = s.strip_prefix("external:") {
            if dir.is_empty() {
                return Err(Error::Config("external oracle needs a directory".into()));
            }
            return Ok(OracleSpec::External(PathBuf::from(dir)));
        }
        if let Some(dir) = s.strip_prefix("empirical:") {
            if dir.is_empty() {
                return Err(Error::Config("empirical oracle directory is empty".into()));
            }
            return Ok(OracleSpec::Empirical(Some(PathBuf::from(dir))));
        }
        match s {
            "gaussian" => Ok(OracleSpec::Gaussian),
            "empirical" => Ok(OracleSpec::Empirical(None)),
            "spectral" => Ok(OracleSpec::Spectral),
            other => Err(Error::Config(format!("unknown oracle `{other}`"))),
        }
    }
}

impl std::fmt::Display for OracleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleSpec::Gaussian => f.write_str("gaussian"),
            OracleSpec::Empirical(None) => f.write_str("empirical"),
            OracleSpec::Empirical(Some(d)) => write!(f, "empirical:{}", d.display()),
            OracleSpec::Spectral => f.write_str("spectral"),
            OracleSpec::External(d) => write!(f, "external:{}", d.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub names: Vec<String>,
    pub reference: Option<PathBuf>,
    pub out: PathBuf,
    pub fusion: FusionConfig,
    pub seeds_for_bands: usize,
    pub oracle: OracleSpec,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub external_timeout: f64,
    pub metrics: bool,
    pub synthetic: Option<String>,
    pub synthetic_size: usize,
    pub instances: usize,
    pub instance_kind: InstanceKind,
    pub instance_size: usize,
    pub permutations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            inputs: Vec::new(),
            names: Vec::new(),
            reference: None,
            out: PathBuf::from("out"),
            fusion: FusionConfig::default(),
            seeds_for_bands: 16,
            oracle: OracleSpec::Spectral,
            schedule_steps: DEFAULT_T,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            external_timeout: 30.0,
            metrics: false,
            synthetic: None,
            synthetic_size: 32,
            instances: 100,
            instance_kind: InstanceKind::MaskedComplement,
            instance_size: 16,
            permutations: 10_000,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl RunConfig {
    pub fn dig(&self) -> &DigConfig {
        &self.fusion.dig
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let f = &mut self.fusion;
        match key {
            "inputs" => self.inputs = list(v).into_iter().map(PathBuf::from).collect(),
            "names" => self.names = list(v),
            "reference" => self.reference = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "steps" => f.total_steps = parse(key, v)?,
            "spacing" => {
                let exponent = match f.spacing {
                    StepSpacing::CoarseToFine { exponent } => exponent,
                    StepSpacing::Uniform => 2.0,
                };
                f.spacing = match v.parse::<StepSpacing>()? {
                    StepSpacing::CoarseToFine { .. } => StepSpacing::CoarseToFine { exponent },
                    other => other,
                };
            }
            "spacing_exponent" => {
                let e: f64 = parse(key, v)?;
                if let StepSpacing::CoarseToFine { exponent } = &mut f.spacing {
                    *exponent = e;
                }
            }
            "dig_interval" => f.dig.interval = parse(key, v)?,
            "dig_distance" => f.dig.distance = v.parse::<Distance>()?,
            "patch_grid" => f.dig.patch_grid = v.parse::<PatchGrid>()?,
            "temperature" => f.dig.temperature = parse(key, v)?,
            "autoscale" => f.dig.autoscale = parse_bool(key, v)?,
            "noise_sharing" => f.dig.noise = v.parse::<NoiseSharing>()?,
            "weight_mode" => f.weight_mode = v.parse::<WeightMode>()?,
            "guidance_scale" => f.guidance_scale = parse(key, v)?,
            "seed" => f.seed = parse(key, v)?,
            "seeds_for_bands" => self.seeds_for_bands = parse(key, v)?,
            "oracle" => self.oracle = v.parse()?,
            "schedule_steps" => self.schedule_steps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "external_timeout" => self.external_timeout = parse(key, v)?,
            "metrics" => self.metrics = parse_bool(key, v)?,
            "synthetic" => self.synthetic = (!v.is_empty()).then(|| v.to_string()),
            "synthetic_size" => self.synthetic_size = parse(key, v)?,
            "instances" => self.instances = parse(key, v)?,
            "instance_kind" => self.instance_kind = v.parse()?,
            "instance_size" => self.instance_size = parse(key, v)?,
            "permutations" => self.permutations = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a config file body. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Value of `key` in the textual form accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> String {
        let f = &self.fusion;
        let join_paths = |p: &[PathBuf]| p.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
        match key {
            "inputs" => join_paths(&self.inputs),
            "names" => self.names.join(","),
            "reference" => self
                .reference
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "out" => self.out.display().to_string(),
            "steps" => f.total_steps.to_string(),
            "spacing" => f.spacing.to_string(),
            "spacing_exponent" => match f.spacing {
                StepSpacing::CoarseToFine { exponent } => exponent.to_string(),
                StepSpacing::Uniform => "2".into(),
            },
            "dig_interval" => f.dig.interval.to_string(),
            "dig_distance" => f.dig.distance.to_string(),
            "patch_grid" => f.dig.patch_grid.to_string(),
            "temperature" => f.dig.temperature.to_string(),
            "autoscale" => f.dig.autoscale.to_string(),
            "noise_sharing" => f.dig.noise.to_string(),
            "weight_mode" => f.weight_mode.to_string(),
            "guidance_scale" => f.guidance_scale.to_string(),
            "seed" => f.seed.to_string(),
            "seeds_for_bands" => self.seeds_for_bands.to_string(),
            "oracle" => self.oracle.to_string(),
            "schedule_steps" => self.schedule_steps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "external_timeout" => self.external_timeout.to_string(),
            "metrics" => self.metrics.to_string(),
            "synthetic" => self.synthetic.clone().unwrap_or_default(),
            "synthetic_size" => self.synthetic_size.to_string(),
            "instances" => self.instances.to_string(),
            "instance_kind" => self.instance_kind.to_string(),
            "instance_size" => self.instance_size.to_string(),
            "permutations" => self.permutations.to_string(),
            _ => String::new(),
        }
    }

    /// Effective configuration in file form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("#schema=dig2dig.config.v1\n");
        for k in KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&self.get(k));
            out.push('\n');
        }
        out
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn timeout(&self) -> Result<Duration> {
        if !(self.external_timeout > 0.0 && self.external_timeout.is_finite()) {
            return Err(Error::validation("external_timeout", "must be positive"));
        }
        Ok(Duration::from_secs_f64(self.external_timeout))
    }

    /// Modality names: explicit, or `m0, m1, ...`.
    pub fn modality_names(&self) -> Result<Vec<String>> {
        if self.names.is_empty() {
            return Ok((0..self.inputs.len()).map(|i| format!("m{i}")).collect());
        }
        if self.names.len() != self.inputs.len() {
            return Err(Error::Config(format!(
                "{} names for {} inputs",
                self.names.len(),
                self.inputs.len()
            )));
        }
        Ok(self.names.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\ninputs = a.png, b.png\nnames = ir,vis\nsteps = 30 # trailing\nweight_mode = static-fixed=0.25,0.75\npatch_grid = global\noracle = external:/tmp/x\nautoscale = true\nspacing = uniform\n",
        )
        .unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.fusion.total_steps, 30);
        assert_eq!(d.inputs.len(), 2);
    }

    #[test]
    fn unknown_and_bad_values_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("colour = red").is_err());
        assert!(c.apply_text("steps = many").is_err());
        assert!(c.apply_text("just a line").is_err());
        assert!(c.apply_text("dig_distance = l7").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let d = RunConfig::default();
        let mut c = RunConfig::default();
        for k in KEYS {
            c.set(k, &d.get(k)).unwrap();
        }
        assert_eq!(c, d);
    }
}
