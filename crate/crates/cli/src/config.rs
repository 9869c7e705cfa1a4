use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use soboq_core::diagnostics::{SweepAxis, SweepPlan};
use soboq_core::experiment::ExperimentConfig;
use soboq_core::Error;

/// Environment variable overriding the data seed of every configuration.
pub const SEED_ENV: &str = "SOBOQ_SEED";

/// Reads and validates an experiment file. Unknown keys are errors.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| config_error(path, e.to_string()))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{}: {field}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, Error> {
    let config: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
    config.validate()?;
    Ok(config)
}

pub fn to_toml(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("configuration serialises to TOML")
}

/// Applies `SOBOQ_SEED` when set.
pub fn apply_seed_override(config: &mut ExperimentConfig) -> Result<(), Error> {
    if let Some(seed) = seed_override()? {
        log::info!("{SEED_ENV} overrides the data seed with {seed}");
        config.data.seed = seed;
    }
    Ok(())
}

pub fn seed_override() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config {
            field: SEED_ENV.into(),
            message: format!("expected an unsigned integer, got `{v}`"),
        }),
        Err(_) => Ok(None),
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let field = match e.span() {
        Some(span) => format!("byte {}..{}", span.start, span.end),
        None => "config".into(),
    };
    Error::Config {
        field,
        message: e.to_string().lines().next().map(|first| format!("{first}: {message}")).unwrap_or(message),
    }
}

fn config_error(path: &Path, message: String) -> Error {
    Error::Config {
        field: path.display().to_string(),
        message,
    }
}

/// On-disk sweep plan. `base` names an experiment file relative to the plan;
/// without it the defaults are used.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    axis: SweepAxis,
    values: Vec<f64>,
    #[serde(default = "one")]
    replicates: usize,
    base: Option<PathBuf>,
}

fn one() -> usize {
    1
}

pub fn parse_plan(path: &Path) -> Result<SweepPlan, Error> {
    let text = fs::read_to_string(path).map_err(|e| config_error(path, e.to_string()))?;
    let file: PlanFile = toml::from_str(&text).map_err(toml_error)?;
    let mut base = match &file.base {
        Some(rel) => parse_config(&path.parent().unwrap_or(Path::new(".")).join(rel))?,
        None => ExperimentConfig::default(),
    };
    apply_seed_override(&mut base)?;
    let plan = SweepPlan {
        axis: file.axis,
        values: file.values,
        replicates: file.replicates,
        base,
    };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let c = parse_config_str("[data]\nn = 500\n").unwrap();
        assert_eq!(c.data.n, 500);
        assert_eq!(c.data.seed, 42);
    }

    #[test]
    fn range_error_names_the_field() {
        let e = parse_config_str("[solver]\nalpha = -1.0\n").unwrap_err();
        assert!(e.to_string().contains("[solver].alpha"), "{e}");
    }

    #[test]
    fn unknown_keys_and_type_mismatches_are_rejected() {
        let e = parse_config_str("[solver]\nalpah = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("alpah"), "{e}");
        let e = parse_config_str("[data]\nn = \"many\"\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(parse_config_str("[mystery]\n").is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.env.name = "ou2d".into();
        c.solver.alpha = 0.35;
        c.funcspace.radius_v = Some(3.0);
        let back = parse_config_str(&to_toml(&c)).unwrap();
        assert_eq!(back, c);
    }
}
