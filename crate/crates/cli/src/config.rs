//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use cogfactor::synthetic::GenConfig;
use cogfactor::trial_sim::{SelectionMethod, TrialConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Keys accepted in the configuration file, shown on usage errors.
pub const SCHEMA_HINT: &str = "\
expected TOML with any of:
  seed = <u64>
  out = \"<dir>\"
  profile = \"desk\" | \"full\"
  [generate]      train_fraction = 0.5
  [generate.cohort]  n_subjects, visits_per_subject = [lo, hi], visit_gap_years = [lo, hi],
                  true_g, true_sigma_eps, true_sigma_eta, initial_state_var, raw_polarity,
                  covariates, covariate_score_effects, outcome, conversion_window_years, censoring
  [fit_factors]   train, n_iter, burn_in, thin, max_subjects
  [fit_risk]      train
  [run_trial]     test, threshold, n_enrolled, n_replicates, effects, methods, alpha, target_power";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub train_fraction: f64,
    pub cohort: Option<GenConfig>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            train_fraction: 0.5,
            cohort: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitFactorsSection {
    pub train: Option<PathBuf>,
    pub n_iter: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: usize,
    /// Cap on the number of training subjects given to the sampler; the
    /// rest are scored with the fitted parameters.
    pub max_subjects: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitRiskSection {
    pub train: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunTrialSection {
    pub test: Option<PathBuf>,
    /// High-risk cut-off; defaults to the factor model's balanced threshold.
    pub threshold: Option<f64>,
    pub n_enrolled: Option<usize>,
    pub n_replicates: Option<usize>,
    pub effects: Option<Vec<f64>>,
    pub methods: Option<Vec<SelectionMethod>>,
    pub alpha: Option<f64>,
    pub target_power: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub profile: Option<Profile>,
    pub generate: GenerateSection,
    pub fit_factors: FitFactorsSection,
    pub fit_risk: FitRiskSection,
    pub run_trial: RunTrialSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        if text.trim().is_empty() {
            return Err(CliError::Usage(format!(
                "configuration file is empty\n{SCHEMA_HINT}"
            )));
        }
        toml::from_str(text)
            .map_err(|e| CliError::Usage(format!("invalid configuration: {e}\n{SCHEMA_HINT}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }
}

/// Configuration with command-line overrides and profile defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub seed: u64,
    pub out: PathBuf,
    pub profile: Profile,
    pub config: RunConfig,
}

impl Resolved {
    pub fn new(
        config: RunConfig,
        seed: Option<u64>,
        out: Option<PathBuf>,
        profile: Option<Profile>,
    ) -> Self {
        Resolved {
            seed: seed.or(config.seed).unwrap_or(1),
            out: out
                .or_else(|| config.out.clone())
                .unwrap_or_else(|| PathBuf::from("out")),
            profile: profile.or(config.profile).unwrap_or(Profile::Desk),
            config,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn gen_config(&self) -> GenConfig {
        let mut g = self
            .config
            .generate
            .cohort
            .clone()
            .unwrap_or_else(|| GenConfig {
                n_subjects: 6000,
                ..GenConfig::default()
            });
        g.seed = self.seed;
        g
    }

    pub fn gibbs_iterations(&self) -> (usize, usize) {
        let (n, b) = match self.profile {
            Profile::Desk => (2_000, 1_000),
            Profile::Full => (10_000, 5_000),
        };
        let f = &self.config.fit_factors;
        (f.n_iter.unwrap_or(n), f.burn_in.unwrap_or(b))
    }

    pub fn max_fit_subjects(&self) -> Option<usize> {
        self.config.fit_factors.max_subjects.or(match self.profile {
            Profile::Desk => Some(500),
            Profile::Full => None,
        })
    }

    pub fn trial_config(&self) -> TrialConfig {
        let t = &self.config.run_trial;
        let d = TrialConfig::default();
        TrialConfig {
            n_enrolled: t.n_enrolled.unwrap_or(d.n_enrolled),
            methods: t.methods.clone().unwrap_or(d.methods),
            effects: t.effects.clone().unwrap_or(d.effects),
            n_replicates: t.n_replicates.unwrap_or(match self.profile {
                Profile::Desk => 2_000,
                Profile::Full => 10_000,
            }),
            alpha: t.alpha.unwrap_or(d.alpha),
            target_power: t.target_power.unwrap_or(d.target_power),
            seed: cogfactor::rng::derive_seed(self.seed, &[crate::commands::STREAM_TRIAL]),
        }
    }
}
