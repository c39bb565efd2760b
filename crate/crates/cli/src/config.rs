use crate::CliError;
use safenav::curriculum::{default_plan, Regime, TrainingPlan};
use safenav::ppo::PpoConfig;
use safenav::sim::SimParams;
use safenav::verifier::{BoundMode, VerifierBudget};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};

/// Everything a subcommand needs, resolved from defaults, an optional JSON
/// config file and command-line flags (in increasing priority).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub regime: Regime,
    /// Environment steps per training run.
    pub total_budget: u64,
    /// Advance to the next stage once rolling success reaches this value.
    pub early_advance: Option<f64>,
    pub ppo: PpoConfig,
    pub sim: SimParams,
    pub verifier: VerifierBudget,
    pub mode: BoundMode,
    /// Evaluation episodes per seed and environment.
    pub episodes: usize,
    pub eval_seeds: Vec<u64>,
    /// Extra directories searched for `<name>.json` environment files.
    pub env_dirs: Vec<PathBuf>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regime: Regime::Tol,
            total_budget: 6_000_000,
            early_advance: None,
            ppo: PpoConfig::default(),
            sim: SimParams::default(),
            verifier: VerifierBudget::default(),
            mode: BoundMode::LinearRelax,
            episodes: 1000,
            eval_seeds: vec![0, 1, 2],
            env_dirs: Vec::new(),
            threads: 0,
        }
    }
}

/// Flag values that override the config file when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub regime: Option<Regime>,
    pub mode: Option<BoundMode>,
    pub episodes: Option<usize>,
    pub budget_depth: Option<u32>,
    pub threads: Option<usize>,
    pub eval_seeds: Option<Vec<u64>>,
}

impl RunConfig {
    fn read_json(path: &Path) -> Result<Value, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        Self::resolve_from(Self::default(), Some(path), &Overrides::default())
    }

    /// Defaults, then `file`, then `flags`; validated.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        Self::resolve_from(Self::default(), file, flags)
    }

    /// Like [`RunConfig::resolve`] but starting from `base`. Keys present
    /// in the file replace the matching keys of `base`, recursively.
    pub fn resolve_from(base: RunConfig, file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => {
                let mut merged = serde_json::to_value(&base).expect("config serializes");
                merge(&mut merged, Self::read_json(p)?);
                serde_json::from_value(merged).map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
            }
            None => base,
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, flags: &Overrides) {
        if let Some(v) = flags.seed {
            self.seed = v;
        }
        if let Some(v) = flags.regime {
            self.regime = v;
        }
        if let Some(v) = flags.mode {
            self.mode = v;
        }
        if let Some(v) = flags.episodes {
            self.episodes = v;
        }
        if let Some(v) = flags.budget_depth {
            self.verifier.max_depth = v;
        }
        if let Some(v) = flags.threads {
            self.threads = v;
        }
        if let Some(v) = &flags.eval_seeds {
            self.eval_seeds = v.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.ppo.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.plan().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sim.n_actions() == 0 {
            return bad("sim.actions is empty".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be positive".into());
        }
        if self.eval_seeds.is_empty() {
            return bad("eval_seeds is empty".into());
        }
        let b = &self.verifier;
        if b.max_depth > 60 {
            return bad(format!("verifier.max_depth {} exceeds 60", b.max_depth));
        }
        if b.max_regions == 0 {
            return bad("verifier.max_regions must be positive".into());
        }
        if !(b.resolution > 0.0 && b.resolution <= 1.0) {
            return bad("verifier.resolution must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn plan(&self) -> TrainingPlan {
        let mut plan = default_plan(self.regime, self.total_budget).with_seed(self.seed);
        plan.early_advance = self.early_advance;
        plan
    }

    /// Writes `config.json` into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("config.json");
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file_which_wins_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 7, "episodes": 50, "verifier": {"max_depth": 9}}"#).unwrap();
        let flags = Overrides {
            episodes: Some(3),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.episodes, 3);
        assert_eq!(cfg.verifier.max_depth, 9);
        assert_eq!(cfg.verifier.max_regions, 1_000_000);
        assert_eq!(cfg.ppo, PpoConfig::default());
    }

    #[test]
    fn file_patches_a_non_default_base() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"ppo": {"epochs": 3}}"#).unwrap();
        let base = RunConfig {
            total_budget: 600_000,
            ..RunConfig::default()
        };
        let cfg = RunConfig::resolve_from(base, Some(&path), &Overrides::default()).unwrap();
        assert_eq!(cfg.total_budget, 600_000);
        assert_eq!(cfg.ppo.epochs, 3);
        assert_eq!(cfg.ppo.horizon, 6000);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"sed": 7}"#).unwrap();
        let err = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn written_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            seed: 11,
            regime: Regime::Finetune,
            ..RunConfig::default()
        };
        cfg.write_to(dir.path()).unwrap();
        assert_eq!(RunConfig::from_file(&dir.path().join("config.json")).unwrap(), cfg);
    }
}
