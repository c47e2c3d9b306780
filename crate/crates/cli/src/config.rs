//! TOML run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use driftbench::data::{
    load_dataset, make_scenario, normalize, synth_generate, Scenario, SynthSpec,
};
use driftbench::model::ModelConfig;
use driftbench::protocol::{
    arch_grid, il_grid, Arch, SearchGrid, TaskSequence, DEFAULT_EPOCHS, LR_GRID,
};
use driftbench::strategies::{Registry, StrategyParams};

pub const SEED_ENV: &str = "DRIFTBENCH_SEED";

/// Bad input: maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Either a synthetic spec or a pair of dataset files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synth: Option<SynthSpec>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Z-score with training statistics.
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

/// Overrides for the search grid; absent axes use the defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub layers: Option<Vec<usize>>,
    pub hidden: Option<Vec<usize>>,
    pub lr: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub c: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: String,
    pub scenario: u8,
    /// Selects the class split within the scenario.
    #[serde(default)]
    pub variation: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Learning rate for tasks after the first (single runs).
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Train the joint reference for intransigence.
    #[serde(default = "yes")]
    pub joint: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub params: StrategyParams,
    #[serde(default)]
    pub grid: GridConfig,
}

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}

fn default_lr() -> f64 {
    LR_GRID[0]
}

fn default_layers() -> usize {
    1
}

fn default_hidden() -> usize {
    32
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    /// Applies `--seed`, then `DRIFTBENCH_SEED`, over the file's seed. An
    /// override also reseeds the synthetic generator.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> anyhow::Result<()> {
        if let Some(seed) = seed_override(flag)? {
            self.seed = seed;
            if let Some(s) = &mut self.data.synth {
                s.seed = seed;
            }
        }
        self.params.seed = self.seed;
        Ok(())
    }

    /// Schema checks that need no data.
    pub fn validate(&self, registry: &Registry) -> anyhow::Result<()> {
        if !registry.contains(&self.strategy) {
            return Err(config_err(format!(
                "unknown strategy {:?}; known: {}",
                self.strategy,
                registry.names().join(", ")
            )));
        }
        Scenario::from_index(self.scenario).map_err(|e| config_err(e.to_string()))?;
        if self.epochs == 0 {
            return Err(config_err("epochs must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(config_err("lr must be positive"));
        }
        ModelConfig::new(self.layers, self.hidden, 1, 1, 2, 0)
            .validate(false)
            .map_err(|e| config_err(e.to_string()))?;
        self.params
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        match (&self.data.synth, &self.data.train, &self.data.test) {
            (Some(s), None, None) => s.validate().map_err(|e| config_err(e.to_string()))?,
            (None, Some(_), Some(_)) => {}
            _ => {
                return Err(config_err(
                    "[data] needs either a synth table or both train and test paths",
                ))
            }
        }
        self.search_grid()
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch {
            layers: self.layers,
            hidden: self.hidden,
        }
    }

    /// Default grid for the strategy with the `[grid]` overrides applied.
    pub fn search_grid(&self) -> SearchGrid {
        let g = &self.grid;
        let arch = match (&g.layers, &g.hidden) {
            (None, None) => arch_grid(),
            (layers, hidden) => {
                let defaults = arch_grid();
                let ls = layers
                    .clone()
                    .unwrap_or_else(|| dedup(defaults.iter().map(|a| a.layers)));
                let hs = hidden
                    .clone()
                    .unwrap_or_else(|| dedup(defaults.iter().map(|a| a.hidden)));
                ls.iter()
                    .flat_map(|&layers| hs.iter().map(move |&hidden| Arch { layers, hidden }))
                    .collect()
            }
        };
        let mut il = il_grid(&self.strategy, &self.params);
        let over = |il: &mut Vec<StrategyParams>,
                    values: &Option<Vec<f64>>,
                    set: fn(&mut StrategyParams, f64)| {
            if let Some(vs) = values {
                let base = il[0].clone();
                *il = vs
                    .iter()
                    .map(|&v| {
                        let mut q = base.clone();
                        set(&mut q, v);
                        q
                    })
                    .collect();
            }
        };
        match self.strategy.as_str() {
            "ewc" => over(&mut il, &g.lambda, |p, v| p.lambda = v),
            "online_ewc" => {
                if g.lambda.is_some() || g.gamma.is_some() {
                    let lambdas = g
                        .lambda
                        .clone()
                        .unwrap_or_else(|| dedup_f(il.iter().map(|p| p.lambda)));
                    let gammas = g
                        .gamma
                        .clone()
                        .unwrap_or_else(|| dedup_f(il.iter().map(|p| p.gamma)));
                    il = lambdas
                        .iter()
                        .flat_map(|&lambda| {
                            let base = self.params.clone();
                            gammas.iter().map(move |&gamma| StrategyParams {
                                lambda,
                                gamma,
                                ..base.clone()
                            })
                        })
                        .collect();
                }
            }
            "si" => over(&mut il, &g.c, |p, v| p.c = v),
            _ => {}
        }
        SearchGrid {
            arch,
            lr: g.lr.clone().unwrap_or_else(|| LR_GRID.to_vec()),
            il,
        }
    }

    /// Loads or generates the data and splits it into the scenario's tasks.
    pub fn build_tasks(&self) -> anyhow::Result<TaskSequence> {
        let (train, test) = match (&self.data.synth, &self.data.train, &self.data.test) {
            (Some(spec), _, _) => synth_generate(spec)?,
            (None, Some(tr), Some(te)) => (load_dataset(tr)?, load_dataset(te)?),
            _ => {
                return Err(config_err(
                    "[data] needs either a synth table or both train and test paths",
                ))
            }
        };
        let (train, test) = if self.data.normalize {
            let (a, b, _) = normalize(&train, &test)?;
            (a, b)
        } else {
            (train, test)
        };
        let classes = train.present_classes();
        let scenario =
            Scenario::from_index(self.scenario).map_err(|e| config_err(e.to_string()))?;
        let split = make_scenario(&classes, scenario, self.variation)
            .map_err(|e| config_err(e.to_string()))?;
        Ok(TaskSequence::build(&train, &test, &split)?)
    }
}

/// `--seed` if given, else `DRIFTBENCH_SEED` if set.
pub fn seed_override(flag: Option<u64>) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                config_err(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn dedup(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = it.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn dedup_f(it: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    for x in it {
        if !v.contains(&x) {
            v.push(x);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
strategy = "ewc"
scenario = 2

[data.synth]
n_classes = 6
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.epochs, DEFAULT_EPOCHS);
        assert_eq!(
            c.arch(),
            Arch {
                layers: 1,
                hidden: 32
            }
        );
        c.validate(&Registry::builtin()).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml(&format!("{MINIMAL}\nbogus = 1\n")).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(
            RunConfig::from_toml("strategy = \"ewc\"\nscenario = 2\n[params]\nlamda = 3.0\n")
                .is_err()
        );
    }

    #[test]
    fn validation_catches_bad_values() {
        let reg = Registry::builtin();
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.strategy = "mas".into();
        assert!(c.validate(&reg).is_err());
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.scenario = 4;
        assert!(c.validate(&reg).is_err());
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.data = DataConfig::default();
        assert!(c.validate(&reg).is_err());
    }

    #[test]
    fn grid_defaults_and_overrides() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        let g = c.search_grid();
        assert_eq!(g.arch.len(), 4);
        assert_eq!(g.lr, LR_GRID.to_vec());
        assert_eq!(g.il.len(), 7);
        let c = RunConfig::from_toml(&format!(
            "{MINIMAL}\n[grid]\nlayers = [1]\nhidden = [16]\nlambda = [5.0]\nlr = [0.01]\n"
        ))
        .unwrap();
        let g = c.search_grid();
        assert_eq!(
            g.arch,
            vec![Arch {
                layers: 1,
                hidden: 16
            }]
        );
        assert_eq!(g.il.len(), 1);
        assert_eq!(g.il[0].lambda, 5.0);
        assert_eq!(g.points().len(), 1);
    }

    #[test]
    fn online_grid_crosses_lambda_and_gamma() {
        let text = MINIMAL.replace("\"ewc\"", "\"online_ewc\"");
        let c = RunConfig::from_toml(&format!("{text}\n[grid]\nlambda = [1.0, 2.0]\n")).unwrap();
        assert_eq!(c.search_grid().il.len(), 4);
    }

    #[test]
    fn seed_flag_beats_file() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.resolve_seed(Some(42)).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.params.seed, 42);
        assert_eq!(c.data.synth.as_ref().unwrap().seed, 42);
    }
}
