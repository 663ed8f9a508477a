//! Run configuration: named presets overlaid with an optional TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wrm_core::attacks::AttackSpec;
use wrm_core::data::LabelKind;
use wrm_core::rl::{AgentConfig, CartPoleWorld, DEFAULT_RL_GAMMA, VARIANTS};
use wrm_core::trainer::{TrainConfig, TrainMethod};
use wrm_core::{Activation, Head, TransportCost};

use crate::error::CliError;

pub const PRESETS: [&str; 6] = [
    "synthetic-wrm",
    "synthetic-erm",
    "synthetic-fgm",
    "mnist-smoke",
    "cartpole-nominal",
    "cartpole-robust",
];

pub const DEFAULT_PRESET: &str = "synthetic-wrm";

/// Offset between the training and test seeds of generated data.
pub const TEST_SEED_OFFSET: u64 = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: String,
    /// Drives every random stream: data, init, minibatches, agent, evaluation.
    pub seed: u64,
    pub cost: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    pub attack: AttackConfig,
    pub certify: CertifyConfig,
    pub rl: RlConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        n_train: usize,
        n_test: usize,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        labels: LabelChoice,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        limit: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelChoice {
    Class,
    Value,
    None,
}

impl From<LabelChoice> for LabelKind {
    fn from(c: LabelChoice) -> Self {
        match c {
            LabelChoice::Class => LabelKind::Class,
            LabelChoice::Value => LabelKind::Value,
            LabelChoice::None => LabelKind::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

/// Budgets derived from the data or from another run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    /// Set `train.eps` to the budget a WRM run at this penalty moves points by.
    pub from_wrm_gamma: Option<f64>,
    /// Set `train.gamma` to this factor times the mean L2 norm of the inputs.
    pub gamma_norm_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Attack string, e.g. `pgm:p=inf,eps=0.1,T=15`.
    pub spec: String,
    /// Budgets to sweep; empty means the budget in `spec` only.
    #[serde(default)]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    /// Defaults to the training penalty.
    pub gamma: Option<f64>,
    pub rho_grid: Vec<f64>,
    pub gamma_adv: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    #[serde(default)]
    pub world: CartPoleWorld,
    #[serde(default)]
    pub agent: AgentConfig,
    pub trials: usize,
    pub variants: Vec<String>,
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

fn synthetic_base(name: &str) -> Config {
    let train = TrainConfig {
        steps: 4000,
        stepsize: 0.01,
        batch_size: 32,
        ..TrainConfig::wrm(2.0)
    };
    Config {
        preset: name.into(),
        seed: 0,
        cost: "covshift:sq-l2".into(),
        data: DataConfig::Synthetic {
            n_train: 1000,
            n_test: 1000,
        },
        model: ModelConfig {
            dims: vec![2, 4, 2, 2],
            activation: Activation::Elu,
            head: Head::SoftmaxCrossEntropy { classes: 2 },
        },
        train,
        budget: BudgetConfig::default(),
        attack: AttackConfig {
            spec: "fgm:p=2,eps=0.1".into(),
            values: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        },
        certify: CertifyConfig {
            gamma: None,
            rho_grid: (0..=10).map(|k| k as f64 / 10.0).collect(),
            gamma_adv: log_space(0.5, 50.0, 10),
        },
        rl: RlConfig {
            world: CartPoleWorld::default(),
            agent: AgentConfig::default(),
            trials: 100,
            variants: VARIANTS.iter().map(|v| v.to_string()).collect(),
        },
    }
}

pub fn preset(name: &str) -> Result<Config, CliError> {
    let mut cfg = synthetic_base(name);
    match name {
        "synthetic-wrm" | "cartpole-nominal" => {}
        "synthetic-erm" => cfg.train = TrainConfig { method: TrainMethod::Erm, gamma: None, ..cfg.train },
        "synthetic-fgm" => {
            cfg.train = TrainConfig { method: TrainMethod::Fgm, gamma: None, eps: None, ..cfg.train };
            cfg.budget.from_wrm_gamma = Some(2.0);
        }
        "mnist-smoke" => {
            let dir = PathBuf::from("data/mnist");
            cfg.data = DataConfig::Idx {
                train_images: dir.join("train-images-idx3-ubyte"),
                train_labels: dir.join("train-labels-idx1-ubyte"),
                test_images: dir.join("t10k-images-idx3-ubyte"),
                test_labels: dir.join("t10k-labels-idx1-ubyte"),
                limit: 500,
            };
            cfg.model = ModelConfig {
                dims: vec![784, 32, 10],
                activation: Activation::Elu,
                head: Head::SoftmaxCrossEntropy { classes: 10 },
            };
            cfg.train = TrainConfig { gamma: None, steps: 200, stepsize: 0.05, ..cfg.train };
            cfg.budget.gamma_norm_scale = Some(0.04);
            cfg.attack = AttackConfig {
                spec: "pgm:p=inf,eps=0.1".into(),
                values: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            };
            cfg.certify.rho_grid = (0..=10).map(|k| k as f64).collect();
        }
        "cartpole-robust" => cfg.rl.agent.gamma = Some(DEFAULT_RL_GAMMA),
        other => {
            return Err(CliError::Usage(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(cfg)
}

/// Overlay `user` onto `base`. A table whose `kind` changes is replaced
/// outright, and setting `train.method` drops the inherited gamma and eps.
fn merge(base: &mut toml::Table, user: toml::Table, path: &str) {
    if path == "train" && user.contains_key("method") {
        base.remove("gamma");
        base.remove("eps");
    }
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                if u.get("kind").is_some_and(|k| b.get("kind") != Some(k)) {
                    *b = u;
                } else {
                    let sub = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                    merge(b, u, &sub);
                }
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Build the effective configuration. `preset_flag` beats a `preset` key in
/// the file; `seed` beats the file's seed.
pub fn resolve(file: Option<&Path>, preset_flag: Option<&str>, seed: Option<u64>) -> Result<Config, CliError> {
    let user: toml::Table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            text.parse()
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let name = match (preset_flag, user.get("preset")) {
        (Some(p), _) => p.to_string(),
        (None, Some(toml::Value::String(p))) => p.clone(),
        (None, Some(_)) => return Err(CliError::Usage("preset: expected a string".into())),
        (None, None) => DEFAULT_PRESET.to_string(),
    };
    let mut table = toml::Table::try_from(preset(&name)?)
        .map_err(|e| CliError::Runtime(format!("cannot encode preset: {e}")))?;
    merge(&mut table, user, "");
    table.insert("preset".into(), toml::Value::String(name));
    let mut cfg: Config = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        CliError::Usage(format!("config field `{path}`: {}", e.into_inner()))
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.sync_seeds();
    Ok(cfg)
}

fn core_msg(e: wrm_core::Error) -> String {
    match e {
        wrm_core::Error::InvalidConfig { message } => message,
        other => other.to_string(),
    }
}

impl Config {
    pub fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        self.rl.agent.seed = self.seed;
    }

    pub fn transport_cost(&self) -> Result<TransportCost, CliError> {
        self.cost
            .parse()
            .map_err(|e| CliError::Usage(format!("cost: {}", core_msg(e))))
    }

    pub fn attack_spec(&self) -> Result<AttackSpec, CliError> {
        self.attack
            .spec
            .parse()
            .map_err(|e| CliError::Usage(format!("attack.spec: {}", core_msg(e))))
    }

    /// Budgets the attack command sweeps over.
    pub fn attack_values(&self) -> Result<Vec<f64>, CliError> {
        let spec = self.attack_spec()?;
        Ok(if self.attack.values.is_empty() {
            vec![spec.budget]
        } else {
            self.attack.values.clone()
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |section: &str, msg: String| Err(CliError::Usage(format!("{section}: {msg}")));
        self.transport_cost()?;

        match &self.data {
            DataConfig::Synthetic { n_train, n_test } if *n_train == 0 || *n_test == 0 => {
                return usage("data", "n_train and n_test must be >= 1".into())
            }
            DataConfig::Synthetic { .. } if self.model.dims.first() != Some(&2) => {
                return usage("model.dims", "synthetic data is 2-dimensional, so dims must start with 2".into())
            }
            DataConfig::Idx { limit: 0, .. } => return usage("data.limit", "must be >= 1".into()),
            _ => {}
        }

        let dims = &self.model.dims;
        if dims.len() < 2 || dims.contains(&0) {
            return usage("model.dims", "need at least input and output sizes, all >= 1".into());
        }
        let out = match self.model.head {
            Head::SoftmaxCrossEntropy { classes } => classes,
            Head::SquaredError => 1,
        };
        if dims.last() != Some(&out) {
            return usage("model.dims", format!("last size must be {out} for this head"));
        }

        let mut train = self.train.clone();
        match (self.budget.from_wrm_gamma, self.budget.gamma_norm_scale) {
            (Some(_), Some(_)) => {
                return usage("budget", "set from_wrm_gamma or gamma_norm_scale, not both".into())
            }
            (Some(g), None) => {
                if !(g > 0.0 && g.is_finite()) {
                    return usage("budget.from_wrm_gamma", format!("must be positive, got {g}"));
                }
                if train.eps.is_some() {
                    return usage("budget.from_wrm_gamma", "conflicts with train.eps".into());
                }
                train.eps = Some(0.0);
            }
            (None, Some(s)) => {
                if !(s > 0.0 && s.is_finite()) {
                    return usage("budget.gamma_norm_scale", format!("must be positive, got {s}"));
                }
                if train.gamma.is_some() {
                    return usage("budget.gamma_norm_scale", "conflicts with train.gamma".into());
                }
                train.gamma = Some(1.0);
            }
            (None, None) => {}
        }
        train.validate().or_else(|e| usage("train", core_msg(e)))?;

        let spec = self.attack_spec()?;
        for v in self.attack_values()? {
            AttackSpec { budget: v, ..spec.clone() }
                .validate()
                .or_else(|e| usage("attack.values", core_msg(e)))?;
        }

        if let Some(g) = self.certify.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return usage("certify.gamma", format!("must be positive, got {g}"));
            }
        }
        if let Some(r) = self.certify.rho_grid.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return usage("certify.rho_grid", format!("entries must be >= 0, got {r}"));
        }
        if let Some(g) = self.certify.gamma_adv.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return usage("certify.gamma_adv", format!("entries must be > 0, got {g}"));
        }

        self.rl.world.validate().or_else(|e| usage("rl", core_msg(e)))?;
        self.rl.agent.validate().or_else(|e| usage("rl", core_msg(e)))?;
        if self.rl.trials == 0 {
            return usage("rl.trials", "must be >= 1".into());
        }
        if let Some(v) = self.rl.variants.iter().find(|v| !VARIANTS.contains(&v.as_str())) {
            return usage("rl.variants", format!("unknown variant `{v}` (expected one of {})", VARIANTS.join(", ")));
        }
        Ok(())
    }
}
