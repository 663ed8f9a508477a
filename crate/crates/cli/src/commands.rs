use std::path::{Path, PathBuf};

use clap::Subcommand;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wrm_core::attacks::{budget_from_wrm, AttackSpec, Norm};
use wrm_core::certify::{certificate, test_worst_case};
use wrm_core::data::{self, LabelKind, SyntheticSpec};
use wrm_core::inner::batch_surrogate;
use wrm_core::rl::{evaluate, train_agent, CartPoleWorld, QTable};
use wrm_core::trainer::{train, TrainConfig, TrainMethod};
use wrm_core::{Head, Sample, SmoothNet};

use crate::config::{Config, DataConfig, TEST_SEED_OFFSET};
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write the configured train and test splits as CSV.
    GenData,
    /// Train a model and write `model.json` and `train_report.csv`.
    Train,
    /// Attack a saved model on the test split and write `attack.csv`.
    Attack {
        #[arg(long)]
        model: PathBuf,
        /// Overrides `attack.spec`, e.g. `pgm:p=inf,eps=0.1,T=15`.
        #[arg(long)]
        spec: Option<String>,
        /// Budgets to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Test data as CSV instead of the configured split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Certificate curve on the training split and worst-case values on the test split.
    Certify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        rho_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        gamma_adv: Option<Vec<f64>>,
    },
    /// Tabular Q-learning on cart-pole; writes `q_table.json` and `episodes.csv`.
    RlTrain,
    /// Greedy evaluation of a saved table on the named environments.
    RlEval {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Attack { .. } => "attack",
            Command::Certify { .. } => "certify",
            Command::RlTrain => "rl-train",
            Command::RlEval { .. } => "rl-eval",
        }
    }

    /// Fold command-line overrides into the configuration.
    pub fn apply_overrides(&self, cfg: &mut Config) {
        match self {
            Command::Attack { spec, values, .. } => {
                if let Some(s) = spec {
                    cfg.attack.spec = s.clone();
                    if values.is_none() {
                        cfg.attack.values.clear();
                    }
                }
                if let Some(v) = values {
                    cfg.attack.values = v.clone();
                }
            }
            Command::Certify { gamma, rho_grid, gamma_adv, .. } => {
                if gamma.is_some() {
                    cfg.certify.gamma = *gamma;
                }
                if let Some(r) = rho_grid {
                    cfg.certify.rho_grid = r.clone();
                }
                if let Some(g) = gamma_adv {
                    cfg.certify.gamma_adv = g.clone();
                }
            }
            Command::RlEval { trials, variants, .. } => {
                if let Some(t) = trials {
                    cfg.rl.trials = *t;
                }
                if let Some(v) = variants {
                    cfg.rl.variants = v.clone();
                }
            }
            _ => {}
        }
    }

    /// Files read by the command, hashed into the manifest.
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Attack { model, data, .. } => std::iter::once(model.as_path()).chain(data.as_deref()).collect(),
            Command::Certify { model, .. } => vec![model.as_path()],
            Command::RlEval { table, .. } => vec![table.as_path()],
            _ => vec![],
        }
    }
}

pub fn run(cmd: &Command, cfg: &Config, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    match cmd {
        Command::GenData => gen_data(cfg, out_dir),
        Command::Train => train_model(cfg, out_dir),
        Command::Attack { model, data, .. } => attack(cfg, out_dir, model, data.as_deref()),
        Command::Certify { model, .. } => certify(cfg, out_dir, model),
        Command::RlTrain => rl_train(cfg, out_dir),
        Command::RlEval { table, .. } => rl_eval(cfg, out_dir, table),
    }
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, CliError> {
    std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn load_split(cfg: &Config, test: bool) -> Result<Vec<Sample>, CliError> {
    let data = match &cfg.data {
        DataConfig::Synthetic { n_train, n_test } => {
            let (n, seed) = if test {
                (*n_test, cfg.seed.wrapping_add(TEST_SEED_OFFSET))
            } else {
                (*n_train, cfg.seed)
            };
            data::gen_synthetic(&SyntheticSpec::new(n, seed))
        }
        DataConfig::Csv { train, test: t, labels } => data::load_csv(if test { t } else { train }, (*labels).into())?,
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
        } => {
            if test {
                data::load_idx(test_images, test_labels, *limit)?
            } else {
                data::load_idx(train_images, train_labels, *limit)?
            }
        }
    };
    if data.is_empty() {
        return Err(CliError::Runtime(format!("{} split is empty", if test { "test" } else { "train" })));
    }
    Ok(data)
}

fn error_rate(model: &SmoothNet, data: &[Sample]) -> Result<f64, CliError> {
    let wrong: Vec<bool> = data.par_iter().map(|z| model.misclassified(z)).collect::<Result<_, _>>()?;
    Ok(wrong.iter().filter(|w| **w).count() as f64 / data.len() as f64)
}

fn gen_data(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let dim = cfg.model.dims[0];
    let mut paths = Vec::new();
    for (name, test) in [("train.csv", false), ("test.csv", true)] {
        let split = load_split(cfg, test)?;
        paths.push(write(out.join(name), &data::to_csv(&split, dim))?);
    }
    Ok(paths)
}

/// Fill in budgets that depend on the data or on a reference WRM run.
fn resolve_train_config(cfg: &Config, train_data: &[Sample], init: &SmoothNet) -> Result<TrainConfig, CliError> {
    let mut tc = cfg.train.clone();
    let cost = cfg.transport_cost()?;
    if let Some(g) = cfg.budget.from_wrm_gamma {
        let wrm_cfg = TrainConfig {
            method: TrainMethod::Wrm,
            gamma: Some(g),
            eps: None,
            ..tc.clone()
        };
        let (wrm_model, _) = train(init, train_data, &wrm_cfg, &cost)?;
        let results = batch_surrogate(&wrm_model, train_data, g, &cost, &tc.inner)?;
        let eps = budget_from_wrm(&results, tc.norm)?;
        eprintln!("budget: eps = {eps} (WRM at gamma {g}, p = {})", tc.norm);
        tc.eps = Some(eps);
    }
    if let Some(s) = cfg.budget.gamma_norm_scale {
        let gamma = s * data::norm_stats(train_data, Norm::L2)?;
        eprintln!("budget: gamma = {gamma} ({s} x mean input norm)");
        tc.gamma = Some(gamma);
    }
    tc.validate()?;
    Ok(tc)
}

fn train_model(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let train_data = load_split(cfg, false)?;
    let test_data = load_split(cfg, true)?;
    let init = SmoothNet::init(&cfg.model.dims, cfg.model.activation, cfg.model.head, cfg.seed)?;
    let tc = resolve_train_config(cfg, &train_data, &init)?;
    let cost = cfg.transport_cost()?;
    let model_path = out.join("model.json");
    let report_path = out.join("train_report.csv");
    let (model, report) = match train(&init, &train_data, &tc, &cost) {
        Ok(r) => r,
        Err(wrm_core::Error::Diverged {
            step,
            last_finite,
            report,
        }) => {
            last_finite.save(&model_path)?;
            write(report_path.clone(), &report.to_csv())?;
            return Err(CliError::Runtime(format!(
                "training diverged at step {step}; last finite model in {}, report in {}",
                model_path.display(),
                report_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    model.save(&model_path)?;
    write(report_path.clone(), &report.to_csv())?;
    if matches!(cfg.model.head, Head::SoftmaxCrossEntropy { .. }) {
        println!(
            "train error {:.4}, test error {:.4}",
            error_rate(&model, &train_data)?,
            error_rate(&model, &test_data)?
        );
    }
    Ok(vec![model_path, report_path])
}

fn attack(cfg: &Config, out: &Path, model_path: &Path, data_path: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let model = SmoothNet::load(model_path)?;
    let test_data = match data_path {
        Some(p) => data::load_csv(
            p,
            match model.head() {
                Head::SoftmaxCrossEntropy { .. } => LabelKind::Class,
                Head::SquaredError => LabelKind::Value,
            },
        )?,
        None => load_split(cfg, true)?,
    };
    let spec = cfg.attack_spec()?;
    let mut csv = String::from("method,p,budget,error_rate,mean_loss\n");
    for budget in cfg.attack_values()? {
        let s = AttackSpec { budget, ..spec.clone() };
        let moved: Vec<Sample> = test_data
            .par_iter()
            .map(|z| s.perturb(&model, z, &cfg.train.inner))
            .collect::<Result<_, _>>()?;
        let losses: Vec<f64> = moved.par_iter().map(|z| model.loss(z)).collect::<Result<_, _>>()?;
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let err = match model.head() {
            Head::SoftmaxCrossEntropy { .. } => error_rate(&model, &moved)?,
            Head::SquaredError => f64::NAN,
        };
        let method = s.to_string();
        let method = method.split(':').next().unwrap_or_default();
        csv.push_str(&format!("{method},{},{budget},{err},{mean_loss}\n", s.norm));
        println!("{s}: error {err:.4}, loss {mean_loss:.4}");
    }
    Ok(vec![write(out.join("attack.csv"), &csv)?])
}

fn certify(cfg: &Config, out: &Path, model_path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let model = SmoothNet::load(model_path)?;
    let train_data = load_split(cfg, false)?;
    let test_data = load_split(cfg, true)?;
    let gamma = match (cfg.certify.gamma, cfg.train.gamma, cfg.budget.gamma_norm_scale) {
        (Some(g), _, _) => g,
        (None, Some(g), _) => g,
        (None, None, Some(s)) => s * data::norm_stats(&train_data, Norm::L2)?,
        (None, None, None) => {
            return Err(CliError::Usage(
                "certify.gamma: required when the training config has no gamma".into(),
            ))
        }
    };
    let cost = cfg.transport_cost()?;
    let cert = certificate(&model, &train_data, gamma, &cost, &cfg.certify.rho_grid, &cfg.train.inner)?;
    let mut csv = String::from("rho,certificate_bound\n");
    for (rho, bound) in &cert.curve {
        csv.push_str(&format!("{rho},{bound}\n"));
    }
    let cert_path = write(out.join("certificate.csv"), &csv)?;

    let mut csv = String::from("gamma_adv,rho_test,worst_value\n");
    for &g in &cfg.certify.gamma_adv {
        let w = test_worst_case(&model, &test_data, g, &cost, &cfg.train.inner)?;
        csv.push_str(&format!("{},{},{}\n", w.gamma_adv, w.rho_test, w.worst_value));
    }
    let worst_path = write(out.join("worst_case.csv"), &csv)?;

    println!(
        "gamma {gamma}: rho_hat {:.6}, bound at rho_hat {:.6}, mean surrogate {:.6}",
        cert.rho_hat,
        cert.tight_value(),
        cert.mean_surrogate
    );
    if cert.degenerate > 0 {
        println!("{} training points had an inner solve overflow and were left in place", cert.degenerate);
    }
    println!("note: bounds are empirical; the finite-sample concentration term is not computed");
    Ok(vec![cert_path, worst_path])
}

fn rl_train(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let agent = train_agent(&cfg.rl.world, &cfg.rl.agent)?;
    let table = write(out.join("q_table.json"), &agent.q.to_json()?)?;
    let episodes = write(out.join("episodes.csv"), &agent.lengths_csv())?;
    let tail = &agent.lengths[agent.lengths.len().saturating_sub(100)..];
    if !tail.is_empty() {
        println!(
            "mean length over the last {} episodes: {:.1}",
            tail.len(),
            tail.iter().sum::<usize>() as f64 / tail.len() as f64
        );
    }
    Ok(vec![table, episodes])
}

fn rl_eval(cfg: &Config, out: &Path, table: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(table)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", table.display())))?;
    let q = QTable::from_json(&text)?;
    let mut csv = String::from("variant,mean,stderr\n");
    for name in &cfg.rl.variants {
        let world = CartPoleWorld::variant(name)?;
        let e = evaluate(&q, &world, cfg.rl.trials, cfg.seed)?;
        csv.push_str(&format!("{name},{},{}\n", e.mean, e.stderr));
        println!("{name:>9}: {:.1} +- {:.1}", e.mean, e.stderr);
    }
    Ok(vec![write(out.join("evaluation.csv"), &csv)?])
}
