//! Ablation suites: each variant is trained from the same seeds on the same
//! corpus and scored on the held-out split.

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OtsNet};
use crate::thinking::SqMode;

use super::{evaluate, synth_generate, Metrics, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Dame,
    Modules,
    SqVariants,
    Alpha,
    Lambda,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Dame, Suite::Modules, Suite::SqVariants, Suite::Alpha, Suite::Lambda];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Dame => "dame",
            Suite::Modules => "modules",
            Suite::SqVariants => "sq_variants",
            Suite::Alpha => "alpha",
            Suite::Lambda => "lambda",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s || (s == "alpha_sweep" && *x == Suite::Alpha) || (s == "lambda_sweep" && *x == Suite::Lambda))
            .ok_or_else(|| Error::Config(format!("unknown ablation suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// The variants of `suite`, derived from a base configuration.
pub fn suite_variants(suite: Suite, model: &ModelConfig, train: &TrainConfig) -> Vec<Variant> {
    let v = |name: String, model: ModelConfig, train: TrainConfig| Variant { name, model, train };
    match suite {
        Suite::Dame => [EncoderVariant::Vit, EncoderVariant::DmhaOnly, EncoderVariant::Dame]
            .into_iter()
            .map(|e| v(e.to_string(), ModelConfig { encoder: e, ..model.clone() }, train.clone()))
            .collect(),
        Suite::Modules => [(true, false, false), (false, true, false), (true, true, false), (true, true, true)]
            .into_iter()
            .map(|(pam, mmcv, sq)| {
                let flag = |on: bool, name: &str| if on { name.to_string() } else { String::new() };
                let name = [flag(pam, "pam"), flag(mmcv, "mmcv"), flag(sq, "sq")]
                    .into_iter()
                    .filter(|s| !s.is_empty())
                    .collect::<Vec<_>>()
                    .join("+");
                v(name, ModelConfig { use_pam: pam, use_mmcv: mmcv, use_sq: sq, ..model.clone() }, train.clone())
            })
            .collect(),
        Suite::SqVariants => [
            (SqMode::None, 0.0),
            (SqMode::Normal, 0.0),
            (SqMode::None, 0.3),
            (SqMode::Normal, 0.3),
            (SqMode::Detach, 0.3),
            (SqMode::Gumbel, 0.3),
        ]
        .into_iter()
        .map(|(mode, alpha)| {
            v(
                format!("{mode}/alpha={alpha}"),
                ModelConfig { sq_mode: mode, use_sq: true, use_pam: true, ..model.clone() },
                TrainConfig { alpha, ..train.clone() },
            )
        })
        .collect(),
        Suite::Alpha => [0.0, 0.2, 0.3, 0.4]
            .into_iter()
            .map(|alpha| v(format!("alpha={alpha}"), model.clone(), TrainConfig { alpha, ..train.clone() }))
            .collect(),
        Suite::Lambda => [0.05, 0.10, 0.15]
            .into_iter()
            .map(|l| v(format!("lambda_init={l:.2}"), ModelConfig { lambda_init: l, ..model.clone() }, train.clone()))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// Held-out metrics per seed, in seed order.
    pub runs: Vec<(u64, Metrics)>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

impl AblationRow {
    pub fn median_sequence_accuracy(&self) -> f64 {
        median(&mut self.runs.iter().map(|(_, m)| m.sequence_accuracy()).collect::<Vec<_>>())
    }

    pub fn median_char_accuracy(&self) -> f64 {
        median(&mut self.runs.iter().map(|(_, m)| m.char_accuracy()).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub claim: String,
    pub passed: bool,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    fn seq(&self, name: &str) -> Option<f64> {
        self.row(name).map(AblationRow::median_sequence_accuracy)
    }

    /// Directional checks for the suite, on median held-out sequence
    /// accuracy. Margins are in accuracy units (0.01 is one point).
    pub fn verdicts(&self) -> Vec<Verdict> {
        let mut out = Vec::new();
        let mut ge = |a: &str, b: &[&str], margin: f64| {
            let (Some(x), Some(ys)) = (self.seq(a), b.iter().map(|n| self.seq(n)).collect::<Option<Vec<_>>>()) else {
                return;
            };
            let best = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let rhs = if b.len() == 1 { b[0].to_string() } else { format!("max({})", b.join(", ")) };
            out.push(Verdict {
                claim: format!("{a} >= {rhs} - {:.0}pp ({:.4} vs {:.4})", margin * 100.0, x, best),
                passed: x >= best - margin - 1e-12,
            });
        };
        match self.suite {
            Suite::Dame => {
                ge("dame", &["dmha_only"], 0.01);
                ge("dame", &["vit", "dmha_only"], 0.02);
            }
            Suite::Modules => ge("pam+mmcv+sq", &["pam"], 0.0),
            Suite::SqVariants => ge("gumbel/alpha=0.3", &["normal/alpha=0.3"], 0.0),
            Suite::Alpha => ge("alpha=0.3", &["alpha=0"], 0.0),
            Suite::Lambda => ge("lambda_init=0.05", &["lambda_init=0.15"], 0.0),
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seeds: Vec<String> = self.rows.first().map_or(Vec::new(), |r| r.runs.iter().map(|(s, _)| s.to_string()).collect());
        write!(f, "suite,variant,seq_acc_median,char_acc_median")?;
        for s in &seeds {
            write!(f, ",seq_acc_seed{s}")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{},{},{:.4},{:.4}", self.suite, r.name, r.median_sequence_accuracy(), r.median_char_accuracy())?;
            for (_, m) in &r.runs {
                write!(f, ",{:.4}", m.sequence_accuracy())?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Trains every variant of `suite` once per seed and scores it on the
/// held-out part of the configured corpus. `progress` receives one line
/// per finished run.
pub fn run_ablation(
    suite: Suite,
    base: &RunConfig,
    seeds: &[u64],
    workers: usize,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let corpus = synth_generate(base.data.samples, base.data.seed, &base.data.spec)?;
    let (train_set, held_out) = corpus.split_at(base.data.split_point());
    if train_set.is_empty() || held_out.is_empty() {
        return Err(Error::ConfigKey { key: "data.holdout".into(), reason: "both splits must be non-empty".into() });
    }
    let mut rows = Vec::new();
    for variant in suite_variants(suite, &base.model, &base.train) {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let train = TrainConfig { seed, ..variant.train.clone() };
            let mut net = OtsNet::new(variant.model.clone(), seed)?;
            let mut trainer = Trainer::new(&net, train, train_set.len())?;
            trainer.fit(&mut net, train_set, |_, _| Ok(()))?;
            let (metrics, _) = evaluate(&net, held_out, workers)?;
            progress(&format!(
                "{suite} {} seed={seed} seq_acc={:.4} char_acc={:.4}",
                variant.name,
                metrics.sequence_accuracy(),
                metrics.char_accuracy()
            ));
            runs.push((seed, metrics));
        }
        rows.push(AblationRow { name: variant.name, runs });
    }
    Ok(AblationTable { suite, rows })
}
