use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::relation::{AttentionFn, Fusion, Normalization};
use crate::train::{evaluate_map, train, LabeledScene, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Submodules per relation module.
    Submodules,
    /// Stacked relation modules.
    Stacks,
    Fusion,
    Attention,
    Normalization,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Submodules,
        SweepAxis::Stacks,
        SweepAxis::Fusion,
        SweepAxis::Attention,
        SweepAxis::Normalization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Submodules => "r",
            SweepAxis::Stacks => "n-r",
            SweepAxis::Fusion => "fusion",
            SweepAxis::Attention => "attention",
            SweepAxis::Normalization => "normalization",
        }
    }

    fn is_numeric(self) -> bool {
        matches!(self, SweepAxis::Submodules | SweepAxis::Stacks)
    }

    /// Parses one sweep value for this axis.
    pub fn parse_value(self, s: &str) -> Result<AxisValue> {
        let s = s.trim();
        Ok(match self {
            SweepAxis::Submodules | SweepAxis::Stacks => AxisValue::Count(
                s.parse()
                    .map_err(|_| Error::Config(format!("{} values must be positive integers, got {:?}", self, s)))?,
            ),
            SweepAxis::Fusion => AxisValue::Fusion(s.parse()?),
            SweepAxis::Attention => AxisValue::Attention(s.parse()?),
            SweepAxis::Normalization => AxisValue::Normalization(s.parse()?),
        })
    }

    /// Every value of a method axis; `None` for numeric axes.
    pub fn all_values(self) -> Option<Vec<AxisValue>> {
        match self {
            SweepAxis::Submodules | SweepAxis::Stacks => None,
            SweepAxis::Fusion => Some(Fusion::ALL.iter().map(|&f| AxisValue::Fusion(f)).collect()),
            SweepAxis::Attention => Some(AttentionFn::ALL.iter().map(|&a| AxisValue::Attention(a)).collect()),
            SweepAxis::Normalization => Some(
                Normalization::ALL
                    .iter()
                    .map(|&n| AxisValue::Normalization(n))
                    .collect(),
            ),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown sweep axis {:?}; expected one of r, n-r, fusion, attention, normalization",
                s
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisValue {
    Count(usize),
    Fusion(Fusion),
    Attention(AttentionFn),
    Normalization(Normalization),
}

impl AxisValue {
    fn apply(self, axis: SweepAxis, base: &ModelConfig) -> Result<ModelConfig> {
        let mut config = base.clone();
        config.variant = Variant::Point;
        let rel = &mut config.relation;
        match (axis, self) {
            (SweepAxis::Submodules, AxisValue::Count(n)) => rel.submodules = n,
            (SweepAxis::Stacks, AxisValue::Count(n)) => rel.stacks = n,
            (SweepAxis::Fusion, AxisValue::Fusion(f)) => rel.fusion = f,
            (SweepAxis::Attention, AxisValue::Attention(a)) => rel.attention = a,
            (SweepAxis::Normalization, AxisValue::Normalization(n)) => rel.normalization = n,
            _ => {
                return Err(Error::Config(format!(
                    "value {} does not belong to axis {}",
                    self, axis
                )))
            }
        }
        config.validate()?;
        Ok(config)
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Count(n) => write!(f, "{}", n),
            AxisValue::Fusion(x) => write!(f, "{}", x),
            AxisValue::Attention(x) => write!(f, "{}", x),
            AxisValue::Normalization(x) => write!(f, "{}", x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub map: f64,
    pub top1_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub corpus: String,
    pub baseline: Option<SweepRow>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Numeric axes use one column per value with the baseline first; method
    /// axes use one row per method.
    pub fn render(&self) -> String {
        if self.axis.is_numeric() {
            let prefix = if self.axis == SweepAxis::Submodules { "r" } else { "N_r" };
            let mut headers = vec!["Corpus".to_string()];
            let mut maps = vec![format!("{} mAP", self.corpus)];
            let mut tops = vec![format!("{} top-1", self.corpus)];
            if let Some(b) = &self.baseline {
                headers.push("Baseline".into());
                maps.push(format!("{:.2}", b.map));
                tops.push(format!("{:.2}", b.top1_accuracy));
            }
            for r in &self.rows {
                headers.push(format!("{}={}", prefix, r.label));
                maps.push(format!("{:.2}", r.map));
                tops.push(format!("{:.2}", r.top1_accuracy));
            }
            align(&[headers, maps, tops])
        } else {
            let mut rows = vec![vec!["Method".to_string(), "mAP".into(), "top-1".into()]];
            for r in self.baseline.iter().chain(&self.rows) {
                rows.push(vec![
                    r.label.clone(),
                    format!("{:.2}", r.map),
                    format!("{:.2}", r.top1_accuracy),
                ]);
            }
            align(&rows)
        }
    }
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (k, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{:<w$}", s, w = widths[c])
                } else {
                    format!("{:>w$}", s, w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if k == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

fn run_one(
    label: String,
    config: &ModelConfig,
    train_set: &[LabeledScene],
    test_set: &[LabeledScene],
    train_config: &TrainConfig,
) -> Result<SweepRow> {
    info!("sweep: training {}", label);
    let params = ModelParams::init(config, train_config.seed)?;
    let outcome = train(train_set, params, config, train_config)?;
    let report = evaluate_map(test_set, &outcome.params, config, train_config.threads)?;
    Ok(SweepRow {
        label,
        map: report.map,
        top1_accuracy: report.top1_accuracy,
        final_loss: outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
    })
}

/// Trains one model per value of `axis` on `train_set`, all from the same
/// seed, and scores each on `test_set`. With `include_baseline` the
/// relation-free baseline is trained and reported as well.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sweep(
    corpus_name: &str,
    train_set: &[LabeledScene],
    test_set: &[LabeledScene],
    base: &ModelConfig,
    train_config: &TrainConfig,
    axis: SweepAxis,
    values: &[AxisValue],
    include_baseline: bool,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over {} needs at least one value", axis)));
    }
    train_config.validate()?;
    let configs = values.iter().map(|v| v.apply(axis, base)).collect::<Result<Vec<_>>>()?;
    let baseline = if include_baseline {
        let config = ModelConfig::baseline(base.feature_dim());
        Some(run_one("Baseline".into(), &config, train_set, test_set, train_config)?)
    } else {
        None
    };
    let rows = values
        .iter()
        .zip(&configs)
        .map(|(v, c)| run_one(v.to_string(), c, train_set, test_set, train_config))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        axis,
        corpus: corpus_name.to_string(),
        baseline,
        rows,
    })
}
