use std::collections::BTreeMap;
use std::io::Write;

use super::config::{Method, TrainConfig};
use super::online::{run_online, MetricsPoint, RunResult};
use super::sft::SftResult;
use super::TrainerError;
use crate::exec::Exec;
use crate::questworld::TaskCategory;

pub const DEFAULT_KAPPAS: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
pub const TABLE_ROWS: [&str; 5] = ["Pick", "Pick2", "Clean", "Examine", "Avg"];

/// Final success per category (rows) and κ (columns), averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaTable {
    pub kappas: Vec<f64>,
    /// `cells[row][column]`, rows in [`TABLE_ROWS`] order; `None` for
    /// categories with zero sampling weight.
    pub cells: Vec<Vec<Option<f64>>>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance, shifted by the first value so that identical inputs
/// give exactly zero.
pub fn variance(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else { return 0.0 };
    let n = xs.len() as f64;
    let (s, ss) = xs.iter().fold((0.0, 0.0), |(s, ss), x| (s + (x - x0), ss + (x - x0) * (x - x0)));
    ((ss - s * s / n) / n).max(0.0)
}

/// Builds the table from final metrics, one list of seed runs per κ.
pub fn kappa_table(kappas: &[f64], finals: &[Vec<MetricsPoint>]) -> KappaTable {
    let mut cells = vec![vec![None; kappas.len()]; TABLE_ROWS.len()];
    for (col, runs) in finals.iter().enumerate() {
        for c in TaskCategory::ALL {
            let vals: Vec<f64> = runs.iter().filter_map(|p| p.per_category[c.index()]).collect();
            if !vals.is_empty() {
                cells[c.index()][col] = Some(mean(&vals));
            }
        }
        if !runs.is_empty() {
            cells[4][col] = Some(mean(&runs.iter().map(|p| p.success_weighted).collect::<Vec<_>>()));
        }
    }
    KappaTable { kappas: kappas.to_vec(), cells }
}

pub fn write_kappa_csv<W: Write>(table: &KappaTable, out: W) -> Result<(), TrainerError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["task".to_string()];
    header.extend(table.kappas.iter().map(|k| format!("kappa={k}")));
    w.write_record(&header)?;
    for (label, row) in TABLE_ROWS.iter().zip(&table.cells) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(|c| c.map_or_else(String::new, |v| v.to_string())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One TCPO run per (κ, seed) from a shared behaviour-cloned start.
pub fn run_kappa_sweep(cfg: &TrainConfig, kappas: &[f64], sft: &SftResult, exec: Exec) -> Result<(KappaTable, Vec<Vec<RunResult>>), TrainerError> {
    if kappas.is_empty() {
        return Err(TrainerError::Config("kappas must not be empty".into()));
    }
    let mut runs = Vec::new();
    for &kappa in kappas {
        let c = TrainConfig { method: Method::Tcpo, kappa, ..cfg.clone() };
        let col = cfg
            .seeds
            .iter()
            .map(|&s| run_online(&c, s, &sft.params, &sft.reference, exec))
            .collect::<Result<Vec<_>, _>>()?;
        runs.push(col);
    }
    let finals: Vec<Vec<MetricsPoint>> = runs.iter().map(|col| col.iter().map(|r| r.final_row().into()).collect()).collect();
    Ok((kappa_table(kappas, &finals), runs))
}

/// First environment step at which weighted success reaches `threshold`.
pub fn steps_to_threshold(points: &[MetricsPoint], threshold: f64) -> Option<u64> {
    points.iter().find(|p| p.success_weighted >= threshold).map(|p| p.step)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EfficiencyCell {
    /// Mean steps over runs; every run reached the threshold.
    Steps(f64),
    /// Only `reached` of `runs` runs got there; no mean is reported.
    Censored { reached: usize, runs: usize },
}

impl std::fmt::Display for EfficiencyCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EfficiencyCell::Steps(s) => write!(f, "{s}"),
            EfficiencyCell::Censored { reached, runs } => write!(f, "censored({reached}/{runs})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyTable {
    pub thresholds: Vec<f64>,
    pub rows: Vec<(String, Vec<EfficiencyCell>)>,
}

/// Mean steps to each threshold per method, censoring thresholds that some
/// run never reached.
pub fn sample_efficiency(streams: &[(String, Vec<Vec<MetricsPoint>>)], thresholds: &[f64]) -> EfficiencyTable {
    let rows = streams
        .iter()
        .map(|(label, runs)| {
            let cells = thresholds
                .iter()
                .map(|&t| {
                    let hits: Vec<f64> = runs.iter().filter_map(|r| steps_to_threshold(r, t)).map(|s| s as f64).collect();
                    if hits.len() == runs.len() && !runs.is_empty() {
                        EfficiencyCell::Steps(mean(&hits))
                    } else {
                        EfficiencyCell::Censored { reached: hits.len(), runs: runs.len() }
                    }
                })
                .collect();
            (label.clone(), cells)
        })
        .collect();
    EfficiencyTable { thresholds: thresholds.to_vec(), rows }
}

pub fn write_efficiency_csv<W: Write>(table: &EfficiencyTable, out: W) -> Result<(), TrainerError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method".to_string()];
    header.extend(table.thresholds.iter().map(|t| format!("success_rate={t}")));
    w.write_record(&header)?;
    for (label, cells) in &table.rows {
        let mut rec = vec![label.clone()];
        rec.extend(cells.iter().map(ToString::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One long-format curve point: weighted success at a checkpoint across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub label: String,
    pub checkpoint: u64,
    pub runs: usize,
    pub mean_step: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn aggregate_curves(groups: &[(String, Vec<Vec<MetricsPoint>>)]) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    for (label, runs) in groups {
        let mut at: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for p in runs.iter().flatten() {
            let e = at.entry(p.checkpoint).or_default();
            e.0.push(p.step as f64);
            e.1.push(p.success_weighted);
        }
        for (checkpoint, (steps, vals)) in at {
            out.push(CurvePoint {
                label: label.clone(),
                checkpoint,
                runs: vals.len(),
                mean_step: mean(&steps),
                mean: mean(&vals),
                variance: variance(&vals),
            });
        }
    }
    out
}

pub fn write_curves_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<(), TrainerError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "checkpoint", "runs", "mean_step", "mean", "variance"])?;
    for p in points {
        w.write_record([
            p.label.clone(),
            p.checkpoint.to_string(),
            p.runs.to_string(),
            p.mean_step.to_string(),
            p.mean.to_string(),
            p.variance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
