use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use tcpo_core::trainer::{
    aggregate_curves, kappa_table, read_metrics_csv, sample_efficiency, write_curves_csv, write_efficiency_csv,
    write_kappa_csv, MetricsPoint, Method, TrainConfig,
};

use crate::run::{load_config, CONFIG_FILE};
use crate::{Failure, ReportKind};

/// One training run directory: its config and one metrics stream per seed.
struct RunDir {
    config: TrainConfig,
    seeds: Vec<Vec<MetricsPoint>>,
}

fn seed_dirs(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.join("metrics.csv").is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_run(dir: &Path) -> Result<RunDir, Failure> {
    let config = load_config(&dir.join(CONFIG_FILE))?;
    let mut seeds = Vec::new();
    for sub in seed_dirs(dir)? {
        let file = File::open(sub.join("metrics.csv"))?;
        let points = read_metrics_csv(file).map_err(|e| Failure::Usage(format!("{}: {e}", sub.display())))?;
        seeds.push(points);
    }
    if seeds.is_empty() {
        return Err(Failure::Usage(format!("{}: no metrics files", dir.display())));
    }
    Ok(RunDir { config, seeds })
}

fn label(cfg: &TrainConfig) -> String {
    match cfg.method {
        Method::Tcpo | Method::ApcOnly => format!("{}(kappa={})", cfg.method, cfg.kappa),
        m => m.to_string(),
    }
}

/// Runs grouped by label, in first-appearance order.
fn grouped(runs: &[RunDir]) -> Vec<(String, Vec<Vec<MetricsPoint>>)> {
    let mut groups: Vec<(String, Vec<Vec<MetricsPoint>>)> = Vec::new();
    for r in runs {
        let l = label(&r.config);
        match groups.iter_mut().find(|(g, _)| *g == l) {
            Some((_, seeds)) => seeds.extend(r.seeds.iter().cloned()),
            None => groups.push((l, r.seeds.clone())),
        }
    }
    groups
}

pub fn cmd_report(dirs: &[PathBuf], kind: ReportKind, thresholds: &[f64], out: Option<&Path>) -> Result<(), Failure> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let weights = runs[0].config.world.weights;
    if runs.iter().any(|r| r.config.world.weights != weights) {
        return Err(Failure::Usage("runs use different task-category weights and cannot be aggregated".into()));
    }
    let mut buf = Vec::new();
    match kind {
        ReportKind::Curves => write_curves_csv(&aggregate_curves(&grouped(&runs)), &mut buf)?,
        ReportKind::Efficiency => {
            if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Failure::Usage("thresholds must lie in [0, 1]".into()));
            }
            write_efficiency_csv(&sample_efficiency(&grouped(&runs), thresholds), &mut buf)?
        }
        ReportKind::Kappa => {
            if let Some(r) = runs.iter().find(|r| r.config.method != Method::Tcpo) {
                return Err(Failure::Usage(format!("kappa report needs tcpo runs, got {}", r.config.method)));
            }
            let mut columns: Vec<(f64, Vec<MetricsPoint>)> = Vec::new();
            for r in &runs {
                let finals = r.seeds.iter().filter_map(|s| s.last().cloned());
                match columns.iter_mut().find(|(k, _)| *k == r.config.kappa) {
                    Some((_, col)) => col.extend(finals),
                    None => columns.push((r.config.kappa, finals.collect())),
                }
            }
            columns.sort_by(|a, b| a.0.total_cmp(&b.0));
            let kappas: Vec<f64> = columns.iter().map(|c| c.0).collect();
            let finals: Vec<Vec<MetricsPoint>> = columns.into_iter().map(|c| c.1).collect();
            write_kappa_csv(&kappa_table(&kappas, &finals), &mut buf)?
        }
    }
    match out {
        Some(p) => fs::write(p, &buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}
