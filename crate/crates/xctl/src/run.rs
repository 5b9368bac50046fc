use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tcpo_core::micropolicy::{freeze_reference, load_checkpoint, save_checkpoint, PolicyParams, ReferencePolicy};
use tcpo_core::trainer::{run_online, run_sft, write_metrics_csv, Method, TrainConfig, TrainerError};
use tcpo_core::trajectory::write_jsonl;
use tcpo_core::Exec;

use crate::Failure;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub kappa: Option<f64>,
    pub seed: Option<u64>,
}

/// Written next to the outputs of every command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub method: String,
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
    /// Output files relative to the run directory.
    pub outputs: Vec<String>,
    pub provenance: String,
    pub summary: Value,
}

pub fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    Ok(TrainConfig::from_json(&text)?)
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn output_root() -> PathBuf {
    std::env::var_os("XCTL_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// The identity of one invocation: what was run and on which inputs.
struct Run {
    id: String,
    dir: PathBuf,
    command: &'static str,
    method: Method,
    hash: String,
    started_at: String,
    outputs: Vec<String>,
}

impl Run {
    fn create(command: &'static str, cfg: &TrainConfig, identity: &Value) -> Result<Self, Failure> {
        let hash = sha256_hex(canonical_json(identity).as_bytes());
        let id = format!("{command}-{}-{}", cfg.method, &hash[..12]);
        let dir = output_root().join(&id);
        fs::create_dir_all(&dir)?;
        let config_text = serde_json::to_string_pretty(&serde_json::to_value(cfg).expect("config serializes")).expect("json");
        fs::write(dir.join(CONFIG_FILE), config_text + "\n")?;
        Ok(Self {
            id,
            dir,
            command,
            method: cfg.method,
            hash,
            started_at: now(),
            outputs: vec![CONFIG_FILE.to_string()],
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf, Failure> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.outputs.push(rel.to_string());
        Ok(p)
    }

    fn finish(&mut self, status: &str, summary: Value) -> Result<(), Failure> {
        self.outputs.push(MANIFEST_FILE.to_string());
        let manifest = RunManifest {
            run_id: self.id.clone(),
            command: self.command.to_string(),
            method: self.method.to_string(),
            config_hash: self.hash.clone(),
            started_at: self.started_at.clone(),
            finished_at: now(),
            status: status.to_string(),
            outputs: self.outputs.clone(),
            provenance: format!("xctl-v{}-g{}", env!("CARGO_PKG_VERSION"), &self.hash[..12]),
            summary,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.dir.join(MANIFEST_FILE), text + "\n")?;
        println!("{}", self.dir.display());
        Ok(())
    }
}

fn writer(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path)?))
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

pub fn cmd_sft(config: &Path, exec: Exec) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let identity = json!({ "command": "sft", "config": cfg });
    let mut run = Run::create("sft", &cfg, &identity)?;
    let sft = run_sft(&cfg, exec)?;
    save_checkpoint(&sft.params, &run.path("sft.ckpt")?).map_err(runtime)?;
    run.finish("ok", json!({ "epoch_losses": sft.epoch_losses, "examples": sft.examples }))
}

fn apply_overrides(mut cfg: TrainConfig, o: &Overrides) -> Result<TrainConfig, Failure> {
    if let Some(m) = o.method {
        cfg.method = m;
    }
    if let Some(k) = o.kappa {
        cfg.kappa = k;
    }
    if let Some(s) = o.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(config: &Path, overrides: &Overrides, checkpoint: Option<&Path>, exec: Exec) -> Result<(), Failure> {
    let cfg = apply_overrides(load_config(config)?, overrides)?;
    let init = match checkpoint {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Failure::Usage(format!("cannot read checkpoint {}: {e}", p.display())))?;
            let params = load_checkpoint(p).map_err(|e| Failure::Usage(format!("checkpoint {}: {e}", p.display())))?;
            if *params.dims() != cfg.policy.dims() {
                return Err(Failure::Usage(format!(
                    "checkpoint {} has shape {:?}, config expects {:?}",
                    p.display(),
                    params.dims(),
                    cfg.policy.dims()
                )));
            }
            Some((params, sha256_hex(&bytes)))
        }
        None => None,
    };
    let identity = json!({
        "command": "train",
        "config": cfg,
        "init": init.as_ref().map_or_else(|| "sft".to_string(), |(_, h)| h.clone()),
    });
    let mut run = Run::create("train", &cfg, &identity)?;

    let (params, reference): (PolicyParams, ReferencePolicy) = match init {
        Some((params, _)) => {
            let reference = freeze_reference(&params);
            (params, reference)
        }
        None => {
            let sft = run_sft(&cfg, exec)?;
            save_checkpoint(&sft.params, &run.path("sft.ckpt")?).map_err(runtime)?;
            (sft.params, sft.reference)
        }
    };

    let mut summary = Vec::new();
    for &seed in &cfg.seeds {
        let sub = format!("seed-{seed}");
        match run_online(&cfg, seed, &params, &reference, exec) {
            Ok(result) => {
                let mut w = writer(&run.path(&format!("{sub}/metrics.csv"))?)?;
                write_metrics_csv(&result.rows, &mut w)?;
                w.flush()?;
                let mut w = writer(&run.path(&format!("{sub}/trajectories.jsonl"))?)?;
                write_jsonl(&result.log, &mut w).map_err(runtime)?;
                w.flush()?;
                save_checkpoint(&result.params, &run.path(&format!("{sub}/final.ckpt"))?).map_err(runtime)?;
                let last = result.final_row();
                summary.push(json!({
                    "seed": seed,
                    "env_steps": result.env_steps,
                    "updates": result.updates,
                    "final_success": last.eval.weighted,
                    "reference_intact": result.reference_intact,
                }));
            }
            Err(TrainerError::NonFinite { step, detail, last_good }) => {
                save_checkpoint(&last_good, &run.path(&format!("{sub}/last_good.ckpt"))?).map_err(runtime)?;
                summary.push(json!({ "seed": seed, "failed_at_step": step, "detail": detail }));
                run.finish("failed", Value::Array(summary))?;
                return Err(Failure::Runtime(format!("seed {seed}: non-finite value at env step {step}: {detail}")));
            }
            Err(e) => {
                run.finish("failed", Value::Array(summary))?;
                return Err(e.into());
            }
        }
    }
    run.finish("ok", Value::Array(summary))
}
