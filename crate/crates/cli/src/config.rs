//! Key-value run configuration.
//!
//! One `key = value` pair per line; blank lines and lines starting with `#`
//! are ignored. Keys are the [`TrainConfig`] fields (model fields unprefixed)
//! plus `seed`, which sets all three seeds at once.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dgkt_core::pipeline::TrainConfig;

pub const KEYS: &[&str] = &[
    "preset",
    "d",
    "n_heads",
    "n_layers",
    "encoder",
    "seqin",
    "positional",
    "max_len",
    "eps",
    "k",
    "lr",
    "batch_size",
    "phase1_epochs",
    "phase2_epochs",
    "adapt_epochs",
    "scratch_epochs",
    "lambda",
    "target_batches",
    "clip_norm",
    "eval_every",
    "seed",
    "model_seed",
    "data_seed",
    "cluster_seed",
];

pub fn preset(name: &str) -> Result<TrainConfig> {
    match name {
        "desk" => Ok(TrainConfig::desk()),
        "paper" => Ok(TrainConfig::default()),
        other => bail!("unknown preset `{other}` (expected desk or paper)"),
    }
}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
        let k = k.trim().to_owned();
        if !KEYS.contains(&k.as_str()) {
            bail!("line {}: unknown key `{k}`", n + 1);
        }
        out.push((k, v.trim().to_owned()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pairs(&text).with_context(|| format!("in {}", path.display()))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("{key}: cannot parse `{v}`: {e}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("{key}: expected a boolean, got `{v}`"),
    }
}

/// Applies one setting. `preset` must be handled before calling this.
pub fn apply(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    let m = &mut cfg.model;
    match key {
        "preset" => bail!("preset must come first"),
        "d" => m.d = num(key, v)?,
        "n_heads" => m.n_heads = num(key, v)?,
        "n_layers" => m.n_layers = num(key, v)?,
        "encoder" => m.encoder = v.parse()?,
        "seqin" => m.seqin = flag(key, v)?,
        "positional" => m.positional = flag(key, v)?,
        "max_len" => m.max_len = num(key, v)?,
        "eps" => m.eps = num(key, v)?,
        "k" => cfg.k = num(key, v)?,
        "lr" => cfg.lr = num(key, v)?,
        "batch_size" => cfg.batch_size = num(key, v)?,
        "phase1_epochs" => cfg.phase1_epochs = num(key, v)?,
        "phase2_epochs" => cfg.phase2_epochs = num(key, v)?,
        "adapt_epochs" => cfg.adapt_epochs = num(key, v)?,
        "scratch_epochs" => cfg.scratch_epochs = num(key, v)?,
        "lambda" => cfg.lambda = num(key, v)?,
        "target_batches" => cfg.target_batches = num(key, v)?,
        "clip_norm" => cfg.clip_norm = num(key, v)?,
        "eval_every" => cfg.eval_every = num(key, v)?,
        "seed" => {
            let s = num(key, v)?;
            *cfg = cfg.clone().with_seed(s);
        }
        "model_seed" => cfg.seeds.model = num(key, v)?,
        "data_seed" => cfg.seeds.data = num(key, v)?,
        "cluster_seed" => cfg.seeds.cluster = num(key, v)?,
        other => bail!("unknown key `{other}`"),
    }
    Ok(())
}

/// Preset, then file settings, then flag settings (later wins).
pub fn resolve(
    preset_flag: Option<&str>,
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<TrainConfig> {
    let file_pairs = match file {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let file_preset = file_pairs.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
    let mut cfg = preset(preset_flag.or(file_preset).unwrap_or("desk"))?;
    for (k, v) in file_pairs.iter().chain(overrides) {
        if k != "preset" {
            apply(&mut cfg, k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a config back into the key-value format.
pub fn render(cfg: &TrainConfig) -> String {
    let m = &cfg.model;
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    put("d", m.d.to_string());
    put("n_heads", m.n_heads.to_string());
    put("n_layers", m.n_layers.to_string());
    put("encoder", m.encoder.name().into());
    put("seqin", m.seqin.to_string());
    put("positional", m.positional.to_string());
    put("max_len", m.max_len.to_string());
    put("eps", format!("{:e}", m.eps));
    put("k", cfg.k.to_string());
    put("lr", format!("{:e}", cfg.lr));
    put("batch_size", cfg.batch_size.to_string());
    put("phase1_epochs", cfg.phase1_epochs.to_string());
    put("phase2_epochs", cfg.phase2_epochs.to_string());
    put("adapt_epochs", cfg.adapt_epochs.to_string());
    put("scratch_epochs", cfg.scratch_epochs.to_string());
    put("lambda", cfg.lambda.to_string());
    put("target_batches", cfg.target_batches.to_string());
    put("clip_norm", cfg.clip_norm.to_string());
    put("eval_every", cfg.eval_every.to_string());
    put("model_seed", cfg.seeds.model.to_string());
    put("data_seed", cfg.seeds.data.to_string());
    put("cluster_seed", cfg.seeds.cluster.to_string());
    s
}
