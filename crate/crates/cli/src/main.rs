use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use dgkt_core::data::write_csv;
use dgkt_core::dataset::Dataset;
use dgkt_core::metrics::proxy_a_distance;
use dgkt_core::pipeline::{
    self, adapt_target, attention_maps, evaluate, pooled_test_states, sweep_lambda, train_from_scratch,
    train_phase1_cfl, train_phase2_refine, Checkpoint, JsonlSink, TrainConfig,
};
use dgkt_core::presets::{SyntheticSetup, MIN_TOTAL, SPLIT_RATIO, WINDOW_LENGTH};
use dgkt_core::synth::generate_multisource;

mod config;

#[derive(Parser)]
#[command(name = "dgkt", version, about = "Domain-generalizable knowledge tracing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled synthetic domains as CSV files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Window, filter and split a CSV log into a dataset directory.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        domain_id: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = WINDOW_LENGTH)]
        window_length: usize,
        #[arg(long, default_value_t = MIN_TOTAL)]
        min_total: usize,
        #[arg(long, default_value_t = SPLIT_RATIO)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Concept feature learning followed by prototype refinement.
    TrainSource {
        /// Source dataset directories.
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        sources: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Adapt a refined checkpoint to a target domain.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_parser = ["1", "2", "4", "8"])]
        target_batches: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the target-only baseline on the limited target batches.
    TrainScratch {
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_parser = ["1", "2", "4", "8"])]
        target_batches: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print test metrics of a checkpoint on a dataset as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Proxy A-distance between the pooled knowledge states of two domains.
    ProbeAdistance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adapt once per lambda value and report target AUC.
    SweepLambda {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        values: Vec<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write per-layer, per-head attention weights of a few test sequences.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_sequences: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// New run directory; must not exist or be empty.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    adapt_epochs: Option<usize>,
    #[arg(long)]
    no_seqin: bool,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{s}`");
            };
            out.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.into(), v));
            }
        };
        put("encoder", self.encoder.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("d", self.d.map(|v| v.to_string()));
        put("phase1_epochs", self.phase1_epochs.map(|v| v.to_string()));
        put("phase2_epochs", self.phase2_epochs.map(|v| v.to_string()));
        put("adapt_epochs", self.adapt_epochs.map(|v| v.to_string()));
        if self.no_seqin {
            out.push(("seqin".into(), "false".into()));
        }
        Ok(out)
    }

    fn resolve(&self, extra: &[(String, String)]) -> Result<TrainConfig> {
        let mut ov = self.overrides()?;
        ov.extend_from_slice(extra);
        config::resolve(self.preset.as_deref(), self.config.as_deref(), &ov)
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

struct Run {
    dir: PathBuf,
    started: Instant,
}

impl Run {
    /// Creates the run directory and records config, seeds and version.
    fn create(dir: &Path, command: &str, cfg: &TrainConfig) -> Result<Self> {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            bail!("run directory {} already exists and is not empty", dir.display());
        }
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), config::render(cfg))?;
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
        let info = json!({
            "command": command,
            "seeds": cfg.seeds,
            "git_describe": git_describe(),
            "argv": std::env::args().collect::<Vec<_>>(),
        });
        fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&info)?)?;
        Ok(Self {
            dir: dir.to_owned(),
            started: Instant::now(),
        })
    }

    fn metrics(&self) -> Result<JsonlSink<fs::File>> {
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("metrics.jsonl"))?;
        Ok(JsonlSink(f))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        fs::write(self.dir.join(name), serde_json::to_vec_pretty(value)?)?;
        Ok(())
    }

    fn finish(&self, extra: serde_json::Value) -> Result<()> {
        let path = self.dir.join("run.json");
        let mut info: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
        info["wall_seconds"] = json!(self.started.elapsed().as_secs_f64());
        if let (Some(obj), Some(more)) = (info.as_object_mut(), extra.as_object()) {
            for (k, v) in more {
                obj.insert(k.clone(), v.clone());
            }
        }
        fs::write(&path, serde_json::to_vec_pretty(&info)?)?;
        Ok(())
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn synth(out: &Path, seed: u64) -> Result<()> {
    let setup = SyntheticSetup::desk(seed);
    let ms = generate_multisource(&setup.sources, &setup.target)?;
    fs::create_dir_all(out)?;
    let named = ms
        .sources
        .iter()
        .enumerate()
        .map(|(i, d)| (format!("source_{i}"), d))
        .chain([("target".to_owned(), &ms.target)]);
    let mut manifest = Vec::new();
    for (name, dom) in named {
        write_csv(fs::File::create(out.join(format!("{name}.csv")))?, &dom.interactions)?;
        let mut truth = std::io::BufWriter::new(fs::File::create(out.join(format!("{name}.truth.jsonl")))?);
        for t in &dom.truth {
            serde_json::to_writer(&mut truth, t)?;
            truth.write_all(b"\n")?;
        }
        truth.flush()?;
        manifest.push(json!({
            "name": name,
            "domain_id": dom.spec.domain_id,
            "csv": format!("{name}.csv"),
            "n_interactions": dom.interactions.len(),
        }));
    }
    fs::write(
        out.join("synth.json"),
        serde_json::to_vec_pretty(&json!({ "seed": seed, "setup": setup, "domains": manifest }))?,
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed } => synth(&out, seed),
        Command::Ingest {
            csv,
            domain_id,
            out,
            window_length,
            min_total,
            ratio,
            split_seed,
        } => {
            let ds = Dataset::from_csv(&csv, domain_id, window_length, min_total, ratio, split_seed)?;
            ds.save(&out)?;
            print_json(&json!({
                "domain_id": domain_id,
                "n_questions": ds.spec.n_questions,
                "n_concepts": ds.spec.n_concepts,
                "train": ds.split.train.len(),
                "test": ds.split.test.len(),
            }))
        }
        Command::TrainSource { sources, run } => {
            let cfg = run.resolve(&[])?;
            let datasets = sources.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Dataset> = datasets.iter().collect();
            let r = Run::create(&run.run_dir, "train-source", &cfg)?;
            let mut sink = r.metrics()?;
            let c1 = train_phase1_cfl(&refs, &cfg, &mut sink)?;
            c1.save(&r.dir.join("checkpoint_cfl.json"))?;
            let c2 = train_phase2_refine(&c1, &refs, &mut sink)?;
            c2.save(&r.dir.join("checkpoint.json"))?;
            let protos = c2.prototype_table()?;
            r.write_json(
                "prototypes.json",
                &json!({ "labels": protos.labels, "domains": protos.domains, "assignment": protos.assignment() }),
            )?;
            r.finish(json!({ "lineage": c2.lineage }))
        }
        Command::Adapt {
            checkpoint,
            target,
            target_batches,
            lambda,
            run,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut extra = Vec::new();
            if let Some(b) = target_batches {
                extra.push(("target_batches".into(), b));
            }
            if let Some(l) = lambda {
                extra.push(("lambda".into(), l.to_string()));
            }
            // the architecture comes from the checkpoint; only run settings apply
            let mut cfg = ckpt.config.clone();
            for (k, v) in run.overrides()?.into_iter().chain(extra) {
                config::apply(&mut cfg, &k, &v)?;
            }
            if cfg.model != ckpt.config.model {
                bail!("model settings cannot change after source training");
            }
            cfg.validate()?;
            let ds = load_dataset(&target)?;
            let r = Run::create(&run.run_dir, "adapt", &cfg)?;
            let mut base = ckpt.clone();
            base.config = cfg.clone();
            let before = base.frozen_digest();
            let adapted = adapt_target(&base, &ds, &mut r.metrics()?)?;
            if adapted.frozen_digest() != before {
                bail!("parameters outside the target concept table changed during adaptation");
            }
            adapted.save(&r.dir.join("checkpoint.json"))?;
            let n_seq = cfg.target_batches * cfg.batch_size;
            r.finish(json!({
                "source_checkpoint": checkpoint,
                "target_sequences": n_seq.min(ds.split.train.len() / cfg.batch_size * cfg.batch_size),
                "frozen_digest": before,
            }))
        }
        Command::TrainScratch {
            target,
            target_batches,
            run,
        } => {
            let extra: Vec<(String, String)> =
                target_batches.into_iter().map(|b| ("target_batches".into(), b)).collect();
            let cfg = run.resolve(&extra)?;
            let ds = load_dataset(&target)?;
            let r = Run::create(&run.run_dir, "train-scratch", &cfg)?;
            let ckpt = train_from_scratch(&ds, &cfg, &mut r.metrics()?)?;
            ckpt.save(&r.dir.join("checkpoint.json"))?;
            r.finish(json!({ "lineage": ckpt.lineage }))
        }
        Command::Eval { checkpoint, dataset } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let s = evaluate(&ckpt, &ds)?;
            print_json(&pipeline::MetricRecord {
                phase: ckpt.phase,
                epoch: ckpt.lineage.last().map_or(0, |l| l.epochs),
                domain: ds.spec.domain_id,
                auc: s.auc,
                acc: s.acc,
                loss: s.loss,
                n_predictions: s.n_predictions,
            })
        }
        Command::ProbeAdistance { checkpoint, a, b, seed } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (da, db) = (load_dataset(&a)?, load_dataset(&b)?);
            let fa = pooled_test_states(&ckpt, &da)?;
            let fb = pooled_test_states(&ckpt, &db)?;
            let value = proxy_a_distance(&fa, &fb, seed)?;
            print_json(&json!({
                "pair": [da.spec.domain_id, db.spec.domain_id],
                "value": value,
                "seed": seed,
            }))
        }
        Command::SweepLambda {
            checkpoint,
            target,
            values,
            run,
        } => {
            if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                bail!("lambda values must lie in [0, 1]");
            }
            let mut ckpt = load_checkpoint(&checkpoint)?;
            for (k, v) in run.overrides()? {
                config::apply(&mut ckpt.config, &k, &v)?;
            }
            let ds = load_dataset(&target)?;
            let r = Run::create(&run.run_dir, "sweep-lambda", &ckpt.config)?;
            let points = sweep_lambda(&ckpt, &ds, &values)?;
            r.write_json("sweep.json", &points)?;
            r.finish(json!({ "source_checkpoint": checkpoint }))?;
            print_json(&points)
        }
        Command::ExportAttention {
            checkpoint,
            dataset,
            out,
            n_sequences,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let seqs: Vec<_> = ds.split.test.iter().take(n_sequences.max(1)).cloned().collect();
            let maps = attention_maps(&ckpt, &ds, &seqs)?;
            let heads = ckpt.config.model.n_heads;
            let layers: Vec<_> = maps
                .iter()
                .enumerate()
                .map(|(l, per)| {
                    let entries: Vec<_> = per
                        .iter()
                        .enumerate()
                        .map(|(i, m)| {
                            json!({
                                "student_id": seqs[i / heads].student_id,
                                "head": i % heads,
                                "weights": m.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                            })
                        })
                        .collect();
                    json!({ "layer": l, "maps": entries })
                })
                .collect();
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(
                &out,
                serde_json::to_vec(&json!({ "encoder": ckpt.config.model.encoder, "layers": layers }))?,
            )?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
