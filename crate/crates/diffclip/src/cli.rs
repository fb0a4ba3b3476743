//! Command-line entry point: data generation, training, evaluation,
//! parameter audits, and attention-map export as one binary with
//! subcommands.
//!
//! Training reads a flat key=value config file (UTF-8, `#` comments, one
//! pair per line); command-line `--set key=value` overrides win over file
//! values, and unknown keys are rejected with their line number. Every
//! command prints its resolved configuration before doing work and fails
//! with a single machine-parsable line `ERROR <code>: <message>`:
//! 2 = missing file, 3 = bad configuration, 4 = numerical abort.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::audit::{b16_shapes, param_audit, toy_shapes};
use crate::data::{build_corpus, load_dataset, Split};
use crate::encoders::{ModelVariant, ModelWeights};
use crate::error::{Error, Result};
use crate::eval::{
    embed_split, eval_threads, retrieval_recall, zero_shot_eval, ClassSet, EvalReport,
    linear_probe, ProbeConfig,
};
use crate::train::{train, ModelDims, TrainConfig};

/// All keys a training config file may set.
const KNOWN_KEYS: [&str; 22] = [
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "warmup_epochs",
    "seed",
    "variant",
    "embed_dim",
    "vision.depth",
    "vision.model_dim",
    "vision.heads",
    "vision.mlp_ratio",
    "vision.image_side",
    "vision.patch_size",
    "text.depth",
    "text.model_dim",
    "text.heads",
    "text.mlp_ratio",
    "text.context_len",
    "dataset",
    "checkpoint",
    "metrics",
];

/// Resolved flat configuration: defaults, then file values, then overrides.
#[derive(Clone, Debug)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let defaults = TrainConfig::default();
        let dims = ModelDims::default();
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("epochs", defaults.epochs.to_string());
        put("batch_size", defaults.batch_size.to_string());
        put("lr", defaults.learning_rate.to_string());
        put("weight_decay", defaults.weight_decay.to_string());
        put("warmup_epochs", defaults.warmup_epochs.to_string());
        put("seed", defaults.seed.to_string());
        put("variant", defaults.variant.name().to_string());
        put("embed_dim", dims.embed_dim.to_string());
        put("vision.depth", dims.vision_depth.to_string());
        put("vision.model_dim", dims.vision_dim.to_string());
        put("vision.heads", dims.vision_heads.to_string());
        put("vision.mlp_ratio", dims.vision_mlp_ratio.to_string());
        put("vision.image_side", dims.image_side.to_string());
        put("vision.patch_size", dims.patch_size.to_string());
        put("text.depth", dims.text_depth.to_string());
        put("text.model_dim", dims.text_dim.to_string());
        put("text.heads", dims.text_heads.to_string());
        put("text.mlp_ratio", dims.text_mlp_ratio.to_string());
        put("text.context_len", dims.context_len.to_string());
        put("dataset", "data".to_string());
        put("checkpoint", "model.ckpt".to_string());
        put("metrics", "metrics.tsv".to_string());
        RunConfig { map }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parse a config file; `#` starts a comment, blank lines are skipped,
    /// unknown keys are rejected with their 1-based line number.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(Error::Config(format!(
                    "{}:{}: unknown config key: {k}",
                    path.display(),
                    i + 1
                )));
            }
            self.map.insert(k.to_string(), v.to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.map.get(key).map(|s| s.as_str()).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {}", self.get(key))))
    }

    pub fn dims(&self) -> Result<ModelDims> {
        Ok(ModelDims {
            vision_depth: self.parse("vision.depth")?,
            vision_dim: self.parse("vision.model_dim")?,
            vision_heads: self.parse("vision.heads")?,
            vision_mlp_ratio: self.parse("vision.mlp_ratio")?,
            image_side: self.parse("vision.image_side")?,
            patch_size: self.parse("vision.patch_size")?,
            text_depth: self.parse("text.depth")?,
            text_dim: self.parse("text.model_dim")?,
            text_heads: self.parse("text.heads")?,
            text_mlp_ratio: self.parse("text.mlp_ratio")?,
            context_len: self.parse("text.context_len")?,
            embed_dim: self.parse("embed_dim")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            learning_rate: self.parse("lr")?,
            weight_decay: self.parse("weight_decay")?,
            warmup_epochs: self.parse("warmup_epochs")?,
            seed: self.parse("seed")?,
            variant: ModelVariant::parse(self.get("variant"))?,
            dims: self.dims()?,
            checkpoint_path: PathBuf::from(self.get("checkpoint")),
            metrics_path: PathBuf::from(self.get("metrics")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn print_resolved(&self) {
        println!("resolved configuration:");
        for (k, v) in &self.map {
            println!("  {k}={v}");
        }
    }
}

fn error_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 2,
        Error::Config(_) | Error::Format(_) | Error::Data(_) => 3,
        Error::Numeric(_) | Error::Tape(_) | Error::Dimension { .. } | Error::Axis { .. } => 4,
    }
}

/// Run a command line; returns the process exit code and prints the
/// `ERROR <code>: <message>` line on failure.
pub fn run(args: &[String]) -> i32 {
    match execute(args) {
        Ok(()) => 0,
        Err(e) => {
            let code = error_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ERROR {code}: {msg}");
            code
        }
    }
}

const USAGE: &str = "\
usage: diffclip <command> [options]

commands:
  gen-data   --out DIR [--n N] [--seed S] [--fractions A,B,C]
  train      [--config FILE] [--variant V] [--dataset DIR] [--set KEY=VALUE ...]
  eval       --checkpoint FILE --dataset DIR --task TASK [--split SPLIT] [--out FILE]
             TASK: zeroshot | retrieval | probe | fewshot
  audit      --shape toy|b16 [--out FILE]
  attn-map   --checkpoint FILE --dataset DIR --image-id N --query TEXT --out PREFIX

variants: clip | diffclip | diffclip-star | diffclip-dagger
env: DIFFATTN_THREADS caps evaluation parallelism (default 1)";

fn execute(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        println!("{USAGE}");
        return Err(Error::Config("no command given".to_string()));
    };
    let rest = &args[1..];
    match command.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "audit" => cmd_audit(rest),
        "attn-map" => cmd_attn_map(rest),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command: {other}"))),
    }
}

/// Split `--flag value` pairs; `--set k=v` may repeat.
fn parse_flags(args: &[String], allowed: &[&str]) -> Result<(BTreeMap<String, String>, Vec<(String, String)>)> {
    let mut flags = BTreeMap::new();
    let mut sets = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let flag = &args[i];
        let name = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected a --flag, got {flag}")))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::Config(format!("flag --{name} needs a value")))?;
        if name == "set" {
            let (k, v) = value
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set needs KEY=VALUE, got {value}")))?;
            sets.push((k.trim().to_string(), v.trim().to_string()));
        } else if allowed.contains(&name) {
            if flags.insert(name.to_string(), value.clone()).is_some() {
                return Err(Error::Config(format!("flag --{name} given twice")));
            }
        } else {
            return Err(Error::Config(format!("unknown flag --{name}")));
        }
        i += 2;
    }
    Ok((flags, sets))
}

fn require<'a>(flags: &'a BTreeMap<String, String>, name: &str) -> Result<&'a str> {
    flags
        .get(name)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Config(format!("missing required flag --{name}")))
}

fn require_file(path: &str) -> Result<()> {
    if !Path::new(path).exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("file not found: {path}"),
        )));
    }
    Ok(())
}

fn print_flag_config(pairs: &[(&str, &str)]) {
    println!("resolved configuration:");
    for (k, v) in pairs {
        println!("  {k}={v}");
    }
}

fn cmd_gen_data(args: &[String]) -> Result<()> {
    let (flags, sets) = parse_flags(args, &["out", "n", "seed", "fractions"])?;
    if !sets.is_empty() {
        return Err(Error::Config("gen-data takes no --set overrides".to_string()));
    }
    let out = require(&flags, "out")?;
    let n: usize = flags.get("n").map(|s| s.parse()).transpose()
        .map_err(|_| Error::Config("bad value for --n".to_string()))?
        .unwrap_or(4000);
    let seed: u64 = flags.get("seed").map(|s| s.parse()).transpose()
        .map_err(|_| Error::Config("bad value for --seed".to_string()))?
        .unwrap_or(0);
    let fractions = match flags.get("fractions") {
        None => [0.8, 0.1, 0.1],
        Some(raw) => {
            let parts: Vec<f64> = raw
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad --fractions value: {raw}")))?;
            if parts.len() != 3 {
                return Err(Error::Config("--fractions needs three comma-separated values".to_string()));
            }
            [parts[0], parts[1], parts[2]]
        }
    };
    print_flag_config(&[
        ("command", "gen-data"),
        ("out", out),
        ("n", &n.to_string()),
        ("seed", &seed.to_string()),
        ("fractions", &format!("{},{},{}", fractions[0], fractions[1], fractions[2])),
    ]);
    let ds = build_corpus(out, n, fractions, seed)?;
    let counts = [Split::Train, Split::Val, Split::Test]
        .map(|s| ds.entries.iter().filter(|e| e.split == s).count());
    println!(
        "wrote {} samples to {out} (train {}, val {}, test {})",
        ds.entries.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<()> {
    let (flags, sets) = parse_flags(args, &["config", "variant", "dataset", "checkpoint", "metrics", "seed"])?;
    let mut cfg = RunConfig::default();
    if let Some(path) = flags.get("config") {
        require_file(path)?;
        cfg.apply_file(Path::new(path))?;
    }
    for (k, v) in &sets {
        cfg.set(k, v)?;
    }
    // Direct flags are the highest-priority overrides.
    for key in ["variant", "dataset", "checkpoint", "metrics", "seed"] {
        if let Some(v) = flags.get(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.print_resolved();
    let dataset_dir = cfg.get("dataset").to_string();
    require_file(&dataset_dir)?;
    let dataset = load_dataset(&dataset_dir)?;
    let train_cfg = cfg.train_config()?;
    let (weights, outcome) = train(&train_cfg, &dataset)?;
    println!(
        "trained {} for {} steps: final loss {:.6}, tau {:.4}, {:.1}s",
        train_cfg.variant.name(),
        outcome.steps,
        outcome.final_loss,
        weights.tau(),
        outcome.wall_clock_seconds
    );
    println!("checkpoint: {}", train_cfg.checkpoint_path.display());
    println!("metrics: {}", train_cfg.metrics_path.display());
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<()> {
    let (flags, sets) = parse_flags(args, &["checkpoint", "dataset", "task", "split", "out"])?;
    if !sets.is_empty() {
        return Err(Error::Config("eval takes no --set overrides".to_string()));
    }
    let checkpoint = require(&flags, "checkpoint")?;
    let dataset_dir = require(&flags, "dataset")?;
    let task = require(&flags, "task")?;
    let split = match flags.get("split").map(|s| s.as_str()) {
        None => Split::Test,
        Some(s) => Split::parse(s).map_err(|e| Error::Config(e.to_string()))?,
    };
    let out = flags.get("out").cloned().unwrap_or_else(|| format!("eval_{task}.txt"));
    print_flag_config(&[
        ("command", "eval"),
        ("checkpoint", checkpoint),
        ("dataset", dataset_dir),
        ("task", task),
        ("split", split.word()),
        ("out", &out),
        ("threads", &eval_threads().to_string()),
    ]);
    require_file(checkpoint)?;
    require_file(dataset_dir)?;
    let weights = ModelWeights::load(checkpoint)?;
    let dataset = load_dataset(dataset_dir)?;
    let threads = eval_threads();
    let start = std::time::Instant::now();

    let mut report = EvalReport::new();
    report.put("task", task);
    report.put("checkpoint", checkpoint);
    report.put("dataset", dataset_dir);
    report.put("split", split.word());
    match task {
        "zeroshot" => {
            let (acc, k) = zero_shot_eval(&weights, &dataset, split, threads)?;
            report.put_fraction("zeroshot_accuracy", acc);
            report.put("num_classes", k);
            report.put_fraction("chance", 1.0 / k as f64);
            println!("zero-shot accuracy on {}: {:.4} ({k} classes)", split.word(), acc);
        }
        "retrieval" => {
            let classes = ClassSet::synthetic();
            let emb = embed_split(&weights, &dataset, split, &classes, threads)?;
            let rec = retrieval_recall(&emb.image_emb, &emb.text_emb, &[1, 5])?;
            for (k, i2t, t2i) in &rec.at {
                report.put_fraction(&format!("recall_at_{k}_image_to_text"), *i2t);
                report.put_fraction(&format!("recall_at_{k}_text_to_image"), *t2i);
                println!("recall@{k}: image->text {:.4}, text->image {:.4}", i2t, t2i);
            }
        }
        "probe" | "fewshot" => {
            // Probe on frozen train-split image embeddings, 4-way shape
            // labels, held-out fifth per class.
            let classes = ClassSet::synthetic();
            let emb = embed_split(&weights, &dataset, Split::Train, &classes, threads)?;
            if task == "probe" {
                let acc = linear_probe(&emb.image_emb, &emb.shape_labels, 4, None, ProbeConfig::default())?;
                report.put_fraction("probe_accuracy", acc);
                report.put("probe_classes", 4);
                println!("linear probe accuracy: {acc:.4}");
            } else {
                for shots in [1usize, 5] {
                    let acc = linear_probe(
                        &emb.image_emb,
                        &emb.shape_labels,
                        4,
                        Some(shots),
                        ProbeConfig::default(),
                    )?;
                    report.put_fraction(&format!("fewshot_{shots}_accuracy"), acc);
                    println!("{shots}-shot probe accuracy: {acc:.4}");
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown task {other}; expected zeroshot|retrieval|probe|fewshot"
            )))
        }
    }
    report.put("wall_clock_seconds", format!("{:.3}", start.elapsed().as_secs_f64()));
    report.save(&out)?;
    println!("report: {out}");
    Ok(())
}

fn cmd_audit(args: &[String]) -> Result<()> {
    let (flags, sets) = parse_flags(args, &["shape", "out"])?;
    if !sets.is_empty() {
        return Err(Error::Config("audit takes no --set overrides".to_string()));
    }
    let shape = require(&flags, "shape")?;
    let out = flags.get("out").cloned().unwrap_or_else(|| format!("audit_{shape}.txt"));
    print_flag_config(&[("command", "audit"), ("shape", shape), ("out", &out)]);
    let shapes = match shape {
        "toy" => toy_shapes(),
        "b16" => b16_shapes(),
        other => return Err(Error::Config(format!("unknown shape {other}; expected toy|b16"))),
    };
    let rep = param_audit(&shapes)?;
    println!("total parameters (standard):     {}", rep.total_standard);
    println!("total parameters (differential): {}", rep.total_differential);
    println!("extra lambda parameters:         {}", rep.extra);
    println!("closed-form check:               {}", rep.closed_form_extra);
    println!("overhead ratio:                  {:.6}%", rep.ratio_percent());
    let mut report = EvalReport::new();
    report.put("shape", shape);
    report.put("total_standard", rep.total_standard);
    report.put("total_differential", rep.total_differential);
    report.put("extra_lambda_params", rep.extra);
    report.put("closed_form_extra", rep.closed_form_extra);
    report.put("overhead_ratio", format!("{:.9e}", rep.ratio));
    report.put("overhead_percent", format!("{:.6}", rep.ratio_percent()));
    report.save(&out)?;
    println!("report: {out}");
    Ok(())
}

fn cmd_attn_map(args: &[String]) -> Result<()> {
    let (flags, sets) = parse_flags(args, &["checkpoint", "dataset", "image-id", "query", "out"])?;
    if !sets.is_empty() {
        return Err(Error::Config("attn-map takes no --set overrides".to_string()));
    }
    let checkpoint = require(&flags, "checkpoint")?;
    let dataset_dir = require(&flags, "dataset")?;
    let image_id: usize = require(&flags, "image-id")?
        .parse()
        .map_err(|_| Error::Config("bad value for --image-id".to_string()))?;
    let query = require(&flags, "query")?;
    let out = require(&flags, "out")?;
    print_flag_config(&[
        ("command", "attn-map"),
        ("checkpoint", checkpoint),
        ("dataset", dataset_dir),
        ("image-id", &image_id.to_string()),
        ("query", query),
        ("out", out),
    ]);
    require_file(checkpoint)?;
    require_file(dataset_dir)?;
    let weights = ModelWeights::load(checkpoint)?;
    let dataset = load_dataset(dataset_dir)?;
    let entry = dataset
        .entries
        .iter()
        .find(|e| e.id == image_id)
        .ok_or_else(|| Error::Config(format!("no image with id {image_id} in the dataset")))?;
    let image = dataset.load_image(entry)?;
    let map = crate::attnmap::attention_map(&weights, &image, query, &dataset.vocab)?;
    let pgm = format!("{out}.pgm");
    let csv = format!("{out}.csv");
    map.write_pgm(&pgm)?;
    map.write_csv(&csv)?;
    println!("image {image_id} (\"{}\") vs query \"{query}\"", entry.caption);
    println!("heatmap: {pgm} and {csv}");
    Ok(())
}
