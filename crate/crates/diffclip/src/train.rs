//! The contrastive training loop.
//!
//! Deterministic by construction: a single-threaded step loop, seeded
//! shuffles, and the fixed-order tensor arithmetic underneath mean that one
//! (seed, config, corpus) triple always produces byte-identical metrics logs
//! and checkpoints.

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split, IMAGE_SIDE};
use crate::encoders::{
    bind_model, build_model, encode_image, encode_text, pull_gradients, EncoderConfig, Modality,
    ModelVariant, ModelWeights,
};
use crate::error::{Error, Result};
use crate::objective::{clip_loss_var, similarity_var};
use crate::optim::{clip_global_norm, lr_at, AdamW, AdamWConfig};
use crate::tape::Tape;

/// Architecture knobs shared by both towers, resolved per variant.
#[derive(Clone, Debug)]
pub struct ModelDims {
    pub vision_depth: usize,
    pub vision_dim: usize,
    pub vision_heads: usize,
    pub vision_mlp_ratio: f64,
    pub image_side: usize,
    pub patch_size: usize,
    pub text_depth: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub text_mlp_ratio: f64,
    pub context_len: usize,
    pub embed_dim: usize,
}

impl Default for ModelDims {
    /// Desk-scale defaults, sized so a full four-variant training sweep fits
    /// in the acceptance-suite time budget on one CPU core.
    fn default() -> Self {
        ModelDims {
            vision_depth: 2,
            vision_dim: 64,
            vision_heads: 4,
            vision_mlp_ratio: 2.0,
            image_side: IMAGE_SIDE,
            patch_size: 8,
            text_depth: 2,
            text_dim: 64,
            text_heads: 4,
            text_mlp_ratio: 2.0,
            context_len: 16,
            embed_dim: 32,
        }
    }
}

impl ModelDims {
    /// Config pair for a variant, given the corpus vocabulary size.
    pub fn configs(&self, variant: ModelVariant, vocab_size: usize) -> (EncoderConfig, EncoderConfig) {
        let ((v_var, v_mode), (t_var, t_mode)) = variant.tower_settings();
        let vision = EncoderConfig {
            depth: self.vision_depth,
            model_dim: self.vision_dim,
            num_heads: self.vision_heads,
            mlp_ratio: self.vision_mlp_ratio,
            variant: v_var,
            lambda_init_mode: v_mode,
            modality: Modality::Vision {
                image_side: self.image_side,
                patch_size: self.patch_size,
            },
        };
        let text = EncoderConfig {
            depth: self.text_depth,
            model_dim: self.text_dim,
            num_heads: self.text_heads,
            mlp_ratio: self.text_mlp_ratio,
            variant: t_var,
            lambda_init_mode: t_mode,
            modality: Modality::Text {
                vocab_size,
                context_len: self.context_len,
            },
        };
        (vision, text)
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub variant: ModelVariant,
    pub dims: ModelDims,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 (the contrastive loss is degenerate at 1)"
                    .to_string(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".to_string()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 5e-4,
            weight_decay: 0.5,
            warmup_epochs: 1,
            seed: 0,
            variant: ModelVariant::Clip,
            dims: ModelDims::default(),
            checkpoint_path: PathBuf::from("model.ckpt"),
            metrics_path: PathBuf::from("metrics.tsv"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub wall_clock_seconds: f64,
}

/// Forward one matched batch and return the scalar loss node.
fn batch_loss(
    tape: &mut Tape,
    weights: &ModelWeights,
    bound: &crate::encoders::BoundModel,
    images: &[crate::tensor::Tensor],
    token_rows: &[Vec<u32>],
) -> Result<crate::tape::Var> {
    let u = encode_image(tape, weights, bound, images)?;
    let v = encode_text(tape, weights, bound, token_rows)?;
    // S = (u vT) / tau, with 1/tau = exp(logit_scale).
    let inv_tau = tape.exp(bound.var("logit_scale"))?;
    let s = similarity_var(tape, u, v, inv_tau)?;
    clip_loss_var(tape, s)
}

/// Train a model on the dataset's train split. Writes a per-step metrics log
/// (`step<TAB>epoch<TAB>loss<TAB>lr<TAB>tau`) and the final checkpoint.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<(ModelWeights, TrainOutcome)> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let (vision_cfg, text_cfg) = cfg.dims.configs(cfg.variant, dataset.vocab.len());
    let mut weights = build_model(&vision_cfg, &text_cfg, cfg.dims.embed_dim, cfg.seed)?;
    let split = dataset.load_split(Split::Train, cfg.dims.context_len)?;
    let n_train = split.indices.len();
    if n_train < cfg.batch_size {
        return Err(Error::Config(format!(
            "train split has {n_train} samples, smaller than batch size {}",
            cfg.batch_size
        )));
    }
    let batches_per_epoch = n_train / cfg.batch_size;
    let total_steps = batches_per_epoch * cfg.epochs;
    let warmup_steps = batches_per_epoch * cfg.warmup_epochs;

    let mut optimizer = AdamW::new(&weights, cfg.weight_decay, AdamWConfig::default());
    // Distinct stream from model init so reordering one never shifts the other.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEECE66D);
    let mut log = String::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut final_loss = f64::NAN;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss_sum = 0.0;
        for b in 0..batches_per_epoch {
            let ids = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let images: Vec<_> = ids.iter().map(|&i| split.images[i].clone()).collect();
            let rows: Vec<_> = ids.iter().map(|&i| split.token_rows[i].clone()).collect();

            let lr = lr_at(step, total_steps, warmup_steps, cfg.learning_rate);
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &weights, true);
            let loss_var = batch_loss(&mut tape, &weights, &bound, &images, &rows)?;
            let loss = tape.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at step {step} (epoch {epoch}); aborting"
                )));
            }
            tape.backward(loss_var)?;
            pull_gradients(&tape, &bound, &mut weights);
            drop(tape);
            clip_global_norm(&mut weights, 1.0);
            optimizer.step(&mut weights, lr)?;

            let tau = weights.tau();
            log.push_str(&format!("{step}\t{epoch}\t{loss:.9}\t{lr:.9e}\t{tau:.9}\n"));
            epoch_loss_sum += loss;
            final_loss = loss;
            step += 1;
        }
        epoch_losses.push(epoch_loss_sum / batches_per_epoch as f64);
    }

    if let Some(parent) = cfg.metrics_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(&cfg.metrics_path)?;
    f.write_all(log.as_bytes())?;
    f.flush()?;
    if let Some(parent) = cfg.checkpoint_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    weights.save(&cfg.checkpoint_path)?;

    Ok((
        weights,
        TrainOutcome {
            steps: step,
            epoch_losses,
            final_loss,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Loss of one batch under a frozen model; used for step-0 sanity checks.
pub fn frozen_batch_loss(
    weights: &ModelWeights,
    images: &[crate::tensor::Tensor],
    token_rows: &[Vec<u32>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, weights, false);
    let loss = batch_loss(&mut tape, weights, &bound, images, token_rows)?;
    Ok(tape.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_corpus;

    fn mini_dims() -> ModelDims {
        ModelDims {
            vision_depth: 1,
            vision_dim: 16,
            vision_heads: 2,
            vision_mlp_ratio: 2.0,
            image_side: IMAGE_SIDE,
            patch_size: 16,
            text_depth: 1,
            text_dim: 16,
            text_heads: 2,
            text_mlp_ratio: 2.0,
            context_len: 16,
            embed_dim: 8,
        }
    }

    #[test]
    fn step_zero_loss_is_near_ln_batch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_corpus(dir.path(), 80, [0.8, 0.1, 0.1], 11).unwrap();
        let split = ds.load_split(Split::Train, 16).unwrap();
        for seed in [0u64, 1, 2] {
            let (v, t) = mini_dims().configs(ModelVariant::DiffClip, ds.vocab.len());
            let w = build_model(&v, &t, 8, seed).unwrap();
            let n = 16;
            let images = split.images[..n].to_vec();
            let rows = split.token_rows[..n].to_vec();
            let loss = frozen_batch_loss(&w, &images, &rows).unwrap();
            let expect = (n as f64).ln();
            assert!(
                (loss - expect).abs() < 0.2,
                "seed {seed}: step-0 loss {loss} vs ln {n} = {expect}"
            );
        }
    }

    #[test]
    fn short_training_run_is_deterministic_and_learns() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_corpus(dir.path(), 64, [0.8, 0.1, 0.1], 5).unwrap();
        let mk_cfg = |tag: &str| TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 5e-4,
            weight_decay: 0.5,
            warmup_epochs: 1,
            seed: 7,
            variant: ModelVariant::DiffClip,
            dims: mini_dims(),
            checkpoint_path: dir.path().join(format!("{tag}.ckpt")),
            metrics_path: dir.path().join(format!("{tag}.tsv")),
        };
        let (_, out_a) = train(&mk_cfg("a"), &ds).unwrap();
        let (_, _out_b) = train(&mk_cfg("b"), &ds).unwrap();
        assert_eq!(out_a.steps, 18);
        // Byte-identical artifacts across runs.
        assert_eq!(
            std::fs::read(dir.path().join("a.ckpt")).unwrap(),
            std::fs::read(dir.path().join("b.ckpt")).unwrap()
        );
        assert_eq!(
            std::fs::read(dir.path().join("a.tsv")).unwrap(),
            std::fs::read(dir.path().join("b.tsv")).unwrap()
        );
        // Loss moves down from the uniform baseline.
        assert!(out_a.epoch_losses[2] < out_a.epoch_losses[0]);
    }

    #[test]
    fn metrics_log_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_corpus(dir.path(), 32, [0.8, 0.1, 0.1], 2).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            dims: mini_dims(),
            checkpoint_path: dir.path().join("m.ckpt"),
            metrics_path: dir.path().join("m.tsv"),
            ..TrainConfig::default()
        };
        train(&cfg, &ds).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.tsv")).unwrap();
        for (i, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 5, "line {i}");
            let _: usize = cols[0].parse().unwrap();
            let _: usize = cols[1].parse().unwrap();
            let _: f64 = cols[2].parse().unwrap();
            let _: f64 = cols[3].parse().unwrap();
            let _: f64 = cols[4].parse().unwrap();
        }
        assert!(!text.is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
