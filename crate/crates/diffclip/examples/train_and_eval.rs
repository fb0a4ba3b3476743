//! Train a small model on a quick corpus, then run every evaluation
//! protocol: zero-shot classification, retrieval, and linear/few-shot probes.
//!
//! Kept deliberately tiny so it finishes in about a minute; see the README
//! for the full desk-scale recipe.
//!
//! ```bash
//! cargo run --release --example train_and_eval
//! ```

use diffclip::data::{build_corpus, Split};
use diffclip::encoders::ModelVariant;
use diffclip::eval::{embed_split, linear_probe, retrieval_recall, zero_shot_eval, ClassSet, ProbeConfig};
use diffclip::train::{train, ModelDims, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("diffclip_example_train");
    let _ = std::fs::remove_dir_all(&dir);
    let ds = build_corpus(&dir, 600, [0.8, 0.1, 0.1], 0)?;

    let cfg = TrainConfig {
        epochs: 12,
        batch_size: 32,
        variant: ModelVariant::DiffClip,
        dims: ModelDims {
            vision_depth: 1,
            vision_dim: 32,
            text_depth: 1,
            text_dim: 32,
            embed_dim: 16,
            ..ModelDims::default()
        },
        checkpoint_path: dir.join("model.ckpt"),
        metrics_path: dir.join("metrics.tsv"),
        ..TrainConfig::default()
    };
    println!("training {} ...", cfg.variant.name());
    let (weights, out) = train(&cfg, &ds)?;
    println!(
        "{} steps in {:.1}s; epoch loss {:.3} -> {:.3}",
        out.steps,
        out.wall_clock_seconds,
        out.epoch_losses.first().unwrap(),
        out.epoch_losses.last().unwrap()
    );

    let (acc, k) = zero_shot_eval(&weights, &ds, Split::Test, 1)?;
    println!("\nzero-shot on held-out (shape, color) pairs: {acc:.3} ({k} classes, chance {:.3})", 1.0 / k as f64);

    let classes = ClassSet::synthetic();
    let emb = embed_split(&weights, &ds, Split::Val, &classes, 1)?;
    let rec = retrieval_recall(&emb.image_emb, &emb.text_emb, &[1, 5])?;
    for (kk, i2t, t2i) in &rec.at {
        println!("recall@{kk}: image->text {i2t:.3}, text->image {t2i:.3}");
    }

    let train_emb = embed_split(&weights, &ds, Split::Train, &classes, 1)?;
    let probe = linear_probe(&train_emb.image_emb, &train_emb.shape_labels, 4, None, ProbeConfig::default())?;
    println!("linear probe (4-way shape): {probe:.3}");
    for shots in [1usize, 5] {
        let acc = linear_probe(
            &train_emb.image_emb,
            &train_emb.shape_labels,
            4,
            Some(shots),
            ProbeConfig::default(),
        )?;
        println!("{shots}-shot probe: {acc:.3}");
    }
    Ok(())
}
