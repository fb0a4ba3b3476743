//! Generate a small synthetic image-caption corpus and inspect it.
//!
//! ```bash
//! cargo run --release --example gen_data
//! ```

use diffclip::data::{build_corpus, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("diffclip_example_corpus");
    let _ = std::fs::remove_dir_all(&dir);
    let ds = build_corpus(&dir, 120, [0.8, 0.1, 0.1], 42)?;

    println!("wrote {} samples to {}", ds.entries.len(), dir.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        let n = ds.entries.iter().filter(|e| e.split == split).count();
        println!("  {:<5} {n} samples", split.word());
    }

    println!("\nfirst five captions:");
    for e in ds.entries.iter().take(5) {
        println!("  [{}] {} ({})", e.id, e.caption, e.split.word());
    }

    // Held-out splits use (shape, color) combinations never seen in training.
    let train_pairs: std::collections::HashSet<_> = ds
        .entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| (e.spec.shape, e.spec.color))
        .collect();
    let test_pairs: std::collections::HashSet<_> = ds
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| (e.spec.shape, e.spec.color))
        .collect();
    println!(
        "\ntrain covers {} (shape, color) pairs; test holds out {:?}",
        train_pairs.len(),
        test_pairs
            .iter()
            .map(|(s, c)| format!("{} {}", c.word(), s.word()))
            .collect::<Vec<_>>()
    );

    let img = ds.load_image(&ds.entries[0])?;
    println!(
        "\nimage tensor: shape {:?}, values in [{:.3}, {:.3}]",
        img.shape(),
        img.data().iter().cloned().fold(f64::INFINITY, f64::min),
        img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    Ok(())
}
