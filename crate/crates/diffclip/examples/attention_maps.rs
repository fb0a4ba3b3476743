//! Export class-token attention heatmaps for an image under two text
//! queries, as PGM images plus raw CSV values.
//!
//! ```bash
//! cargo run --release --example attention_maps
//! ```

use diffclip::attnmap::attention_map;
use diffclip::data::{render, SampleSpec, Vocabulary};
use diffclip::encoders::{build_model, ModelVariant};
use diffclip::train::ModelDims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("diffclip_example_maps");
    std::fs::create_dir_all(&out_dir)?;

    let dims = ModelDims::default();
    let (vision, text) = dims.configs(ModelVariant::DiffClip, 23);
    let weights = build_model(&vision, &text, dims.embed_dim, 0)?;

    let spec = SampleSpec {
        shape: diffclip::data::ShapeKind::Circle,
        color: diffclip::data::Color::Green,
        size: diffclip::data::SizeClass::Large,
        position: diffclip::data::Position::Left,
        noise_amplitude: 0.15,
    };
    let image = render(&spec, 7)?;
    let vocab = Vocabulary::synthetic();

    println!("image: \"{}\" ({}x{} patches)", spec.caption(), 32 / dims.patch_size, 32 / dims.patch_size);
    for query in ["a green circle", "a red square"] {
        let map = attention_map(&weights, &image, query, &vocab)?;
        let stem = out_dir.join(query.replace(' ', "_"));
        map.write_pgm(stem.with_extension("pgm"))?;
        map.write_csv(stem.with_extension("csv"))?;
        println!("\nquery \"{query}\" -> {}.pgm/.csv", stem.display());
        for r in 0..map.grid {
            let row: Vec<String> = (0..map.grid)
                .map(|c| format!("{:4.2}", map.normalized[r * map.grid + c]))
                .collect();
            println!("  {}", row.join(" "));
        }
    }
    println!("\n(untrained weights: maps are near-uniform; train first for focused maps)");
    Ok(())
}
