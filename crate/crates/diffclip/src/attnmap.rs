//! Attention heatmaps: where does the class token look when the image is
//! matched against a text query?
//!
//! Extraction: take the final vision layer's effective attention from the
//! class token to the patch tokens (`A` for standard attention, `A1 -
//! lambda A2` clamped below at zero for differential - negative mass is
//! meaningful in computation but unrenderable as intensity), average over
//! heads, then modulate each patch by the cosine between that patch token's
//! projected embedding and the query's text embedding. The raw field goes to
//! CSV; a min-max normalized copy in [0, 1] goes to a binary PGM.

use std::io::Write;
use std::path::Path;

use crate::attention::AttnCapture;
use crate::data::tokenize;
use crate::data::Vocabulary;
use crate::encoders::{bind_model, encode_single_image_with_tokens, encode_text, Modality, ModelWeights};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct HeatMap {
    /// Patch-grid side length (image side / patch size).
    pub grid: usize,
    /// Raw modulated values, row-major `grid x grid`.
    pub raw: Vec<f64>,
    /// Min-max normalized copy in [0, 1]; constant fields normalize to 1.
    pub normalized: Vec<f64>,
}

impl HeatMap {
    fn from_raw(grid: usize, raw: Vec<f64>) -> Self {
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let normalized = if max - min > 1e-12 {
            raw.iter().map(|v| (v - min) / (max - min)).collect()
        } else {
            vec![1.0; raw.len()]
        };
        HeatMap {
            grid,
            raw,
            normalized,
        }
    }

    /// Binary PGM (P5), one byte per patch cell.
    pub fn write_pgm<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.grid, self.grid)?;
        let bytes: Vec<u8> = self
            .normalized
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    /// Raw values, one CSV row per patch row.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = String::new();
        for r in 0..self.grid {
            let row: Vec<String> = (0..self.grid)
                .map(|c| format!("{:.12e}", self.raw[r * self.grid + c]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Compute the heatmap of one image against one text query.
pub fn attention_map(
    weights: &ModelWeights,
    image: &Tensor,
    query: &str,
    vocab: &Vocabulary,
) -> Result<HeatMap> {
    let Modality::Vision {
        image_side,
        patch_size,
    } = weights.image_cfg.modality
    else {
        return Err(Error::Config("model has no vision tower".to_string()));
    };
    let Modality::Text { context_len, .. } = weights.text_cfg.modality else {
        return Err(Error::Config("model has no text tower".to_string()));
    };
    let grid = image_side / patch_size;
    let patches = grid * grid;
    let differential = weights.image_cfg.variant == crate::attention::AttentionVariant::Differential;

    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, weights, false);
    let mut capture = AttnCapture {
        layer_index: weights.image_cfg.depth,
        heads: Vec::new(),
    };
    let (_, tokens_var) =
        encode_single_image_with_tokens(&mut tape, weights, &bound, image, &mut capture)?;
    if capture.heads.is_empty() {
        return Err(Error::Config("no attention captured".to_string()));
    }

    // Class-token row of each head's effective matrix, clamped for the
    // differential variant, averaged over heads.
    let mut attn = vec![0.0f64; patches];
    for &head in &capture.heads {
        let eff = tape.value(head);
        for p in 0..patches {
            let mut v = eff.at2(0, p + 1);
            if differential {
                v = v.max(0.0);
            }
            attn[p] += v;
        }
    }
    for v in attn.iter_mut() {
        *v /= capture.heads.len() as f64;
    }

    // Patch-token embeddings through the final norm / projection / l2n.
    let patch_states = tape.slice_axis(tokens_var, 0, 1, patches)?;
    let g = bound.var("vision.ln_final.gain");
    let b = bound.var("vision.ln_final.bias");
    let normed = tape.layer_norm(patch_states, g, b, 1e-5)?;
    let proj = tape.matmul(normed, bound.var("vision.proj"))?;
    let patch_emb_var = tape.l2_normalize(proj, 1)?;
    let patch_emb = tape.value(patch_emb_var).clone();

    let rows = vec![tokenize(query, vocab, context_len)?];
    let text_var = encode_text(&mut tape, weights, &bound, &rows)?;
    let text_emb = tape.value(text_var).clone();

    let raw: Vec<f64> = (0..patches)
        .map(|p| {
            let cos: f64 = (0..patch_emb.cols())
                .map(|c| patch_emb.at2(p, c) * text_emb.at2(0, c))
                .sum();
            attn[p] * cos
        })
        .collect();
    Ok(HeatMap::from_raw(grid, raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariant;
    use crate::encoders::build_model;
    use crate::train::ModelDims;

    fn tiny_weights(variant: AttentionVariant) -> ModelWeights {
        let dims = ModelDims {
            vision_depth: 1,
            vision_dim: 16,
            vision_heads: 2,
            patch_size: 8,
            text_depth: 1,
            text_dim: 16,
            text_heads: 2,
            embed_dim: 8,
            ..ModelDims::default()
        };
        let variant_sel = match variant {
            AttentionVariant::Standard => crate::encoders::ModelVariant::Clip,
            AttentionVariant::Differential => crate::encoders::ModelVariant::DiffClip,
        };
        let (v, t) = dims.configs(variant_sel, 23);
        build_model(&v, &t, dims.embed_dim, 5).unwrap()
    }

    fn sample_image() -> Tensor {
        crate::data::render(
            &crate::data::SampleSpec {
                shape: crate::data::ShapeKind::Square,
                color: crate::data::Color::Red,
                size: crate::data::SizeClass::Large,
                position: crate::data::Position::Center,
                noise_amplitude: 0.1,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn heatmap_has_grid_shape_and_unit_peak() {
        for variant in [AttentionVariant::Standard, AttentionVariant::Differential] {
            let w = tiny_weights(variant);
            let vocab = Vocabulary::synthetic();
            let map = attention_map(&w, &sample_image(), "a red square", &vocab).unwrap();
            assert_eq!(map.grid, 4);
            assert_eq!(map.normalized.len(), 16);
            assert!(map.normalized.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = map.normalized.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_normalizes_to_constant() {
        let map = HeatMap::from_raw(2, vec![0.4; 4]);
        assert!(map.normalized.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rigged_position_attention_peaks_on_target_patch() {
        // Zero every weight, then craft positional embeddings so that the
        // class token's first-half query aligns with exactly one patch key,
        // and route values/projection so the text-cosine term is uniform.
        let mut w = tiny_weights(AttentionVariant::Standard);
        for (_, t) in w.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let d = 16;
        let target_patch = 9usize; // 0-based patch index, row 2 col 1
        {
            let pos = w.get_mut("vision.pos_embed").unwrap();
            // cls (row 0) points along e0; the target patch token (row 1 +
            // target) points the same way, others stay zero.
            pos.data_mut()[0] = 8.0;
            pos.data_mut()[(1 + target_patch) * d] = 8.0;
        }
        {
            let wq = w.get_mut("vision.layer1.attn.wq").unwrap();
            for i in 0..d {
                wq.data_mut()[i * d + i] = 1.0;
            }
        }
        {
            let wk = w.get_mut("vision.layer1.attn.wk").unwrap();
            for i in 0..d {
                wk.data_mut()[i * d + i] = 1.0;
            }
        }
        // Layer norm gains stay at zero from the wipe; restore identity-ish
        // affine so signals survive. Bias stays zero.
        for name in ["vision.layer1.ln1.gain", "vision.layer1.ln2.gain", "vision.ln_final.gain", "text.layer1.ln1.gain", "text.layer1.ln2.gain", "text.ln_final.gain"] {
            for v in w.get_mut(name).unwrap().data_mut() {
                *v = 1.0;
            }
        }
        // Make every patch projection equal to the text embedding direction:
        // proj maps everything onto e0, and the text side puts all mass on e0
        // via its projection bias... text tower is all zeros, so its pooled
        // state is zero-normed; instead set text.proj so any normalized
        // hidden state maps to a vector whose first coordinate dominates.
        // Simplest: make ln_final bias of the text tower nonzero on one
        // coordinate and map it through the projection.
        {
            let bias = w.get_mut("text.ln_final.bias").unwrap();
            bias.data_mut()[0] = 1.0;
        }
        {
            let tp = w.get_mut("text.proj").unwrap();
            tp.data_mut()[0] = 1.0; // e0 -> e0
        }
        {
            let vb = w.get_mut("vision.ln_final.bias").unwrap();
            vb.data_mut()[0] = 1.0;
        }
        {
            let vp = w.get_mut("vision.proj").unwrap();
            vp.data_mut()[0] = 1.0;
        }
        // logit_scale wiped to 0 is fine (tau = 1, unused by the map).
        let vocab = Vocabulary::synthetic();
        let img = Tensor::zeros(&[3, 32, 32]);
        let map = attention_map(&w, &img, "a red square", &vocab).unwrap();
        let best = map
            .raw
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, target_patch, "raw map {:?}", map.raw);
        // The peak is unique.
        let peak = map.raw[best];
        assert!(map
            .raw
            .iter()
            .enumerate()
            .all(|(i, &v)| i == best || v < peak - 1e-9));
    }

    #[test]
    fn pgm_and_csv_outputs_are_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let w = tiny_weights(AttentionVariant::Differential);
        let vocab = Vocabulary::synthetic();
        let map = attention_map(&w, &sample_image(), "a red square", &vocab).unwrap();
        let pgm = dir.path().join("map.pgm");
        let csv = dir.path().join("map.csv");
        map.write_pgm(&pgm).unwrap();
        map.write_csv(&csv).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        let header = format!("P5\n{} {}\n255\n", map.grid, map.grid);
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + map.grid * map.grid);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), map.grid);
        for line in text.lines() {
            assert_eq!(line.split(',').count(), map.grid);
            for field in line.split(',') {
                let _: f64 = field.parse().unwrap();
            }
        }
    }
}
