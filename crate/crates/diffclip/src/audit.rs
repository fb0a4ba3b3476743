//! Parameter-overhead audit: exact counts of what the differential variant
//! adds on top of a standard dual encoder.
//!
//! Counting walks the same named-parameter enumeration that model
//! construction uses, so the audit cannot drift from the real models. The
//! lambda reparameterization adds four vectors of length d_h/2 per attention
//! layer (shared across heads): `4 * (d_h / 2) = 2 * d_h` scalars per layer,
//! cross-checked here against the closed form `depth * 4 * (d_h / 2)` per
//! differential tower.

use crate::attention::{AttentionVariant, LambdaInitMode};
use crate::encoders::{count_params, EncoderConfig, Modality};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub total_standard: usize,
    pub total_differential: usize,
    pub extra: usize,
    /// extra / total_standard
    pub ratio: f64,
    pub closed_form_extra: usize,
    pub vision_extra: usize,
    pub text_extra: usize,
}

impl AuditReport {
    pub fn ratio_percent(&self) -> f64 {
        self.ratio * 100.0
    }
}

/// Pair of (standard, differential) configs that differ only in the
/// attention variant.
pub struct AuditShapes {
    pub vision: EncoderConfig,
    pub text: EncoderConfig,
    pub embed_dim: usize,
    /// Which towers flip to differential in the audited variant.
    pub vision_differential: bool,
    pub text_differential: bool,
}

fn with_variant(cfg: &EncoderConfig, differential: bool) -> EncoderConfig {
    EncoderConfig {
        variant: if differential {
            AttentionVariant::Differential
        } else {
            AttentionVariant::Standard
        },
        ..cfg.clone()
    }
}

fn closed_form_tower(cfg: &EncoderConfig) -> usize {
    cfg.depth * 4 * (cfg.head_dim() / 2)
}

pub fn param_audit(shapes: &AuditShapes) -> Result<AuditReport> {
    let std_v = with_variant(&shapes.vision, false);
    let std_t = with_variant(&shapes.text, false);
    let diff_v = with_variant(&shapes.vision, shapes.vision_differential);
    let diff_t = with_variant(&shapes.text, shapes.text_differential);
    for c in [&std_v, &std_t, &diff_v, &diff_t] {
        c.validate()?;
    }
    let total_standard = count_params(&std_v, &std_t, shapes.embed_dim);
    let total_differential = count_params(&diff_v, &diff_t, shapes.embed_dim);
    let extra = total_differential - total_standard;
    let vision_extra = if shapes.vision_differential {
        closed_form_tower(&shapes.vision)
    } else {
        0
    };
    let text_extra = if shapes.text_differential {
        closed_form_tower(&shapes.text)
    } else {
        0
    };
    Ok(AuditReport {
        total_standard,
        total_differential,
        extra,
        ratio: extra as f64 / total_standard as f64,
        closed_form_extra: vision_extra + text_extra,
        vision_extra,
        text_extra,
    })
}

/// The desk-scale training shapes.
pub fn toy_shapes() -> AuditShapes {
    let dims = crate::train::ModelDims::default();
    let (vision, text) = dims.configs(crate::encoders::ModelVariant::Clip, 23);
    AuditShapes {
        vision,
        text,
        embed_dim: dims.embed_dim,
        vision_differential: true,
        text_differential: true,
    }
}

/// CLIP-B/16 shapes: ViT-B/16 vision tower (d = 768, 12 layers, 12 heads,
/// 224x224 at patch 16) and the 512-wide, 12-layer, 8-head text tower with
/// a 49408-token vocabulary, 77-token context, and a 512-d shared space.
pub fn b16_shapes() -> AuditShapes {
    AuditShapes {
        vision: EncoderConfig {
            depth: 12,
            model_dim: 768,
            num_heads: 12,
            mlp_ratio: 4.0,
            variant: AttentionVariant::Standard,
            lambda_init_mode: LambdaInitMode::Constant(0.8),
            modality: Modality::Vision {
                image_side: 224,
                patch_size: 16,
            },
        },
        text: EncoderConfig {
            depth: 12,
            model_dim: 512,
            num_heads: 8,
            mlp_ratio: 4.0,
            variant: AttentionVariant::Standard,
            lambda_init_mode: LambdaInitMode::Constant(0.8),
            modality: Modality::Text {
                vocab_size: 49408,
                context_len: 77,
            },
        },
        embed_dim: 512,
        vision_differential: true,
        text_differential: true,
    }
}
