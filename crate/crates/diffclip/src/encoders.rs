//! Miniature ViT image encoder and causal text encoder, composed from the
//! attention module, plus the named-parameter store and checkpoint format.
//!
//! Both encoders follow the pre-norm residual layout:
//!
//! ```text
//! x = x + Attn(LN1(x));  x = x + W2 gelu(W1 LN2(x))
//! ```
//!
//! The vision tower pools the class token, the text tower pools the hidden
//! state at the first end-of-text position under a causal mask. Each pooled
//! state goes through a final layer norm, a projection into the shared
//! embedding space, and L2 normalization, so every embedding row has unit
//! norm by construction.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    mha_stacked, AttentionConfig, AttentionVariant, AttnCapture, LambdaInitMode, LambdaVars,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD_ID: u32 = 0;
pub const EOT_ID: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"DFCLIP01";
/// Pseudo-tensor entry carrying the flat key=value config text.
const CONFIG_ENTRY: &str = "config";
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum Modality {
    Vision { image_side: usize, patch_size: usize },
    Text { vocab_size: usize, context_len: usize },
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub variant: AttentionVariant,
    pub lambda_init_mode: LambdaInitMode,
    pub modality: Modality,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be positive".to_string()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".to_string()));
        }
        // Attention-side constraints (dims, heads, lambda range).
        self.attention_config(1)?.validate()?;
        match self.modality {
            Modality::Vision {
                image_side,
                patch_size,
            } => {
                if patch_size == 0 || image_side % patch_size != 0 {
                    return Err(Error::Config(format!(
                        "image side {image_side} not divisible by patch size {patch_size}"
                    )));
                }
            }
            Modality::Text {
                vocab_size,
                context_len,
            } => {
                if vocab_size <= EOT_ID as usize {
                    return Err(Error::Config("vocab too small for PAD/EOT".to_string()));
                }
                if context_len < 2 {
                    return Err(Error::Config(
                        "context length must be at least 2 (one token plus EOT)".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.model_dim as f64).round() as usize
    }

    /// Token count per sequence: patches + class token, or the text context.
    pub fn seq_len(&self) -> usize {
        match self.modality {
            Modality::Vision {
                image_side,
                patch_size,
            } => (image_side / patch_size) * (image_side / patch_size) + 1,
            Modality::Text { context_len, .. } => context_len,
        }
    }

    pub fn attention_config(&self, layer_index: usize) -> Result<AttentionConfig> {
        AttentionConfig::new(
            self.model_dim,
            self.num_heads,
            self.variant,
            self.lambda_init_mode,
            layer_index,
        )
    }

    pub fn is_causal(&self) -> bool {
        matches!(self.modality, Modality::Text { .. })
    }
}

/// How a parameter is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
    Const(f64),
}

/// The full named-parameter enumeration for one tower. This is the single
/// source of truth shared by model construction, checkpoint io, and the
/// parameter audit.
fn tower_specs(prefix: &str, cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.model_dim;
    let hidden = cfg.mlp_hidden();
    let mut specs = Vec::new();
    match cfg.modality {
        Modality::Vision {
            image_side,
            patch_size,
        } => {
            let patches = (image_side / patch_size) * (image_side / patch_size);
            let patch_len = 3 * patch_size * patch_size;
            specs.push((format!("{prefix}.patch_embed"), vec![patch_len, d], Init::TruncNormal));
            specs.push((format!("{prefix}.cls_token"), vec![1, d], Init::TruncNormal));
            specs.push((format!("{prefix}.pos_embed"), vec![patches + 1, d], Init::TruncNormal));
        }
        Modality::Text {
            vocab_size,
            context_len,
        } => {
            specs.push((format!("{prefix}.token_embed"), vec![vocab_size, d], Init::TruncNormal));
            specs.push((format!("{prefix}.pos_embed"), vec![context_len, d], Init::TruncNormal));
        }
    }
    for l in 1..=cfg.depth {
        specs.push((format!("{prefix}.layer{l}.ln1.gain"), vec![d], Init::Ones));
        specs.push((format!("{prefix}.layer{l}.ln1.bias"), vec![d], Init::Zeros));
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{prefix}.layer{l}.attn.{w}"), vec![d, d], Init::TruncNormal));
        }
        if cfg.variant == AttentionVariant::Differential {
            let half = cfg.head_dim() / 2;
            for lv in ["lq1", "lk1", "lq2", "lk2"] {
                specs.push((format!("{prefix}.layer{l}.attn.{lv}"), vec![half], Init::Zeros));
            }
        }
        specs.push((format!("{prefix}.layer{l}.ln2.gain"), vec![d], Init::Ones));
        specs.push((format!("{prefix}.layer{l}.ln2.bias"), vec![d], Init::Zeros));
        specs.push((format!("{prefix}.layer{l}.mlp.w1"), vec![d, hidden], Init::TruncNormal));
        specs.push((format!("{prefix}.layer{l}.mlp.w2"), vec![hidden, d], Init::TruncNormal));
    }
    specs.push((format!("{prefix}.ln_final.gain"), vec![d], Init::Ones));
    specs.push((format!("{prefix}.ln_final.bias"), vec![d], Init::Zeros));
    specs
}

fn model_specs(
    image_cfg: &EncoderConfig,
    text_cfg: &EncoderConfig,
    embed_dim: usize,
) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs = tower_specs("vision", image_cfg);
    specs.push(("vision.proj".to_string(), vec![image_cfg.model_dim, embed_dim], Init::TruncNormal));
    specs.extend(tower_specs("text", text_cfg));
    specs.push(("text.proj".to_string(), vec![text_cfg.model_dim, embed_dim], Init::TruncNormal));
    // The learnable temperature, stored CLIP-style as ln(1/tau) so that the
    // similarity multiplier is exp(logit_scale). Initialized to ln(1/0.07).
    specs.push(("logit_scale".to_string(), vec![1], Init::Const((1.0 / 0.07f64).ln())));
    specs
}

/// Total scalar parameter count for a config pair, without materializing
/// any tensors. Used by the parameter audit.
pub fn count_params(image_cfg: &EncoderConfig, text_cfg: &EncoderConfig, embed_dim: usize) -> usize {
    model_specs(image_cfg, text_cfg, embed_dim)
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

/// One dual encoder: every parameter addressable by name, in a fixed order.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub image_cfg: EncoderConfig,
    pub text_cfg: EncoderConfig,
    pub embed_dim: usize,
    pub seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelWeights {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.iter_mut() {
            t.zero_grad();
        }
    }

    /// Temperature tau = 1 / exp(logit_scale).
    pub fn tau(&self) -> f64 {
        (-self.get("logit_scale").expect("logit_scale present").data()[0]).exp()
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    // Box-Muller, resampled until within two standard deviations.
    loop {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

/// Deterministically initialize a dual encoder from a seed: truncated-normal
/// (sigma 0.02) matrices, zero biases and lambda vectors (so the initial
/// lambda equals lambda_init exactly), unit layer-norm gains, and a learnable
/// log-temperature starting at ln(1/0.07).
pub fn build_model(
    image_cfg: &EncoderConfig,
    text_cfg: &EncoderConfig,
    embed_dim: usize,
    seed: u64,
) -> Result<ModelWeights> {
    image_cfg.validate()?;
    text_cfg.validate()?;
    if !matches!(image_cfg.modality, Modality::Vision { .. }) {
        return Err(Error::Config("image_cfg must have vision modality".to_string()));
    }
    if !matches!(text_cfg.modality, Modality::Text { .. }) {
        return Err(Error::Config("text_cfg must have text modality".to_string()));
    }
    if embed_dim == 0 {
        return Err(Error::Config("embed_dim must be positive".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = model_specs(image_cfg, text_cfg, embed_dim);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    let mut index = HashMap::new();
    for (name, shape, init) in specs {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::TruncNormal => (0..numel).map(|_| trunc_normal(&mut rng, 0.02)).collect(),
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Const(v) => vec![v; numel],
        };
        let t = Tensor::new(&shape, data)?.with_grad();
        index.insert(name.clone(), tensors.len());
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelWeights {
        image_cfg: image_cfg.clone(),
        text_cfg: text_cfg.clone(),
        embed_dim,
        seed,
        names,
        tensors,
        index,
    })
}

// ─── checkpoint io ──────────────────────────────────────────────────────

fn config_text(w: &ModelWeights) -> String {
    let mut s = String::new();
    let mut tower = |prefix: &str, cfg: &EncoderConfig| {
        s.push_str(&format!("{prefix}.depth={}\n", cfg.depth));
        s.push_str(&format!("{prefix}.model_dim={}\n", cfg.model_dim));
        s.push_str(&format!("{prefix}.heads={}\n", cfg.num_heads));
        s.push_str(&format!("{prefix}.mlp_ratio={}\n", cfg.mlp_ratio));
        let variant = match cfg.variant {
            AttentionVariant::Standard => "standard",
            AttentionVariant::Differential => "differential",
        };
        s.push_str(&format!("{prefix}.variant={variant}\n"));
        let mode = match cfg.lambda_init_mode {
            LambdaInitMode::Constant(v) => format!("constant:{v}"),
            LambdaInitMode::Dynamic => "dynamic".to_string(),
        };
        s.push_str(&format!("{prefix}.lambda_init={mode}\n"));
        match cfg.modality {
            Modality::Vision {
                image_side,
                patch_size,
            } => {
                s.push_str(&format!("{prefix}.image_side={image_side}\n"));
                s.push_str(&format!("{prefix}.patch_size={patch_size}\n"));
            }
            Modality::Text {
                vocab_size,
                context_len,
            } => {
                s.push_str(&format!("{prefix}.vocab_size={vocab_size}\n"));
                s.push_str(&format!("{prefix}.context_len={context_len}\n"));
            }
        }
    };
    tower("vision", &w.image_cfg);
    tower("text", &w.text_cfg);
    s.push_str(&format!("embed_dim={}\n", w.embed_dim));
    s.push_str(&format!("seed={}\n", w.seed));
    s
}

fn parse_config_text(text: &str) -> Result<(EncoderConfig, EncoderConfig, usize, u64)> {
    let mut kv = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad checkpoint config line: {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::Format(format!("checkpoint config missing key {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad integer for {k}")))
    };
    let tower = |prefix: &str| -> Result<EncoderConfig> {
        let variant = match get(&format!("{prefix}.variant"))?.as_str() {
            "standard" => AttentionVariant::Standard,
            "differential" => AttentionVariant::Differential,
            other => return Err(Error::Format(format!("unknown variant {other}"))),
        };
        let mode_raw = get(&format!("{prefix}.lambda_init"))?;
        let lambda_init_mode = if mode_raw == "dynamic" {
            LambdaInitMode::Dynamic
        } else if let Some(v) = mode_raw.strip_prefix("constant:") {
            LambdaInitMode::Constant(
                v.parse()
                    .map_err(|_| Error::Format(format!("bad lambda_init value {v}")))?,
            )
        } else {
            return Err(Error::Format(format!("unknown lambda_init mode {mode_raw}")));
        };
        let modality = if prefix == "vision" {
            Modality::Vision {
                image_side: parse_usize("vision.image_side")?,
                patch_size: parse_usize("vision.patch_size")?,
            }
        } else {
            Modality::Text {
                vocab_size: parse_usize("text.vocab_size")?,
                context_len: parse_usize("text.context_len")?,
            }
        };
        Ok(EncoderConfig {
            depth: parse_usize(&format!("{prefix}.depth"))?,
            model_dim: parse_usize(&format!("{prefix}.model_dim"))?,
            num_heads: parse_usize(&format!("{prefix}.heads"))?,
            mlp_ratio: get(&format!("{prefix}.mlp_ratio"))?
                .parse()
                .map_err(|_| Error::Format("bad mlp_ratio".to_string()))?,
            variant,
            lambda_init_mode,
            modality,
        })
    };
    Ok((
        tower("vision")?,
        tower("text")?,
        parse_usize("embed_dim")?,
        get("seed")?
            .parse()
            .map_err(|_| Error::Format("bad seed".to_string()))?,
    ))
}

impl ModelWeights {
    /// Write the checkpoint: magic "DFCLIP01", u32 entry count, then per
    /// entry a u16 name length, the UTF-8 name, and a DTNS tensor record.
    /// The first entry, named `config`, is the flat key=value description of
    /// both encoder configs and the seed, with its bytes stored as f64
    /// values so that every entry is a uniform tensor record.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        let count = (self.names.len() + 1) as u32;
        f.write_all(&count.to_le_bytes())?;
        let cfg = config_text(self);
        let cfg_tensor = Tensor::new(
            &[cfg.len().max(1)],
            cfg.bytes().map(|b| b as f64).collect::<Vec<_>>(),
        )?;
        write_entry(&mut f, CONFIG_ENTRY, &cfg_tensor)?;
        for (name, t) in self.iter() {
            write_entry(&mut f, name, t)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".to_string()));
        }
        let mut cnt = [0u8; 4];
        f.read_exact(&mut cnt)?;
        let count = u32::from_le_bytes(cnt) as usize;
        let mut entries: HashMap<String, Tensor> = HashMap::new();
        let mut order = Vec::new();
        for _ in 0..count {
            let (name, t) = read_entry(&mut f)?;
            order.push(name.clone());
            entries.insert(name, t);
        }
        let cfg_tensor = entries
            .remove(CONFIG_ENTRY)
            .ok_or_else(|| Error::Format("checkpoint missing config entry".to_string()))?;
        let bytes: Vec<u8> = cfg_tensor.data().iter().map(|&v| v as u8).collect();
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".to_string()))?;
        let (image_cfg, text_cfg, embed_dim, seed) = parse_config_text(&text)?;
        let specs = model_specs(&image_cfg, &text_cfg, embed_dim);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        let mut index = HashMap::new();
        for (name, shape, _) in specs {
            let t = entries
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            index.insert(name.clone(), tensors.len());
            names.push(name);
            tensors.push(t.with_grad());
        }
        if !entries.is_empty() {
            let mut extra: Vec<_> = entries.keys().cloned().collect();
            extra.sort();
            return Err(Error::Format(format!("checkpoint has unknown entries {extra:?}")));
        }
        Ok(ModelWeights {
            image_cfg,
            text_cfg,
            embed_dim,
            seed,
            names,
            tensors,
            index,
        })
    }
}

fn write_entry<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Format(format!("entry name too long: {name}")));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    t.write_dtns(w)?;
    Ok(())
}

fn read_entry<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let n = u16::from_le_bytes(len) as usize;
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Format("entry name is not UTF-8".to_string()))?;
    let t = Tensor::read_dtns(r)?;
    Ok((name, t))
}

// ─── forward passes ─────────────────────────────────────────────────────

/// Tape handles for every named parameter, aligned with the weights order.
pub struct BoundModel {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundModel {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Assemble a binding from existing tape nodes (one per parameter name).
    /// Lets gradient checkers route their own probe leaves through the
    /// encoder forward passes.
    pub fn from_vars(names: &[String], vars: &[Var]) -> BoundModel {
        assert_eq!(names.len(), vars.len());
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        BoundModel {
            vars: vars.to_vec(),
            index,
        }
    }
}

/// Register every parameter as a tape leaf. With `trainable` the leaves keep
/// their `requires_grad` flag and will receive gradients on backward; without
/// it they are constants (frozen evaluation).
pub fn bind_model(tape: &mut Tape, w: &ModelWeights, trainable: bool) -> BoundModel {
    let mut vars = Vec::with_capacity(w.names.len());
    let mut index = HashMap::new();
    for (name, t) in w.iter() {
        let var = if trainable {
            let mut fresh = t.clone();
            fresh.zero_grad();
            tape.leaf(fresh)
        } else {
            tape.constant(t.clone())
        };
        index.insert(name.to_string(), vars.len());
        vars.push(var);
    }
    BoundModel { vars, index }
}

/// Copy leaf gradients back into the parameter store, accumulating.
pub fn pull_gradients(tape: &Tape, bound: &BoundModel, w: &mut ModelWeights) {
    for (i, (_, t)) in w.iter_mut().enumerate() {
        if let Some(g) = tape.grad(bound.vars[i]) {
            let g = g.to_vec();
            t.accumulate_grad(&g);
        }
    }
}

/// Cut a `[C x H x W]` image into raster-order patches, each flattened
/// row-major (channel, then row, then column): `[num_patches x C*p*p]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::dim("patchify", image.shape(), &[3, 0, 0]));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(gh * gw * c * patch * patch);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = py * patch + dy;
                    let base = ch * h * w + row * w + px * patch;
                    out.extend_from_slice(&image.data()[base..base + patch]);
                }
            }
        }
    }
    Tensor::matrix(gh * gw, c * patch * patch, out)
}

/// Inverse of [`patchify`]; test/debug helper.
pub fn unpatchify(patches: &Tensor, channels: usize, side: usize, patch: usize) -> Result<Tensor> {
    let g = side / patch;
    if patches.rows() != g * g || patches.cols() != channels * patch * patch {
        return Err(Error::dim("unpatchify", patches.shape(), &[g * g, channels * patch * patch]));
    }
    let mut out = vec![0.0f64; channels * side * side];
    for p in 0..g * g {
        let (py, px) = (p / g, p % g);
        let row = patches.data();
        let mut idx = p * channels * patch * patch;
        for ch in 0..channels {
            for dy in 0..patch {
                let r = py * patch + dy;
                let base = ch * side * side + r * side + px * patch;
                out[base..base + patch].copy_from_slice(&row[idx..idx + patch]);
                idx += patch;
            }
        }
    }
    Tensor::new(&[channels, side, side], out)
}

fn transformer_blocks(
    tape: &mut Tape,
    mut x: Var,
    w: &BoundModel,
    prefix: &str,
    cfg: &EncoderConfig,
    batch: usize,
    seq_len: usize,
    mut capture: Option<&mut AttnCapture>,
) -> Result<Var> {
    let causal = cfg.is_causal();
    for l in 1..=cfg.depth {
        let attn_cfg = cfg.attention_config(l)?;
        let attn_vars = crate::attention::AttentionVars {
            wq: w.var(&format!("{prefix}.layer{l}.attn.wq")),
            wk: w.var(&format!("{prefix}.layer{l}.attn.wk")),
            wv: w.var(&format!("{prefix}.layer{l}.attn.wv")),
            wo: w.var(&format!("{prefix}.layer{l}.attn.wo")),
            lambda: if cfg.variant == AttentionVariant::Differential {
                Some(LambdaVars {
                    lq1: w.var(&format!("{prefix}.layer{l}.attn.lq1")),
                    lk1: w.var(&format!("{prefix}.layer{l}.attn.lk1")),
                    lq2: w.var(&format!("{prefix}.layer{l}.attn.lq2")),
                    lk2: w.var(&format!("{prefix}.layer{l}.attn.lk2")),
                    lambda_init: attn_cfg.lambda_init()?,
                })
            } else {
                None
            },
        };
        let g1 = w.var(&format!("{prefix}.layer{l}.ln1.gain"));
        let b1 = w.var(&format!("{prefix}.layer{l}.ln1.bias"));
        let normed = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let attn = mha_stacked(
            tape,
            normed,
            &attn_vars,
            &attn_cfg,
            batch,
            seq_len,
            causal,
            capture.as_deref_mut(),
        )?;
        x = tape.add(x, attn)?;
        let g2 = w.var(&format!("{prefix}.layer{l}.ln2.gain"));
        let b2 = w.var(&format!("{prefix}.layer{l}.ln2.bias"));
        let normed2 = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let h1 = tape.matmul(normed2, w.var(&format!("{prefix}.layer{l}.mlp.w1")))?;
        let act = tape.gelu(h1)?;
        let h2 = tape.matmul(act, w.var(&format!("{prefix}.layer{l}.mlp.w2")))?;
        x = tape.add(x, h2)?;
    }
    Ok(x)
}

fn pool_project(
    tape: &mut Tape,
    x: Var,
    w: &BoundModel,
    prefix: &str,
    pool_indices: &[usize],
) -> Result<Var> {
    let pooled = tape.gather_rows(x, pool_indices)?;
    let g = w.var(&format!("{prefix}.ln_final.gain"));
    let b = w.var(&format!("{prefix}.ln_final.bias"));
    let normed = tape.layer_norm(pooled, g, b, LN_EPS)?;
    let proj = tape.matmul(normed, w.var(&format!("{prefix}.proj")))?;
    tape.l2_normalize(proj, 1)
}

/// Encode a batch of images into unit-norm rows `[batch x embed_dim]`.
pub fn encode_image(
    tape: &mut Tape,
    weights: &ModelWeights,
    bound: &BoundModel,
    images: &[Tensor],
) -> Result<Var> {
    encode_image_impl(tape, weights, bound, images, None)
}

pub(crate) fn encode_image_impl(
    tape: &mut Tape,
    weights: &ModelWeights,
    bound: &BoundModel,
    images: &[Tensor],
    capture: Option<&mut AttnCapture>,
) -> Result<Var> {
    let cfg = &weights.image_cfg;
    let Modality::Vision {
        image_side,
        patch_size,
    } = cfg.modality
    else {
        return Err(Error::Config("encode_image on a text config".to_string()));
    };
    if images.is_empty() {
        return Err(Error::Config("empty image batch".to_string()));
    }
    let batch = images.len();
    let patches = (image_side / patch_size) * (image_side / patch_size);
    let patch_len = 3 * patch_size * patch_size;
    let mut stacked = Vec::with_capacity(batch * patches * patch_len);
    for img in images {
        if img.shape() != [3, image_side, image_side] {
            return Err(Error::dim("encode_image", img.shape(), &[3, image_side, image_side]));
        }
        stacked.extend_from_slice(patchify(img, patch_size)?.data());
    }
    let stack = tape.constant(Tensor::matrix(batch * patches, patch_len, stacked)?);
    let tok = tape.matmul(stack, bound.var("vision.patch_embed"))?;

    // Interleave one class token row ahead of each sample's patch rows.
    let cls = bound.var("vision.cls_token");
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(tape.gather_rows(cls, &[0])?);
        parts.push(tape.slice_axis(tok, 0, b * patches, patches)?);
    }
    let mut x = tape.concat(&parts, 0)?;

    let seq_len = patches + 1;
    let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
    let pos = tape.gather_rows(bound.var("vision.pos_embed"), &pos_idx)?;
    x = tape.add(x, pos)?;

    x = transformer_blocks(tape, x, bound, "vision", cfg, batch, seq_len, capture)?;

    let cls_idx: Vec<usize> = (0..batch).map(|b| b * seq_len).collect();
    pool_project(tape, x, bound, "vision", &cls_idx)
}

/// Final-block token states plus the pooled embedding for one image.
/// Heatmap extraction needs both.
pub(crate) fn encode_single_image_with_tokens(
    tape: &mut Tape,
    weights: &ModelWeights,
    bound: &BoundModel,
    image: &Tensor,
    capture: &mut AttnCapture,
) -> Result<(Var, Var)> {
    let cfg = &weights.image_cfg;
    let Modality::Vision {
        image_side,
        patch_size,
    } = cfg.modality
    else {
        return Err(Error::Config("encode_image on a text config".to_string()));
    };
    let patches = (image_side / patch_size) * (image_side / patch_size);
    let patch_len = 3 * patch_size * patch_size;
    let stacked = patchify(image, patch_size)?;
    let stack = tape.constant(Tensor::matrix(patches, patch_len, stacked.data().to_vec())?);
    let tok = tape.matmul(stack, bound.var("vision.patch_embed"))?;
    let cls_row = tape.gather_rows(bound.var("vision.cls_token"), &[0])?;
    let mut x = tape.concat(&[cls_row, tok], 0)?;
    let seq_len = patches + 1;
    let pos_idx: Vec<usize> = (0..seq_len).collect();
    let pos = tape.gather_rows(bound.var("vision.pos_embed"), &pos_idx)?;
    x = tape.add(x, pos)?;
    x = transformer_blocks(tape, x, bound, "vision", cfg, 1, seq_len, Some(capture))?;
    let emb = pool_project(tape, x, bound, "vision", &[0])?;
    Ok((emb, x))
}

/// First EOT position in a padded token row.
pub fn eot_position(row: &[u32]) -> Result<usize> {
    row.iter()
        .position(|&t| t == EOT_ID)
        .ok_or_else(|| Error::Data("token sequence has no EOT".to_string()))
}

/// Encode a batch of padded token rows into unit-norm rows `[batch x embed_dim]`.
pub fn encode_text(
    tape: &mut Tape,
    weights: &ModelWeights,
    bound: &BoundModel,
    token_rows: &[Vec<u32>],
) -> Result<Var> {
    let cfg = &weights.text_cfg;
    let Modality::Text {
        vocab_size,
        context_len,
    } = cfg.modality
    else {
        return Err(Error::Config("encode_text on a vision config".to_string()));
    };
    if token_rows.is_empty() {
        return Err(Error::Config("empty text batch".to_string()));
    }
    let batch = token_rows.len();
    let mut flat = Vec::with_capacity(batch * context_len);
    let mut eot_idx = Vec::with_capacity(batch);
    for (b, row) in token_rows.iter().enumerate() {
        if row.len() != context_len {
            return Err(Error::dim("encode_text", &[row.len()], &[context_len]));
        }
        if let Some(&bad) = row.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of vocabulary (size {vocab_size})"
            )));
        }
        eot_idx.push(b * context_len + eot_position(row)?);
        flat.extend(row.iter().map(|&t| t as usize));
    }
    let emb = tape.gather_rows(bound.var("text.token_embed"), &flat)?;
    let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..context_len).collect();
    let pos = tape.gather_rows(bound.var("text.pos_embed"), &pos_idx)?;
    let mut x = tape.add(emb, pos)?;
    x = transformer_blocks(tape, x, bound, "text", cfg, batch, context_len, None)?;
    pool_project(tape, x, bound, "text", &eot_idx)
}

/// Frozen-model convenience: embeddings as a plain tensor, forward only.
pub fn embed_images(weights: &ModelWeights, images: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, weights, false);
    let v = encode_image(&mut tape, weights, &bound, images)?;
    Ok(tape.value(v).clone())
}

pub fn embed_texts(weights: &ModelWeights, token_rows: &[Vec<u32>]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, weights, false);
    let v = encode_text(&mut tape, weights, &bound, token_rows)?;
    Ok(tape.value(v).clone())
}

// ─── variant matrix ─────────────────────────────────────────────────────

/// The four trained configurations: baseline CLIP, differential attention in
/// both towers, the dynamic lambda_init schedule, and vision-only
/// differential attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    Clip,
    DiffClip,
    DiffClipStar,
    DiffClipDagger,
}

impl ModelVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(ModelVariant::Clip),
            "diffclip" => Ok(ModelVariant::DiffClip),
            "diffclip-star" | "diffclip_star" => Ok(ModelVariant::DiffClipStar),
            "diffclip-dagger" | "diffclip_dagger" => Ok(ModelVariant::DiffClipDagger),
            other => Err(Error::Config(format!(
                "unknown variant {other}; expected clip|diffclip|diffclip-star|diffclip-dagger"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Clip => "clip",
            ModelVariant::DiffClip => "diffclip",
            ModelVariant::DiffClipStar => "diffclip-star",
            ModelVariant::DiffClipDagger => "diffclip-dagger",
        }
    }

    /// (vision, text) attention settings for this variant.
    pub fn tower_settings(&self) -> ((AttentionVariant, LambdaInitMode), (AttentionVariant, LambdaInitMode)) {
        let std = (AttentionVariant::Standard, LambdaInitMode::Constant(0.8));
        let diff = (AttentionVariant::Differential, LambdaInitMode::Constant(0.8));
        let dyn_ = (AttentionVariant::Differential, LambdaInitMode::Dynamic);
        match self {
            ModelVariant::Clip => (std, std),
            ModelVariant::DiffClip => (diff, diff),
            ModelVariant::DiffClipStar => (dyn_, dyn_),
            ModelVariant::DiffClipDagger => (diff, std),
        }
    }
}
