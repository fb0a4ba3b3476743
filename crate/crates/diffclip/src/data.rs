//! Deterministic procedural image-caption corpus.
//!
//! Each sample is a colored geometric shape rendered on a noisy background
//! with the caption "a {size} {color} {shape} at the {position}". Splits are
//! disjoint by (shape, color) combination, so the held-out splits probe
//! compositions never seen in training.
//!
//! On-disk layout:
//! - `manifest.tsv` - id, caption, spec fields, split, image file
//! - `vocab.txt`    - one token per line, line number = id
//! - `images/`      - one DTNS tensor file per sample, `[3 x 32 x 32]` in [0, 1]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EOT_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    Top,
    Bottom,
    Left,
    Right,
    Center,
}

pub const SHAPES: [ShapeKind; 4] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
];
pub const COLORS: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White];
pub const SIZES: [SizeClass; 2] = [SizeClass::Small, SizeClass::Large];
pub const POSITIONS: [Position; 5] = [
    Position::Top,
    Position::Bottom,
    Position::Left,
    Position::Right,
    Position::Center,
];

impl ShapeKind {
    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SHAPES
            .iter()
            .find(|k| k.word() == s)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown shape {s}")))
    }
}

impl Color {
    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        COLORS
            .iter()
            .find(|c| c.word() == s)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown color {s}")))
    }
}

impl SizeClass {
    pub fn word(&self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }

    /// Half-extent of the shape in pixels.
    pub fn radius(&self) -> i64 {
        match self {
            SizeClass::Small => 4,
            SizeClass::Large => 7,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SIZES
            .iter()
            .find(|c| c.word() == s)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown size {s}")))
    }
}

impl Position {
    pub fn word(&self) -> &'static str {
        match self {
            Position::Top => "top",
            Position::Bottom => "bottom",
            Position::Left => "left",
            Position::Right => "right",
            Position::Center => "center",
        }
    }

    /// Shape center as (row, col).
    pub fn center(&self) -> (i64, i64) {
        let mid = IMAGE_SIDE as i64 / 2;
        let off = IMAGE_SIDE as i64 / 4;
        match self {
            Position::Top => (mid - off, mid),
            Position::Bottom => (mid + off, mid),
            Position::Left => (mid, mid - off),
            Position::Right => (mid, mid + off),
            Position::Center => (mid, mid),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        POSITIONS
            .iter()
            .find(|c| c.word() == s)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown position {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    pub position: Position,
    pub noise_amplitude: f64,
}

impl SampleSpec {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} at the {}",
            self.size.word(),
            self.color.word(),
            self.shape.word(),
            self.position.word()
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.3).contains(&self.noise_amplitude) {
            return Err(Error::Data(format!(
                "noise amplitude {} outside [0, 0.3]",
                self.noise_amplitude
            )));
        }
        Ok(())
    }

    /// Shape membership test at pixel (row, col); anti-alias-free integer
    /// geometry.
    fn covers(&self, y: i64, x: i64) -> bool {
        let (cy, cx) = self.position.center();
        let r = self.size.radius();
        let (dy, dx) = (y - cy, x - cx);
        match self.shape {
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() < r && dx.abs() < r,
            ShapeKind::Triangle => {
                // Upward-pointing: apex at cy - r, base at cy + r.
                let t = dy + r;
                (0..=2 * r).contains(&t) && 2 * dx.abs() <= t
            }
            ShapeKind::Cross => {
                let th = (r / 3).max(1);
                (dx.abs() <= th && dy.abs() <= r) || (dy.abs() <= th && dx.abs() <= r)
            }
        }
    }
}

/// Rasterize a spec over a seeded uniform-noise background. Deterministic:
/// the same (spec, seed) yields bit-identical pixels.
pub fn render(spec: &SampleSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = IMAGE_SIDE;
    let mut data = vec![0.0f64; IMAGE_CHANNELS * side * side];
    // Background first so the noise stream is independent of the shape.
    for v in data.iter_mut() {
        *v = (spec.noise_amplitude * rng.gen::<f64>()).clamp(0.0, 1.0);
    }
    let rgb = spec.color.rgb();
    for y in 0..side {
        for x in 0..side {
            if spec.covers(y as i64, x as i64) {
                for (c, &v) in rgb.iter().enumerate() {
                    data[c * side * side + y * side + x] = v;
                }
            }
        }
    }
    Tensor::new(&[IMAGE_CHANNELS, side, side], data)
}

// ─── vocabulary and tokenization ────────────────────────────────────────

/// Fixed token list: reserved PAD/EOT, the caption words, and the prompt
/// words used by zero-shot templates. Ids are dense and stable.
const VOCAB_WORDS: [&str; 23] = [
    "<pad>", "<eot>", "a", "small", "large", "red", "green", "blue", "yellow", "white", "circle",
    "square", "triangle", "cross", "at", "the", "top", "bottom", "left", "right", "center",
    "photo", "of",
];

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn synthetic() -> Self {
        Self::from_tokens(VOCAB_WORDS.iter().map(|s| s.to_string()).collect())
            .expect("builtin vocab is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID as usize] != "<pad>" || tokens[EOT_ID as usize] != "<eot>"
        {
            return Err(Error::Data(
                "vocabulary must start with <pad> and <eot>".to_string(),
            ));
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }
}

/// Lowercase, split on whitespace, map to ids, append EOT, pad to
/// `context_len`. Unknown words and overlong captions are errors.
pub fn tokenize(caption: &str, vocab: &Vocabulary, context_len: usize) -> Result<Vec<u32>> {
    let words: Vec<String> = caption.to_lowercase().split_whitespace().map(String::from).collect();
    if words.len() + 1 > context_len {
        return Err(Error::Data(format!(
            "caption of {} words overflows context length {}",
            words.len(),
            context_len
        )));
    }
    let mut row = Vec::with_capacity(context_len);
    for w in &words {
        let id = vocab
            .id(w)
            .ok_or_else(|| Error::Data(format!("word not in vocabulary: {w}")))?;
        row.push(id);
    }
    row.push(EOT_ID);
    row.resize(context_len, PAD_ID);
    Ok(row)
}

/// Inverse of [`tokenize`] up to the EOT marker; test/debug helper.
pub fn detokenize(row: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in row {
        if id == EOT_ID {
            return Ok(words.join(" "));
        }
        words.push(
            vocab
                .token(id)
                .ok_or_else(|| Error::Data(format!("id {id} not in vocabulary")))?
                .to_string(),
        );
    }
    Err(Error::Data("token sequence has no EOT".to_string()))
}

// ─── corpus generation ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn word(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub id: usize,
    pub caption: String,
    pub spec: SampleSpec,
    pub split: Split,
    pub image_file: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
    pub vocab: Vocabulary,
}

/// Distribute the 20 (shape, color) pairs over splits according to the
/// fractions: held-out splits get whole pairs so that no combination leaks
/// into training.
fn assign_pairs(
    fractions: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Result<HashMap<(ShapeKind, Color), Split>> {
    let mut pairs: Vec<(ShapeKind, Color)> = SHAPES
        .iter()
        .flat_map(|&s| COLORS.iter().map(move |&c| (s, c)))
        .collect();
    for i in (1..pairs.len()).rev() {
        let j = rng.gen_range(0..=i);
        pairs.swap(i, j);
    }
    let total = pairs.len();
    let want = |f: f64| -> usize {
        if f <= 0.0 {
            0
        } else {
            ((f * total as f64).round() as usize).max(1)
        }
    };
    let n_val = want(fractions[1]);
    let n_test = want(fractions[2]);
    if n_val + n_test >= total {
        return Err(Error::Config(
            "split fractions leave no (shape, color) pairs for training".to_string(),
        ));
    }
    let mut map = HashMap::new();
    for (i, pair) in pairs.into_iter().enumerate() {
        let split = if i < n_test {
            Split::Test
        } else if i < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
        map.insert(pair, split);
    }
    Ok(map)
}

/// Generate `n` samples, render them, and write the dataset files. Fully
/// deterministic in (n, fractions, seed).
pub fn build_corpus<P: AsRef<Path>>(
    dir: P,
    n: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Config(format!("corpus needs at least 10 samples, got {n}")));
    }
    let fsum: f64 = fractions.iter().sum();
    if (fsum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {fsum}")));
    }
    if fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config("split fractions must be nonnegative".to_string()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair_split = assign_pairs(fractions, &mut rng)?;
    let mut split_pairs: HashMap<Split, Vec<(ShapeKind, Color)>> = HashMap::new();
    for (&pair, &split) in &pair_split {
        split_pairs.entry(split).or_default().push(pair);
    }
    for pairs in split_pairs.values_mut() {
        pairs.sort_by_key(|(s, c)| (s.word(), c.word()));
    }

    // Sample counts per split, adjusted so they sum to n.
    let mut counts = [
        (fractions[0] * n as f64).round() as usize,
        (fractions[1] * n as f64).round() as usize,
        0,
    ];
    counts[2] = n.saturating_sub(counts[0] + counts[1]);

    let vocab = Vocabulary::synthetic();
    let mut entries = Vec::with_capacity(n);
    let mut manifest = String::from("id\tcaption\tshape\tcolor\tsize\tposition\tnoise\tsplit\timage\n");
    let mut id = 0usize;
    for (split, count) in [(Split::Train, counts[0]), (Split::Val, counts[1]), (Split::Test, counts[2])] {
        let pairs = match split_pairs.get(&split) {
            Some(p) if !p.is_empty() => p.clone(),
            _ if count == 0 => continue,
            _ => return Err(Error::Config(format!("no pairs available for {} split", split.word()))),
        };
        for _ in 0..count {
            let (shape, color) = pairs[rng.gen_range(0..pairs.len())];
            let spec = SampleSpec {
                shape,
                color,
                size: SIZES[rng.gen_range(0..SIZES.len())],
                position: POSITIONS[rng.gen_range(0..POSITIONS.len())],
                noise_amplitude: rng.gen::<f64>() * 0.3,
            };
            let render_seed: u64 = rng.gen();
            let image = render(&spec, render_seed)?;
            let image_file = format!("images/img_{id:05}.dtns");
            image.save_dtns(dir.join(&image_file))?;
            let caption = spec.caption();
            manifest.push_str(&format!(
                "{id}\t{caption}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{image_file}\n",
                spec.shape.word(),
                spec.color.word(),
                spec.size.word(),
                spec.position.word(),
                spec.noise_amplitude,
                split.word()
            ));
            entries.push(Entry {
                id,
                caption,
                spec,
                split,
                image_file,
            });
            id += 1;
        }
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    vocab.save(dir.join("vocab.txt"))?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        entries,
        vocab,
    })
}

pub fn load_dataset<P: AsRef<Path>>(dir: P) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&manifest_path)?;
    let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 9 {
            return Err(Error::Format(format!(
                "manifest line {} has {} columns, expected 9",
                ln + 1,
                cols.len()
            )));
        }
        let spec = SampleSpec {
            shape: ShapeKind::parse(cols[2])?,
            color: Color::parse(cols[3])?,
            size: SizeClass::parse(cols[4])?,
            position: Position::parse(cols[5])?,
            noise_amplitude: cols[6]
                .parse()
                .map_err(|_| Error::Format(format!("bad noise value on line {}", ln + 1)))?,
        };
        entries.push(Entry {
            id: cols[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad id on line {}", ln + 1)))?,
            caption: cols[1].to_string(),
            spec,
            split: Split::parse(cols[7]).map_err(|e| Error::Format(e.to_string()))?,
            image_file: cols[8].to_string(),
        });
    }
    if entries.is_empty() {
        return Err(Error::Format("manifest has no entries".to_string()));
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        entries,
        vocab,
    })
}

/// One split loaded into memory: images plus pre-tokenized captions, aligned.
pub struct LoadedSplit {
    pub indices: Vec<usize>,
    pub images: Vec<Tensor>,
    pub token_rows: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load_image(&self, entry: &Entry) -> Result<Tensor> {
        let img = Tensor::load_dtns(self.root.join(&entry.image_file))?;
        img.validate_finite("dataset image")?;
        Ok(img)
    }

    pub fn load_split(&self, split: Split, context_len: usize) -> Result<LoadedSplit> {
        let indices = self.split_indices(split);
        if indices.is_empty() {
            return Err(Error::Data(format!("split {} is empty", split.word())));
        }
        let mut images = Vec::with_capacity(indices.len());
        let mut token_rows = Vec::with_capacity(indices.len());
        for &i in &indices {
            let e = &self.entries[i];
            images.push(self.load_image(e)?);
            token_rows.push(tokenize(&e.caption, &self.vocab, context_len)?);
        }
        Ok(LoadedSplit {
            indices,
            images,
            token_rows,
        })
    }
}

/// A matched set of images and padded token rows.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N x C x H x W]`, values in [0, 1].
    pub images: Tensor,
    /// N rows of `context_len` token ids, each with exactly one EOT.
    pub token_ids: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new(images: &[Tensor], token_ids: Vec<Vec<u32>>) -> Result<Self> {
        if images.is_empty() || images.len() != token_ids.len() {
            return Err(Error::Config(format!(
                "batch needs matched images and captions, got {} and {}",
                images.len(),
                token_ids.len()
            )));
        }
        let shape = images[0].shape().to_vec();
        let mut data = Vec::with_capacity(images.len() * images[0].numel());
        for img in images {
            if img.shape() != shape.as_slice() {
                return Err(Error::dim("batch", img.shape(), &shape));
            }
            data.extend_from_slice(img.data());
        }
        for row in &token_ids {
            let eots = row.iter().filter(|&&t| t == EOT_ID).count();
            if eots != 1 {
                return Err(Error::Data(format!(
                    "token row must contain exactly one EOT, found {eots}"
                )));
            }
        }
        let mut full = vec![images.len()];
        full.extend_from_slice(&shape);
        Ok(Batch {
            images: Tensor::new(&full, data)?,
            token_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Per-sample image tensors `[C x H x W]`.
    pub fn image_tensors(&self) -> Vec<Tensor> {
        let n = self.len();
        let per = self.images.numel() / n;
        let sub_shape: Vec<usize> = self.images.shape()[1..].to_vec();
        (0..n)
            .map(|i| {
                Tensor::new(&sub_shape, self.images.data()[i * per..(i + 1) * per].to_vec())
                    .expect("batch sub-shape")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_square_pixels_are_exact() {
        let spec = SampleSpec {
            shape: ShapeKind::Square,
            color: Color::White,
            size: SizeClass::Large,
            position: Position::Center,
            noise_amplitude: 0.0,
        };
        let img = render(&spec, 0).unwrap();
        // Large square at center: rows/cols 10..22 inclusive-exclusive of the
        // half-open |d| < 7 band around 16.
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let inside = (10..23).contains(&y) && (10..23).contains(&x);
                for c in 0..3 {
                    let v = img.data()[c * IMAGE_SIDE * IMAGE_SIDE + y * IMAGE_SIDE + x];
                    if inside {
                        assert_eq!(v, 1.0, "pixel ({y},{x}) channel {c}");
                    } else {
                        assert_eq!(v, 0.0, "pixel ({y},{x}) channel {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = SampleSpec {
            shape: ShapeKind::Circle,
            color: Color::Blue,
            size: SizeClass::Small,
            position: Position::Top,
            noise_amplitude: 0.25,
        };
        let a = render(&spec, 123).unwrap();
        let b = render(&spec, 123).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = render(&spec, 124).unwrap();
        assert!(a.data() != c.data());
    }

    #[test]
    fn color_change_touches_only_shape_pixels() {
        let base = SampleSpec {
            shape: ShapeKind::Triangle,
            color: Color::Red,
            size: SizeClass::Large,
            position: Position::Left,
            noise_amplitude: 0.2,
        };
        let mut other = base;
        other.color = Color::Blue;
        let a = render(&base, 9).unwrap();
        let b = render(&other, 9).unwrap();
        let hw = IMAGE_SIDE * IMAGE_SIDE;
        let mut differing = 0usize;
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let diff = (0..3).any(|c| a.data()[c * hw + y * IMAGE_SIDE + x] != b.data()[c * hw + y * IMAGE_SIDE + x]);
                if diff {
                    differing += 1;
                    assert!(base.covers(y as i64, x as i64), "background pixel ({y},{x}) changed");
                }
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn noise_amplitude_out_of_range_is_rejected() {
        let spec = SampleSpec {
            shape: ShapeKind::Circle,
            color: Color::Red,
            size: SizeClass::Small,
            position: Position::Center,
            noise_amplitude: 0.5,
        };
        assert!(render(&spec, 0).is_err());
    }

    #[test]
    fn tokenize_constructs_expected_row() {
        let vocab = Vocabulary::synthetic();
        let row = tokenize("a red circle", &vocab, 8).unwrap();
        assert_eq!(
            row,
            vec![
                vocab.id("a").unwrap(),
                vocab.id("red").unwrap(),
                vocab.id("circle").unwrap(),
                EOT_ID,
                PAD_ID,
                PAD_ID,
                PAD_ID,
                PAD_ID
            ]
        );
    }

    #[test]
    fn tokenize_roundtrips_through_detokenize() {
        let vocab = Vocabulary::synthetic();
        let caption = "a large yellow cross at the bottom";
        let row = tokenize(caption, &vocab, 16).unwrap();
        assert_eq!(detokenize(&row, &vocab).unwrap(), caption);
    }

    #[test]
    fn tokenize_rejects_unknown_and_overflow() {
        let vocab = Vocabulary::synthetic();
        assert!(matches!(tokenize("a purple circle", &vocab, 8), Err(Error::Data(_))));
        assert!(matches!(tokenize("a red circle at the top", &vocab, 4), Err(Error::Data(_))));
        // Exactly context_len - 1 words still fits (room for EOT).
        assert!(tokenize("a red circle", &vocab, 4).is_ok());
    }

    #[test]
    fn every_caption_tokenizes_within_toy_context() {
        let vocab = Vocabulary::synthetic();
        for &shape in &SHAPES {
            for &color in &COLORS {
                for &size in &SIZES {
                    for &position in &POSITIONS {
                        let spec = SampleSpec {
                            shape,
                            color,
                            size,
                            position,
                            noise_amplitude: 0.0,
                        };
                        assert!(tokenize(&spec.caption(), &vocab, 16).is_ok());
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_loadable() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = build_corpus(dir_a.path(), 60, [0.8, 0.1, 0.1], 7).unwrap();
        let _ = build_corpus(dir_b.path(), 60, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a.entries.len(), 60);
        let ma = std::fs::read(dir_a.path().join("manifest.tsv")).unwrap();
        let mb = std::fs::read(dir_b.path().join("manifest.tsv")).unwrap();
        assert_eq!(ma, mb);
        // Spot-check an image file for byte equality as well.
        let ia = std::fs::read(dir_a.path().join(&a.entries[5].image_file)).unwrap();
        let ib = std::fs::read(dir_b.path().join(&a.entries[5].image_file)).unwrap();
        assert_eq!(ia, ib);

        let loaded = load_dataset(dir_a.path()).unwrap();
        assert_eq!(loaded.entries.len(), 60);
        assert_eq!(loaded.entries[3].caption, a.entries[3].caption);
        let img = loaded.load_image(&loaded.entries[0]).unwrap();
        assert_eq!(img.shape(), &[3, IMAGE_SIDE, IMAGE_SIDE]);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn held_out_splits_share_no_pair_with_train() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_corpus(dir.path(), 200, [0.8, 0.1, 0.1], 3).unwrap();
        let pairs = |split: Split| -> std::collections::HashSet<(ShapeKind, Color)> {
            ds.entries
                .iter()
                .filter(|e| e.split == split)
                .map(|e| (e.spec.shape, e.spec.color))
                .collect()
        };
        let train = pairs(Split::Train);
        let val = pairs(Split::Val);
        let test = pairs(Split::Test);
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
        assert!(!test.is_empty());
    }

    #[test]
    fn attribute_frequencies_are_near_uniform() {
        // n = 10 * |spec space| = 2000; every attribute value within 3 sigma
        // of its uniform share.
        let dir = tempfile::tempdir().unwrap();
        let ds = build_corpus(dir.path(), 2000, [0.8, 0.1, 0.1], 0).unwrap();
        let n = ds.entries.len() as f64;
        let check = |count: usize, p: f64, what: &str| {
            let sigma = (p * (1.0 - p) / n).sqrt();
            let freq = count as f64 / n;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "{what}: freq {freq:.4} vs p {p:.4} (3 sigma {:.4})",
                3.0 * sigma
            );
        };
        for &shape in &SHAPES {
            check(
                ds.entries.iter().filter(|e| e.spec.shape == shape).count(),
                1.0 / SHAPES.len() as f64,
                shape.word(),
            );
        }
        for &color in &COLORS {
            check(
                ds.entries.iter().filter(|e| e.spec.color == color).count(),
                1.0 / COLORS.len() as f64,
                color.word(),
            );
        }
        for &size in &SIZES {
            check(
                ds.entries.iter().filter(|e| e.spec.size == size).count(),
                1.0 / SIZES.len() as f64,
                size.word(),
            );
        }
        for &pos in &POSITIONS {
            check(
                ds.entries.iter().filter(|e| e.spec.position == pos).count(),
                1.0 / POSITIONS.len() as f64,
                pos.word(),
            );
        }
    }

    #[test]
    fn corpus_rejects_bad_arguments() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_corpus(dir.path(), 5, [0.8, 0.1, 0.1], 0).is_err());
        assert!(build_corpus(dir.path(), 100, [0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn batch_validates_eot_and_shapes() {
        let img = render(
            &SampleSpec {
                shape: ShapeKind::Circle,
                color: Color::Red,
                size: SizeClass::Small,
                position: Position::Center,
                noise_amplitude: 0.0,
            },
            0,
        )
        .unwrap();
        let vocab = Vocabulary::synthetic();
        let good = tokenize("a red circle", &vocab, 8).unwrap();
        let batch = Batch::new(std::slice::from_ref(&img), vec![good.clone()]).unwrap();
        assert_eq!(batch.images.shape(), &[1, 3, IMAGE_SIDE, IMAGE_SIDE]);
        assert_eq!(batch.image_tensors()[0].data(), img.data());
        let no_eot = vec![2u32; 8];
        assert!(Batch::new(std::slice::from_ref(&img), vec![no_eot]).is_err());
        let two_eot = vec![EOT_ID; 8];
        assert!(Batch::new(&[img], vec![two_eot]).is_err());
    }
}
