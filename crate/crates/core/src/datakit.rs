//! Synthetic product data and the JSONL ingestion path.
//!
//! Each synthetic item is a glyph (shape, pattern, size) rendered into small
//! grayscale images, a name carrying gender and material, and a description
//! that mentions all five attributes. Shape, pattern and size are only in the
//! pixels; gender and material are only in the name.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioner::ConditioningBundle;
use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::tokenizer::Vocab;
use crate::trainer::derive_seed;
use crate::vision::{Image, ImageInput};

pub const IMAGE_SIZE: usize = 24;
pub const SHAPES: [&str; 4] = ["square", "triangle", "circle", "cross"];
pub const PATTERNS: [&str; 3] = ["solid", "striped", "dotted"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const MATERIALS: [&str; 4] = ["cotton", "denim", "velour", "silk"];
pub const GENDERS: [&str; 2] = ["mens", "womens"];
const NOUNS: [&str; 6] = ["shirt", "scarf", "jacket", "tote", "dress", "hoodie"];

/// Attributes recoverable only from the images.
pub const IMAGE_ONLY: [&str; 3] = ["shape", "pattern", "size"];
/// Attributes recoverable only from the name.
pub const NAME_ONLY: [&str; 2] = ["material", "gender"];

const NAME_TEMPLATES: [&str; 3] = ["{gender} {material} {noun}", "{material} {noun} for {gender}", "{gender} {noun} in {material}"];
const DESCRIPTION_TEMPLATES: [&str; 4] = [
    "a {size} {pattern} {shape} is printed on this {material} {noun} for {gender}.",
    "this {gender} {noun} is made of {material} and shows a {size} {pattern} {shape}.",
    "{material} {noun} for {gender} with a {pattern} {shape} in a {size} print.",
    "soft {material} meets a {size} {shape} with a {pattern} finish on this {gender} {noun}.",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub min_images: usize,
    pub max_images: usize,
}

impl SynthSpec {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self { n_samples, seed, min_images: 1, max_images: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub name: String,
    pub description: String,
    pub images: Vec<ImageInput>,
    /// Ground-truth attributes; used for evaluation only.
    pub attributes: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// 80/10/10 split from a stable hash of the id.
pub fn split_of(id: &str) -> Split {
    let digest = Sha256::digest(id.as_bytes());
    let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    match h % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

fn id_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    derive_seed(seed, 0x5a4d, u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

fn fill(template: &str, attrs: &BTreeMap<String, String>, noun: &str) -> String {
    let mut out = template.replace("{noun}", noun);
    for (k, v) in attrs {
        out = out.replace(&format!("{{{}}}", k), v);
    }
    out
}

/// Whether pixel offset `(dx, dy)` from the glyph centre lies inside the shape.
fn inside(shape: &str, dx: i32, dy: i32, r: i32) -> bool {
    match shape {
        "square" => dx.abs() <= r && dy.abs() <= r,
        "circle" => dx * dx + dy * dy <= r * r,
        // apex up, base on the bottom edge of the bounding box
        "triangle" => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        "cross" => {
            let arm = (r / 3).max(1);
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        _ => false,
    }
}

fn intensity(pattern: &str, dx: i32, dy: i32) -> f32 {
    match pattern {
        "solid" => 1.0,
        "striped" => {
            if (dy + 32).div_euclid(2) % 2 == 0 {
                1.0
            } else {
                0.2
            }
        }
        _ => {
            if (dx + 33) % 3 == 0 && (dy + 33) % 3 == 0 {
                1.0
            } else {
                0.3
            }
        }
    }
}

/// Rasterizes one view of a glyph, shifted by `(jx, jy)` pixels.
pub fn render(shape: &str, pattern: &str, size: &str, jx: i32, jy: i32) -> Image {
    let r = if size == "small" { 5 } else { 9 };
    let c = IMAGE_SIZE as i32 / 2;
    let mut pixels = vec![0.0f32; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE as i32 {
        for x in 0..IMAGE_SIZE as i32 {
            let (dx, dy) = (x - c - jx, y - c - jy);
            if inside(shape, dx, dy, r) {
                pixels[(y as usize) * IMAGE_SIZE + x as usize] = intensity(pattern, dx, dy);
            }
        }
    }
    Image { width: IMAGE_SIZE, height: IMAGE_SIZE, pixels }
}

fn synth_one(spec: &SynthSpec, index: usize) -> Sample {
    let id = format!("item-{:06}", index);
    let mut rng = ChaCha8Rng::seed_from_u64(id_seed(spec.seed, &id));
    let mut attrs = BTreeMap::new();
    let mut pick = |key: &str, pool: &[&str], rng: &mut ChaCha8Rng| {
        attrs.insert(key.to_string(), pool.choose(rng).expect("non-empty pool").to_string());
    };
    pick("shape", &SHAPES, &mut rng);
    pick("pattern", &PATTERNS, &mut rng);
    pick("size", &SIZES, &mut rng);
    pick("material", &MATERIALS, &mut rng);
    pick("gender", &GENDERS, &mut rng);
    let noun = NOUNS.choose(&mut rng).expect("non-empty");
    let name = fill(NAME_TEMPLATES.choose(&mut rng).expect("non-empty"), &attrs, noun);
    let description = fill(DESCRIPTION_TEMPLATES.choose(&mut rng).expect("non-empty"), &attrs, noun);
    let count = rng.gen_range(spec.min_images..=spec.max_images);
    let images = (0..count)
        .map(|_| {
            let (jx, jy) = (rng.gen_range(-2..=2), rng.gen_range(-2..=2));
            ImageInput::Pixels(render(&attrs["shape"], &attrs["pattern"], &attrs["size"], jx, jy))
        })
        .collect();
    Sample { id, name, description, images, attributes: attrs }
}

/// Deterministic synthetic corpus; sample `i` depends only on the seed and its id.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    if spec.n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if spec.min_images == 0 || spec.min_images > spec.max_images {
        return Err(Error::Config(format!("image count range {}..={} is invalid", spec.min_images, spec.max_images)));
    }
    Ok((0..spec.n_samples).map(|i| synth_one(spec, i)).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    name: String,
    description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    images: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_features: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attributes: BTreeMap<String, String>,
}

impl Sample {
    fn to_record(&self) -> Record {
        let mut pixels = Vec::new();
        let mut feats = Vec::new();
        for img in &self.images {
            match img {
                ImageInput::Pixels(p) => pixels.push(p.pixels.clone()),
                ImageInput::Features(f) => feats.push(f.clone()),
            }
        }
        Record {
            id: self.id.clone(),
            name: self.name.clone(),
            description: self.description.clone(),
            images: (!pixels.is_empty()).then_some(pixels),
            image_features: (!feats.is_empty()).then_some(feats),
            attributes: self.attributes.clone(),
        }
    }

    /// Encodes the sample for the model, keeping at most `max_images` images.
    pub fn to_bundle(&self, vocab: &Vocab, max_images: usize) -> ConditioningBundle {
        ConditioningBundle {
            images: self.images.iter().take(max_images).cloned().collect(),
            name_ids: vocab.encode(&self.name),
            target_ids: vocab.encode(&self.description),
        }
    }
}

pub fn to_jsonl(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&s.to_record())?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, &s.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Counts of records removed while loading.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanStats {
    pub empty_name: usize,
    pub empty_description: usize,
    pub empty_images: usize,
    pub duplicate_description: usize,
}

impl CleanStats {
    pub fn total(&self) -> usize {
        self.empty_name + self.empty_description + self.empty_images + self.duplicate_description
    }
}

fn square_image(pixels: Vec<f32>) -> std::result::Result<Image, String> {
    let side = (pixels.len() as f64).sqrt().round() as usize;
    if side * side != pixels.len() {
        return Err(format!("image with {} pixels is not square", pixels.len()));
    }
    Ok(Image { width: side, height: side, pixels })
}

/// Parses JSONL records and drops those with an empty name, description or
/// image list, then repeated descriptions (the first occurrence is kept).
pub fn parse_jsonl(text: &str, origin: &Path) -> Result<(Vec<Sample>, CleanStats)> {
    load_from(BufReader::new(text.as_bytes()), origin)
}

pub fn load_jsonl(path: &Path) -> Result<(Vec<Sample>, CleanStats)> {
    load_from(BufReader::new(File::open(path)?), path)
}

fn load_from(reader: impl BufRead, origin: &Path) -> Result<(Vec<Sample>, CleanStats)> {
    let mut stats = CleanStats::default();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::Data { path: origin.to_path_buf(), line: i + 1, detail };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let mut images = Vec::new();
        for p in rec.images.unwrap_or_default() {
            images.push(ImageInput::Pixels(square_image(p).map_err(err)?));
        }
        images.extend(rec.image_features.unwrap_or_default().into_iter().map(ImageInput::Features));
        if rec.name.trim().is_empty() {
            stats.empty_name += 1;
        } else if rec.description.trim().is_empty() {
            stats.empty_description += 1;
        } else if images.is_empty() {
            stats.empty_images += 1;
        } else if !seen.insert(rec.description.clone()) {
            stats.duplicate_description += 1;
        } else {
            out.push(Sample { id: rec.id, name: rec.name, description: rec.description, images, attributes: rec.attributes });
        }
    }
    Ok((out, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    ImageOnly,
    NameOnly,
    All,
}

/// Fraction of the scoped attribute words that occur as tokens of `generated`.
pub fn attribute_recall(generated: &str, attrs: &BTreeMap<String, String>, scope: Scope) -> Result<f64> {
    let keys: Vec<&str> = match scope {
        Scope::ImageOnly => IMAGE_ONLY.to_vec(),
        Scope::NameOnly => NAME_ONLY.to_vec(),
        Scope::All => IMAGE_ONLY.iter().chain(&NAME_ONLY).copied().collect(),
    };
    let words: Vec<&String> = keys.iter().filter_map(|k| attrs.get(*k)).collect();
    if words.is_empty() {
        return Err(Error::Contract(format!("no attributes in scope {:?}", scope)));
    }
    let tokens: HashSet<String> = tokenize(generated).into_iter().collect();
    let hits = words.iter().filter(|w| tokens.contains(&w.to_lowercase())).count();
    Ok(hits as f64 / words.len() as f64)
}
