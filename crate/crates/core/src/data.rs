//! Dataset files and the synthetic desk-scale corpus.
//!
//! File formats:
//! - sentiment JSON-lines: `{"sentence", "target_start", "target_end",
//!   "label", "image"}` with image paths relative to the file,
//! - caption JSON-lines: `{"image", "caption"}`,
//! - images as ".ten" tensors (3 x H x W in [0, 1]) or binary 8-bit PPM.
//!
//! The synthetic generator draws colored blobs on a 2 x 2 quadrant grid.
//! Each quadrant maps to one caption word (its color, or "empty"), so a
//! caption is learnable from pixels position by position. Sentiment labels
//! are a fixed function of (target word, blob color): the text alone leaves
//! the color unknown and the image alone leaves the target unknown, so the
//! label is recoverable only by using both.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::ImageTensor;
use crate::error::{Error, Result};
use crate::fusion::MultimodalSample;
use crate::tensor::{read_ten, write_ten, Dtype, Element, Tensor};
use crate::text::Vocabulary;

/// Canonical 3-class sentiment label order; index = class id.
pub const SENTIMENT_CLASSES: [&str; 3] = ["negative", "neutral", "positive"];

/// One line of a sentiment dataset file. `target_start..target_end` are
/// byte offsets into `sentence`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentimentRecord {
    pub sentence: String,
    pub target_start: usize,
    pub target_end: usize,
    pub label: String,
    pub image: String,
}

impl SentimentRecord {
    pub fn target(&self) -> Result<&str> {
        let (s, e) = (self.target_start, self.target_end);
        if s >= e
            || e > self.sentence.len()
            || !self.sentence.is_char_boundary(s)
            || !self.sentence.is_char_boundary(e)
        {
            return Err(Error::Parse(format!(
                "target span {s}..{e} is not a valid subsequence of {:?}",
                self.sentence
            )));
        }
        Ok(&self.sentence[s..e])
    }
}

/// One line of a caption dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image: String,
    pub caption: String,
}

/// Loaded sentiment dataset: resolved samples plus the class-name order
/// defining label indices.
#[derive(Debug, Clone)]
pub struct SentimentDataset<E: Element> {
    pub samples: Vec<MultimodalSample<E>>,
    pub classes: Vec<String>,
}

/// Loaded caption dataset: images with their gold caption text.
#[derive(Debug, Clone)]
pub struct CaptionDataset<E: Element> {
    pub images: Vec<ImageTensor<E>>,
    pub captions: Vec<String>,
}

/// Class-name order for a label set: the canonical sentiment order when the
/// labels are a subset of it, otherwise lexicographic.
pub fn class_names(labels: &BTreeSet<String>) -> Vec<String> {
    let canonical: BTreeSet<String> = SENTIMENT_CLASSES.iter().map(|s| s.to_string()).collect();
    if labels.is_subset(&canonical) {
        SENTIMENT_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        labels.iter().cloned().collect()
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Load a ".ten" image of either float width, converting to `E`.
fn load_ten_image<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 5 {
        return Err(Error::Integrity(format!("{}: truncated header", path.display())));
    }
    match Dtype::from_code(bytes[4])? {
        Dtype::F32 => Ok(read_ten::<f32>(path)?.cast()),
        Dtype::F64 => Ok(read_ten::<f64>(path)?.cast()),
    }
}

/// Binary 8-bit PPM (P6), scaled to [0, 1] and transposed to
/// channel-major [3 x H x W].
pub fn load_ppm<E: Element>(path: &Path) -> Result<ImageTensor<E>> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("unexpected end of PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(fail("not a P6 PPM"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| fail("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| fail("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| fail("bad maxval"))?;
    if maxval != 255 {
        return Err(fail("only maxval 255 supported"));
    }
    pos += 1; // single whitespace before payload
    if bytes.len() < pos + 3 * w * h {
        return Err(fail("truncated pixel data"));
    }
    let mut data = vec![E::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = bytes[pos + (y * w + x) * 3 + c] as f64 / 255.0;
                data[(c * h + y) * w + x] = E::from_f64(v);
            }
        }
    }
    ImageTensor::new(Tensor::from_vec(vec![3, h, w], data)?)
}

/// Load an image by extension: ".ten" or ".ppm".
pub fn load_image<E: Element>(path: &Path) -> Result<ImageTensor<E>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ten") => ImageTensor::new(load_ten_image(path)?),
        Some("ppm") => load_ppm(path),
        _ => Err(Error::Parse(format!(
            "{}: unsupported image extension (expected .ten or .ppm)",
            path.display()
        ))),
    }
}

/// Load a sentiment JSON-lines file, resolving image paths relative to it.
pub fn load_sentiment_jsonl<E: Element>(path: &Path) -> Result<SentimentDataset<E>> {
    let records: Vec<SentimentRecord> = read_jsonl(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let labels: BTreeSet<String> = records.iter().map(|r| r.label.clone()).collect();
    let classes = class_names(&labels);
    let class_index = |label: &str| -> Result<usize> {
        classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Parse(format!("label {label:?} not in class set {classes:?}")))
    };
    let mut samples = Vec::with_capacity(records.len());
    for r in &records {
        let target = r.target()?.to_string();
        samples.push(MultimodalSample {
            sentence: r.sentence.clone(),
            target,
            image: load_image(&base.join(&r.image))?,
            label: class_index(&r.label)?,
        });
    }
    Ok(SentimentDataset { samples, classes })
}

/// Load a caption JSON-lines file.
pub fn load_caption_jsonl<E: Element>(path: &Path) -> Result<CaptionDataset<E>> {
    let records: Vec<CaptionRecord> = read_jsonl(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut images = Vec::with_capacity(records.len());
    let mut captions = Vec::with_capacity(records.len());
    for r in &records {
        images.push(load_image(&base.join(&r.image))?);
        captions.push(r.caption.clone());
    }
    Ok(CaptionDataset { images, captions })
}

// ── Synthetic corpus ─────────────────────────────────────────────────

pub const COLOR_WORDS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const TARGET_WORDS: [&str; 2] = ["alice", "bob"];
pub const EMPTY_WORD: &str = "empty";

const TEMPLATES: [(&str, &str); 3] = [
    ("i saw ", " today"),
    ("", " was at the store"),
    ("", " went to the show"),
];

/// Fixed label table: sentiment toward `target` given the blob color in
/// the posted image. Every target maps different colors to different
/// labels, so neither modality determines the label alone.
pub fn synthetic_label(target: &str, color: &str) -> Result<&'static str> {
    let t = TARGET_WORDS
        .iter()
        .position(|w| *w == target)
        .ok_or_else(|| Error::Param(format!("unknown synthetic target {target:?}")))?;
    let c = COLOR_WORDS
        .iter()
        .position(|w| *w == color)
        .ok_or_else(|| Error::Param(format!("unknown synthetic color {color:?}")))?;
    const TABLE: [[&str; 4]; 2] = [
        // red        green       blue        yellow
        ["positive", "negative", "neutral", "positive"], // alice
        ["negative", "positive", "positive", "neutral"], // bob
    ];
    Ok(TABLE[t][c])
}

/// Generation parameters for the synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Square image side; must be even.
    pub image_size: usize,
    pub caption_pairs: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            image_size: 16,
            caption_pairs: 64,
            train: 64,
            val: 32,
            test: 32,
        }
    }
}

/// Sentiment split with its generation metadata (the gold blob color per
/// sample), kept for construction audits.
#[derive(Debug, Clone)]
pub struct LabeledSplit<E: Element> {
    pub samples: Vec<MultimodalSample<E>>,
    pub blob_colors: Vec<String>,
}

/// Fully generated corpus.
#[derive(Debug, Clone)]
pub struct SyntheticBundle<E: Element> {
    pub vocab: Vocabulary,
    pub classes: Vec<String>,
    pub captions: CaptionDataset<E>,
    pub train: LabeledSplit<E>,
    pub val: LabeledSplit<E>,
    pub test: LabeledSplit<E>,
}

/// The vocabulary every synthetic run shares: reserved tokens, targets,
/// colors, the empty-quadrant word, template words, and the label words
/// (needed by the pair-query mode).
pub fn synthetic_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = Vec::new();
    words.extend_from_slice(&TARGET_WORDS);
    words.extend_from_slice(&COLOR_WORDS);
    words.push(EMPTY_WORD);
    for (prefix, suffix) in TEMPLATES {
        for w in prefix.split_whitespace().chain(suffix.split_whitespace()) {
            if !words.contains(&w) {
                words.push(w);
            }
        }
    }
    words.extend_from_slice(&SENTIMENT_CLASSES);
    Vocabulary::with_words(&words).expect("static word list is valid")
}

/// Paint one quadrant: `color` of `None` leaves background, otherwise a
/// centered bright square in that color.
fn paint_quadrant<E: Element>(
    data: &mut [E],
    size: usize,
    quadrant: usize,
    color: Option<usize>,
    rng: &mut ChaCha8Rng,
) {
    let q = size / 2;
    let (qy, qx) = (quadrant / 2, quadrant % 2);
    // active color channels: red {0}, green {1}, blue {2}, yellow {0,1}
    let channels: &[usize] = match color {
        Some(0) => &[0],
        Some(1) => &[1],
        Some(2) => &[2],
        Some(3) => &[0, 1],
        _ => &[],
    };
    for y in 0..q {
        for x in 0..q {
            let (iy, ix) = (qy * q + y, qx * q + x);
            let inside = color.is_some() && y >= 1 && y + 1 < q && x >= 1 && x + 1 < q;
            for c in 0..3 {
                let v = if inside && channels.contains(&c) {
                    0.9 + rng.gen::<f64>() * 0.1
                } else {
                    0.05 + rng.gen::<f64>() * 0.05
                };
                data[(c * size + iy) * size + ix] = E::from_f64(v);
            }
        }
    }
}

fn render_image<E: Element>(size: usize, quadrant_colors: &[Option<usize>; 4], rng: &mut ChaCha8Rng) -> Result<ImageTensor<E>> {
    let mut data = vec![E::zero(); 3 * size * size];
    for (q, color) in quadrant_colors.iter().enumerate() {
        paint_quadrant(&mut data, size, q, *color, rng);
    }
    ImageTensor::new(Tensor::from_vec(vec![3, size, size], data)?)
}

/// Caption text for a quadrant assignment: one word per quadrant in raster
/// order (its color word, or "empty"). Always exactly four words.
fn caption_text(quadrant_colors: &[Option<usize>; 4]) -> String {
    quadrant_colors
        .iter()
        .map(|c| match c {
            Some(i) => COLOR_WORDS[*i],
            None => EMPTY_WORD,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn generate_sentiment_split<E: Element>(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<LabeledSplit<E>> {
    let mut samples = Vec::with_capacity(n);
    let mut blob_colors = Vec::with_capacity(n);
    for _ in 0..n {
        let target = TARGET_WORDS[rng.gen_range(0..TARGET_WORDS.len())];
        let (prefix, suffix) = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let color = rng.gen_range(0..COLOR_WORDS.len());
        let quadrant = rng.gen_range(0..4usize);
        let mut colors = [None; 4];
        colors[quadrant] = Some(color);
        let image = render_image(size, &colors, rng)?;
        let sentence = format!("{prefix}{target}{suffix}");
        let label_word = synthetic_label(target, COLOR_WORDS[color])?;
        let label = SENTIMENT_CLASSES.iter().position(|c| *c == label_word).unwrap();
        samples.push(MultimodalSample {
            sentence,
            target: target.to_string(),
            image,
            label,
        });
        blob_colors.push(COLOR_WORDS[color].to_string());
    }
    Ok(LabeledSplit { samples, blob_colors })
}

/// Generate the full synthetic corpus. Deterministic in `spec.seed`.
pub fn generate_synthetic<E: Element>(spec: &SynthSpec) -> Result<SyntheticBundle<E>> {
    if spec.image_size < 2 || spec.image_size % 2 != 0 {
        return Err(Error::Config(format!(
            "synthetic image size must be even and >= 2, got {}",
            spec.image_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = synthetic_vocabulary();

    let mut images = Vec::with_capacity(spec.caption_pairs);
    let mut captions = Vec::with_capacity(spec.caption_pairs);
    for _ in 0..spec.caption_pairs {
        let mut colors = [None; 4];
        for slot in &mut colors {
            if rng.gen_bool(0.6) {
                *slot = Some(rng.gen_range(0..COLOR_WORDS.len()));
            }
        }
        captions.push(caption_text(&colors));
        images.push(render_image(spec.image_size, &colors, &mut rng)?);
    }

    Ok(SyntheticBundle {
        vocab,
        classes: SENTIMENT_CLASSES.iter().map(|s| s.to_string()).collect(),
        captions: CaptionDataset { images, captions },
        train: generate_sentiment_split(spec.train, spec.image_size, &mut rng)?,
        val: generate_sentiment_split(spec.val, spec.image_size, &mut rng)?,
        test: generate_sentiment_split(spec.test, spec.image_size, &mut rng)?,
    })
}

/// Best possible accuracy of any classifier that sees only (sentence,
/// target): group the samples by their text, predict each group's majority
/// label. Computed by exhaustive enumeration of the sample set.
pub fn text_only_bayes_accuracy<E: Element>(samples: &[MultimodalSample<E>]) -> f64 {
    use std::collections::HashMap;
    let mut groups: HashMap<(String, String), Vec<usize>> = HashMap::new();
    for s in samples {
        groups
            .entry((s.sentence.clone(), s.target.clone()))
            .or_default()
            .push(s.label);
    }
    let mut correct = 0usize;
    for labels in groups.values() {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for l in labels {
            *counts.entry(*l).or_default() += 1;
        }
        correct += counts.values().max().copied().unwrap_or(0);
    }
    correct as f64 / samples.len() as f64
}

fn write_split(
    out: &Path,
    name: &str,
    split: &LabeledSplit<f32>,
    classes: &[String],
) -> Result<()> {
    let mut records = Vec::with_capacity(split.samples.len());
    for (i, s) in split.samples.iter().enumerate() {
        let image_rel = format!("images/sent_{name}_{i:04}.ten");
        write_ten(&out.join(&image_rel), s.image.tensor())?;
        let start = s
            .sentence
            .find(&s.target)
            .ok_or_else(|| Error::Parse("target not found in sentence".into()))?;
        records.push(SentimentRecord {
            sentence: s.sentence.clone(),
            target_start: start,
            target_end: start + s.target.len(),
            label: classes[s.label].clone(),
            image: image_rel,
        });
    }
    write_jsonl(&out.join(format!("sentiment_{name}.jsonl")), &records)
}

/// Generate and write the corpus under `out`: vocab.txt, images/*.ten,
/// captions_train.jsonl, sentiment_{train,val,test}.jsonl. Byte-identical
/// for identical specs.
pub fn write_synthetic(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    let bundle: SyntheticBundle<f32> = generate_synthetic(spec)?;
    fs::create_dir_all(out.join("images"))?;
    bundle.vocab.save(&out.join("vocab.txt"))?;

    let mut caption_records = Vec::new();
    for (i, (img, cap)) in bundle
        .captions
        .images
        .iter()
        .zip(&bundle.captions.captions)
        .enumerate()
    {
        let image_rel = format!("images/cap_{i:04}.ten");
        write_ten(&out.join(&image_rel), img.tensor())?;
        caption_records.push(CaptionRecord {
            image: image_rel,
            caption: cap.clone(),
        });
    }
    write_jsonl(&out.join("captions_train.jsonl"), &caption_records)?;

    write_split(out, "train", &bundle.train, &bundle.classes)?;
    write_split(out, "val", &bundle.val, &bundle.classes)?;
    write_split(out, "test", &bundle.test, &bundle.classes)?;

    let mut spec_file = fs::File::create(out.join("synth_spec.json"))?;
    spec_file.write_all(serde_json::to_string_pretty(spec).map_err(|e| Error::Parse(e.to_string()))?.as_bytes())?;
    spec_file.write_all(b"\n")?;
    Ok(out.to_path_buf())
}
