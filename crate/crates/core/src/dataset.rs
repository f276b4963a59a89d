//! Synthetic grating corpora, pair/triplet construction and PPM I/O.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distortions::DistortionSpec;
use crate::error::{Error, Result};
use crate::evaluation::PairSet;
use crate::image::Image;
use crate::objectives::Triplet;

/// Smallest accepted corpus side length.
pub const MIN_CORPUS_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// Per-instance variation around each class's base grating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Jitter {
    /// Phase offset drawn from `±phase·π`.
    pub phase: f64,
    /// Relative frequency change drawn from `±frequency`.
    pub frequency: f64,
    /// Orientation offset drawn from `±orientation·π/(4C)`.
    pub orientation: f64,
    /// Additive per-channel tint drawn from `±tint`.
    pub tint: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            phase: 0.5,
            frequency: 0.1,
            orientation: 1.0,
            tint: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub jitter: Jitter,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 25,
            width: crate::network::DEFAULT_INPUT_SIDE,
            height: crate::network::DEFAULT_INPUT_SIDE,
            channels: 3,
            jitter: Jitter::default(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("corpus needs at least 2 classes, got {}", self.num_classes)));
        }
        if self.per_class == 0 {
            return Err(Error::config("corpus needs at least one image per class"));
        }
        if self.width < MIN_CORPUS_SIDE || self.height < MIN_CORPUS_SIDE {
            return Err(Error::config(format!(
                "corpus images must be at least {MIN_CORPUS_SIDE}×{MIN_CORPUS_SIDE}, got {}×{}",
                self.width, self.height
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("corpus channels must be 1 or 3, got {}", self.channels)));
        }
        let j = &self.jitter;
        for (name, v) in [("phase", j.phase), ("frequency", j.frequency), ("orientation", j.orientation), ("tint", j.tint)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("jitter {name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn symmetric<R: Rng>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

/// Class `c` is a sinusoidal grating at orientation `cπ/C` with `2 + c`
/// cycles across the image; each instance jitters phase, frequency,
/// orientation and tint. Images are ordered class-major.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let c_total = spec.num_classes as f64;
    let (w, h, ch) = (spec.width, spec.height, spec.channels);
    let j = spec.jitter;
    let mut out = Vec::with_capacity(spec.len());
    for class in 0..spec.num_classes {
        for inst in 0..spec.per_class {
            let index = class * spec.per_class + inst;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64);
            let theta = class as f64 * PI / c_total + symmetric(&mut rng, j.orientation * PI / (4.0 * c_total));
            let freq = (2.0 + class as f64) * (1.0 + symmetric(&mut rng, j.frequency));
            let phase = symmetric(&mut rng, j.phase * PI);
            let tint: Vec<f64> = (0..ch).map(|_| symmetric(&mut rng, j.tint)).collect();
            let (s, c) = theta.sin_cos();
            let mut px = Vec::with_capacity(w * h * ch);
            for y in 0..h {
                let v = (y as f64 + 0.5) / h as f64;
                for x in 0..w {
                    let u = (x as f64 + 0.5) / w as f64;
                    let g = (2.0 * PI * freq * (u * c + v * s) + phase).sin();
                    px.extend(tint.iter().map(|t| 0.5 + 0.35 * g + t));
                }
            }
            out.push(LabeledExample {
                image: Image::from_clamped(w, h, ch, px)?,
                label: class,
            });
        }
    }
    Ok(out)
}

/// Mean Euclidean pixel distance between same-class and different-class pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSeparation {
    pub intra: f64,
    pub inter: f64,
}

pub fn class_separation(corpus: &[LabeledExample]) -> ClassSeparation {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in corpus.iter().enumerate() {
        for b in &corpus[i + 1..] {
            let d = a
                .image
                .pixels()
                .iter()
                .zip(b.image.pixels())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            if a.label == b.label {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    ClassSeparation {
        intra: if ni == 0 { 0.0 } else { intra / ni as f64 },
        inter: if nx == 0 { 0.0 } else { inter / nx as f64 },
    }
}

fn by_class(corpus: &[LabeledExample]) -> Vec<Vec<usize>> {
    let classes = corpus.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let mut groups = vec![Vec::new(); classes];
    for (i, e) in corpus.iter().enumerate() {
        groups[e.label].push(i);
    }
    groups
}

/// Positives are `(x, distort(x))` for distinct corpus images; negatives are
/// distinct same-class instance pairs.
pub fn make_pairs(
    corpus: &[LabeledExample],
    distortion: &DistortionSpec,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<PairSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n_pos > corpus.len() {
        return Err(Error::data(format!(
            "{n_pos} positive pairs requested from a corpus of {} images",
            corpus.len()
        )));
    }
    let mut positives = Vec::with_capacity(n_pos);
    for i in index::sample(&mut rng, corpus.len(), n_pos) {
        let x = &corpus[i].image;
        positives.push((x.clone(), distortion.apply(x, i as u64)?));
    }

    let mut candidates = Vec::new();
    for group in by_class(corpus) {
        for (a, &i) in group.iter().enumerate() {
            for &j in &group[a + 1..] {
                candidates.push((i, j));
            }
        }
    }
    if n_neg > candidates.len() {
        return Err(Error::data(format!(
            "{n_neg} negative pairs requested but the corpus has only {} same-class pairs",
            candidates.len()
        )));
    }
    let negatives = index::sample(&mut rng, candidates.len(), n_neg)
        .into_iter()
        .map(|k| {
            let (i, j) = candidates[k];
            (corpus[i].image.clone(), corpus[j].image.clone())
        })
        .collect();
    PairSet::new(positives, negatives)
}

/// Corpus indices `(q, p, n)`: `q ≠ p` share a class and `n` is from another class.
pub fn make_triplet_indices(corpus: &[LabeledExample], n: usize, seed: u64) -> Result<Vec<(usize, usize, usize)>> {
    let groups = by_class(corpus);
    let present: Vec<usize> = (0..groups.len()).filter(|c| !groups[*c].is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::data("triplets need at least two classes"));
    }
    if let Some(c) = present.iter().find(|c| groups[**c].len() < 2) {
        return Err(Error::data(format!("class {c} has fewer than 2 instances")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ci = rng.random_range(0..present.len());
        let c = present[ci];
        let pick = index::sample(&mut rng, groups[c].len(), 2);
        let (q, p) = (groups[c][pick.index(0)], groups[c][pick.index(1)]);
        let mut other = rng.random_range(0..present.len() - 1);
        if other >= ci {
            other += 1;
        }
        let nn = *groups[present[other]].choose(&mut rng).expect("non-empty class");
        out.push((q, p, nn));
    }
    Ok(out)
}

pub fn make_triplets(corpus: &[LabeledExample], n: usize, seed: u64) -> Result<Vec<Triplet>> {
    make_triplet_indices(corpus, n, seed)?
        .into_iter()
        .map(|(q, p, nn)| Triplet::new(corpus[q].image.clone(), corpus[p].image.clone(), corpus[nn].image.clone()))
        .collect()
}

/// Binary PPM (`P6`) for RGB, binary PGM (`P5`) for single-channel images.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Skips whitespace and comments, then reads one decimal header field.
fn header_field(bytes: &[u8], pos: &mut usize, name: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|b| *b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(Error::parse(*pos, format!("header ends before {name}"))),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse(start, format!("expected a decimal {name}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| Error::parse(start, format!("{name} out of range")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = bytes.get(..2).ok_or_else(|| Error::parse(0, "missing PPM magic"))?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(Error::parse(0, "expected P6 or P5 magic")),
    };
    pos += 2;
    let width = header_field(bytes, &mut pos, "width")?;
    let height = header_field(bytes, &mut pos, "height")?;
    let maxval_at = pos;
    let maxval = header_field(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!(
            "PPM maxval {maxval} at byte {maxval_at}; only 255 is supported"
        )));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::parse(pos, "expected whitespace after maxval")),
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::parse(0, "image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::parse(
            bytes.len(),
            format!("payload truncated: {} of {n} bytes", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(Error::parse(pos + n, "trailing bytes after payload"));
    }
    let px = payload.iter().map(|b| f64::from(*b) / 255.0).collect();
    Image::new(width, height, channels, px)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

/// Directory listing of a stored corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<CorpusSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion: Option<DistortionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub files: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn image_file_name(index: usize, label: usize) -> String {
    format!("img_{index:05}_c{label}.ppm")
}

/// Writes every example into `dir` and returns the manifest (not yet saved).
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &[LabeledExample]) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(corpus.len());
    for (i, ex) in corpus.iter().enumerate() {
        let name = image_file_name(i, ex.label);
        write_image(dir.join(&name), &ex.image)?;
        files.push(ManifestEntry { path: name, label: ex.label });
    }
    Ok(CorpusManifest {
        spec: None,
        distortion: None,
        config_digest: None,
        files,
    })
}

/// Loads the corpus listed in `dir/manifest.json`.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let dir = dir.as_ref();
    let manifest = CorpusManifest::read(dir)?;
    manifest
        .files
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            Ok(LabeledExample {
                image: read_image(&path)?,
                label: e.label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortions::Distortion;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_classes: 3,
            per_class: 6,
            seed: 42,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        assert_eq!(a, b);
        let other = generate_corpus(&CorpusSpec { seed: 43, ..small_spec() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn instances_of_a_class_differ() {
        let c = generate_corpus(&small_spec()).unwrap();
        assert_eq!(c.len(), 18);
        assert_ne!(c[0].image, c[1].image);
        assert!(c.iter().take(6).all(|e| e.label == 0));
    }

    #[test]
    fn classes_are_separated() {
        let c = generate_corpus(&small_spec()).unwrap();
        let s = class_separation(&c);
        assert!(s.inter > s.intra, "{s:?}");
    }

    #[test]
    fn spec_validation() {
        assert!(generate_corpus(&CorpusSpec { num_classes: 1, ..small_spec() }).is_err());
        assert!(generate_corpus(&CorpusSpec { width: 15, ..small_spec() }).is_err());
    }

    #[test]
    fn pairs_have_requested_counts() {
        let c = generate_corpus(&small_spec()).unwrap();
        let d = DistortionSpec::new(Distortion::Jpeg { quality: 50 }, 1);
        let p = make_pairs(&c, &d, 10, 20, 3).unwrap();
        assert_eq!(p.positives().len(), 10);
        assert_eq!(p.negatives().len(), 20);
        // 3 classes × C(6,2) = 45 same-class pairs
        assert!(make_pairs(&c, &d, 10, 46, 3).is_err());
        assert!(make_pairs(&c, &d, 19, 1, 3).is_err());
    }

    #[test]
    fn identity_distortion_positives_are_equal() {
        let c = generate_corpus(&small_spec()).unwrap();
        let d = DistortionSpec::new(Distortion::Gaussian { sigma: 0.0 }, 1);
        let p = make_pairs(&c, &d, 12, 5, 3).unwrap();
        assert!(p.positives().iter().all(|(a, b)| a == b));
        assert!(p.negatives().iter().all(|(a, b)| a != b));
    }

    #[test]
    fn triplet_labels() {
        let c = generate_corpus(&small_spec()).unwrap();
        let t = make_triplet_indices(&c, 50, 9).unwrap();
        assert_eq!(t.len(), 50);
        for &(q, p, n) in &t {
            assert_ne!(q, p);
            assert_eq!(c[q].label, c[p].label);
            assert_ne!(c[q].label, c[n].label);
        }
        assert_eq!(t, make_triplet_indices(&c, 50, 9).unwrap());
    }

    #[test]
    fn singleton_class_rejected() {
        let c = generate_corpus(&CorpusSpec { per_class: 1, ..small_spec() }).unwrap();
        assert!(matches!(make_triplets(&c, 3, 0), Err(Error::Data(_))));
    }

    #[test]
    fn ppm_round_trip() {
        let px: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Image::new(16, 16, 3, px).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        let gray = Image::new(8, 8, 1, (0..64).map(|i| i as f64 / 255.0).collect()).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&gray)).unwrap(), gray);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6 # made by hand\n8 8\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(255u8, 192));
        let img = decode_ppm(&bytes).unwrap();
        assert!(img.pixels().iter().all(|p| *p == 1.0));
    }

    #[test]
    fn ppm_errors() {
        assert!(matches!(decode_ppm(b""), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P3\n8 8\n255\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\n8 x\n255\n"), Err(Error::Parse { offset: 5, .. })));
        assert!(matches!(decode_ppm(b"P6\n8 8\n65535\n"), Err(Error::Unsupported(_))));
        let mut short = b"P6\n8 8\n255\n".to_vec();
        short.extend([0u8; 100]);
        assert!(matches!(decode_ppm(&short), Err(Error::Parse { offset: 111, .. })));
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&small_spec()).unwrap();
        let m = write_corpus(dir.path(), &c).unwrap();
        m.write(dir.path()).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), c.len());
        for (a, b) in c.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
