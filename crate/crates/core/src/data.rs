//! Dataset ingestion: FER2013-format CSV, `train/test/{emotion}` image
//! folders, class statistics, class weights, batching, and synthetic
//! fixtures.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FER_SIDE: usize = 48;
pub const FER_PIXELS: usize = FER_SIDE * FER_SIDE;

/// Emotion labels in FER2013 code order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Emotion {
    Angry = 0,
    Disgust = 1,
    Fear = 2,
    Happy = 3,
    Sad = 4,
    Surprise = 5,
    Neutral = 6,
}

impl Emotion {
    pub const ALL: [Emotion; 7] = [
        Emotion::Angry,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Surprise,
        Emotion::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Surprise => "surprise",
            Emotion::Neutral => "neutral",
        }
    }

    /// Case-insensitive; accepts "surprised" and "fearful" spellings too.
    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "angry" | "anger" => Some(Emotion::Angry),
            "disgust" | "disgusted" => Some(Emotion::Disgust),
            "fear" | "fearful" => Some(Emotion::Fear),
            "happy" | "happiness" => Some(Emotion::Happy),
            "sad" | "sadness" => Some(Emotion::Sad),
            "surprise" | "surprised" => Some(Emotion::Surprise),
            "neutral" => Some(Emotion::Neutral),
            _ => None,
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.name();
        let mut c = n.chars();
        let first = c.next().unwrap().to_ascii_uppercase();
        write!(f, "{first}{}", c.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Training,
    PublicTest,
    PrivateTest,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Training => "Training",
            Split::PublicTest => "PublicTest",
            Split::PrivateTest => "PrivateTest",
            Split::Test => "Test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Training" => Some(Split::Training),
            "PublicTest" => Some(Split::PublicTest),
            "PrivateTest" => Some(Split::PrivateTest),
            "Test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One labeled image, `[channels, height, width]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub split: Split,
}

/// Target tensor layout for decoded images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 64,
            width: 64,
        }
    }
}

impl ImageSpec {
    pub fn from_shape(shape: [usize; 3]) -> Self {
        Self {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn check(&self) -> Result<()> {
        if !matches!(self.channels, 1 | 3) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image spec {}x{}x{} unsupported; channels must be 1 or 3",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Bilinear resize of a grayscale plane, then replication to `spec.channels`.
fn gray_to_tensor(pixels: Vec<f32>, w: u32, h: u32, spec: &ImageSpec) -> Tensor<f32> {
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w, h, pixels).expect("buffer size");
    let plane = imageops::resize(
        &buf,
        spec.width as u32,
        spec.height as u32,
        FilterType::Triangle,
    )
    .into_raw();
    let mut data = Vec::with_capacity(spec.channels * plane.len());
    for _ in 0..spec.channels {
        data.extend(plane.iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Tensor::new(&spec.shape(), data).expect("shape matches")
}

fn rgb_to_tensor(buf: ImageBuffer<Rgb<f32>, Vec<f32>>, spec: &ImageSpec) -> Tensor<f32> {
    let resized = imageops::resize(
        &buf,
        spec.width as u32,
        spec.height as u32,
        FilterType::Triangle,
    );
    let hw = spec.height * spec.width;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c].clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, spec.height, spec.width], data).expect("shape matches")
}

/// Read a FER2013 CSV (`emotion,pixels,Usage`). Rows are numbered from 1,
/// not counting the header.
pub fn read_fer_csv(path: impl AsRef<Path>, spec: &ImageSpec) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    spec.check()?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_fer_from(file, path, spec)
}

pub fn read_fer_from(
    reader: impl std::io::Read,
    path: &Path,
    spec: &ImageSpec,
) -> Result<Vec<Sample>> {
    let row_err = |row: usize, reason: String| Error::CsvRow {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| row_err(0, format!("header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| row_err(0, format!("missing column {name:?}")))
    };
    let (ce, cp, cu) = (col("emotion")?, col("pixels")?, col("usage")?);
    let mut samples = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| row_err(row, e.to_string()))?;
        let field = |c: usize| {
            record
                .get(c)
                .map(str::trim)
                .ok_or_else(|| row_err(row, "missing field".into()))
        };
        let code: usize = field(ce)?.parse().map_err(|_| {
            row_err(
                row,
                format!("emotion {:?} is not an integer", field(ce).unwrap_or("")),
            )
        })?;
        let emotion = Emotion::from_index(code)
            .ok_or_else(|| row_err(row, format!("unknown emotion code {code}")))?;
        let usage = field(cu)?;
        let split = match Split::parse(usage) {
            Some(s @ (Split::Training | Split::PublicTest | Split::PrivateTest)) => s,
            _ => return Err(row_err(row, format!("unknown Usage {usage:?}"))),
        };
        let mut pixels = Vec::with_capacity(FER_PIXELS);
        for tok in field(cp)?.split_ascii_whitespace() {
            let v: u8 = tok
                .parse()
                .map_err(|_| row_err(row, format!("pixel {tok:?} is not an integer in 0..=255")))?;
            pixels.push(v as f32 / 255.0);
        }
        if pixels.len() != FER_PIXELS {
            return Err(row_err(
                row,
                format!("expected {FER_PIXELS} pixels, found {}", pixels.len()),
            ));
        }
        samples.push(Sample {
            image: gray_to_tensor(pixels, FER_SIDE as u32, FER_SIDE as u32, spec),
            label: emotion.index(),
            split,
        });
    }
    Ok(samples)
}

/// Samples plus non-fatal findings (such as empty class directories).
#[derive(Clone, Debug, Default)]
pub struct FolderData {
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

const FOLDER_LAYOUT: &str = "expected <root>/train/<emotion>/* and <root>/test/<emotion>/*";

/// Read `root/{train,test}/{emotion}/*` (PNG or JPEG). Files are visited in
/// sorted name order, so the sample sequence is stable.
pub fn read_image_folder(root: impl AsRef<Path>, spec: &ImageSpec) -> Result<FolderData> {
    let root = root.as_ref();
    spec.check()?;
    let layout = |path: &Path, reason: String| Error::Layout {
        path: path.to_path_buf(),
        reason,
    };
    let mut out = FolderData::default();
    for (dir, split) in [("train", Split::Training), ("test", Split::Test)] {
        let split_dir = root.join(dir);
        if !split_dir.is_dir() {
            return Err(layout(
                &split_dir,
                format!("missing {dir:?} directory; {FOLDER_LAYOUT}"),
            ));
        }
        let mut seen = [false; 7];
        for class_dir in sorted_entries(&split_dir)? {
            let name = class_dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .to_string();
            if name.starts_with('.') {
                continue;
            }
            if !class_dir.is_dir() {
                return Err(layout(
                    &class_dir,
                    format!("unexpected file; {FOLDER_LAYOUT}"),
                ));
            }
            let emotion = Emotion::from_name(&name).ok_or_else(|| {
                layout(
                    &class_dir,
                    format!("unknown class directory {name:?}; {FOLDER_LAYOUT}"),
                )
            })?;
            seen[emotion.index()] = true;
            let mut count = 0;
            for file in sorted_entries(&class_dir)? {
                if file
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with('.'))
                    || file.is_dir()
                {
                    continue;
                }
                let img = image::open(&file).map_err(|e| Error::Decode {
                    path: file.clone(),
                    reason: e.to_string(),
                })?;
                let image = if spec.channels == 1 {
                    let g = img.to_luma32f();
                    let (w, h) = g.dimensions();
                    gray_to_tensor(g.into_raw(), w, h, spec)
                } else {
                    rgb_to_tensor(img.to_rgb32f(), spec)
                };
                out.samples.push(Sample {
                    image,
                    label: emotion.index(),
                    split,
                });
                count += 1;
            }
            if count == 0 {
                out.warnings
                    .push(format!("{}: empty class directory", class_dir.display()));
            }
        }
        for e in Emotion::ALL.iter().filter(|e| !seen[e.index()]) {
            out.warnings.push(format!(
                "{}: no {} directory",
                split_dir.display(),
                e.name()
            ));
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// Per-split, per-class sample counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub splits: BTreeMap<Split, [usize; 7]>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitRow {
    pub split: Split,
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

impl DatasetStats {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut splits: BTreeMap<Split, [usize; 7]> = BTreeMap::new();
        for s in samples {
            splits.entry(s.split).or_default()[s.label] += 1;
        }
        Self { splits }
    }

    pub fn counts(&self, split: Split) -> [usize; 7] {
        self.splits.get(&split).copied().unwrap_or_default()
    }

    pub fn total(&self, split: Split) -> usize {
        self.counts(split).iter().sum()
    }

    pub fn grand_total(&self) -> usize {
        self.splits.values().flatten().sum()
    }

    pub fn rows(&self) -> Vec<SplitRow> {
        self.splits
            .iter()
            .map(|(&split, counts)| SplitRow {
                split,
                counts: Emotion::ALL
                    .iter()
                    .map(|e| (e.to_string(), counts[e.index()]))
                    .collect(),
                total: counts.iter().sum(),
            })
            .collect()
    }

    /// One row per class, one column per split, plus totals.
    pub fn to_csv(&self) -> String {
        let splits: Vec<Split> = self.splits.keys().copied().collect();
        let mut s = String::from("class");
        for sp in &splits {
            s.push(',');
            s.push_str(sp.name());
        }
        s.push('\n');
        for e in Emotion::ALL {
            s.push_str(&e.to_string());
            for sp in &splits {
                s.push_str(&format!(",{}", self.counts(*sp)[e.index()]));
            }
            s.push('\n');
        }
        s.push_str("Total");
        for sp in &splits {
            s.push_str(&format!(",{}", self.total(*sp)));
        }
        s.push('\n');
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "classes": Emotion::ALL.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
            "splits": self.rows(),
            "total": self.grand_total(),
        })
    }
}

/// Inverse-frequency weights `w_c = N / (7·n_c)` for one split.
pub fn class_weights(stats: &DatasetStats, split: Split) -> Result<[f64; 7]> {
    let counts = stats.counts(split);
    let total: usize = counts.iter().sum();
    let mut w = [0.0; 7];
    for e in Emotion::ALL {
        let n = counts[e.index()];
        if n == 0 {
            return Err(Error::EmptyClass {
                class: e.to_string(),
                split: split.to_string(),
            });
        }
        w[e.index()] = total as f64 / (7.0 * n as f64);
    }
    Ok(w)
}

/// Stack images into `[N, C, H, W]` and collect labels.
pub fn batch<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for s in samples {
        match &shape {
            None => shape = Some(s.image.shape().to_vec()),
            Some(sh) if sh != s.image.shape() => {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    lhs: sh.clone(),
                    rhs: s.image.shape().to_vec(),
                })
            }
            _ => {}
        }
        data.extend_from_slice(s.image.data());
        labels.push(s.label);
    }
    let shape = shape.ok_or(Error::EmptyDataset)?;
    let mut full = vec![labels.len()];
    full.extend(shape);
    Ok((Tensor::new(&full, data)?, labels))
}

/// Mirror a `[C, H, W]` image left to right in place.
pub fn hflip(image: &mut [f32], width: usize) {
    for row in image.chunks_exact_mut(width) {
        row.reverse();
    }
}

/// Seeded split of `samples` into (train, validation) with `val_fraction`
/// of each class held out (at least one per non-empty class when possible).
pub fn holdout(samples: Vec<Sample>, val_fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); 7];
    for s in samples {
        by_class[s.label.min(6)].push(s);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut group in by_class {
        group.shuffle(&mut rng);
        let k = ((group.len() as f64) * val_fraction).round() as usize;
        let k = k.min(group.len().saturating_sub(1));
        for (i, s) in group.into_iter().enumerate() {
            if i < k {
                val.push(s);
            } else {
                train.push(s);
            }
        }
    }
    (train, val)
}

/// One raw FER2013 row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FerRow {
    pub emotion: usize,
    pub pixels: Vec<u8>,
    pub usage: Split,
}

/// Synthetic FER-format rows: each class brightens its own horizontal band
/// of the 48×48 frame, over per-pixel noise.
pub fn synthetic_fer_rows(per_class: usize, usage: Split, seed: u64) -> Vec<FerRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = FER_SIDE / 7;
    let mut rows = Vec::with_capacity(per_class * 7);
    for _ in 0..per_class {
        for e in Emotion::ALL {
            let c = e.index();
            let pixels = (0..FER_PIXELS)
                .map(|i| {
                    let y = i / FER_SIDE;
                    let base = if y / band == c { 200.0 } else { 60.0 };
                    let v: f64 = base + rng.gen_range(-40.0..40.0);
                    v.round().clamp(0.0, 255.0) as u8
                })
                .collect();
            rows.push(FerRow {
                emotion: c,
                pixels,
                usage,
            });
        }
    }
    rows
}

pub fn write_fer_csv(mut w: impl Write, rows: &[FerRow]) -> std::io::Result<()> {
    writeln!(w, "emotion,pixels,Usage")?;
    for r in rows {
        let px: Vec<String> = r.pixels.iter().map(u8::to_string).collect();
        writeln!(w, "{},{},{}", r.emotion, px.join(" "), r.usage)?;
    }
    Ok(())
}

/// Write a `train/test/{emotion}` PNG fixture with `per_class` images per
/// class and split.
pub fn write_image_folder(
    root: impl AsRef<Path>,
    per_class: usize,
    side: u32,
    seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for dir in ["train", "test"] {
        for e in Emotion::ALL {
            let d = root.join(dir).join(e.name());
            std::fs::create_dir_all(&d).map_err(|err| Error::io(&d, err))?;
            for k in 0..per_class {
                let shade = (30 * e.index()) as u8;
                let img = ImageBuffer::from_fn(side, side, |_, _| {
                    Rgb([shade, rng.gen::<u8>() / 4, 255 - shade])
                });
                let path = d.join(format!("{k:04}.png"));
                img.save(&path).map_err(|err| Error::Decode {
                    path: path.clone(),
                    reason: err.to_string(),
                })?;
            }
        }
    }
    Ok(())
}

/// Linearly separable 7-class blobs: each class has a fixed random mean
/// image and samples add Gaussian noise of standard deviation `noise`.
pub fn blobs(
    per_class: usize,
    spec: &ImageSpec,
    noise: f64,
    split: Split,
    seed: u64,
    means_seed: u64,
) -> Vec<Sample> {
    let numel = spec.channels * spec.height * spec.width;
    let mut mrng = ChaCha8Rng::seed_from_u64(means_seed);
    let means: Vec<Vec<f64>> = (0..7)
        .map(|_| (0..numel).map(|_| mrng.gen_range(0.1..0.9)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * 7);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            let data = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (m + noise * z).clamp(0.0, 1.0) as f32
                })
                .collect();
            out.push(Sample {
                image: Tensor::new(&spec.shape(), data).expect("shape"),
                label: c,
                split,
            });
        }
    }
    out
}
