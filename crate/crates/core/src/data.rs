//! Image datasets: the CIFAR-10 binary record format and a synthetic
//! texture task whose classes differ only in a small striped patch.
//!
//! Images are held as bytes (`C*H*W` per record, channel-major) and scaled
//! to `[0, 1]` on access.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const META_FILE: &str = "batches.meta.txt";
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<u8>,
        (channels, height, width): (usize, usize, usize),
        label_names: Vec<String>,
    ) -> Result<Self> {
        if pixels.len() != labels.len() * channels * height * width {
            return Err(Error::Data(format!(
                "{} pixel bytes for {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            pixels,
            labels,
            channels,
            height,
            width,
            label_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Number of classes: the label map size, or one more than the largest
    /// label when no map is known.
    pub fn num_classes(&self) -> usize {
        let seen = self
            .labels
            .iter()
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0);
        seen.max(self.label_names.len())
    }

    /// `[C, H, W]` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self.pixels(i).iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(&[self.channels, self.height, self.width], data).expect("image shape")
    }

    /// Scaled, per-channel standardized image, optionally mirrored left to
    /// right.
    pub fn normalized_image(&self, i: usize, stats: &ChannelStats, flip: bool) -> Tensor {
        let (h, w) = (self.height, self.width);
        let src = self.pixels(i);
        let mut out = vec![0.0; self.image_len()];
        for c in 0..self.channels {
            let (m, s) = (stats.mean[c], stats.std[c]);
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    let v = src[(c * h + y) * w + sx] as f64 / 255.0;
                    out[(c * h + y) * w + x] = (v - m) / s;
                }
            }
        }
        Tensor::new(&[self.channels, h, w], out).expect("image shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.pixels(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            pixels,
            labels,
            channels: self.channels,
            height: self.height,
            width: self.width,
            label_names: self.label_names.clone(),
        }
    }

    fn append(&mut self, other: Dataset) {
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
    }
}

/// Per-channel mean and standard deviation of `[0, 1]` pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Statistics over every pixel of the dataset; a vanishing deviation
/// (below 1e-6, i.e. a constant channel) is replaced by 1.
pub fn channel_stats(ds: &Dataset) -> ChannelStats {
    let plane = ds.height * ds.width;
    let mut sum = vec![0.0; ds.channels];
    let mut sq = vec![0.0; ds.channels];
    for i in 0..ds.len() {
        for (c, chunk) in ds.pixels(i).chunks(plane).enumerate() {
            for &b in chunk {
                let v = b as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let n = (ds.len() * plane).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let s = (q / n - m * m).max(0.0).sqrt();
            if s > 1e-6 {
                s
            } else {
                1.0
            }
        })
        .collect();
    ChannelStats { mean, std }
}

/// Decodes CIFAR-10 records. `label_limit` bounds the label byte.
pub fn parse_cifar(bytes: &[u8], label_limit: usize) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            detail: format!(
                "incomplete record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= label_limit {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                detail: format!("label {} outside 0..{label_limit}", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::new(pixels, labels, (3, CIFAR_SIDE, CIFAR_SIDE), Vec::new())
}

pub fn encode_cifar(ds: &Dataset) -> Result<Vec<u8>> {
    if (ds.channels, ds.height, ds.width) != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::Data(format!(
            "CIFAR records hold 3x32x32 images, not {}x{}x{}",
            ds.channels, ds.height, ds.width
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        out.extend_from_slice(ds.pixels(i));
    }
    Ok(out)
}

pub fn write_cifar_file(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_cifar(ds)?)?;
    Ok(())
}

/// Reads one record file; format errors name the file.
pub fn load_cifar_file(path: &Path, label_limit: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_cifar(&bytes, label_limit).map_err(|e| match e {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn read_label_names(dir: &Path) -> Result<Vec<String>> {
    let p = dir.join(META_FILE);
    if !p.exists() {
        return Ok(Vec::new());
    }
    Ok(fs::read_to_string(p)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_label_names(dir: &Path, names: &[String]) -> Result<()> {
    let mut s = names.join("\n");
    s.push('\n');
    fs::write(dir.join(META_FILE), s)?;
    Ok(())
}

/// `data_batch_*.bin` files of a directory, sorted by name.
pub fn train_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn label_limit(names: &[String]) -> usize {
    if names.is_empty() {
        10
    } else {
        names.len().min(256)
    }
}

/// Training split (all `data_batch_*.bin`) and, when present, the test
/// split of a CIFAR-10 directory. A plain file path loads just that file.
pub fn load_cifar10(path: &Path) -> Result<(Dataset, Option<Dataset>)> {
    if path.is_file() {
        return Ok((load_cifar_file(path, 256)?, None));
    }
    let names = read_label_names(path)?;
    let limit = label_limit(&names);
    let files = train_files(path)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no data_batch_*.bin files in {}",
            path.display()
        )));
    }
    let mut train: Option<Dataset> = None;
    for f in &files {
        let part = load_cifar_file(f, limit)?;
        match &mut train {
            Some(t) => t.append(part),
            None => train = Some(part),
        }
    }
    let mut train = train.expect("at least one file");
    train.label_names = names.clone();
    let test_path = path.join(TEST_FILE);
    let test = if test_path.exists() {
        let mut t = load_cifar_file(&test_path, limit)?;
        t.label_names = names;
        Some(t)
    } else {
        None
    };
    Ok((train, test))
}

/// Validates every record file of a CIFAR-10 directory; returns
/// `(file name, record count)` pairs.
pub fn check_cifar_dir(dir: &Path) -> Result<Vec<(String, usize)>> {
    let names = read_label_names(dir)?;
    let limit = label_limit(&names);
    let mut files = train_files(dir)?;
    if dir.join(TEST_FILE).exists() {
        files.push(dir.join(TEST_FILE));
    }
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no CIFAR-10 record files in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|f| {
            let ds = load_cifar_file(f, limit)?;
            let name = f
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("?")
                .to_string();
            Ok((name, ds.len()))
        })
        .collect()
}

/// Synthetic fine-grained texture task.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub size: usize,
    /// Side of the striped signature patch.
    pub patch: usize,
    pub noise_std: f64,
    /// Classes `2m` and `2m + 1` share palette `m` when set.
    pub paired_palettes: bool,
    /// Seeds the palette table; images draw from their own streams.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            size: CIFAR_SIDE,
            patch: 8,
            noise_std: 0.05,
            paired_palettes: true,
            seed: 1,
        }
    }
}

struct Palette {
    angle: f64,
    /// `(base, amplitude, phase)` per channel.
    channel: [(f64, f64, f64); 3],
    size: f64,
}

impl Palette {
    fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        let (base, amp, phase) = self.channel[c];
        let u = (x as f64 * self.angle.cos() + y as f64 * self.angle.sin()) / self.size;
        base + amp * (PI * u + phase).cos()
    }
}

const STRIPE_ORIENTATIONS: usize = 4;
const STRIPE_AMPLITUDE: f64 = 0.35;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 64 {
            return Err(Error::Config(format!(
                "synthetic classes {} outside 2..=64",
                self.classes
            )));
        }
        if self.patch < 4 || self.patch > self.size {
            return Err(Error::Config(format!(
                "stripe patch {} must lie in 4..={}",
                self.patch, self.size
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn palette_of(&self, class: usize) -> usize {
        if self.paired_palettes {
            class / 2
        } else {
            class
        }
    }

    /// `(cycles per patch, orientation in radians)`; distinct per class.
    pub fn signature(&self, class: usize) -> (f64, f64) {
        let freq = 1.5 + (class / STRIPE_ORIENTATIONS) as f64;
        let angle = (class % STRIPE_ORIENTATIONS) as f64 * PI / STRIPE_ORIENTATIONS as f64;
        (freq, angle)
    }

    /// Low-frequency color gradient of one palette.
    fn palette(&self, palette: usize) -> Palette {
        let mut r = Rng::derive(self.seed, Purpose::Synthetic, &[u64::MAX, palette as u64]);
        let angle = r.uniform() * 2.0 * PI;
        let mut channel = [(0.0, 0.0, 0.0); 3];
        for ch in &mut channel {
            *ch = (
                0.3 + 0.4 * r.uniform(),
                0.1 + 0.15 * r.uniform(),
                r.uniform() * 2.0 * PI,
            );
        }
        Palette {
            angle,
            channel,
            size: self.size as f64,
        }
    }

    fn stripe(&self, class: usize, dy: usize, dx: usize) -> f64 {
        let (freq, angle) = self.signature(class);
        let u = (dx as f64 * angle.cos() + dy as f64 * angle.sin()) / self.patch as f64;
        (2.0 * PI * freq * u).sin()
    }
}

/// One `[3, size, size]` image in `[0, 1]`. The stripe patch sits at `at`
/// (top-left corner) or at a location drawn from `rng`.
pub fn gen_synthetic(
    spec: &SynthSpec,
    class: usize,
    at: Option<(usize, usize)>,
    rng: &mut Rng,
) -> Result<Tensor> {
    spec.validate()?;
    if class >= spec.classes {
        return Err(Error::Contract(format!(
            "class {class} outside 0..{}",
            spec.classes
        )));
    }
    let (s, p) = (spec.size, spec.patch);
    let (py, px) = match at {
        Some((y, x)) if y + p <= s && x + p <= s => (y, x),
        Some(loc) => {
            return Err(Error::Contract(format!(
                "stripe patch at {loc:?} leaves the image"
            )))
        }
        None => (
            rng.below((s - p + 1) as u64) as usize,
            rng.below((s - p + 1) as u64) as usize,
        ),
    };
    let palette = spec.palette(spec.palette_of(class));
    let mut data = vec![0.0; 3 * s * s];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut v = palette.value(c, y, x);
                if (py..py + p).contains(&y) && (px..px + p).contains(&x) {
                    v += STRIPE_AMPLITUDE * spec.stripe(class, y - py, x - px);
                }
                data[(c * s + y) * s + x] = v;
            }
        }
    }
    if spec.noise_std > 0.0 {
        for v in &mut data {
            *v += spec.noise_std * rng.normal();
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&[3, s, s], data)
}

/// `per_class` images of every class, interleaved by class, quantized to
/// bytes. `split` selects an independent stream family (0 train, 1 test).
pub fn synthetic_dataset(spec: &SynthSpec, per_class: usize, split: u64) -> Result<Dataset> {
    spec.validate()?;
    if spec.classes > 256 {
        return Err(Error::Config("at most 256 classes fit a label byte".into()));
    }
    let s = spec.size;
    let n = per_class * spec.classes;
    let mut pixels = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let mut rng = Rng::derive(spec.seed, Purpose::Synthetic, &[split, i as u64]);
        let img = gen_synthetic(spec, class, None, &mut rng)?;
        pixels.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
        labels.push(class as u8);
    }
    let names = (0..spec.classes).map(|k| format!("class_{k}")).collect();
    Dataset::new(pixels, labels, (3, s, s), names)
}
