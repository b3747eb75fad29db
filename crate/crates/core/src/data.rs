//! Dataset I/O, resizing, augmentation and the synthetic plume generator.
//!
//! On-disk layout, per split:
//!
//! ```text
//! root/<split>/images/<name>.png   8-bit grayscale (RGB is reduced to luma)
//! root/<split>/masks/<name>.png    8-bit, values 0 or 1
//! root/<split>/labels.csv          rows `name,diet`, diet ∈ {HF, MD, HG}
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use gastwin_tensor::{no_grad, RngState, Tensor};
use image::{GrayImage, ImageReader, Luma};

use crate::config::ScheduleConfig;
use crate::error::{Error, Result};

/// Dietary treatment label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Diet {
    HighForage,
    MixedDiet,
    HighGrain,
}

impl Diet {
    pub const ALL: [Diet; 3] = [Diet::HighForage, Diet::MixedDiet, Diet::HighGrain];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            Diet::HighForage => "HF",
            Diet::MixedDiet => "MD",
            Diet::HighGrain => "HG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.token() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "split `{other}` is not one of train, val, test"
            ))),
        }
    }
}

/// One frame. The image is stored once as grayscale in [0, 1]; it is
/// replicated to three identical channels when batched.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub gray: Vec<f32>,
    pub mask: Vec<u8>,
    pub diet: Diet,
}

impl Sample {
    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

/// `[N, 3, H, W]` images (channels replicated), the row-major `[N, H, W]`
/// mask and the diet indices of a batch of equally sized samples.
pub fn collate<T: gastwin_tensor::Real>(
    samples: &[&Sample],
) -> Result<(Tensor<T>, Vec<u8>, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    let mut diet = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Data(format!(
                "batch mixes {h}x{w} and {}x{} frames ({})",
                s.height, s.width, s.id
            )));
        }
        for _ in 0..3 {
            img.extend(s.gray.iter().map(|&v| T::of(f64::from(v))));
        }
        mask.extend_from_slice(&s.mask);
        diet.push(s.diet.index());
    }
    Ok((
        Tensor::from_vec(img, &[samples.len(), 3, h, w])?,
        mask,
        diet,
    ))
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(img.to_luma8())
}

fn read_labels(path: &Path) -> Result<HashMap<String, Diet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("basename,diet")) {
            continue;
        }
        let (name, diet) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected `name,diet`",
                path.display(),
                i + 1
            ))
        })?;
        let diet = Diet::parse(diet.trim()).ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: unknown diet `{}` (expected HF, MD or HG)",
                path.display(),
                i + 1,
                diet.trim()
            ))
        })?;
        out.insert(name.trim().to_string(), diet);
    }
    Ok(out)
}

/// Loads one split, sorted by basename. An empty or absent images directory
/// yields an empty list.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let dir = root.join(split.name());
    let images = dir.join("images");
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    let mut names: Vec<(String, PathBuf)> = fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
        .collect();
    names.sort();
    if names.is_empty() {
        return Ok(Vec::new());
    }
    let labels = read_labels(&dir.join("labels.csv"))?;
    names
        .into_iter()
        .map(|(name, img_path)| {
            let mask_path = dir.join("masks").join(format!("{name}.png"));
            if !mask_path.is_file() {
                return Err(Error::Data(format!(
                    "{}: no mask for image {name}",
                    mask_path.display()
                )));
            }
            let img = read_gray(&img_path)?;
            let mask = read_gray(&mask_path)?;
            if img.dimensions() != mask.dimensions() {
                return Err(Error::Data(format!(
                    "{}: mask is {:?}, image is {:?}",
                    mask_path.display(),
                    mask.dimensions(),
                    img.dimensions()
                )));
            }
            if let Some(v) = mask.as_raw().iter().find(|&&v| v > 1) {
                return Err(Error::Data(format!(
                    "{}: mask value {v} outside {{0, 1}}",
                    mask_path.display()
                )));
            }
            let diet = *labels.get(&name).ok_or_else(|| {
                Error::Data(format!(
                    "{}: no label for {name}",
                    dir.join("labels.csv").display()
                ))
            })?;
            let (w, h) = img.dimensions();
            Ok(Sample {
                id: name,
                height: h as usize,
                width: w as usize,
                gray: img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect(),
                mask: mask.into_raw(),
                diet,
            })
        })
        .collect()
}

/// Bilinear image / nearest-neighbour mask resize to `(h, w)`.
pub fn resize_pair(s: &Sample, out: (usize, usize)) -> Result<Sample> {
    let (oh, ow) = out;
    if oh == 0 || ow == 0 || oh % 32 != 0 || ow % 32 != 0 {
        return Err(Error::Config(format!(
            "model.input = {oh}x{ow}: extents must be positive multiples of 32"
        )));
    }
    if (oh, ow) == (s.height, s.width) {
        return Ok(s.clone());
    }
    let img = Tensor::<f32>::from_vec(s.gray.clone(), &[1, 1, s.height, s.width])?;
    let gray = no_grad(|| img.bilinear_resize(oh, ow))?.to_vec();
    let mut mask = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = (y * s.height / oh).min(s.height - 1);
        for x in 0..ow {
            let sx = (x * s.width / ow).min(s.width - 1);
            mask.push(s.mask[sy * s.width + sx]);
        }
    }
    Ok(Sample {
        id: s.id.clone(),
        height: oh,
        width: ow,
        gray,
        mask,
        diet: s.diet,
    })
}

/// Mirrors image and mask left-right.
pub fn flip_horizontal(s: &Sample) -> Sample {
    let w = s.width;
    let mut out = s.clone();
    for y in 0..s.height {
        out.gray[y * w..(y + 1) * w].reverse();
        out.mask[y * w..(y + 1) * w].reverse();
    }
    out
}

/// Random horizontal flip (image and mask together), then brightness and
/// contrast jitter on the image only. Always draws three numbers, in a fixed
/// order, so the stream stays aligned whatever is applied.
pub fn augment(s: &Sample, rng: &mut RngState, cfg: &ScheduleConfig) -> Sample {
    let flip = rng.uniform() < cfg.flip_prob;
    let brightness = rng.uniform_range(-cfg.brightness, cfg.brightness);
    let contrast = rng.uniform_range(cfg.contrast.0, cfg.contrast.1);
    let mut out = if flip { flip_horizontal(s) } else { s.clone() };
    let mean = out.gray.iter().map(|&v| f64::from(v)).sum::<f64>() / out.gray.len().max(1) as f64;
    for v in &mut out.gray {
        let x = (f64::from(*v) - mean) * contrast + mean + brightness;
        *v = x.clamp(0.0, 1.0) as f32;
    }
    out
}

/// Blob statistics for one diet class. Sizes are fractions of the shorter
/// image side.
#[derive(Clone, Debug, PartialEq)]
pub struct PlumeStats {
    pub count: (usize, usize),
    pub amplitude: (f64, f64),
    pub sigma: (f64, f64),
    /// Ratio between the two axis spreads, drawn from this range.
    pub elongation: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub train_frames: usize,
    pub val_frames: usize,
    pub test_frames: usize,
    /// Diet proportions (HF, MD, HG); normalized internally.
    pub class_mix: [f64; 3],
    pub plumes: [PlumeStats; 3],
    /// Background level range and maximum gradient across the frame.
    pub background: (f64, f64),
    pub gradient: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Fraction of a blob's amplitude above which a pixel is labelled plume.
pub const MASK_THRESHOLD: f64 = 0.2;

impl Default for SynthConfig {
    /// 64×64 frames with 600/150/150 splits and clearly separated plume
    /// statistics per diet.
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            train_frames: 600,
            val_frames: 150,
            test_frames: 150,
            class_mix: [1.0, 1.0, 1.0],
            plumes: [
                PlumeStats {
                    count: (2, 3),
                    amplitude: (0.45, 0.6),
                    sigma: (0.11, 0.15),
                    elongation: (1.0, 1.6),
                },
                PlumeStats {
                    count: (2, 2),
                    amplitude: (0.35, 0.5),
                    sigma: (0.075, 0.1),
                    elongation: (1.0, 1.6),
                },
                PlumeStats {
                    count: (1, 1),
                    amplitude: (0.3, 0.45),
                    sigma: (0.06, 0.08),
                    elongation: (1.0, 1.6),
                },
            ],
            background: (0.65, 0.85),
            gradient: 0.1,
            noise_std: 0.02,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad(format!(
                "synth.size = {}x{} must be positive",
                self.height, self.width
            ));
        }
        if self.class_mix.iter().any(|&p| p < 0.0) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return bad("synth.class_mix needs non-negative weights with a positive sum".into());
        }
        for (d, p) in Diet::ALL.iter().zip(&self.plumes) {
            let t = d.token();
            if p.count.0 > p.count.1 {
                return bad(format!("synth.{t}.count range {:?} is inverted", p.count));
            }
            if !(p.amplitude.0 > 0.0 && p.amplitude.0 <= p.amplitude.1 && p.amplitude.1 <= 1.0) {
                return bad(format!(
                    "synth.{t}.amplitude {:?} must lie in (0, 1]",
                    p.amplitude
                ));
            }
            if !(p.sigma.0 > 0.0 && p.sigma.0 <= p.sigma.1) {
                return bad(format!("synth.{t}.sigma {:?} must be positive", p.sigma));
            }
            if !(p.elongation.0 >= 1.0 && p.elongation.0 <= p.elongation.1) {
                return bad(format!(
                    "synth.{t}.elongation {:?} must be ≥ 1",
                    p.elongation
                ));
            }
        }
        if self.noise_std < 0.0 {
            return bad(format!("synth.noise = {} must be ≥ 0", self.noise_std));
        }
        Ok(())
    }

    /// Parses `synth.key = value` lines over the defaults. Keys: size
    /// (`HxW`), train, val, test, class_mix, background, gradient, noise,
    /// seed, and per-diet `HF.count`, `HF.amplitude`, `HF.sigma`,
    /// `HF.elongation` (likewise MD, HG).
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for e in crate::config::entries(text)? {
            let key = e
                .key
                .strip_prefix("synth.")
                .ok_or_else(|| e.err("expected a synth.* key"))?;
            match key {
                "size" => {
                    let (h, w) = e.pair()?;
                    cfg.height = h;
                    cfg.width = w;
                }
                "train" => cfg.train_frames = e.int()?,
                "val" => cfg.val_frames = e.int()?,
                "test" => cfg.test_frames = e.int()?,
                "class_mix" => {
                    let v = e.reals()?;
                    cfg.class_mix = v
                        .try_into()
                        .map_err(|_| e.err("synth.class_mix needs three weights"))?;
                }
                "background" => cfg.background = e.real_pair()?,
                "gradient" => cfg.gradient = e.real()?,
                "noise" => cfg.noise_std = e.real()?,
                "seed" => cfg.seed = e.int()? as u64,
                other => {
                    let (tok, field) = other
                        .split_once('.')
                        .ok_or_else(|| e.err(format!("unknown key synth.{other}")))?;
                    let d = Diet::parse(tok)
                        .ok_or_else(|| e.err(format!("unknown key synth.{other}")))?;
                    let p = &mut cfg.plumes[d.index()];
                    match field {
                        "count" => {
                            let v = e.reals()?;
                            p.count = match v.as_slice() {
                                [a, b] if *a >= 0.0 && a.fract() == 0.0 && b.fract() == 0.0 => {
                                    (*a as usize, *b as usize)
                                }
                                _ => {
                                    return Err(e.err("expected two non-negative integers `lo,hi`"))
                                }
                            };
                        }
                        "amplitude" => p.amplitude = e.real_pair()?,
                        "sigma" => p.sigma = e.real_pair()?,
                        "elongation" => p.elongation = e.real_pair()?,
                        _ => return Err(e.err(format!("unknown key synth.{other}"))),
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One rendered Gaussian blob, in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    pub sigma: (f64, f64),
    pub amplitude: f64,
}

impl Blob {
    /// Darkening at `(x, y)`: `a·exp(−(x−cx)²/2σx² − (y−cy)²/2σy²)`.
    pub fn contribution(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.center.0) / self.sigma.0;
        let dy = (y - self.center.1) / self.sigma.1;
        self.amplitude * (-(dx * dx + dy * dy) / 2.0).exp()
    }

    pub fn in_mask(&self, x: f64, y: f64) -> bool {
        self.contribution(x, y) > MASK_THRESHOLD * self.amplitude
    }
}

/// An in-memory frame before 8-bit quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub gray: Vec<f64>,
    pub mask: Vec<u8>,
    pub blobs: Vec<Blob>,
    pub diet: Diet,
}

/// Light background with a linear gradient and Gaussian noise, darkened by
/// the diet's blobs (black-hot rendering). The mask is the union of each
/// blob's super-level set at [`MASK_THRESHOLD`] of its amplitude.
pub fn render_frame(cfg: &SynthConfig, diet: Diet, rng: &mut RngState) -> Frame {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    let stats = &cfg.plumes[diet.index()];
    let level = rng.uniform_range(cfg.background.0, cfg.background.1);
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (gx, gy) = (angle.cos() * cfg.gradient, angle.sin() * cfg.gradient);
    let count = rng.int_range(stats.count.0, stats.count.1);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let s = rng.uniform_range(stats.sigma.0, stats.sigma.1) * side;
            let e = rng.uniform_range(stats.elongation.0, stats.elongation.1);
            let sigma = if rng.uniform() < 0.5 {
                (s * e, s)
            } else {
                (s, s * e)
            };
            let margin = 0.15;
            Blob {
                center: (
                    rng.uniform_range(margin, 1.0 - margin) * (w as f64 - 1.0),
                    rng.uniform_range(margin, 1.0 - margin) * (h as f64 - 1.0),
                ),
                sigma,
                amplitude: rng.uniform_range(stats.amplitude.0, stats.amplitude.1),
            }
        })
        .collect();
    let mut gray = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let bg = level + gx * (fx / w as f64 - 0.5) + gy * (fy / h as f64 - 0.5);
            let dark: f64 = blobs.iter().map(|b| b.contribution(fx, fy)).sum();
            let v = bg - dark + cfg.noise_std * rng.normal();
            gray.push(v.clamp(0.0, 1.0));
            mask.push(u8::from(blobs.iter().any(|b| b.in_mask(fx, fy))));
        }
    }
    Frame {
        gray,
        mask,
        blobs,
        diet,
    }
}

/// Diet labels for `n` frames in exact proportion to `mix` (largest
/// remainder), shuffled.
pub fn stratified_labels(n: usize, mix: &[f64; 3], rng: &mut RngState) -> Vec<Diet> {
    let total: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|p| p / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    let mut labels: Vec<Diet> = Diet::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&d, &c)| std::iter::repeat_n(d, c))
        .collect();
    rng.shuffle(&mut labels);
    labels
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

/// Frame name of index `i`.
pub fn frame_name(split: Split, i: usize) -> String {
    format!("{}_{i:05}", split.name())
}

/// Renders one split in memory. Labels come from a per-split stream and
/// every frame from its own stream, so frames are independent of each other.
pub fn synth_split(cfg: &SynthConfig, split: Split) -> Vec<(String, Frame)> {
    let n = match split {
        Split::Train => cfg.train_frames,
        Split::Val => cfg.val_frames,
        Split::Test => cfg.test_frames,
    };
    let base = split_stream(split) << 32;
    let mut label_rng = RngState::stream(cfg.seed, base);
    let labels = stratified_labels(n, &cfg.class_mix, &mut label_rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, diet)| {
            let mut rng = RngState::stream(cfg.seed, base + 1 + i as u64);
            (frame_name(split, i), render_frame(cfg, diet, &mut rng))
        })
        .collect()
}

/// 8-bit quantization used when frames are written to disk.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Same as loading the written dataset back, without touching the disk.
pub fn frame_to_sample(id: &str, f: &Frame, height: usize, width: usize) -> Sample {
    Sample {
        id: id.to_string(),
        height,
        width,
        gray: f
            .gray
            .iter()
            .map(|&v| f32::from(quantize(v)) / 255.0)
            .collect(),
        mask: f.mask.clone(),
        diet: f.diet,
    }
}

/// One grayscale image as `(height, width, values in [0, 1])`.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = read_gray(path)?;
    let (w, h) = img.dimensions();
    let gray = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    Ok((h as usize, w as usize, gray))
}

/// Writes 8-bit single-channel PNG data (row-major, `w × h`).
pub fn write_png(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    let img: GrayImage = image::ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Data(format!("{}: buffer size mismatch", path.display())))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes all three splits under `root` in the [`load_dataset`] layout.
/// Returns the number of frames written per split.
pub fn synth_generate(cfg: &SynthConfig, root: &Path) -> Result<[usize; 3]> {
    cfg.validate()?;
    let mut written = [0; 3];
    for (k, split) in [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .enumerate()
    {
        let dir = root.join(split.name());
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut labels = String::from("basename,diet\n");
        for (name, frame) in synth_split(cfg, split) {
            let pixels = frame.gray.iter().map(|&v| quantize(v)).collect();
            write_png(
                &dir.join("images").join(format!("{name}.png")),
                cfg.width,
                cfg.height,
                pixels,
            )?;
            write_png(
                &dir.join("masks").join(format!("{name}.png")),
                cfg.width,
                cfg.height,
                frame.mask,
            )?;
            labels.push_str(&format!("{name},{}\n", frame.diet.token()));
            written[k] += 1;
        }
        let path = dir.join("labels.csv");
        fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
    }
    Ok(written)
}
