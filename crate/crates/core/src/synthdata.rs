//! Procedural multi-domain segmentation data: smooth blob anatomy rendered
//! under per-domain photometric transforms, written as tensor files plus a
//! tab-separated manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{read_tensors, scan_headers, write_tensors, AnyTensor, DType, Rng, Tensor};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const FOREGROUND_RANGE: (f64, f64) = (0.05, 0.40);
const PLACEMENT_ATTEMPTS: usize = 200;

/// Photometric appearance of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: u32,
    /// Exponent applied to `[0, 1]`-rescaled intensities.
    pub gamma: f64,
    pub brightness: f64,
    /// Foreground minus background level before the nonlinear steps.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Grating cycles across the image width.
    pub texture_freq: f64,
    pub texture_amp: f64,
    pub background: f64,
}

impl DomainSpec {
    /// Three domains with increasing shift away from domain 0.
    pub fn presets() -> Vec<DomainSpec> {
        vec![
            DomainSpec {
                id: 0,
                gamma: 1.0,
                brightness: 0.0,
                contrast: 0.9,
                noise_sigma: 0.05,
                texture_freq: 0.0,
                texture_amp: 0.0,
                background: -0.5,
            },
            DomainSpec {
                id: 1,
                gamma: 0.5,
                brightness: 0.15,
                contrast: 0.6,
                noise_sigma: 0.08,
                texture_freq: 6.0,
                texture_amp: 0.15,
                background: -0.2,
            },
            DomainSpec {
                id: 2,
                gamma: 1.8,
                brightness: -0.1,
                contrast: 0.7,
                noise_sigma: 0.06,
                texture_freq: 3.0,
                texture_amp: 0.25,
                background: 0.1,
            },
        ]
    }
}

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1×H×W` in `[−1, 1]`.
    pub image: Tensor<f32>,
    /// `H×W` class indices.
    pub mask: Tensor<u8>,
    pub domain: u32,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
    class: u8,
}

impl Blob {
    fn draw(rng: &mut Rng, h: usize, w: usize, class: u8) -> Blob {
        let s = h.min(w) as f64;
        Blob {
            cy: rng.uniform_range(0.25, 0.75) * h as f64,
            cx: rng.uniform_range(0.25, 0.75) * w as f64,
            ry: rng.uniform_range(0.12, 0.28) * s,
            rx: rng.uniform_range(0.12, 0.28) * s,
            angle: rng.uniform_range(0.0, std::f64::consts::PI),
            wobble: rng.uniform_range(0.0, 0.2),
            lobes: (3 + rng.below(4)) as f64,
            phase: rng.uniform_range(0.0, std::f64::consts::TAU),
            class,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        r < 1.0 + self.wobble * (self.lobes * phi + self.phase).sin()
    }
}

fn render_mask(blobs: &[Blob], h: usize, w: usize) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    for b in blobs {
        for y in 0..h {
            for x in 0..w {
                if b.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    mask[y * w + x] = b.class;
                }
            }
        }
    }
    mask
}

/// Label geometry from the `rng` stream alone.
pub fn gen_mask(rng: &mut Rng, h: usize, w: usize, classes: usize) -> Result<Tensor<u8>> {
    if classes < 2 || classes > u8::MAX as usize {
        return Err(Error::Parameter(format!("class count {classes} outside 2..=255")));
    }
    if h < 32 || w < 32 {
        return Err(Error::Parameter(format!("image {h}×{w} is smaller than 32×32")));
    }
    let (lo, hi) = FOREGROUND_RANGE;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let n = 1 + rng.below(2);
        let blobs: Vec<Blob> = (0..n)
            .map(|_| {
                let class = 1 + rng.below(classes - 1) as u8;
                Blob::draw(rng, h, w, class)
            })
            .collect();
        let mask = render_mask(&blobs, h, w);
        let fg = mask.iter().filter(|&&m| m != 0).count() as f64 / (h * w) as f64;
        if (lo..=hi).contains(&fg) {
            return Tensor::from_vec([h, w], mask);
        }
    }
    Err(Error::Generation(format!(
        "no blob layout with foreground in [{lo}, {hi}] after {PLACEMENT_ATTEMPTS} attempts"
    )))
}

/// Renders `mask` in the appearance of `spec`, drawing texture phase and
/// noise from `rng`.
pub fn render_image(spec: &DomainSpec, mask: &Tensor<u8>, classes: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    let (h, w) = mask.hw()?;
    let orient = rng.uniform_range(0.0, std::f64::consts::PI);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (so, co) = orient.sin_cos();
    let fg_levels = (classes - 1).max(1) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let k = mask.data()[y * w + x] as f64;
            let mut v = spec.background + spec.contrast * k / fg_levels;
            if spec.texture_amp != 0.0 {
                let s = (co * x as f64 + so * y as f64) / w as f64;
                v += spec.texture_amp * (std::f64::consts::TAU * spec.texture_freq * s + phase).sin();
            }
            if spec.gamma != 1.0 {
                let r = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
                v = 2.0 * r.powf(spec.gamma) - 1.0;
            }
            v += spec.brightness;
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * rng.normal();
            }
            out.push(v.clamp(-1.0, 1.0) as f32);
        }
    }
    Tensor::from_vec([1, h, w], out)
}

/// Geometry comes from `rng.split(0)` and appearance from `rng.split(1)`, so
/// the mask depends only on the seed, never on the domain.
pub fn gen_sample(spec: &DomainSpec, rng: &Rng, h: usize, w: usize, classes: usize) -> Result<Sample> {
    let mask = gen_mask(&mut rng.split(0), h, w, classes)?;
    let image = render_image(spec, &mask, classes, &mut rng.split(1))?;
    Ok(Sample {
        image,
        mask,
        domain: spec.id,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub domain: u32,
    pub split: Split,
    pub labeled: bool,
}

impl ManifestEntry {
    fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.path.display(),
            self.domain,
            self.split,
            if self.labeled { "labeled" } else { "unlabeled" }
        )
    }

    fn parse(line: &str, source: &Path, lineno: usize) -> Result<Self> {
        let bad = |d: String| Error::format(source, format!("line {lineno}: {d}"));
        let cols: Vec<&str> = line.split('\t').collect();
        let [path, domain, split, flag] = cols[..] else {
            return Err(bad(format!("expected 4 tab-separated columns, got {}", cols.len())));
        };
        let labeled = match flag {
            "labeled" => true,
            "unlabeled" => false,
            other => return Err(bad(format!("unknown label flag {other:?}"))),
        };
        Ok(ManifestEntry {
            path: PathBuf::from(path),
            domain: domain.parse().map_err(|_| bad(format!("bad domain id {domain:?}")))?,
            split: split.parse().map_err(bad)?,
            labeled,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub labeled_domain: u32,
    pub labeled_count: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            h: 64,
            w: 64,
            classes: 2,
            train_per_domain: 200,
            test_per_domain: 50,
            labeled_domain: 0,
            labeled_count: 10,
            seed: 0,
        }
    }
}

fn sample_stream(root: &Rng, domain: u32, split: Split, index: usize) -> Rng {
    let s = match split {
        Split::Train => 0u64,
        Split::Test => 1,
    };
    root.split(((domain as u64) << 40) | (s << 32) | index as u64)
}

/// Writes every sample and the manifest under `out_dir`.
pub fn gen_dataset(specs: &[DomainSpec], cfg: &GenConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    if cfg.train_per_domain == 0 && cfg.test_per_domain == 0 {
        return Err(Error::Parameter("each domain needs at least one sample".into()));
    }
    for (i, a) in specs.iter().enumerate() {
        if specs[..i].iter().any(|b| b.id == a.id) {
            return Err(Error::Parameter(format!("duplicate domain id {}", a.id)));
        }
    }
    let root = Rng::new(cfg.seed);
    let mut entries = Vec::new();
    for spec in specs {
        let dir = format!("d{}", spec.id);
        fs::create_dir_all(out_dir.join(&dir)).map_err(|e| Error::io(out_dir.join(&dir), e))?;
        for (split, count) in [(Split::Train, cfg.train_per_domain), (Split::Test, cfg.test_per_domain)] {
            for i in 0..count {
                let s = gen_sample(spec, &sample_stream(&root, spec.id, split, i), cfg.h, cfg.w, cfg.classes)?;
                let rel = PathBuf::from(&dir).join(format!("{split}_{i:04}.bin"));
                write_tensors(&out_dir.join(&rel), &[AnyTensor::F32(s.image), AnyTensor::U8(s.mask)])?;
                entries.push(ManifestEntry {
                    path: rel,
                    domain: spec.id,
                    split,
                    labeled: split == Split::Train && spec.id == cfg.labeled_domain && i < cfg.labeled_count,
                });
            }
        }
    }
    let mut text = String::new();
    for e in &entries {
        text.push_str(&e.to_row());
        text.push('\n');
    }
    let path = out_dir.join(MANIFEST_NAME);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// Restricts a dataset to one domain; parsed from `id==K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainFilter(pub u32);

impl FromStr for DomainFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v = s
            .trim()
            .strip_prefix("id")
            .map(str::trim_start)
            .and_then(|r| r.strip_prefix("=="))
            .ok_or_else(|| Error::Parameter(format!("domain filter {s:?} is not of the form id==K")))?;
        v.trim()
            .parse()
            .map(DomainFilter)
            .map_err(|_| Error::Parameter(format!("bad domain id in filter {s:?}")))
    }
}

/// Manifest-backed dataset; tensors are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    /// Parses the manifest and checks every referenced file's record headers
    /// without loading payloads.
    pub fn open(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(ManifestEntry::parse(line, manifest, n + 1)?);
        }
        let ds = Dataset { root, entries };
        for e in &ds.entries {
            ds.validate(e)?;
        }
        Ok(ds)
    }

    fn validate(&self, e: &ManifestEntry) -> Result<()> {
        let path = self.root.join(&e.path);
        let headers = scan_headers(&path)?;
        match &headers[..] {
            [img, mask]
                if img.dtype == DType::F32
                    && mask.dtype == DType::U8
                    && img.shape.len() == 3
                    && mask.shape.len() == 2
                    && img.shape[1..] == mask.shape[..] =>
            {
                Ok(())
            }
            _ => Err(Error::format(&path, "expected an f32 C×H×W image record and a u8 H×W mask record")),
        }
    }

    pub fn filtered(&self, filter: Option<DomainFilter>) -> Dataset {
        Dataset {
            root: self.root.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| filter.is_none_or(|f| f.0 == e.domain))
                .cloned()
                .collect(),
        }
    }

    pub fn select(&self, split: Split, labeled: Option<bool>) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == split && labeled.is_none_or(|l| l == e.labeled))
            .collect()
    }

    pub fn domains(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.entries.iter().map(|e| e.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Sample> {
        let path = self.root.join(&entry.path);
        let mut recs = read_tensors(&path)?.into_iter();
        let (Some(img), Some(mask), None) = (recs.next(), recs.next(), recs.next()) else {
            return Err(Error::format(&path, "expected exactly two records"));
        };
        Ok(Sample {
            image: img.into_f32(&path)?,
            mask: mask.into_u8(&path)?,
            domain: entry.domain,
        })
    }
}

/// Normalized intensity histogram over `[−1, 1]`.
pub fn intensity_histogram<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let mut n = 0.0;
    for img in images {
        for &v in img.data() {
            let b = (((v as f64 + 1.0) * 0.5) * bins as f64).floor() as isize;
            h[b.clamp(0, bins as isize - 1) as usize] += 1.0;
            n += 1.0;
        }
    }
    if n > 0.0 {
        h.iter_mut().for_each(|v| *v /= n);
    }
    h
}

/// `½ Σ (a−b)²/(a+b)` over bins with mass.
pub fn chi_square_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .filter(|(x, y)| *x + *y > 0.0)
        .map(|(x, y)| (x - y) * (x - y) / (x + y))
        .sum::<f64>()
}
