//! Labelled point sets: the nested synthetic band datasets, MNIST ingestion
//! from IDX files, and CSV persistence.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Points with binary labels and, optionally, the original digit of each
/// sample (used for probing MNIST circuits).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    dim: usize,
    points: Vec<f64>,
    labels: Vec<bool>,
    digits: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, dim: usize, points: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::input("points and labels differ in length"));
        }
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in &points {
            if p.len() != dim {
                return Err(Error::input(format!(
                    "point of dimension {} in a {dim}-dimensional dataset",
                    p.len()
                )));
            }
            flat.extend_from_slice(p);
        }
        Ok(Self {
            name: name.into(),
            dim,
            points: flat,
            labels,
            digits: None,
        })
    }

    /// Builds from row-major flat storage.
    pub fn from_flat(name: impl Into<String>, dim: usize, points: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if dim == 0 || points.len() != labels.len() * dim {
            return Err(Error::input("flat point buffer does not match labels"));
        }
        Ok(Self {
            name: name.into(),
            dim,
            points,
            labels,
            digits: None,
        })
    }

    pub fn with_digits(mut self, digits: Vec<u8>) -> Result<Self> {
        if digits.len() != self.len() {
            return Err(Error::input("digit metadata length differs from sample count"));
        }
        self.digits = Some(digits);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sample count `m`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> bool {
        self.labels[i]
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn flat_points(&self) -> &[f64] {
        &self.points
    }

    pub fn digits(&self) -> Option<&[u8]> {
        self.digits.as_deref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], bool)> + '_ {
        self.points
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    /// Samples at the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut points = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            points.extend_from_slice(self.point(i));
        }
        Self {
            name: self.name.clone(),
            dim: self.dim,
            points,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            digits: self
                .digits
                .as_ref()
                .map(|d| idx.iter().map(|&i| d[i]).collect()),
        }
    }

    /// `m` samples drawn without replacement, in draw order.
    pub fn subsample(&self, m: usize, seed: u64) -> Result<Self> {
        if m > self.len() {
            return Err(Error::input(format!(
                "requested {m} samples from a dataset of {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample_indices(&mut rng, self.len(), m).into_vec();
        Ok(self.select(&idx))
    }

    /// Disjoint random splits of the given sizes.
    pub fn split(&self, sizes: &[usize], seed: u64) -> Result<Vec<Self>> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(Error::input(format!(
                "splits need {total} samples, dataset has {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample_indices(&mut rng, self.len(), total).into_vec();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(self.select(&idx[start..start + s]));
            start += s;
        }
        Ok(out)
    }

    /// Per-coordinate `(min, max)`.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.is_empty() {
            return None;
        }
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for (p, _) in self.iter() {
            for j in 0..self.dim {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        Some((lo, hi))
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        for (p, _) in self.iter() {
            for (m, v) in mu.iter_mut().zip(p) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        mu.iter_mut().for_each(|m| *m /= n);
        mu
    }

    /// Applies `f` to every point.
    pub fn map_points(&self, name: impl Into<String>, out_dim: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let mut points = Vec::with_capacity(self.len() * out_dim);
        for (p, _) in self.iter() {
            let q = f(p);
            assert_eq!(q.len(), out_dim);
            points.extend(q);
        }
        Self {
            name: name.into(),
            dim: out_dim,
            points,
            labels: self.labels.clone(),
            digits: self.digits.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.dim {
            let _ = write!(s, "x{j},");
        }
        s.push_str("label");
        if self.digits.is_some() {
            s.push_str(",digit");
        }
        s.push('\n');
        for i in 0..self.len() {
            for v in self.point(i) {
                let _ = write!(s, "{v:?},");
            }
            s.push(if self.labels[i] { '1' } else { '0' });
            if let Some(d) = &self.digits {
                let _ = write!(s, ",{}", d[i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::format("empty CSV"))?
            .split(',')
            .map(str::trim)
            .collect();
        let label_col = header
            .iter()
            .position(|&h| h == "label")
            .ok_or_else(|| Error::format("CSV header lacks a label column"))?;
        for (j, h) in header[..label_col].iter().enumerate() {
            if *h != format!("x{j}") {
                return Err(Error::format(format!("unexpected CSV column {h:?}")));
            }
        }
        let has_digit = match &header[label_col + 1..] {
            [] => false,
            ["digit"] => true,
            rest => return Err(Error::format(format!("unexpected CSV columns {rest:?}"))),
        };
        let dim = label_col;
        if dim == 0 {
            return Err(Error::format("CSV has no coordinate columns"));
        }
        let (mut points, mut labels, mut digits) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != header.len() {
                return Err(Error::format(format!("CSV row {} has {} fields", n + 2, fields.len())));
            }
            for f in &fields[..dim] {
                points.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::format(format!("bad number {f:?}")))?,
                );
            }
            labels.push(match fields[dim] {
                "0" => false,
                "1" => true,
                other => return Err(Error::format(format!("bad label {other:?}"))),
            });
            if has_digit {
                digits.push(
                    fields[dim + 1]
                        .parse::<u8>()
                        .map_err(|_| Error::format("bad digit"))?,
                );
            }
        }
        let ds = Self::from_flat(name, dim, points, labels)?;
        if has_digit {
            ds.with_digits(digits)
        } else {
            Ok(ds)
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, self.to_csv())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_csv(name, &crate::error::read_to_string(path)?)
    }
}

/// Complexity tier of the synthetic band datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    DataI,
    DataII,
    DataIII,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::DataI, Tier::DataII, Tier::DataIII];

    pub fn name(self) -> &'static str {
        match self {
            Tier::DataI => "DataI",
            Tier::DataII => "DataII",
            Tier::DataIII => "DataIII",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "datai" | "i" | "1" => Ok(Tier::DataI),
            "dataii" | "ii" | "2" => Ok(Tier::DataII),
            "dataiii" | "iii" | "3" => Ok(Tier::DataIII),
            _ => Err(Error::input(format!("unknown tier {s:?}"))),
        }
    }

    fn band_count(self) -> usize {
        match self {
            Tier::DataI => 2,
            Tier::DataII => 3,
            Tier::DataIII => 4,
        }
    }

    /// Translation added to every point so the nominal band centres average
    /// to the origin.
    pub fn offset(self) -> [f64; 2] {
        let bands = &BANDS[..self.band_count()];
        let mean_y = bands.iter().map(|b| b.1).sum::<f64>() / bands.len() as f64;
        [0.0, -mean_y]
    }

    /// Affine map taking this tier's points into the next tier's coordinates,
    /// where they reappear bit-for-bit up to rounding of the translation.
    pub fn nesting_shift(self) -> Option<[f64; 2]> {
        let next = match self {
            Tier::DataI => Tier::DataII,
            Tier::DataII => Tier::DataIII,
            Tier::DataIII => return None,
        };
        let (a, b) = (self.offset(), next.offset());
        Some([b[0] - a[0], b[1] - a[1]])
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Nominal band centres `(x, y, label)`, in the order tiers add them.
const BANDS: [(f64, f64, bool); 4] = [
    (0.0, 1.0, true),
    (0.0, -1.0, false),
    (0.0, -2.2, true),
    (0.0, 2.2, false),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub tier: Tier,
    /// Points drawn per band.
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(tier: Tier, seed: u64) -> Self {
        Self {
            tier,
            samples_per_class: 100,
            noise_std: 0.15,
            seed,
        }
    }
}

/// Draws from `N(0, std^2)` truncated to `[-2 std, 2 std]` by resampling.
pub(crate) fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Generates a band dataset.
///
/// Each band draws from its own RNG stream, so the sample of tier `t`
/// translated by [`Tier::nesting_shift`] is a subset of the tier `t+1`
/// sample for the same seed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.samples_per_class == 0 {
        return Err(Error::input("samples_per_class must be positive"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::input("noise_std must be finite and nonnegative"));
    }
    let offset = spec.tier.offset();
    let n = spec.tier.band_count();
    let mut points = Vec::with_capacity(n * spec.samples_per_class * 2);
    let mut labels = Vec::with_capacity(n * spec.samples_per_class);
    for (band, &(cx, cy, label)) in BANDS[..n].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(band as u64);
        for _ in 0..spec.samples_per_class {
            let dx = truncated_normal(&mut rng, spec.noise_std);
            let dy = truncated_normal(&mut rng, spec.noise_std);
            points.push(cx + dx + offset[0]);
            points.push(cy + dy + offset[1]);
            labels.push(label);
        }
    }
    Dataset::from_flat(spec.tier.name(), 2, points, labels)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::format("truncated IDX header"))
}

/// Raw IDX image file: count, rows, cols and pixel bytes.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let b = read_bytes(path)?;
    if be_u32(&b, 0)? != IDX_IMAGES {
        return Err(Error::format(format!("{} is not an IDX image file", path.display())));
    }
    let n = be_u32(&b, 4)? as usize;
    let r = be_u32(&b, 8)? as usize;
    let c = be_u32(&b, 12)? as usize;
    let body = &b[16..];
    if body.len() != n * r * c {
        return Err(Error::format(format!(
            "IDX image body has {} bytes, header implies {}",
            body.len(),
            n * r * c
        )));
    }
    Ok((n, r, c, body.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let b = read_bytes(path)?;
    if be_u32(&b, 0)? != IDX_LABELS {
        return Err(Error::format(format!("{} is not an IDX label file", path.display())));
    }
    let n = be_u32(&b, 4)? as usize;
    let body = &b[8..];
    if body.len() != n {
        return Err(Error::format("IDX label count does not match body"));
    }
    Ok(body.to_vec())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows * cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::input("pixel buffer is not a whole number of images"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, (pixels.len() / (rows * cols)) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    crate::error::write_file(path, out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    crate::error::write_file(path, out)
}

/// Every sample of an IDX pair, pixels scaled to `[0, 1]`, label `digit >= 5`.
pub fn load_mnist_all(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, r, c, px) = read_idx_images(images)?;
    let digits = read_idx_labels(labels)?;
    if digits.len() != n {
        return Err(Error::format(format!(
            "{n} images but {} labels",
            digits.len()
        )));
    }
    if let Some(d) = digits.iter().find(|&&d| d > 9) {
        return Err(Error::format(format!("label byte {d} is not a digit")));
    }
    let points = px.iter().map(|&p| p as f64 / 255.0).collect();
    let bin = digits.iter().map(|&d| d >= 5).collect();
    Dataset::from_flat("mnist", r * c, points, bin)?.with_digits(digits)
}

/// `m` samples without replacement from an IDX pair for the 0-4 vs 5-9 task.
pub fn load_mnist_binary(images: &Path, labels: &Path, m: usize, seed: u64) -> Result<Dataset> {
    load_mnist_all(images, labels)?.subsample(m, seed)
}

/// Digit 4 becomes False, digits 5-9 become True with 30% of them kept;
/// every other digit is dropped.
pub fn subsample_prosthetic(data: &Dataset, seed: u64) -> Result<Dataset> {
    let digits = data
        .digits()
        .ok_or_else(|| Error::input("prosthetic subsampling needs digit metadata"))?;
    let fours: Vec<usize> = (0..data.len()).filter(|&i| digits[i] == 4).collect();
    if fours.is_empty() {
        return Err(Error::input("no digit-4 samples to build a prosthetic set from"));
    }
    let highs: Vec<usize> = (0..data.len()).filter(|&i| digits[i] >= 5).collect();
    let keep = (highs.len() as f64 * 0.3).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample_indices(&mut rng, highs.len(), keep)
        .into_iter()
        .map(|k| highs[k])
        .collect();
    chosen.extend(&fours);
    chosen.sort_unstable();
    let mut out = data.select(&chosen);
    out.labels = out
        .digits
        .as_ref()
        .expect("digits kept by select")
        .iter()
        .map(|&d| d >= 5)
        .collect();
    out.name = format!("{}-prosthetic", data.name);
    Ok(out)
}
