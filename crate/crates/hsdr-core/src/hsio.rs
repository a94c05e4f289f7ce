//! Cube and label ingestion, the HSDR container format, and train/test
//! splits.
//!
//! Container layout (little-endian throughout):
//!
//! ```text
//! magic "HSDR" | version u8 = 1 | kind u8 (1 = f32 cube, 2 = u16 labels)
//! width u32 | height u32 | bands u32 (1 for labels)
//! payload: width*height*bands elements, band-sequential
//!          (band b, row y, column x) -> offset ((b*height + y)*width + x)
//! ```
//!
//! Cubes are stored band-sequential because every statistic this toolkit
//! computes consumes whole bands at a time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{HsdrError, Result};
use crate::mat::Mat;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

const CUBE_MAGIC: &[u8; 4] = b"HSDR";
const SPLIT_MAGIC: &[u8; 4] = b"HSSP";
const FORMAT_VERSION: u8 = 1;
const KIND_CUBE_F32: u8 = 1;
const KIND_LABELS_U16: u8 = 2;

/// A hyperspectral data cube: `width * height` pixels with `bands` spectral
/// samples each, stored band-sequential as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    width: usize,
    height: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HyperCube {
    pub fn from_data(width: usize, height: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(HsdrError::DimensionMismatch {
                expected: "positive width, height and bands".into(),
                actual: format!("{width}x{height}x{bands}"),
            });
        }
        if data.len() != width * height * bands {
            return Err(HsdrError::DimensionMismatch {
                expected: format!("{} values", width * height * bands),
                actual: format!("{}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(HsdrError::NonFinite("cube payload".into()));
        }
        Ok(HyperCube {
            width,
            height,
            bands,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize, band: usize) -> f32 {
        self.data[(band * self.height + y) * self.width + x]
    }

    /// Copy the spectrum of pixel `(x, y)` into `out` (length `bands`).
    pub fn spectrum_into<F: Scalar>(&self, x: usize, y: usize, out: &mut [F]) {
        debug_assert_eq!(out.len(), self.bands);
        for (b, slot) in out.iter_mut().enumerate() {
            *slot = F::of(self.value(x, y, b) as f64);
        }
    }
}

/// Per-pixel class labels aligned to a cube; 0 means unlabeled background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    width: usize,
    height: usize,
    labels: Vec<u16>,
    class_names: Option<Vec<String>>,
}

impl LabelRaster {
    pub fn from_labels(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(HsdrError::DimensionMismatch {
                expected: "positive width and height".into(),
                actual: format!("{width}x{height}"),
            });
        }
        if labels.len() != width * height {
            return Err(HsdrError::DimensionMismatch {
                expected: format!("{} labels", width * height),
                actual: format!("{}", labels.len()),
            });
        }
        Ok(LabelRaster {
            width,
            height,
            labels,
            class_names: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Display name for a class: the configured name, else `class_<id>`.
    pub fn class_name(&self, class: u16) -> String {
        self.class_names
            .as_ref()
            .and_then(|names| names.get(class as usize - 1).cloned())
            .unwrap_or_else(|| format!("class_{class}"))
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Highest class id present (classes are 1..=N).
    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn labeled_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Pixel count per class id 1..=N.
    pub fn class_counts(&self) -> Vec<usize> {
        let n = self.n_classes();
        let mut counts = vec![0usize; n];
        for &l in &self.labels {
            if l != 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    /// Copy with all test-partition labels zeroed; used by leakage checks.
    pub fn without_test_labels(&self, split: &SplitAssignment) -> LabelRaster {
        let mut labels = self.labels.clone();
        for (i, l) in labels.iter_mut().enumerate() {
            if split.assignment[i] == Partition::Test as u8 {
                *l = 0;
            }
        }
        LabelRaster {
            width: self.width,
            height: self.height,
            labels,
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Partition {
    None = 0,
    Train = 1,
    Test = 2,
}

/// Stratified train/test assignment of every labeled pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    width: usize,
    height: usize,
    assignment: Vec<u8>,
    pub seed: u64,
    pub train_fraction: f64,
}

impl SplitAssignment {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn partition(&self, x: usize, y: usize) -> Partition {
        match self.assignment[y * self.width + x] {
            1 => Partition::Train,
            2 => Partition::Test,
            _ => Partition::None,
        }
    }

    pub fn count(&self, partition: Partition) -> usize {
        let tag = partition as u8;
        self.assignment.iter().filter(|&&a| a == tag).count()
    }
}

/// Deterministic stratified split: per class, `round(train_fraction * total)`
/// pixels go to training (at least one when the class has two or more), the
/// rest to test. Assignment depends only on `(raster, train_fraction, seed)`.
pub fn stratified_split(
    raster: &LabelRaster,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(HsdrError::InvalidConfig(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let n_classes = raster.n_classes();
    if n_classes == 0 {
        return Err(HsdrError::EmptyInput("raster has no labeled pixels"));
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in raster.labels().iter().enumerate() {
        if l != 0 {
            per_class[l as usize - 1].push(i);
        }
    }

    let mut assignment = vec![Partition::None as u8; raster.labels().len()];
    for (c, indices) in per_class.iter_mut().enumerate() {
        let class = (c + 1) as u16;
        let total = indices.len();
        if total == 0 {
            return Err(HsdrError::EmptyClass { class });
        }
        let mut rng = SeededRng::stream(seed, class as u64);
        rng.shuffle(indices);
        let mut n_train = (train_fraction * total as f64).round() as usize;
        if total >= 2 {
            n_train = n_train.max(1);
        }
        n_train = n_train.min(total);
        for (rank, &pixel) in indices.iter().enumerate() {
            assignment[pixel] = if rank < n_train {
                Partition::Train as u8
            } else {
                Partition::Test as u8
            };
        }
    }

    Ok(SplitAssignment {
        width: raster.width(),
        height: raster.height(),
        assignment,
        seed,
        train_fraction,
    })
}

/// Which labeled pixels to extract.
#[derive(Debug, Clone, Copy)]
pub enum SampleSubset<'a> {
    AllLabeled,
    Train(&'a SplitAssignment),
    Test(&'a SplitAssignment),
}

/// Flatten the selected labeled pixels into a sample matrix, in raster scan
/// order. Returns the samples, their labels and their pixel coordinates.
pub fn cube_to_samples<F: Scalar>(
    cube: &HyperCube,
    raster: &LabelRaster,
    subset: SampleSubset<'_>,
) -> Result<(Mat<F>, Vec<u16>, Vec<(usize, usize)>)> {
    if cube.width() != raster.width() || cube.height() != raster.height() {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("raster of {}x{}", cube.width(), cube.height()),
            actual: format!("{}x{}", raster.width(), raster.height()),
        });
    }
    if let SampleSubset::Train(split) | SampleSubset::Test(split) = subset {
        if split.width() != cube.width() || split.height() != cube.height() {
            return Err(HsdrError::DimensionMismatch {
                expected: format!("split of {}x{}", cube.width(), cube.height()),
                actual: format!("{}x{}", split.width(), split.height()),
            });
        }
    }

    let bands = cube.bands();
    let mut rows: Vec<F> = Vec::new();
    let mut labels = Vec::new();
    let mut coords = Vec::new();
    let mut spectrum = vec![F::zero(); bands];
    for y in 0..cube.height() {
        for x in 0..cube.width() {
            let label = raster.label(x, y);
            if label == 0 {
                continue;
            }
            let keep = match subset {
                SampleSubset::AllLabeled => true,
                SampleSubset::Train(split) => split.partition(x, y) == Partition::Train,
                SampleSubset::Test(split) => split.partition(x, y) == Partition::Test,
            };
            if !keep {
                continue;
            }
            cube.spectrum_into(x, y, &mut spectrum);
            rows.extend_from_slice(&spectrum);
            labels.push(label);
            coords.push((x, y));
        }
    }
    let samples = Mat::from_vec(labels.len(), bands, rows)?;
    Ok((samples, labels, coords))
}

fn write_header(out: &mut Vec<u8>, kind: u8, width: usize, height: usize, bands: usize) {
    out.extend_from_slice(CUBE_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(kind);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(bands as u32).to_le_bytes());
}

struct Header {
    kind: u8,
    width: usize,
    height: usize,
    bands: usize,
}

fn read_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 18 {
        return Err(HsdrError::FormatError(format!(
            "{}: file shorter than the 18-byte header",
            path.display()
        )));
    }
    if &bytes[0..4] != CUBE_MAGIC {
        return Err(HsdrError::FormatError(format!(
            "{}: bad magic, not an HSDR container",
            path.display()
        )));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(HsdrError::FormatError(format!(
            "{}: unsupported format version {}",
            path.display(),
            bytes[4]
        )));
    }
    let kind = bytes[5];
    let width = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    if width == 0 || height == 0 || bands == 0 {
        return Err(HsdrError::FormatError(format!(
            "{}: zero dimension in header ({width}x{height}x{bands})",
            path.display()
        )));
    }
    Ok(Header {
        kind,
        width,
        height,
        bands,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn save_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(18 + cube.data().len() * 4);
    write_header(
        &mut out,
        KIND_CUBE_F32,
        cube.width(),
        cube.height(),
        cube.bands(),
    );
    for v in cube.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let header = read_header(&bytes, path)?;
    if header.kind != KIND_CUBE_F32 {
        return Err(HsdrError::FormatError(format!(
            "{}: payload kind {} is not an f32 cube",
            path.display(),
            header.kind
        )));
    }
    let expected = header.width * header.height * header.bands;
    let payload = &bytes[18..];
    if payload.len() != expected * 4 {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("{} payload bytes", expected * 4),
            actual: format!("{}", payload.len()),
        });
    }
    let mut data = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(HsdrError::FormatError(format!(
                "{}: non-finite value in payload",
                path.display()
            )));
        }
        data.push(v);
    }
    HyperCube::from_data(header.width, header.height, header.bands, data)
}

pub fn save_labels(raster: &LabelRaster, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(18 + raster.labels().len() * 2);
    write_header(&mut out, KIND_LABELS_U16, raster.width(), raster.height(), 1);
    for v in raster.labels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelRaster> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let header = read_header(&bytes, path)?;
    if header.kind != KIND_LABELS_U16 {
        return Err(HsdrError::FormatError(format!(
            "{}: payload kind {} is not a u16 label raster",
            path.display(),
            header.kind
        )));
    }
    if header.bands != 1 {
        return Err(HsdrError::FormatError(format!(
            "{}: label raster must have bands = 1, got {}",
            path.display(),
            header.bands
        )));
    }
    let expected = header.width * header.height;
    let payload = &bytes[18..];
    if payload.len() != expected * 2 {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("{} payload bytes", expected * 2),
            actual: format!("{}", payload.len()),
        });
    }
    let labels = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelRaster::from_labels(header.width, header.height, labels)
}

pub fn save_split(split: &SplitAssignment, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(26 + split.assignment.len());
    out.extend_from_slice(SPLIT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(split.width as u32).to_le_bytes());
    out.extend_from_slice(&(split.height as u32).to_le_bytes());
    out.extend_from_slice(&split.seed.to_le_bytes());
    out.extend_from_slice(&split.train_fraction.to_le_bytes());
    out.extend_from_slice(&split.assignment);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

pub fn load_split(path: impl AsRef<Path>) -> Result<SplitAssignment> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() < 29 || &bytes[0..4] != SPLIT_MAGIC {
        return Err(HsdrError::FormatError(format!(
            "{}: not an HSSP split file",
            path.display()
        )));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(HsdrError::FormatError(format!(
            "{}: unsupported split version {}",
            path.display(),
            bytes[4]
        )));
    }
    let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let train_fraction = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
    let assignment = bytes[29..].to_vec();
    if assignment.len() != width * height {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("{} assignment bytes", width * height),
            actual: format!("{}", assignment.len()),
        });
    }
    if assignment.iter().any(|&a| a > 2) {
        return Err(HsdrError::FormatError(format!(
            "{}: invalid partition tag in split payload",
            path.display()
        )));
    }
    Ok(SplitAssignment {
        width,
        height,
        assignment,
        seed,
        train_fraction,
    })
}

/// Parse a cube from its CSV export. First line `width,height,bands`, then
/// one line per pixel in raster scan order with `bands` values.
pub fn read_cube_csv(path: impl AsRef<Path>) -> Result<HyperCube> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, dims) = lines.next().ok_or_else(|| {
        HsdrError::FormatError(format!("{}: empty cube csv", path.display()))
    })?;
    let dims = parse_usize_row(dims, 1, path)?;
    if dims.len() != 3 {
        return Err(HsdrError::FormatError(format!(
            "{}: first line must be width,height,bands",
            path.display()
        )));
    }
    let (width, height, bands) = (dims[0], dims[1], dims[2]);
    let mut data = vec![0.0f32; width * height * bands];
    let mut pixel = 0usize;
    for (lineno, line) in lines {
        if pixel >= width * height {
            return Err(HsdrError::FormatError(format!(
                "{}:{}: more pixel rows than width*height",
                path.display(),
                lineno + 1
            )));
        }
        let (x, y) = (pixel % width, pixel / width);
        let mut n = 0usize;
        for field in line.split(',') {
            if n >= bands {
                n += 1;
                break;
            }
            let v: f32 = field.trim().parse().map_err(|_| {
                HsdrError::FormatError(format!(
                    "{}:{}: bad float {:?}",
                    path.display(),
                    lineno + 1,
                    field.trim()
                ))
            })?;
            data[(n * height + y) * width + x] = v;
            n += 1;
        }
        if n != bands {
            return Err(HsdrError::FormatError(format!(
                "{}:{}: expected {} band values, got {}",
                path.display(),
                lineno + 1,
                bands,
                n
            )));
        }
        pixel += 1;
    }
    if pixel != width * height {
        return Err(HsdrError::FormatError(format!(
            "{}: expected {} pixel rows, got {}",
            path.display(),
            width * height,
            pixel
        )));
    }
    HyperCube::from_data(width, height, bands, data)
}

/// Parse a label raster from its CSV export. First line `width,height`, then
/// `height` lines of `width` integer labels.
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<LabelRaster> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, dims) = lines.next().ok_or_else(|| {
        HsdrError::FormatError(format!("{}: empty labels csv", path.display()))
    })?;
    let dims = parse_usize_row(dims, 1, path)?;
    if dims.len() != 2 {
        return Err(HsdrError::FormatError(format!(
            "{}: first line must be width,height",
            path.display()
        )));
    }
    let (width, height) = (dims[0], dims[1]);
    let mut labels = Vec::with_capacity(width * height);
    for (lineno, line) in lines {
        let row = parse_usize_row(line, lineno + 1, path)?;
        if row.len() != width {
            return Err(HsdrError::FormatError(format!(
                "{}:{}: expected {} labels, got {}",
                path.display(),
                lineno + 1,
                width,
                row.len()
            )));
        }
        for v in row {
            if v > u16::MAX as usize {
                return Err(HsdrError::FormatError(format!(
                    "{}:{}: label {} out of u16 range",
                    path.display(),
                    lineno + 1,
                    v
                )));
            }
            labels.push(v as u16);
        }
    }
    LabelRaster::from_labels(width, height, labels)
}

fn parse_usize_row(line: &str, lineno: usize, path: &Path) -> Result<Vec<usize>> {
    line.split(',')
        .map(|f| {
            f.trim().parse::<usize>().map_err(|_| {
                HsdrError::FormatError(format!(
                    "{}:{}: bad integer {:?}",
                    path.display(),
                    lineno,
                    f.trim()
                ))
            })
        })
        .collect()
}
