//! Dated hyperspectral cubes, band layouts, crown ground truth and the
//! labeled spectra extracted from them.
//!
//! Cubes persist to the `.hsc` binary format and crowns to a tab-separated
//! `.crowns.tsv` table; both are described byte-for-byte in `docs/formats.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CUBE_MAGIC: [u8; 8] = *b"\x89HSC\r\n\x1a\n";
pub const CUBE_VERSION: u16 = 1;
pub const STD_FLOOR: f64 = 1e-8;
const CROWNS_HEADER: &str = "crown_id\tspecies_id\ti\tj\tboth_dates";

#[derive(Debug, Error)]
pub enum CubeError {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes after header, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension overflow: {0}")]
    Overflow(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error("no usable ground truth: {0}")]
    NoGroundTruth(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CubeError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CubeError + '_ {
    move |source| CubeError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandDomain {
    pub name: String,
    pub start_nm: f64,
    pub end_nm: f64,
    pub bands: usize,
}

impl BandDomain {
    pub fn new(name: &str, start_nm: f64, end_nm: f64, bands: usize) -> Self {
        Self {
            name: name.to_string(),
            start_nm,
            end_nm,
            bands,
        }
    }

    /// Domains ending at or below 1000 nm belong to the visible/near-infrared region.
    pub fn is_vnir(&self) -> bool {
        self.end_nm <= 1000.0
    }
}

/// Ordered, non-overlapping spectral domains making up a cube's channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandLayout {
    pub domains: Vec<BandDomain>,
}

impl Default for BandLayout {
    /// The four-domain post-pruning VNIR/SWIR layout, 343 bands total.
    fn default() -> Self {
        Self {
            domains: vec![
                BandDomain::new("VNIR", 414.7, 975.0, 154),
                BandDomain::new("SWIR0", 976.9, 1329.7, 66),
                BandDomain::new("SWIR1", 1497.9, 1774.8, 52),
                BandDomain::new("SWIR2", 1981.0, 2361.0, 71),
            ],
        }
    }
}

impl BandLayout {
    pub fn new(domains: Vec<BandDomain>) -> Result<Self> {
        let layout = Self { domains };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(CubeError::Invalid("layout has no domains".into()));
        }
        let mut prev_end = f64::NEG_INFINITY;
        for d in &self.domains {
            if d.bands == 0 {
                return Err(CubeError::Invalid(format!("domain {} has no bands", d.name)));
            }
            if !(d.start_nm.is_finite() && d.end_nm.is_finite()) || d.end_nm < d.start_nm {
                return Err(CubeError::Invalid(format!(
                    "domain {} has bad range [{}, {}]",
                    d.name, d.start_nm, d.end_nm
                )));
            }
            if d.bands > 1 && d.end_nm == d.start_nm {
                return Err(CubeError::Invalid(format!("domain {} is degenerate", d.name)));
            }
            if d.start_nm <= prev_end {
                return Err(CubeError::Invalid(format!(
                    "domain {} starts at {} nm, overlapping the previous domain",
                    d.name, d.start_nm
                )));
            }
            prev_end = d.end_nm;
        }
        Ok(())
    }

    pub fn total_bands(&self) -> usize {
        self.domains.iter().map(|d| d.bands).sum()
    }

    /// Channel index range of each domain.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.domains
            .iter()
            .map(|d| {
                let r = start..start + d.bands;
                start += d.bands;
                r
            })
            .collect()
    }

    /// Domain index of every channel.
    pub fn band_domains(&self) -> Vec<usize> {
        self.domains
            .iter()
            .enumerate()
            .flat_map(|(i, d)| std::iter::repeat(i).take(d.bands))
            .collect()
    }

    /// Band-centre wavelengths, evenly spaced within each domain.
    pub fn wavelengths(&self) -> Vec<f64> {
        self.domains
            .iter()
            .flat_map(|d| {
                let n = d.bands;
                (0..n).map(move |k| {
                    if n == 1 {
                        0.5 * (d.start_nm + d.end_nm)
                    } else {
                        d.start_nm + (d.end_nm - d.start_nm) * k as f64 / (n - 1) as f64
                    }
                })
            })
            .collect()
    }
}

/// One dated acquisition: `rows × cols × channels` reflectance, stored as
/// `f32` band-interleaved-by-pixel, plus a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    rows: usize,
    cols: usize,
    date_id: String,
    layout: BandLayout,
    valid: Vec<bool>,
    data: Vec<f32>,
}

impl HyperCube {
    pub fn new(
        rows: usize,
        cols: usize,
        date_id: impl Into<String>,
        layout: BandLayout,
        valid: Vec<bool>,
        data: Vec<f32>,
    ) -> Result<Self> {
        layout.validate()?;
        let channels = layout.total_bands();
        let pixels = rows
            .checked_mul(cols)
            .ok_or_else(|| CubeError::Overflow(format!("{rows}×{cols} pixels")))?;
        let values = pixels
            .checked_mul(channels)
            .ok_or_else(|| CubeError::Overflow(format!("{rows}×{cols}×{channels} values")))?;
        if rows == 0 || cols == 0 {
            return Err(CubeError::Invalid("cube must have at least one pixel".into()));
        }
        if valid.len() != pixels {
            return Err(CubeError::Mismatch(format!(
                "mask has {} entries for {pixels} pixels",
                valid.len()
            )));
        }
        if data.len() != values {
            return Err(CubeError::Mismatch(format!(
                "{} reflectance values for {rows}×{cols}×{channels}",
                data.len()
            )));
        }
        for (p, px) in data.chunks(channels).enumerate() {
            if valid[p] && px.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(CubeError::Invalid(format!(
                    "valid pixel ({}, {}) has negative or non-finite reflectance",
                    p / cols,
                    p % cols
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            date_id: date_id.into(),
            layout,
            valid,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.layout.total_bands()
    }

    pub fn date_id(&self) -> &str {
        &self.date_id
    }

    pub fn layout(&self) -> &BandLayout {
        &self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn in_bounds(&self, i: usize, j: usize) -> bool {
        i < self.rows && j < self.cols
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.in_bounds(i, j) && self.valid[i * self.cols + j]
    }

    /// Spectrum at `(i, j)`; panics when out of bounds.
    pub fn pixel(&self, i: usize, j: usize) -> &[f32] {
        assert!(self.in_bounds(i, j), "pixel ({i}, {j}) outside {}×{}", self.rows, self.cols);
        let c = self.channels();
        let p = i * self.cols + j;
        &self.data[p * c..(p + 1) * c]
    }

    pub fn pixel_f64(&self, i: usize, j: usize) -> Vec<f64> {
        self.pixel(i, j).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn same_geometry(&self, other: &HyperCube) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.layout == other.layout
    }
}

#[derive(Serialize, Deserialize)]
struct CubeHeader {
    rows: usize,
    cols: usize,
    channels: usize,
    date_id: String,
    layout: BandLayout,
}

pub fn encode_cube(cube: &HyperCube) -> Vec<u8> {
    let header = serde_json::to_vec(&CubeHeader {
        rows: cube.rows,
        cols: cube.cols,
        channels: cube.channels(),
        date_id: cube.date_id.clone(),
        layout: cube.layout.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(14 + header.len() + cube.valid.len() / 8 + 1 + cube.data.len() * 4);
    out.extend_from_slice(&CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let mut mask = vec![0u8; cube.valid.len().div_ceil(8)];
    for (p, &v) in cube.valid.iter().enumerate() {
        if v {
            mask[p / 8] |= 1 << (p % 8);
        }
    }
    out.extend_from_slice(&mask);
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cube(bytes: &[u8]) -> Result<HyperCube> {
    if bytes.len() < 14 {
        return Err(CubeError::Format(format!("file is only {} bytes", bytes.len())));
    }
    if bytes[..8] != CUBE_MAGIC {
        return Err(CubeError::Format("bad magic; not an .hsc cube".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != CUBE_VERSION {
        return Err(CubeError::Format(format!(
            "unsupported version {version} (expected {CUBE_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let rest = &bytes[14..];
    if rest.len() < hlen {
        return Err(CubeError::Truncated {
            expected: hlen,
            found: rest.len(),
        });
    }
    let header: CubeHeader = serde_json::from_slice(&rest[..hlen])
        .map_err(|e| CubeError::Format(format!("bad header: {e}")))?;
    if header.layout.total_bands() != header.channels {
        return Err(CubeError::Format(format!(
            "header claims {} channels but layout has {}",
            header.channels,
            header.layout.total_bands()
        )));
    }
    let pixels = header
        .rows
        .checked_mul(header.cols)
        .ok_or_else(|| CubeError::Overflow(format!("{}×{} pixels", header.rows, header.cols)))?;
    let payload = pixels
        .checked_mul(header.channels)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(pixels.div_ceil(8)))
        .ok_or_else(|| {
            CubeError::Overflow(format!(
                "{}×{}×{} values",
                header.rows, header.cols, header.channels
            ))
        })?;
    let body = &rest[hlen..];
    if body.len() < payload {
        return Err(CubeError::Truncated {
            expected: payload,
            found: body.len(),
        });
    }
    if body.len() > payload {
        return Err(CubeError::Format(format!(
            "{} trailing bytes after payload",
            body.len() - payload
        )));
    }
    let (mask, values) = body.split_at(pixels.div_ceil(8));
    let valid = (0..pixels).map(|p| mask[p / 8] >> (p % 8) & 1 == 1).collect();
    let data = values
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    HyperCube::new(header.rows, header.cols, header.date_id, header.layout, valid, data)
}

pub fn save_cube(cube: &HyperCube, path: &Path) -> Result<()> {
    fs::write(path, encode_cube(cube)).map_err(io_err(path))
}

pub fn load_cube(path: &Path) -> Result<HyperCube> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_cube(&bytes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Crown {
    pub id: usize,
    pub species: usize,
    pub pixels: Vec<(usize, usize)>,
    pub both_dates: bool,
}

/// Labeled tree crowns over a cube's pixel grid.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CrownMap {
    pub crowns: Vec<Crown>,
}

impl CrownMap {
    pub fn new(crowns: Vec<Crown>) -> Self {
        Self { crowns }
    }

    /// Checks bounds and pairwise disjointness (and unique crown ids).
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let mut owner = vec![usize::MAX; rows * cols];
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.crowns {
            if !ids.insert(c.id) {
                return Err(CubeError::Invalid(format!("duplicate crown id {}", c.id)));
            }
            for &(i, j) in &c.pixels {
                if i >= rows || j >= cols {
                    return Err(CubeError::Invalid(format!(
                        "crown {} pixel ({i}, {j}) outside {rows}×{cols}",
                        c.id
                    )));
                }
                let slot = &mut owner[i * cols + j];
                if *slot != usize::MAX && *slot != c.id {
                    return Err(CubeError::Invalid(format!(
                        "crowns {} and {} share pixel ({i}, {j})",
                        *slot, c.id
                    )));
                }
                *slot = c.id;
            }
        }
        Ok(())
    }

    pub fn species(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.crowns.iter().map(|c| c.species).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn pixel_count(&self) -> usize {
        self.crowns.iter().map(|c| c.pixels.len()).sum()
    }
}

pub fn write_crowns(crowns: &CrownMap, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CROWNS_HEADER);
    out.push('\n');
    for c in &crowns.crowns {
        for &(i, j) in &c.pixels {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                c.id,
                c.species,
                i,
                j,
                u8::from(c.both_dates)
            ));
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

pub fn read_crowns(path: &Path) -> Result<CrownMap> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(io_err(path))?
        .ok_or_else(|| CubeError::Format("empty crowns table".into()))?;
    if header.trim_end() != CROWNS_HEADER {
        return Err(CubeError::Format(format!("bad crowns header `{header}`")));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut by_id: BTreeMap<usize, Crown> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || CubeError::Format(format!("line {}: `{line}`", n + 2));
        if fields.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        let (id, species, i, j) = (num(fields[0])?, num(fields[1])?, num(fields[2])?, num(fields[3])?);
        let both = match fields[4].trim() {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        let crown = by_id.entry(id).or_insert_with(|| {
            order.push(id);
            Crown {
                id,
                species,
                pixels: Vec::new(),
                both_dates: both,
            }
        });
        if crown.species != species || crown.both_dates != both {
            return Err(CubeError::Format(format!(
                "line {}: crown {id} changes species or date flag",
                n + 2
            )));
        }
        crown.pixels.push((i, j));
    }
    Ok(CrownMap::new(
        order.into_iter().map(|id| by_id.remove(&id).unwrap()).collect(),
    ))
}

/// Rows of crown pixels with their species labels, for one date.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSpectra {
    pub matrix: Array2<f64>,
    pub labels: Vec<usize>,
    pub crown_ids: Vec<usize>,
    pub date_id: String,
}

impl LabeledSpectra {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One row per valid pixel of every crown mapped on both dates, ordered by
/// crown id and then row-major pixel position.
pub fn extract_labeled_spectra(cube: &HyperCube, crowns: &CrownMap) -> Result<LabeledSpectra> {
    crowns.validate(cube.rows, cube.cols)?;
    let mut selected: Vec<&Crown> = crowns.crowns.iter().filter(|c| c.both_dates).collect();
    selected.sort_by_key(|c| c.id);
    let c = cube.channels();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut crown_ids = Vec::new();
    for crown in selected {
        let mut px = crown.pixels.clone();
        px.sort_unstable();
        for (i, j) in px {
            if cube.is_valid(i, j) {
                values.extend(cube.pixel(i, j).iter().map(|&v| f64::from(v)));
                labels.push(crown.species);
                crown_ids.push(crown.id);
            }
        }
    }
    if labels.is_empty() {
        return Err(CubeError::NoGroundTruth(format!(
            "no valid pixels of crowns mapped on both dates in cube {}",
            cube.date_id
        )));
    }
    let matrix = Array2::from_shape_vec((labels.len(), c), values).expect("row-major build");
    Ok(LabeledSpectra {
        matrix,
        labels,
        crown_ids,
        date_id: cube.date_id.clone(),
    })
}

/// Row-major coordinates valid in both cubes.
pub fn valid_pair_coordinates(a: &HyperCube, b: &HyperCube) -> Result<Vec<(usize, usize)>> {
    if !a.same_geometry(b) {
        return Err(CubeError::Mismatch(format!(
            "cubes {} ({}×{}×{}) and {} ({}×{}×{}) differ in geometry or layout",
            a.date_id,
            a.rows,
            a.cols,
            a.channels(),
            b.date_id,
            b.rows,
            b.cols,
            b.channels()
        )));
    }
    Ok((0..a.rows)
        .flat_map(|i| (0..a.cols).map(move |j| (i, j)))
        .filter(|&(i, j)| a.valid[i * a.cols + j] && b.valid[i * b.cols + j])
        .collect())
}

/// Per-band affine normalization fitted on one set of spectra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation per column, std floored at [`STD_FLOOR`].
    pub fn fit(matrix: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, c) = matrix.dim();
        if n < 2 {
            return Err(CubeError::Invalid(format!(
                "standardizer needs at least 2 rows, got {n}"
            )));
        }
        let mut mean = vec![0.0; c];
        for row in matrix.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for row in matrix.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, matrix: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if matrix.ncols() != self.width() {
            return Err(CubeError::Mismatch(format!(
                "standardizer has {} bands, matrix has {}",
                self.width(),
                matrix.ncols()
            )));
        }
        let mut out = matrix.to_owned();
        for mut row in out.rows_mut() {
            self.apply_row(row.as_slice_mut().expect("owned rows are contiguous"));
        }
        Ok(out)
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}
