//! Synthetic two-date scenes.
//!
//! A scene is a fixed mosaic of labeled elliptical crowns over a background,
//! each crown carrying a species mean spectrum plus a crown-level jitter. Each
//! acquisition date then applies its own abiotic perturbations:
//!
//! ```text
//! x(i,j,b) = gain_d(i,j) · ramp(j) · (mean_s[b] + jitter_crown[b]) + offset[b] + noise(i,j,b)
//! ```
//!
//! where `d` is the band's domain. Gains are smooth random fields, the ramp is
//! a column-dependent view-angle proxy, the offset a smooth path-radiance
//! proxy, and the noise is relative to the clean value. Results are clipped
//! at zero and stored as `f32`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::speccube::{BandLayout, Crown, CrownMap, CubeError, HyperCube};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("could not separate {species} species by {min_separation} within {retries} retries")]
    Separation {
        species: usize,
        min_separation: f64,
        retries: usize,
    },
    #[error("could not place crown {crown} of species {species} after {attempts} attempts")]
    Placement {
        crown: usize,
        species: usize,
        attempts: usize,
    },
    #[error(transparent)]
    Cube(#[from] CubeError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const REFLECTANCE_MIN: f64 = 0.01;
pub const REFLECTANCE_MAX: f64 = 0.99;

/// Seeded generator for one named sub-stream of a scene seed.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss(x: f64, center: f64, width: f64) -> f64 {
    let z = (x - center) / width;
    (-0.5 * z * z).exp()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean reflectance of one species.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSpectrumModel {
    pub mean: Vec<f64>,
    pub sigma_species: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryParams {
    /// Minimum pairwise L2 distance between species means.
    pub min_separation: f64,
    pub sigma_species: f64,
    /// Number of Gaussian absorption/reflection features per species.
    pub bumps: usize,
    /// Peak magnitude bound of each feature.
    pub bump_amplitude: f64,
    /// How far each species' baseline curve departs from the library-wide
    /// one, as a fraction of each shape parameter's range. 1 gives
    /// independent curves.
    pub baseline_spread: f64,
    pub max_retries: usize,
}

impl Default for LibraryParams {
    fn default() -> Self {
        Self {
            min_separation: 0.25,
            sigma_species: 0.02,
            bumps: 6,
            bump_amplitude: 0.06,
            baseline_spread: 1.0,
            max_retries: 1000,
        }
    }
}

/// Shape parameters of the smooth vegetation baseline.
#[derive(Clone, Copy, Debug)]
struct CurveShape {
    green: f64,
    nir: f64,
    edge: f64,
    swir_scale: f64,
}

const GREEN: (f64, f64) = (0.04, 0.10);
const NIR: (f64, f64) = (0.30, 0.55);
const EDGE: (f64, f64) = (700.0, 730.0);
const SWIR_SCALE: (f64, f64) = (0.45, 0.75);

impl CurveShape {
    fn draw(rng: &mut impl Rng) -> Self {
        Self {
            green: rng.gen_range(GREEN.0..GREEN.1),
            nir: rng.gen_range(NIR.0..NIR.1),
            edge: rng.gen_range(EDGE.0..EDGE.1),
            swir_scale: rng.gen_range(SWIR_SCALE.0..SWIR_SCALE.1),
        }
    }

    /// Moves each parameter by up to `spread` of its range, uniformly.
    fn perturbed(&self, spread: f64, rng: &mut impl Rng) -> Self {
        let mut nudge = |v: f64, (lo, hi): (f64, f64)| {
            let d = spread * (hi - lo) * rng.gen_range(-1.0..=1.0);
            (v + d).clamp(lo, hi)
        };
        Self {
            green: nudge(self.green, GREEN),
            nir: nudge(self.nir, NIR),
            edge: nudge(self.edge, EDGE),
            swir_scale: nudge(self.swir_scale, SWIR_SCALE),
        }
    }

    fn render(&self, wl: &[f64]) -> Vec<f64> {
        wl.iter()
            .map(|&w| {
                let visible = self.green * (0.6 + 0.6 * gauss(w, 550.0, 35.0));
                let rise = logistic((w - self.edge) / 18.0);
                // water absorption around 1450 and 1940 nm shapes the SWIR plateaus
                let water = 1.0 - 0.35 * gauss(w, 1450.0, 90.0) - 0.5 * gauss(w, 1940.0, 110.0);
                let swir = if w > 1000.0 {
                    self.swir_scale + (1.0 - self.swir_scale) * (-(w - 1000.0) / 900.0).exp()
                } else {
                    1.0
                };
                visible * (1.0 - rise) + self.nir * rise * swir * water
            })
            .collect()
    }
}

fn add_bumps(out: &mut [f64], wl: &[f64], count: usize, amplitude: f64, widths: (f64, f64), rng: &mut impl Rng) {
    for _ in 0..count {
        let center = rng.gen_range(wl[0]..=wl[wl.len() - 1]);
        let width = rng.gen_range(widths.0..widths.1);
        let amp = amplitude * rng.gen_range(-1.0..=1.0);
        for (m, &w) in out.iter_mut().zip(wl) {
            *m += amp * gauss(w, center, width);
        }
    }
}

fn species_mean(wl: &[f64], base: &CurveShape, params: &LibraryParams, rng: &mut impl Rng) -> Vec<f64> {
    let mut mean = base.perturbed(params.baseline_spread, rng).render(wl);
    add_bumps(&mut mean, wl, params.bumps, params.bump_amplitude, (15.0, 120.0), rng);
    for m in &mut mean {
        *m = m.clamp(REFLECTANCE_MIN, REFLECTANCE_MAX);
    }
    mean
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `k` species means, each at least `min_separation` (L2) from the others.
/// Offending species are redrawn until the set is separated or the retry
/// budget runs out.
pub fn generate_species_library(
    k: usize,
    layout: &BandLayout,
    params: &LibraryParams,
    seed: u64,
) -> Result<Vec<SpeciesSpectrumModel>> {
    if k < 2 {
        return Err(SynthError::Config(format!("need at least 2 species, got {k}")));
    }
    if params.sigma_species < 0.0
        || params.min_separation < 0.0
        || params.bump_amplitude < 0.0
        || !(0.0..=1.0).contains(&params.baseline_spread)
    {
        return Err(SynthError::Config("negative library parameter".into()));
    }
    layout.validate()?;
    let wl = layout.wavelengths();
    let mut rng = stream_rng(seed, 1);
    let base = CurveShape::draw(&mut rng);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut retries = 0;
    while means.len() < k {
        let candidate = species_mean(&wl, &base, params, &mut rng);
        if means.iter().all(|m| l2(m, &candidate) >= params.min_separation) {
            means.push(candidate);
        } else {
            retries += 1;
            if retries > params.max_retries {
                return Err(SynthError::Separation {
                    species: k,
                    min_separation: params.min_separation,
                    retries: params.max_retries,
                });
            }
        }
    }
    Ok(means
        .into_iter()
        .map(|mean| SpeciesSpectrumModel {
            mean,
            sigma_species: params.sigma_species,
        })
        .collect())
}

/// How many crowns each species gets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrownProfile {
    /// `max(floor, round(largest · ratio^k))` crowns for the k-th species.
    Geometric { largest: usize, ratio: f64, floor: usize },
    /// Explicit per-species counts.
    Counts(Vec<usize>),
}

impl CrownProfile {
    pub fn counts(&self, species: usize) -> Result<Vec<usize>> {
        match self {
            CrownProfile::Geometric {
                largest,
                ratio,
                floor,
            } => {
                if !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(SynthError::Config(format!("geometric ratio {ratio} not in (0, 1]")));
                }
                Ok((0..species)
                    .map(|k| ((*largest as f64) * ratio.powi(k as i32) + 1e-9).round().max(*floor as f64) as usize)
                    .collect())
            }
            CrownProfile::Counts(c) => {
                if c.len() != species {
                    return Err(SynthError::Config(format!(
                        "{} crown counts for {species} species",
                        c.len()
                    )));
                }
                Ok(c.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneConfig {
    pub rows: usize,
    pub cols: usize,
    pub species: usize,
    pub profile: CrownProfile,
    pub radius_min: f64,
    pub radius_max: f64,
    pub layout: BandLayout,
    pub library: LibraryParams,
    pub max_place_attempts: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            rows: 96,
            cols: 96,
            species: 20,
            profile: CrownProfile::Geometric {
                largest: 45,
                ratio: 0.7,
                floor: 3,
            },
            radius_min: 1.8,
            radius_max: 3.4,
            layout: BandLayout::default(),
            library: LibraryParams::default(),
            max_place_attempts: 20_000,
            seed: 2016,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.species < 1 {
            return Err(SynthError::Config("no species".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(SynthError::Config("empty grid".into()));
        }
        if !(self.radius_min >= 0.5 && self.radius_max >= self.radius_min) {
            return Err(SynthError::Config(format!(
                "bad radius range [{}, {}]",
                self.radius_min, self.radius_max
            )));
        }
        self.layout.validate()?;
        Ok(())
    }
}

fn ellipse_pixels(ci: f64, cj: f64, a: f64, b: f64, theta: f64) -> Vec<(isize, isize)> {
    let r = a.max(b).ceil() as isize;
    let (s, c) = theta.sin_cos();
    let (i0, j0) = (ci.round() as isize, cj.round() as isize);
    let mut out = Vec::new();
    for i in i0 - r..=i0 + r {
        for j in j0 - r..=j0 + r {
            let (di, dj) = (i as f64 - ci, j as f64 - cj);
            let u = (di * c + dj * s) / a;
            let v = (-di * s + dj * c) / b;
            if u * u + v * v <= 1.0 {
                out.push((i, j));
            }
        }
    }
    out
}

/// Places pixel-disjoint elliptical crowns, species by species, following the
/// configured crown-count profile. Every crown is flagged as mapped on both dates.
pub fn rasterize_crowns(config: &SyntheticSceneConfig, seed: u64) -> Result<CrownMap> {
    config.validate()?;
    let counts = config.profile.counts(config.species)?;
    let (rows, cols) = (config.rows, config.cols);
    let mut rng = stream_rng(seed, 2);
    let mut taken = vec![false; rows * cols];
    let mut crowns = Vec::new();
    let mut id = 0;
    for (species, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let mut placed = None;
            for _ in 0..config.max_place_attempts {
                let a = rng.gen_range(config.radius_min..=config.radius_max);
                let b = rng.gen_range(config.radius_min..=config.radius_max);
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let ci = rng.gen_range(0.0..rows as f64);
                let cj = rng.gen_range(0.0..cols as f64);
                let px = ellipse_pixels(ci, cj, a, b, theta);
                let fits = !px.is_empty()
                    && px.iter().all(|&(i, j)| {
                        i >= 0
                            && j >= 0
                            && (i as usize) < rows
                            && (j as usize) < cols
                            && !taken[i as usize * cols + j as usize]
                    });
                if fits {
                    placed = Some(px);
                    break;
                }
            }
            let px = placed.ok_or(SynthError::Placement {
                crown: id,
                species,
                attempts: config.max_place_attempts,
            })?;
            let mut pixels: Vec<(usize, usize)> =
                px.into_iter().map(|(i, j)| (i as usize, j as usize)).collect();
            pixels.sort_unstable();
            for &(i, j) in &pixels {
                taken[i * cols + j] = true;
            }
            crowns.push(Crown {
                id,
                species,
                pixels,
                both_dates: true,
            });
            id += 1;
        }
    }
    Ok(CrownMap::new(crowns))
}

/// Per-date perturbation magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbioticModel {
    /// Gain-field amplitude for each layout domain.
    pub gain_amplitude: Vec<f64>,
    pub offset_amplitude: f64,
    /// Amplitude of the smooth spatial field scaling the offset (0 keeps it
    /// constant over the scene).
    pub offset_variation: f64,
    pub ramp_amplitude: f64,
    pub noise_rel: f64,
    /// Control points per axis of the bilinear gain field.
    pub gain_grid: usize,
}

impl Default for AbioticModel {
    fn default() -> Self {
        Self {
            gain_amplitude: vec![0.05, 0.08, 0.08, 0.08],
            offset_amplitude: 0.01,
            offset_variation: 0.0,
            ramp_amplitude: 0.05,
            noise_rel: 0.01,
            gain_grid: 5,
        }
    }
}

impl AbioticModel {
    /// No perturbation at all.
    pub fn zero(domains: usize) -> Self {
        Self {
            gain_amplitude: vec![0.0; domains],
            offset_amplitude: 0.0,
            offset_variation: 0.0,
            ramp_amplitude: 0.0,
            noise_rel: 0.0,
            gain_grid: 5,
        }
    }

    pub fn validate(&self, layout: &BandLayout) -> Result<()> {
        if self.gain_amplitude.len() != layout.domains.len() {
            return Err(SynthError::Config(format!(
                "{} gain amplitudes for {} domains",
                self.gain_amplitude.len(),
                layout.domains.len()
            )));
        }
        let nonneg = self.gain_amplitude.iter().all(|g| *g >= 0.0)
            && self.offset_amplitude >= 0.0
            && self.offset_variation >= 0.0
            && self.noise_rel >= 0.0
            && self.ramp_amplitude >= 0.0;
        if !nonneg {
            return Err(SynthError::Config("abiotic amplitudes must be non-negative".into()));
        }
        if self.ramp_amplitude >= 1.0 {
            return Err(SynthError::Config("ramp amplitude must stay below 1".into()));
        }
        if self.gain_grid < 2 {
            return Err(SynthError::Config("gain grid needs at least 2 control points".into()));
        }
        Ok(())
    }
}

/// Smooth positive field over `rows × cols`: log-normal control points,
/// bilinearly interpolated, then divided by the field mean.
pub fn gain_field(rows: usize, cols: usize, grid: usize, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let ctrl: Vec<f64> = (0..grid * grid).map(|_| amplitude * normal(rng)).collect();
    if amplitude == 0.0 {
        return vec![1.0; rows * cols];
    }
    let at = |p: usize, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let t = p as f64 / (n - 1) as f64 * (grid - 1) as f64;
        let lo = (t.floor() as usize).min(grid - 2);
        (lo, lo + 1, t - lo as f64)
    };
    let mut field = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let (i0, i1, fi) = at(i, rows);
        for j in 0..cols {
            let (j0, j1, fj) = at(j, cols);
            let v = (1.0 - fi) * ((1.0 - fj) * ctrl[i0 * grid + j0] + fj * ctrl[i0 * grid + j1])
                + fi * ((1.0 - fj) * ctrl[i1 * grid + j0] + fj * ctrl[i1 * grid + j1]);
            field.push(v.exp());
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    for v in &mut field {
        *v /= mean;
    }
    field
}

/// Smooth zero-centred jitter basis: offset, tilt, red-edge and SWIR shapes.
fn jitter_basis(wl: &[f64]) -> [Vec<f64>; 4] {
    let lo = wl[0];
    let hi = wl[wl.len() - 1];
    let mid = 0.5 * (lo + hi);
    let span = (0.5 * (hi - lo)).max(1.0);
    [
        vec![1.0; wl.len()],
        wl.iter().map(|w| (w - mid) / span).collect(),
        wl.iter().map(|&w| gauss(w, 720.0, 60.0)).collect(),
        wl.iter().map(|&w| gauss(w, 1650.0, 200.0)).collect(),
    ]
}

fn smooth_curve(basis: &[Vec<f64>; 4], coeffs: &[f64; 4], scale: f64, out: &mut [f64]) {
    for (b, o) in out.iter_mut().enumerate() {
        *o = scale * (0..4).map(|q| coeffs[q] * basis[q][b]).sum::<f64>();
    }
}

fn draw_coeffs(rng: &mut impl Rng) -> [f64; 4] {
    [normal(rng), normal(rng), normal(rng), normal(rng)]
}

/// The date-independent content of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneContent {
    pub rows: usize,
    pub cols: usize,
    pub layout: BandLayout,
    pub crowns: CrownMap,
    pub library: Vec<SpeciesSpectrumModel>,
    /// Clean spectrum of every pixel before abiotic effects, row-major.
    pub clean: Vec<f64>,
}

impl SceneContent {
    /// Draws crown jitter and background spectra once; both dates share them.
    pub fn build(
        rows: usize,
        cols: usize,
        layout: BandLayout,
        crowns: CrownMap,
        library: Vec<SpeciesSpectrumModel>,
        seed: u64,
    ) -> Result<Self> {
        crowns.validate(rows, cols)?;
        let c = layout.total_bands();
        if let Some(m) = library.iter().find(|m| m.mean.len() != c) {
            return Err(SynthError::Config(format!(
                "species mean has {} bands, layout has {c}",
                m.mean.len()
            )));
        }
        if let Some(cr) = crowns.crowns.iter().find(|cr| cr.species >= library.len()) {
            return Err(SynthError::Config(format!(
                "crown {} has species {} but the library has {}",
                cr.id,
                cr.species,
                library.len()
            )));
        }
        let wl = layout.wavelengths();
        let basis = jitter_basis(&wl);
        let sigma_bg = library.first().map_or(0.0, |m| m.sigma_species);
        let background: Vec<f64> = wl
            .iter()
            .map(|&w| {
                // litter and bare soil: dark, slowly brightening with wavelength
                let soil = 0.06 + 0.14 * ((w - 400.0) / 2000.0).clamp(0.0, 1.0);
                soil * (1.0 - 0.3 * gauss(w, 1940.0, 110.0))
            })
            .collect();
        let mut rng = stream_rng(seed, 3);
        let mut clean = vec![0.0; rows * cols * c];
        let mut buf = vec![0.0; c];
        for p in 0..rows * cols {
            let coeffs = draw_coeffs(&mut rng);
            smooth_curve(&basis, &coeffs, sigma_bg, &mut buf);
            for (b, slot) in clean[p * c..(p + 1) * c].iter_mut().enumerate() {
                *slot = (background[b] + buf[b]).max(0.0);
            }
        }
        for crown in &crowns.crowns {
            let model = &library[crown.species];
            let coeffs = draw_coeffs(&mut rng);
            smooth_curve(&basis, &coeffs, model.sigma_species, &mut buf);
            for &(i, j) in &crown.pixels {
                let p = i * cols + j;
                for (b, slot) in clean[p * c..(p + 1) * c].iter_mut().enumerate() {
                    *slot = model.mean[b] + buf[b];
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            layout,
            crowns,
            library,
            clean,
        })
    }
}

/// One acquisition of `scene` under `abiotic`.
const OFFSET_FEATURES: usize = 4;

pub fn render_date(
    scene: &SceneContent,
    abiotic: &AbioticModel,
    date_id: &str,
    seed: u64,
) -> Result<HyperCube> {
    abiotic.validate(&scene.layout)?;
    let (rows, cols) = (scene.rows, scene.cols);
    let c = scene.layout.total_bands();
    let band_domain = scene.layout.band_domains();
    let wl = scene.layout.wavelengths();

    let mut field_rng = stream_rng(seed, 10);
    let gains: Vec<Vec<f64>> = abiotic
        .gain_amplitude
        .iter()
        .map(|&g| gain_field(rows, cols, abiotic.gain_grid, g, &mut field_rng))
        .collect();
    let mut geo_rng = stream_rng(seed, 11);
    let slope = abiotic.ramp_amplitude * geo_rng.gen_range(-1.0..=1.0);
    let ramp: Vec<f64> = (0..cols)
        .map(|j| {
            if cols == 1 {
                1.0
            } else {
                1.0 + slope * (2.0 * j as f64 / (cols - 1) as f64 - 1.0)
            }
        })
        .collect();
    // path-radiance proxy: a smooth random spectral shape, constant over the scene
    let mut offset = vec![0.0; c];
    for _ in 0..OFFSET_FEATURES {
        let center = geo_rng.gen_range(wl[0]..=wl[c - 1]);
        let width = geo_rng.gen_range(40.0..250.0);
        let amp = abiotic.offset_amplitude * normal(&mut geo_rng);
        for (o, &w) in offset.iter_mut().zip(&wl) {
            *o += amp * gauss(w, center, width);
        }
    }

    let offset_field = gain_field(rows, cols, abiotic.gain_grid, abiotic.offset_variation, &mut stream_rng(seed, 13));

    let mut noise_rng = stream_rng(seed, 12);
    let mut data = Vec::with_capacity(rows * cols * c);
    for i in 0..rows {
        for j in 0..cols {
            let p = i * cols + j;
            let clean = &scene.clean[p * c..(p + 1) * c];
            for b in 0..c {
                let v = gains[band_domain[b]][p] * ramp[j] * clean[b] + offset[b] * offset_field[p];
                let v = if abiotic.noise_rel > 0.0 {
                    v + abiotic.noise_rel * v.abs() * normal(&mut noise_rng)
                } else {
                    v
                };
                data.push(v.max(0.0) as f32);
            }
        }
    }
    Ok(HyperCube::new(
        rows,
        cols,
        date_id,
        scene.layout.clone(),
        vec![true; rows * cols],
        data,
    )?)
}

/// A scene observed on two dates.
#[derive(Clone, Debug)]
pub struct PairedScene {
    pub t1: HyperCube,
    pub t2: HyperCube,
    pub crowns: CrownMap,
    pub content: SceneContent,
}

/// Shared crowns, library and jitter; independent abiotic draws and noise per date.
pub fn generate_paired_scene(
    config: &SyntheticSceneConfig,
    abiotic_t1: &AbioticModel,
    abiotic_t2: &AbioticModel,
    seed: u64,
) -> Result<PairedScene> {
    config.validate()?;
    let library = generate_species_library(config.species.max(2), &config.layout, &config.library, seed)?;
    let library = library.into_iter().take(config.species).collect();
    let crowns = rasterize_crowns(config, seed)?;
    let content = SceneContent::build(
        config.rows,
        config.cols,
        config.layout.clone(),
        crowns,
        library,
        seed,
    )?;
    let t1 = render_date(&content, abiotic_t1, "T1", seed.wrapping_mul(2).wrapping_add(101))?;
    let t2 = render_date(&content, abiotic_t2, "T2", seed.wrapping_mul(2).wrapping_add(202))?;
    Ok(PairedScene {
        t1,
        t2,
        crowns: content.crowns.clone(),
        content,
    })
}
