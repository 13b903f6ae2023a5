//! Stochastic spectral augmentations applied to single pixel spectra.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::speccube::BandLayout;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("spectrum has {got} bands, pipeline layout has {expected}")]
    Length { expected: usize, got: usize },
    #[error("invalid augmentation: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    /// Transpose `n_swaps` randomly chosen adjacent band pairs, one after another.
    BandSwap { n_swaps: usize },
    /// Additive Gaussian noise; `sigma` is relative to each band's value
    /// unless `absolute` is set.
    GaussianNoise {
        sigma: f64,
        #[serde(default)]
        absolute: bool,
    },
    /// Uniform `[lo, hi]` multiplicative factors: one for the VNIR region and
    /// one for the SWIR region, or one per layout domain with `per_domain`.
    DomainScaling {
        lo: f64,
        hi: f64,
        #[serde(default)]
        per_domain: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub op: Augmentation,
    /// Probability of applying this step.
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_p() -> f64 {
    0.5
}

impl AugmentationSpec {
    pub fn band_swap() -> Self {
        Self {
            op: Augmentation::BandSwap { n_swaps: 5 },
            p: default_p(),
        }
    }

    pub fn gaussian_noise() -> Self {
        Self::gaussian_noise_with(0.005)
    }

    pub fn gaussian_noise_with(sigma: f64) -> Self {
        Self {
            op: Augmentation::GaussianNoise {
                sigma,
                absolute: false,
            },
            p: default_p(),
        }
    }

    pub fn domain_scaling() -> Self {
        Self {
            op: Augmentation::DomainScaling {
                lo: 0.9,
                hi: 1.1,
                per_domain: false,
            },
            p: default_p(),
        }
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(AugmentError::Invalid(format!("probability {} outside [0, 1]", self.p)));
        }
        match self.op {
            Augmentation::BandSwap { .. } => Ok(()),
            Augmentation::GaussianNoise { sigma, .. } if sigma >= 0.0 => Ok(()),
            Augmentation::GaussianNoise { sigma, .. } => {
                Err(AugmentError::Invalid(format!("noise sigma {sigma} < 0")))
            }
            Augmentation::DomainScaling { lo, hi, .. } if lo > 0.0 && lo <= hi => Ok(()),
            Augmentation::DomainScaling { lo, hi, .. } => Err(AugmentError::Invalid(format!(
                "scaling range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            ))),
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self.op {
            Augmentation::BandSwap { n_swaps } => format!("swap{n_swaps}"),
            Augmentation::GaussianNoise { sigma, absolute } => {
                format!("noise{}{sigma}", if absolute { "abs" } else { "" })
            }
            Augmentation::DomainScaling { lo, hi, per_domain } => {
                format!("scale{}[{lo},{hi}]", if per_domain { "4" } else { "" })
            }
        }
    }
}

/// Ordered augmentation steps for one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPipeline {
    pub specs: Vec<AugmentationSpec>,
    pub layout: BandLayout,
}

impl AugmentationPipeline {
    pub fn new(specs: Vec<AugmentationSpec>, layout: BandLayout) -> Result<Self> {
        for s in &specs {
            s.validate()?;
            if matches!(s.op, Augmentation::DomainScaling { .. }) && layout.domains.len() < 2 {
                return Err(AugmentError::Invalid(
                    "domain scaling needs a layout with at least 2 domains".into(),
                ));
            }
        }
        Ok(Self { specs, layout })
    }

    pub fn identity(layout: BandLayout) -> Self {
        Self {
            specs: Vec::new(),
            layout,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.specs.is_empty() || self.specs.iter().all(|s| s.p == 0.0)
    }
}

/// Swaps each `(k, k+1)` for `k` in `positions`, in order.
pub fn band_swap_at(spectrum: &[f64], positions: &[usize]) -> Vec<f64> {
    let mut out = spectrum.to_vec();
    for &k in positions {
        out.swap(k, k + 1);
    }
    out
}

pub fn band_swap<R: Rng + ?Sized>(spectrum: &[f64], n_swaps: usize, rng: &mut R) -> Vec<f64> {
    let mut out = spectrum.to_vec();
    if out.len() < 2 {
        return out;
    }
    for _ in 0..n_swaps {
        let k = rng.gen_range(0..out.len() - 1);
        out.swap(k, k + 1);
    }
    out
}

/// `x[k] + N(0, (sigma·x[k])²)`.
pub fn gaussian_noise<R: Rng + ?Sized>(spectrum: &[f64], sigma_rel: f64, rng: &mut R) -> Vec<f64> {
    spectrum
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            x + sigma_rel * x * e
        })
        .collect()
}

pub fn gaussian_noise_absolute<R: Rng + ?Sized>(spectrum: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    spectrum
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            x + sigma * e
        })
        .collect()
}

/// Multiplies VNIR-region bands by `vnir` and all SWIR-region bands by `swir`.
pub fn domain_scaling_with(spectrum: &[f64], layout: &BandLayout, vnir: f64, swir: f64) -> Vec<f64> {
    let mut out = spectrum.to_vec();
    for (d, r) in layout.domains.iter().zip(layout.ranges()) {
        let f = if d.is_vnir() { vnir } else { swir };
        for v in &mut out[r] {
            *v *= f;
        }
    }
    out
}

/// Two-factor domain scaling with factors drawn from `Uniform[lo, hi]`
/// (VNIR first, then SWIR).
pub fn domain_scaling<R: Rng + ?Sized>(
    spectrum: &[f64],
    layout: &BandLayout,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Vec<f64> {
    let vnir = uniform(lo, hi, rng);
    let swir = uniform(lo, hi, rng);
    domain_scaling_with(spectrum, layout, vnir, swir)
}

/// One independent factor per layout domain.
pub fn domain_scaling_per_domain<R: Rng + ?Sized>(
    spectrum: &[f64],
    layout: &BandLayout,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = spectrum.to_vec();
    for r in layout.ranges() {
        let f = uniform(lo, hi, rng);
        for v in &mut out[r] {
            *v *= f;
        }
    }
    out
}

fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if lo == hi {
        // still consume a draw so streams stay aligned across settings
        let _: f64 = rng.gen();
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Applies each step in order, each with its own probability.
pub fn apply_pipeline<R: Rng + ?Sized>(
    spectrum: &[f64],
    pipeline: &AugmentationPipeline,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let expected = pipeline.layout.total_bands();
    if spectrum.len() != expected {
        return Err(AugmentError::Length {
            expected,
            got: spectrum.len(),
        });
    }
    let mut out = spectrum.to_vec();
    for spec in &pipeline.specs {
        if spec.p <= 0.0 || (spec.p < 1.0 && !rng.gen_bool(spec.p)) {
            continue;
        }
        out = match spec.op {
            Augmentation::BandSwap { n_swaps } => band_swap(&out, n_swaps, rng),
            Augmentation::GaussianNoise { sigma, absolute: false } => gaussian_noise(&out, sigma, rng),
            Augmentation::GaussianNoise { sigma, absolute: true } => {
                gaussian_noise_absolute(&out, sigma, rng)
            }
            Augmentation::DomainScaling {
                lo,
                hi,
                per_domain: false,
            } => domain_scaling(&out, &pipeline.layout, lo, hi, rng),
            Augmentation::DomainScaling {
                lo,
                hi,
                per_domain: true,
            } => domain_scaling_per_domain(&out, &pipeline.layout, lo, hi, rng),
        };
    }
    Ok(out)
}
