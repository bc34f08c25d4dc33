use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vpfp::certificate::SearchSpec;
use vpfp::evolution::Mode;
use vpfp::probes::{DecayConfig, HypoConfig};
use vpfp::steady_state::PbeOptions;
use vpfp::{PhysParams, PotentialSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub nv: usize,
    pub lx: f64,
    pub lv: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { nx: 128, nv: 128, lx: 8.0, lv: 8.0 }
    }
}

/// Initial perturbation of `evolve`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDatum {
    /// `(x - v) exp(-(x^2 + v^2)/16)`.
    Smooth,
    /// `sign(x) bump(v)`.
    Rough,
    /// First field of the seeded probe set.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionSection {
    pub dt: f64,
    pub t_end: f64,
    pub mode: Mode,
    pub record_every: usize,
    pub functionals: Vec<String>,
    pub initial: InitialDatum,
    /// Rescale the projected datum to this `L^2(finf)` norm.
    pub amplitude: Option<f64>,
    /// Field-energy weight inside `H`; unset means `nu / (2 sigma)`.
    pub entropy_field_weight: Option<f64>,
}

impl Default for EvolutionSection {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_end: 10.0,
            mode: Mode::Linear,
            record_every: 10,
            functionals: ["norm2", "E", "H", "mass", "gradx2", "gradv2"].map(String::from).to_vec(),
            initial: InitialDatum::Smooth,
            amplitude: Some(0.1),
            entropy_field_weight: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemigroupSection {
    pub n_smooth: usize,
    pub n_rough: usize,
    pub dt: f64,
    pub t_end: f64,
    pub every: usize,
}

impl Default for SemigroupSection {
    fn default() -> Self {
        Self { n_smooth: 5, n_rough: 2, dt: 0.01, t_end: 5.0, every: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateSection {
    pub search: SearchSpec<f64>,
    /// Horizon of the short-time admissibility check.
    pub t0: f64,
    pub alpha: f64,
    /// `lambda1 = lambda1_fraction * lambda`.
    pub lambda1_fraction: f64,
    /// Radius of the smallness thresholds; unset scans for the best radius.
    pub r: Option<f64>,
    /// Estimate the semigroup constants and smallness thresholds.
    pub duhamel: bool,
    pub semigroup: SemigroupSection,
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self {
            search: SearchSpec::default(),
            t0: 1.0,
            alpha: 0.6,
            lambda1_fraction: 0.9,
            r: None,
            duhamel: true,
            semigroup: SemigroupSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub decay: bool,
    pub hypo: bool,
    pub decay_config: DecayConfig<f64>,
    pub hypo_config: HypoConfig<f64>,
    /// Grid of the hypoelliptic probe; unset uses the main grid.
    pub hypo_grid: Option<GridConfig>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            decay: true,
            hypo: true,
            decay_config: DecayConfig::default(),
            hypo_config: HypoConfig::default(),
            hypo_grid: Some(GridConfig { nx: 256, nv: 256, lx: 8.0, lv: 8.0 }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub potential: PotentialSpec,
    pub params: PhysParams,
    pub grid: GridConfig,
    pub pbe: PbeOptions<f64>,
    pub evolution: EvolutionSection,
    pub certificate: CertificateSection,
    pub probes: ProbeSection,
    pub output: Option<String>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            potential: PotentialSpec::Quadratic { omega: 1.0 },
            params: PhysParams { nu: 1.0, sigma: 1.0 },
            grid: GridConfig::default(),
            pbe: PbeOptions::default(),
            evolution: EvolutionSection::default(),
            certificate: CertificateSection::default(),
            probes: ProbeSection::default(),
            output: None,
            seed: 0,
        }
    }
}

/// Raw bytes and parsed config. JSON unless the extension is `.toml`.
pub fn load(path: &Path) -> anyhow::Result<(Vec<u8>, RunConfig)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
    let cfg = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok((bytes, cfg))
}
