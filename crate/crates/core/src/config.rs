//! TOML run configuration. Files use nm, eV, mV and K; everything is converted
//! to SI (energies stay in eV) on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assembly::{ObservationMode, ObservationPolicy, Pin, WindowSize};
use crate::error::{Error, Result};
use crate::observables::DeviceModel;
use crate::phasespace::{
    flat_potential, pulse_potential, random_potential, rtd_potential, DeviceGeometry, MaterialParams, PhaseGrid,
    PotentialProfile,
};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "MOYAL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dx_nm: f64,
    pub dk_per_nm: f64,
    pub nx: usize,
    pub nk: usize,
    #[serde(default = "yes")]
    pub k_offset: bool,
}

fn yes() -> bool {
    true
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dx_nm: 0.4,
            dk_per_nm: 0.05,
            nx: 178,
            nk: 128,
            k_offset: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialConfig {
    pub mstar_rel: f64,
    #[serde(rename = "temperature_K")]
    pub temperature_k: f64,
    #[serde(rename = "fermi_mV")]
    pub fermi_mv: f64,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        MaterialConfig {
            mstar_rel: 0.07,
            temperature_k: 77.0,
            fermi_mv: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Rtd,
    Random,
    Pulse,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[allow(non_snake_case)]
pub struct DeviceConfig {
    pub kind: DeviceKind,
    pub barrier_height_eV: f64,
    pub barrier_width_nm: f64,
    pub well_width_nm: f64,
    pub spacer_nm: f64,
    /// Defaults to the grid length `nx * dx`.
    pub total_nm: Option<f64>,
    pub seed: u64,
    pub amplitude_eV: f64,
    pub pulse_center_nm: Option<f64>,
    pub pulse_height_eV: f64,
    pub pulse_width_cells: usize,
    pub level_eV: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            kind: DeviceKind::Rtd,
            barrier_height_eV: 0.3,
            barrier_width_nm: 3.2,
            well_width_nm: 4.8,
            spacer_nm: 30.0,
            total_nm: None,
            seed: 1,
            amplitude_eV: 0.5,
            pulse_center_nm: None,
            pulse_height_eV: 0.5,
            pulse_width_cells: 1,
            level_eV: 0.0,
        }
    }
}

/// A window choice as written in config files: `"auto"`, `"classical"`,
/// `"unexpanded"` (same as 1) or a positive integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WindowToken", into = "WindowToken")]
pub enum WindowSpec {
    Auto,
    Classical,
    Fixed(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum WindowToken {
    Name(String),
    Number(i64),
}

impl TryFrom<WindowToken> for WindowSpec {
    type Error = String;
    fn try_from(t: WindowToken) -> std::result::Result<Self, String> {
        match t {
            WindowToken::Number(n) if n >= 1 => Ok(WindowSpec::Fixed(n as usize)),
            WindowToken::Number(n) => Err(format!("window must be >= 1, got {n}")),
            WindowToken::Name(s) => match s.as_str() {
                "auto" => Ok(WindowSpec::Auto),
                "classical" => Ok(WindowSpec::Classical),
                "unexpanded" => Ok(WindowSpec::Fixed(1)),
                other => other
                    .parse::<usize>()
                    .ok()
                    .filter(|n| *n >= 1)
                    .map(WindowSpec::Fixed)
                    .ok_or_else(|| format!("unknown window '{other}'")),
            },
        }
    }
}

impl From<WindowSpec> for WindowToken {
    fn from(w: WindowSpec) -> Self {
        match w {
            WindowSpec::Auto => WindowToken::Name("auto".into()),
            WindowSpec::Classical => WindowToken::Name("classical".into()),
            WindowSpec::Fixed(n) => WindowToken::Number(n as i64),
        }
    }
}

impl WindowSpec {
    pub fn policy(&self) -> ObservationPolicy {
        match self {
            WindowSpec::Auto => ObservationPolicy::auto(),
            WindowSpec::Classical => ObservationPolicy::classical(),
            WindowSpec::Fixed(n) => ObservationPolicy::windowed(WindowSize::Fixed(*n)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            WindowSpec::Auto => "auto".into(),
            WindowSpec::Classical => "classical".into(),
            WindowSpec::Fixed(n) => format!("n{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationConfig {
    pub mode: ObservationMode,
    pub n_obs: WindowSpec,
    pub j_max: Option<usize>,
    /// `[x_index, n_obs]` pairs.
    pub overrides: Vec<[usize; 2]>,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            mode: ObservationMode::Windowed,
            n_obs: WindowSpec::Auto,
            j_max: None,
            overrides: Vec::new(),
        }
    }
}

impl ObservationConfig {
    pub fn policy(&self) -> Result<ObservationPolicy> {
        let mut p = match (self.mode, self.n_obs) {
            (ObservationMode::Classical, _) | (_, WindowSpec::Classical) => ObservationPolicy::classical(),
            (ObservationMode::Measurement, _) => ObservationPolicy::measurement(),
            (ObservationMode::Windowed, w) => w.policy(),
        };
        for [i, n] in &self.overrides {
            if p.mode != ObservationMode::Windowed {
                return Err(Error::Config("window overrides need a windowed policy".into()));
            }
            p = p.with_override(*i, *n);
        }
        if let Some(j) = self.j_max {
            if p.mode == ObservationMode::Classical {
                return Err(Error::Config("j_max does not apply to the classical scheme".into()));
            }
            p = p.with_j_max(j);
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[allow(non_snake_case)]
pub struct SweepConfig {
    pub bias_start_V: f64,
    pub bias_stop_V: f64,
    pub bias_step_V: f64,
    pub windows: Vec<WindowSpec>,
    pub mesh_scales: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            bias_start_V: 0.0,
            bias_stop_V: 0.30,
            bias_step_V: 0.01,
            windows: [5, 22, 50, 100, 200].into_iter().map(WindowSpec::Fixed).collect(),
            mesh_scales: vec![0.75, 1.0, 1.5, 2.0],
        }
    }
}

impl SweepConfig {
    pub fn biases(&self) -> Result<Vec<f64>> {
        let (a, b, h) = (self.bias_start_V, self.bias_stop_V, self.bias_step_V);
        if !(a.is_finite() && b.is_finite() && h > 0.0 && b >= a) {
            return Err(Error::Config(format!("bad bias range {a}..{b} step {h}")));
        }
        let n = ((b - a) / h + 1e-9).floor() as usize;
        // round to the step's decimal grid so CSV values stay tidy
        Ok((0..=n).map(|i| ((a + i as f64 * h) * 1e9).round() / 1e9).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumConfig {
    pub schemes: Vec<WindowSpec>,
    /// Extra k spacings to run besides the grid's own; empty means grid only.
    pub dk_per_nm: Vec<f64>,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        EquilibriumConfig {
            schemes: vec![WindowSpec::Fixed(1), WindowSpec::Auto],
            dk_per_nm: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[allow(non_snake_case)]
pub struct DecohereConfig {
    pub n_obs: usize,
    /// x index of point A; defaults to one cell outside the left barrier.
    pub point_a: Option<usize>,
    /// x index of point B; defaults to five cells past the right barrier.
    pub point_b: Option<usize>,
    /// Bias for the field dumps; defaults to the coherent peak.
    pub field_bias_V: Option<f64>,
}

impl Default for DecohereConfig {
    fn default() -> Self {
        DecohereConfig {
            n_obs: 22,
            point_a: None,
            point_b: None,
            field_bias_V: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinConfig {
    pub x_nm: f64,
    #[serde(default)]
    pub k_per_nm: f64,
    #[serde(default = "one")]
    pub value: f64,
}

fn one() -> f64 {
    1.0
}

impl PinConfig {
    pub fn resolve(&self, grid: &PhaseGrid) -> Result<Pin> {
        let x_index = grid
            .x_index(self.x_nm * 1e-9)
            .ok_or_else(|| Error::Config(format!("pin at {} nm is outside the grid", self.x_nm)))?;
        Ok(Pin {
            x_index,
            k_index: grid.nearest_k_index(self.k_per_nm * 1e9),
            value: self.value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureConfig {
    pub seeds: usize,
    pub pins: Vec<PinConfig>,
    /// Pins of the additional multi-pin run; empty skips it.
    pub multi_pins: Vec<PinConfig>,
    pub j_max: Option<usize>,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            seeds: 10,
            pins: vec![PinConfig {
                x_nm: 70.0,
                k_per_nm: 0.0,
                value: 1.0,
            }],
            multi_pins: Vec::new(),
            j_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BigBangConfig {
    /// Cells between the pulse centre and the pinned slice.
    pub gap_cells: usize,
    /// Series caps to try with the pulse present.
    pub j_max: Vec<usize>,
    pub k_per_nm: f64,
    /// Pinned slice; defaults to the node that centres pin and pulse.
    pub pin_x_nm: Option<f64>,
}

impl Default for BigBangConfig {
    fn default() -> Self {
        BigBangConfig {
            gap_cells: 55,
            j_max: vec![40, 63],
            k_per_nm: 0.0,
            pin_x_nm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub material: MaterialConfig,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub equilibrium: EquilibriumConfig,
    #[serde(default)]
    pub decohere: DecohereConfig,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub bigbang: BigBangConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.grid()?;
        cfg.material()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::parse(&text)?, text))
    }

    /// Apply `MOYAL_SEED` if set. Returns the seed in force.
    pub fn apply_seed_override(&mut self) -> Result<u64> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.device.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(self.device.seed)
    }

    pub fn grid(&self) -> Result<PhaseGrid> {
        let g = &self.grid;
        PhaseGrid::new(g.dx_nm * 1e-9, g.dk_per_nm * 1e9, g.nx, g.nk, g.k_offset)
    }

    pub fn material(&self) -> Result<MaterialParams> {
        let m = &self.material;
        MaterialParams::new(m.mstar_rel, m.temperature_k, m.fermi_mv * 1e-3)
    }

    pub fn geometry(&self) -> DeviceGeometry {
        let d = &self.device;
        DeviceGeometry {
            total_length: d.total_nm.unwrap_or(self.grid.nx as f64 * self.grid.dx_nm) * 1e-9,
            barrier_height: d.barrier_height_eV,
            barrier_width: d.barrier_width_nm * 1e-9,
            well_width: d.well_width_nm * 1e-9,
            spacer_width: d.spacer_nm * 1e-9,
        }
    }

    /// Device on this config's grid.
    pub fn device(&self) -> Result<Device> {
        self.device_on(self.grid()?)
    }

    /// Device on an explicit grid (mesh sweeps change dk).
    pub fn device_on(&self, grid: PhaseGrid) -> Result<Device> {
        let d = Device {
            kind: self.device.kind,
            grid,
            material: self.material()?,
            geometry: self.geometry(),
            seed: self.device.seed,
            amplitude: self.device.amplitude_eV,
            pulse_center: self.device.pulse_center_nm.map(|x| x * 1e-9),
            pulse_height: self.device.pulse_height_eV,
            pulse_width: self.device.pulse_width_cells,
            level: self.device.level_eV,
        };
        d.potential(0.0)?;
        Ok(d)
    }
}

/// A configured device: grid, material and a bias-dependent potential.
#[derive(Debug, Clone)]
pub struct Device {
    pub kind: DeviceKind,
    pub grid: PhaseGrid,
    pub material: MaterialParams,
    pub geometry: DeviceGeometry,
    pub seed: u64,
    pub amplitude: f64,
    pub pulse_center: Option<f64>,
    pub pulse_height: f64,
    pub pulse_width: usize,
    pub level: f64,
}

impl Device {
    pub fn with_seed(&self, seed: u64) -> Device {
        Device { seed, ..self.clone() }
    }
}

impl DeviceModel for Device {
    fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    fn material(&self) -> &MaterialParams {
        &self.material
    }

    /// Only the double-barrier device takes a bias; the toy potentials ignore it.
    fn potential(&self, bias: f64) -> Result<PotentialProfile> {
        match self.kind {
            DeviceKind::Rtd => rtd_potential(&self.grid, &self.geometry, bias),
            DeviceKind::Random => random_potential(self.seed, self.amplitude, &self.grid),
            DeviceKind::Pulse => {
                let c = self.pulse_center.unwrap_or(self.grid.x(self.grid.nx / 2));
                pulse_potential(&self.grid, c, self.pulse_width, self.pulse_height)
            }
            DeviceKind::Flat => Ok(flat_potential(&self.grid, self.level)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = Config::parse("[grid]\ndx_nm = 0.4\ndk_per_nm = 0.05\nnx = 178\nnk = 128\n").unwrap();
        assert_eq!(c.device.kind, DeviceKind::Rtd);
        assert!((c.grid().unwrap().mesh_product() - 0.02).abs() < 1e-15);
        assert!((c.material().unwrap().fermi_level - 0.05).abs() < 1e-15);
        assert!(c.device().is_ok());
    }

    #[test]
    fn window_tokens() {
        let c = Config::parse(
            "[grid]\ndx_nm=0.4\ndk_per_nm=0.05\nnx=178\nnk=128\n[sweep]\nwindows=[5, \"auto\", \"classical\", \"unexpanded\"]\n",
        )
        .unwrap();
        assert_eq!(
            c.sweep.windows,
            vec![WindowSpec::Fixed(5), WindowSpec::Auto, WindowSpec::Classical, WindowSpec::Fixed(1)]
        );
        assert!(Config::parse("[sweep]\nwindows=[0]\n").is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_grids() {
        assert!(matches!(Config::parse("[grid]\nfoo = 1\n"), Err(Error::Config(_))));
        assert!(Config::parse("[grid]\ndx_nm=0.4\ndk_per_nm=0.05\nnx=3\nnk=128\n").is_err());
    }

    #[test]
    fn bias_list() {
        let s = SweepConfig {
            bias_step_V: 0.02,
            ..SweepConfig::default()
        };
        let b = s.biases().unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(b[15], 0.3);
    }

    #[test]
    fn pin_resolution() {
        let g = PhaseGrid::new(0.4e-9, 0.05e9, 200, 128, true).unwrap();
        let p = PinConfig {
            x_nm: 70.0,
            k_per_nm: 0.0,
            value: 1.0,
        }
        .resolve(&g)
        .unwrap();
        assert_eq!(p.x_index, 175);
        assert_eq!(p.k_index, 64);
    }
}
