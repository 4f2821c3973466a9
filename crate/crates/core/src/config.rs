//! Scenario configuration and its TOML file format.
//!
//! Every section and key is optional; missing values fall back to the
//! reference scenario. Powers are given in dBm, everything else in SI units.
//!
//! ```toml
//! [anchor]
//! position = [2.0, -2.0, 1.0]
//!
//! [ris]
//! elements = 81
//! # spacing_m = 0.0536     # default: half the carrier wavelength
//!
//! [ofdm]
//! subcarriers = 32
//! carrier_freq_hz = 2.8e9
//! bandwidth_hz = 1.0e8
//! pilot_seed = 7
//!
//! [noise]
//! noise_power_dbm = -109.0
//! pn_increment_var = 1e-3
//! pn_subspace_dim = 16
//!
//! [link]
//! tx_power_dbm = -10.0
//! antenna_gain_tx = 1.0
//! antenna_gain_rx = 1.0
//! light_speed = 3.0e8
//!
//! [aoi]
//! center = [2.0, 2.0, 0.0]
//! edge_m = 1.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Position3, RisGeometry};

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Full physical scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub anchor: Position3,
    pub ris: RisGeometry,
    pub n_subcarriers: usize,
    pub carrier_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub noise_power_dbm: f64,
    pub pn_increment_var: f64,
    pub pn_subspace_dim: usize,
    pub tx_power_dbm: f64,
    pub antenna_gain_tx: f64,
    pub antenna_gain_rx: f64,
    pub light_speed: f64,
    pub aoi_center: Position3,
    pub aoi_edge: f64,
    /// Seed of the QPSK pilot sequence shared by transmitter and receiver.
    pub pilot_seed: u64,
    noise_variance_w: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::reference(81).expect("reference scenario is valid")
    }
}

impl ScenarioConfig {
    /// Reference scenario with `n_ris` elements at half-wavelength pitch.
    pub fn reference(n_ris: usize) -> Result<Self> {
        ConfigFile { ris: RisSection { elements: n_ris, spacing_m: None }, ..Default::default() }.build()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.build()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&ConfigFile::from(self)).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_subcarriers;
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Config(format!("subcarrier count {n} must be a power of two")));
        }
        if self.pn_subspace_dim == 0 || self.pn_subspace_dim > n {
            return Err(Error::Config(format!(
                "PN subspace dimension {} must lie in 1..={n}",
                self.pn_subspace_dim
            )));
        }
        let positive = [
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("pn_increment_var", self.pn_increment_var),
            ("light_speed", self.light_speed),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.bandwidth_hz >= 2.0 * self.carrier_freq_hz {
            return Err(Error::Config("bandwidth must be below twice the carrier".into()));
        }
        for (name, v) in [("antenna_gain_tx", self.antenna_gain_tx), ("antenna_gain_rx", self.antenna_gain_rx), ("aoi_edge", self.aoi_edge)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !self.noise_power_dbm.is_finite() || !self.tx_power_dbm.is_finite() {
            return Err(Error::Config("powers must be finite dBm values".into()));
        }
        if !self.anchor.is_finite() || !self.aoi_center.is_finite() {
            return Err(Error::Config("positions must be finite".into()));
        }
        Ok(())
    }

    /// Noise variance in watts, converted once when the config is built.
    pub fn noise_variance(&self) -> f64 {
        self.noise_variance_w
    }

    pub fn set_noise_power_dbm(&mut self, dbm: f64) {
        self.noise_power_dbm = dbm;
        self.noise_variance_w = dbm_to_watts(dbm);
    }

    pub fn tx_power_w(&self) -> f64 {
        dbm_to_watts(self.tx_power_dbm)
    }

    pub fn with_tx_power_dbm(mut self, dbm: f64) -> Self {
        self.tx_power_dbm = dbm;
        self
    }

    pub fn with_pn_increment_var(mut self, var: f64) -> Self {
        self.pn_increment_var = var;
        self
    }

    /// Replaces the RIS by one with `n` elements at the same pitch.
    pub fn with_ris_elements(mut self, n: usize) -> Result<Self> {
        self.ris = RisGeometry::new(n, self.ris.spacing())?;
        Ok(self)
    }

    pub fn wavelength(&self) -> f64 {
        self.light_speed / self.carrier_freq_hz
    }

    /// Lower and upper corners of the AOI cube.
    pub fn aoi_bounds(&self) -> (Position3, Position3) {
        let h = 0.5 * self.aoi_edge;
        let d = Position3::new(h, h, h);
        (self.aoi_center - d, self.aoi_center + d)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    anchor: AnchorSection,
    ris: RisSection,
    ofdm: OfdmSection,
    noise: NoiseSection,
    link: LinkSection,
    aoi: AoiSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AnchorSection {
    position: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RisSection {
    elements: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    spacing_m: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OfdmSection {
    subcarriers: usize,
    carrier_freq_hz: f64,
    bandwidth_hz: f64,
    pilot_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NoiseSection {
    noise_power_dbm: f64,
    pn_increment_var: f64,
    pn_subspace_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LinkSection {
    tx_power_dbm: f64,
    antenna_gain_tx: f64,
    antenna_gain_rx: f64,
    light_speed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AoiSection {
    center: [f64; 3],
    edge_m: f64,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            anchor: AnchorSection { position: [2.0, -2.0, 1.0] },
            ris: RisSection { elements: 81, spacing_m: None },
            ofdm: OfdmSection { subcarriers: 32, carrier_freq_hz: 2.8e9, bandwidth_hz: 1e8, pilot_seed: 7 },
            noise: NoiseSection { noise_power_dbm: -109.0, pn_increment_var: 1e-3, pn_subspace_dim: 16 },
            link: LinkSection { tx_power_dbm: -10.0, antenna_gain_tx: 1.0, antenna_gain_rx: 1.0, light_speed: 3e8 },
            aoi: AoiSection { center: [2.0, 2.0, 0.0], edge_m: 1.0 },
        }
    }
}

macro_rules! section_default {
    ($t:ty, $field:ident) => {
        impl Default for $t {
            fn default() -> Self {
                ConfigFile::default().$field
            }
        }
    };
}
section_default!(AnchorSection, anchor);
section_default!(RisSection, ris);
section_default!(OfdmSection, ofdm);
section_default!(NoiseSection, noise);
section_default!(LinkSection, link);
section_default!(AoiSection, aoi);

fn point(a: [f64; 3]) -> Position3 {
    Position3::new(a[0], a[1], a[2])
}

impl ConfigFile {
    fn build(self) -> Result<ScenarioConfig> {
        let wavelength = self.link.light_speed / self.ofdm.carrier_freq_hz;
        let spacing = self.ris.spacing_m.unwrap_or(0.5 * wavelength);
        let ris = RisGeometry::new(self.ris.elements, spacing).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = ScenarioConfig {
            anchor: point(self.anchor.position),
            ris,
            n_subcarriers: self.ofdm.subcarriers,
            carrier_freq_hz: self.ofdm.carrier_freq_hz,
            bandwidth_hz: self.ofdm.bandwidth_hz,
            noise_power_dbm: self.noise.noise_power_dbm,
            pn_increment_var: self.noise.pn_increment_var,
            pn_subspace_dim: self.noise.pn_subspace_dim,
            tx_power_dbm: self.link.tx_power_dbm,
            antenna_gain_tx: self.link.antenna_gain_tx,
            antenna_gain_rx: self.link.antenna_gain_rx,
            light_speed: self.link.light_speed,
            aoi_center: point(self.aoi.center),
            aoi_edge: self.aoi.edge_m,
            pilot_seed: self.ofdm.pilot_seed,
            noise_variance_w: dbm_to_watts(self.noise.noise_power_dbm),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<&ScenarioConfig> for ConfigFile {
    fn from(c: &ScenarioConfig) -> Self {
        let a = |p: Position3| [p.x, p.y, p.z];
        Self {
            anchor: AnchorSection { position: a(c.anchor) },
            ris: RisSection { elements: c.ris.n_elements(), spacing_m: Some(c.ris.spacing()) },
            ofdm: OfdmSection {
                subcarriers: c.n_subcarriers,
                carrier_freq_hz: c.carrier_freq_hz,
                bandwidth_hz: c.bandwidth_hz,
                pilot_seed: c.pilot_seed,
            },
            noise: NoiseSection {
                noise_power_dbm: c.noise_power_dbm,
                pn_increment_var: c.pn_increment_var,
                pn_subspace_dim: c.pn_subspace_dim,
            },
            link: LinkSection {
                tx_power_dbm: c.tx_power_dbm,
                antenna_gain_tx: c.antenna_gain_tx,
                antenna_gain_rx: c.antenna_gain_rx,
                light_speed: c.light_speed,
            },
            aoi: AoiSection { center: a(c.aoi_center), edge_m: c.aoi_edge },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_match_reference_scenario() {
        let c = ScenarioConfig::default();
        assert_eq!(c.n_subcarriers, 32);
        assert_eq!(c.ris.n_elements(), 81);
        assert_relative_eq!(c.ris.spacing(), 3e8 / 2.8e9 / 2.0);
        assert_relative_eq!(c.noise_variance(), 10f64.powf(-13.9), max_relative = 1e-12);
        assert_relative_eq!(c.tx_power_w(), 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn dbm_conversions() {
        assert_relative_eq!(dbm_to_watts(30.0), 1.0);
        assert_relative_eq!(dbm_to_watts(0.0), 1e-3);
        assert_relative_eq!(watts_to_dbm(dbm_to_watts(-109.0)), -109.0, epsilon = 1e-12);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let c = ScenarioConfig::from_toml_str("[ris]\nelements = 49\n[link]\ntx_power_dbm = 0.0\n").unwrap();
        assert_eq!(c.ris.n_elements(), 49);
        assert_eq!(c.tx_power_dbm, 0.0);
        assert_eq!(c.n_subcarriers, 32);
    }

    #[test]
    fn round_trip_through_toml() {
        let mut c = ScenarioConfig::reference(121).unwrap().with_tx_power_dbm(-20.0);
        c.set_noise_power_dbm(-100.0);
        let back = ScenarioConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ScenarioConfig::from_toml_str("[ofdm]\nsubcarriers = 30\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[noise]\npn_subspace_dim = 64\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[ris]\nelements = 80\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[ris]\nelemnts = 81\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[noise]\npn_increment_var = 0.0\n").is_err());
    }
}
