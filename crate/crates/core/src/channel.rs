//! Uplink cost model: log-distance path loss, Shannon rate, payload size and
//! transmission latency for knowledge uploads.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::PairId;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// `P[W] = 10^((dBm - 30) / 10)`.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Noise power presets.
///
/// `PaperText` is the −60 dBm value quoted alongside the link parameters;
/// `PaperResults` is the −90 dBm value that reproduces the published
/// latencies of 2.69 s and 32.23 s.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePreset {
    PaperText,
    #[default]
    PaperResults,
}

impl NoisePreset {
    pub fn noise_dbm(self) -> f64 {
        match self {
            NoisePreset::PaperText => -60.0,
            NoisePreset::PaperResults => -90.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoisePreset::PaperText => "paper-text",
            NoisePreset::PaperResults => "paper-results",
        }
    }
}

impl std::str::FromStr for NoisePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-text" => Ok(NoisePreset::PaperText),
            "paper-results" => Ok(NoisePreset::PaperResults),
            other => Err(Error::Config(format!(
                "unknown noise preset {other:?} (expected paper-text or paper-results)"
            ))),
        }
    }
}

/// Link parameters as written in a scenario file, in engineering units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkUnits {
    pub reference_loss_db: f64,
    pub reference_distance_m: f64,
    pub path_loss_exponent: f64,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    /// Explicit noise power; overrides `noise_preset` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_dbm: Option<f64>,
    pub noise_preset: NoisePreset,
    pub quantization_bits: u32,
}

impl Default for LinkUnits {
    fn default() -> Self {
        LinkUnits {
            reference_loss_db: -30.0,
            reference_distance_m: 10.0,
            path_loss_exponent: 3.0,
            bandwidth_hz: 1e6,
            tx_power_dbm: 10.0,
            noise_dbm: None,
            noise_preset: NoisePreset::PaperResults,
            quantization_bits: 10,
        }
    }
}

impl LinkUnits {
    pub fn effective_noise_dbm(&self) -> f64 {
        self.noise_dbm
            .unwrap_or_else(|| self.noise_preset.noise_dbm())
    }
}

/// Link parameters in linear SI units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkParams {
    /// Path loss at the reference distance, linear.
    pub reference_gain: f64,
    pub reference_distance_m: f64,
    pub path_loss_exponent: f64,
    pub bandwidth_hz: f64,
    pub tx_power_w: f64,
    /// Multiplied by the bandwidth in the rate formula.
    pub noise_power_w: f64,
    /// Bits per transmitted scalar.
    pub quantization_bits: u32,
}

impl LinkParams {
    pub fn from_units(units: &LinkUnits) -> Result<Self> {
        let params = LinkParams {
            reference_gain: db_to_linear(units.reference_loss_db),
            reference_distance_m: units.reference_distance_m,
            path_loss_exponent: units.path_loss_exponent,
            bandwidth_hz: units.bandwidth_hz,
            tx_power_w: dbm_to_watts(units.tx_power_dbm),
            noise_power_w: dbm_to_watts(units.effective_noise_dbm()),
            quantization_bits: units.quantization_bits,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_preset(preset: NoisePreset) -> Self {
        Self::from_units(&LinkUnits {
            noise_preset: preset,
            ..LinkUnits::default()
        })
        .expect("default link parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("reference_loss_db", self.reference_gain),
            ("reference_distance_m", self.reference_distance_m),
            ("bandwidth_hz", self.bandwidth_hz),
            ("tx_power_dbm", self.tx_power_w),
            ("noise_dbm", self.noise_power_w),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(
                    name,
                    format!("must be positive and finite, got {v}"),
                ));
            }
        }
        if !(self.path_loss_exponent >= 1.0 && self.path_loss_exponent.is_finite()) {
            return Err(Error::invalid(
                "path_loss_exponent",
                format!("must be at least 1, got {}", self.path_loss_exponent),
            ));
        }
        if self.quantization_bits < 1 {
            return Err(Error::invalid("quantization_bits", "must be at least 1"));
        }
        Ok(())
    }
}

impl Default for LinkParams {
    fn default() -> Self {
        Self::with_preset(NoisePreset::PaperResults)
    }
}

/// `g = β₀ (D / D₀)^(−ζ)`, linear.
pub fn path_loss(distance_m: f64, params: &LinkParams) -> Result<f64> {
    if distance_m.is_nan() || distance_m <= 0.0 {
        return Err(Error::NonPositiveDistance(distance_m));
    }
    Ok(params.reference_gain
        * (distance_m / params.reference_distance_m).powf(-params.path_loss_exponent))
}

/// `R = B log₂(1 + P g / (B N₀))` in bit/s.
pub fn uplink_rate(gain: f64, params: &LinkParams) -> f64 {
    let snr = params.tx_power_w * gain / (params.bandwidth_hz * params.noise_power_w);
    params.bandwidth_hz * snr.ln_1p() / std::f64::consts::LN_2
}

/// `Q · M · (d + 1)`: every uploaded class carries `d` attributes and its F1.
pub fn payload_bits(uploaded_classes: usize, dim: usize, quantization_bits: u32) -> u64 {
    u64::from(quantization_bits) * uploaded_classes as u64 * (dim as u64 + 1)
}

pub fn uplink_latency(
    uploaded_classes: usize,
    dim: usize,
    params: &LinkParams,
    rate_bps: f64,
) -> Result<f64> {
    if uploaded_classes == 0 {
        return Ok(0.0);
    }
    if rate_bps.is_nan() || rate_bps <= 0.0 {
        return Err(Error::ZeroRateLink);
    }
    Ok(payload_bits(uploaded_classes, dim, params.quantization_bits) as f64 / rate_bps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UplinkStats {
    pub pair: PairId,
    pub uploaded_classes: usize,
    pub payload_bits: u64,
    pub path_loss: f64,
    pub rate_bps: f64,
    pub latency_s: f64,
}

impl UplinkStats {
    pub fn compute(
        pair: PairId,
        uploaded_classes: usize,
        dim: usize,
        distance_m: f64,
        params: &LinkParams,
    ) -> Result<Self> {
        let path_loss = path_loss(distance_m, params)?;
        let rate_bps = uplink_rate(path_loss, params);
        Ok(UplinkStats {
            pair,
            uploaded_classes,
            payload_bits: payload_bits(uploaded_classes, dim, params.quantization_bits),
            path_loss,
            rate_bps,
            latency_s: uplink_latency(uploaded_classes, dim, params, rate_bps)?,
        })
    }
}

/// Writes `pair,gamma,M_l,payload_bits,R_l,T_l` rows.
pub fn write_uplink_csv<W: Write>(writer: W, rows: &[(f64, &UplinkStats)]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["pair", "gamma", "M_l", "payload_bits", "R_l", "T_l"])?;
    for (gamma, s) in rows {
        csv.write_record([
            s.pair.to_string(),
            gamma.to_string(),
            s.uploaded_classes.to_string(),
            s.payload_bits.to_string(),
            s.rate_bps.to_string(),
            s.latency_s.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn reference_distance_gives_reference_gain() {
        let p = LinkParams::default();
        assert_relative_eq!(path_loss(10.0, &p).unwrap(), 1e-3, max_relative = 1e-12);
    }

    #[test]
    fn gain_at_150m() {
        let p = LinkParams::default();
        // 1e-3 * 15^-3
        assert_relative_eq!(
            path_loss(150.0, &p).unwrap(),
            2.962_962_962_962_963e-7,
            max_relative = 1e-12
        );
    }

    #[test]
    fn doubling_distance_divides_gain_by_eight() {
        let p = LinkParams::default();
        let g1 = path_loss(40.0, &p).unwrap();
        let g2 = path_loss(80.0, &p).unwrap();
        assert_relative_eq!(g1 / g2, 8.0, max_relative = 1e-12);
    }

    #[test]
    fn non_positive_distance_fails() {
        let p = LinkParams::default();
        assert!(matches!(
            path_loss(0.0, &p),
            Err(Error::NonPositiveDistance(_))
        ));
        assert!(path_loss(-5.0, &p).is_err());
    }

    #[test]
    fn unit_snr_gives_rate_equal_to_bandwidth() {
        let p = LinkParams::default();
        let gain = p.bandwidth_hz * p.noise_power_w / p.tx_power_w;
        assert_relative_eq!(uplink_rate(gain, &p), p.bandwidth_hz, max_relative = 1e-12);
    }

    #[test]
    fn rate_at_150m_with_results_preset() {
        let p = LinkParams::default();
        let r = uplink_rate(path_loss(150.0, &p).unwrap(), &p);
        // 1e6 * log2(1 + 0.01 * 2.963e-7 / 1e-6)
        let expected = 1e6 * (1.0 + 0.01 * (1e-3 / 3375.0) / (1e6 * 1e-12f64)).log2();
        assert_relative_eq!(r, expected, max_relative = 1e-12);
        assert!((r - 4.27e3).abs() < 5.0, "{r}");
    }

    #[test]
    fn low_snr_rate_ratio_tends_to_path_loss_ratio() {
        // push both links deep into the linear regime of log2(1 + x)
        let mut p = LinkParams::default();
        p.noise_power_w *= 1e6;
        let r150 = uplink_rate(path_loss(150.0, &p).unwrap(), &p);
        let r300 = uplink_rate(path_loss(300.0, &p).unwrap(), &p);
        assert_relative_eq!(r150 / r300, 8.0, max_relative = 1e-6);
        let x = p.tx_power_w * path_loss(150.0, &p).unwrap() / (p.bandwidth_hz * p.noise_power_w);
        assert_relative_eq!(
            r150,
            p.bandwidth_hz * x / std::f64::consts::LN_2,
            max_relative = 1e-6
        );
    }

    #[test]
    fn reference_latencies() {
        let p = LinkParams::with_preset(NoisePreset::PaperResults);
        let t = |m, d| {
            UplinkStats::compute(PairId(1), m, 81, d, &p)
                .unwrap()
                .latency_s
        };
        assert_eq!(t(0, 50.0), 0.0);
        assert!((t(14, 150.0) - 2.69).abs() <= 0.01);
        assert!((t(21, 300.0) - 32.23).abs() <= 0.01);
    }

    #[test]
    fn minus_60_dbm_noise_gives_far_longer_latency() {
        // 30 dB more noise leaves the far link with an SNR near 1e-3.
        let p = LinkParams::with_preset(NoisePreset::PaperText);
        let s = UplinkStats::compute(PairId(3), 21, 81, 300.0, &p).unwrap();
        assert!(s.latency_s > 1.0e4, "{}", s.latency_s);
    }

    #[test]
    fn zero_rate_with_payload_fails() {
        let p = LinkParams::default();
        assert!(matches!(
            uplink_latency(3, 81, &p, 0.0),
            Err(Error::ZeroRateLink)
        ));
        assert_eq!(uplink_latency(0, 81, &p, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn payload_counts_f1_scalar() {
        assert_eq!(payload_bits(14, 81, 10), 11_480);
        assert_eq!(payload_bits(0, 81, 10), 0);
    }

    #[test]
    fn invalid_link_rejected() {
        let units = LinkUnits {
            path_loss_exponent: 0.5,
            ..LinkUnits::default()
        };
        assert!(LinkParams::from_units(&units).is_err());
        let units = LinkUnits {
            bandwidth_hz: 0.0,
            ..LinkUnits::default()
        };
        assert!(LinkParams::from_units(&units).is_err());
        let units = LinkUnits {
            quantization_bits: 0,
            ..LinkUnits::default()
        };
        assert!(LinkParams::from_units(&units).is_err());
    }

    #[test]
    fn explicit_noise_overrides_preset() {
        let units = LinkUnits {
            noise_dbm: Some(-75.0),
            ..LinkUnits::default()
        };
        let p = LinkParams::from_units(&units).unwrap();
        assert_relative_eq!(watts_to_dbm(p.noise_power_w), -75.0, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn unit_conversions_round_trip(x in -150.0f64..60.0) {
            prop_assert!((watts_to_dbm(dbm_to_watts(x)) - x).abs() <= 1e-12 * x.abs().max(1.0));
            prop_assert!((linear_to_db(db_to_linear(x)) - x).abs() <= 1e-12 * x.abs().max(1.0));
        }

        #[test]
        fn latency_linear_in_uploads(m in 1usize..200, dist in 1.0f64..1000.0) {
            let p = LinkParams::default();
            let r = uplink_rate(path_loss(dist, &p).unwrap(), &p);
            let t1 = uplink_latency(m, 81, &p, r).unwrap();
            let t2 = uplink_latency(2 * m, 81, &p, r).unwrap();
            prop_assert!((t2 - 2.0 * t1).abs() <= 1e-12 * t2);
        }

        #[test]
        fn monotone_in_distance_gain_and_rate(d1 in 1.0f64..500.0, extra in 0.5f64..500.0) {
            let p = LinkParams::default();
            let (g1, g2) = (path_loss(d1, &p).unwrap(), path_loss(d1 + extra, &p).unwrap());
            prop_assert!(g2 < g1);
            let (r1, r2) = (uplink_rate(g1, &p), uplink_rate(g2, &p));
            prop_assert!(r2 < r1);
            prop_assert!(uplink_latency(5, 81, &p, r1).unwrap() < uplink_latency(5, 81, &p, r2).unwrap());
        }
    }
}
