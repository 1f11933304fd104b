//! Heart-rate-variability metrics over whole recordings and sub-segments.
//!
//! Time-domain metrics follow the usual definitions over a contiguous run of
//! RR intervals (SDNN with the population divisor, pNN50 with a strict
//! `> 50 ms` test). Frequency-domain power is computed with Welch's method on
//! a 4 Hz cubic-spline resampling of the tachogram.

mod spectral;
mod spline;

use serde::{Deserialize, Serialize};

pub use spectral::{band_power, resample_rri, welch_psd, BandPower, Psd, UniformSeries, RESAMPLE_HZ};

pub const LF_BAND: (f64, f64) = (0.04, 0.15);
pub const HF_BAND: (f64, f64) = (0.15, 0.40);

/// Shortest cumulative duration (seconds) for which spectral metrics are reported.
pub const MIN_SPECTRAL_SECONDS: f64 = 30.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HrvError {
    #[error("empty RR segment")]
    Empty,
    #[error("need at least {need} beats, got {got}")]
    TooFewBeats { need: usize, got: usize },
    #[error("series of {got} samples is shorter than the minimum of {need}")]
    TooShort { need: usize, got: usize },
    #[error("invalid band [{lo}, {hi}] for spectrum up to {max} Hz")]
    InvalidBand { lo: f64, hi: f64, max: f64 },
    #[error("region ({start}, {end}) outside series of length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeDomain {
    pub mean_rr: f64,
    pub rmssd: Option<f64>,
    pub sdnn: f64,
    pub pnn50: Option<f64>,
}

/// Span of a feature record: the whole series or an inclusive index range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Full,
    Range { start: usize, end: usize },
}

impl Serialize for Segment {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Range {
            start: usize,
            end: usize,
        }
        match self {
            Segment::Full => s.serialize_str("full"),
            Segment::Range { start, end } => Range {
                start: *start,
                end: *end,
            }
            .serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Segment {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Tag(String),
            Range { start: usize, end: usize },
        }
        match Raw::deserialize(d)? {
            Raw::Tag(t) if t == "full" => Ok(Segment::Full),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown segment `{t}`"))),
            Raw::Range { start, end } => Ok(Segment::Range { start, end }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrvFlag {
    /// Segment spans less than [`MIN_SPECTRAL_SECONDS`]; spectral fields are null.
    TooShortForSpectral,
    /// A spectral band contained no frequency bin.
    NarrowBand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrvFeatures {
    pub mean_rr: f64,
    pub rmssd: Option<f64>,
    pub sdnn: f64,
    pub pnn50: Option<f64>,
    pub lf_power: Option<f64>,
    pub hf_power: Option<f64>,
    pub lf_hf_ratio: Option<f64>,
    pub n_beats: usize,
    pub segment: Segment,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<HrvFlag>,
}

impl HrvFeatures {
    /// Same metric values, ignoring which segment they describe.
    pub fn same_metrics(&self, other: &HrvFeatures) -> bool {
        HrvFeatures {
            segment: Segment::Full,
            ..self.clone()
        } == HrvFeatures {
            segment: Segment::Full,
            ..other.clone()
        }
    }
}

/// Units of every [`HrvFeatures`] field, emitted next to feature JSON.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HrvUnits {
    pub mean_rr: &'static str,
    pub rmssd: &'static str,
    pub sdnn: &'static str,
    pub pnn50: &'static str,
    pub lf_power: &'static str,
    pub hf_power: &'static str,
    pub lf_hf_ratio: &'static str,
    pub n_beats: &'static str,
}

pub const UNITS: HrvUnits = HrvUnits {
    mean_rr: "ms",
    rmssd: "ms",
    sdnn: "ms",
    pnn50: "percent",
    lf_power: "ms^2",
    hf_power: "ms^2",
    lf_hf_ratio: "dimensionless",
    n_beats: "count",
};

pub fn time_domain(rri: &[f64]) -> Result<TimeDomain, HrvError> {
    if rri.is_empty() {
        return Err(HrvError::Empty);
    }
    let n = rri.len() as f64;
    let mean_rr = rri.iter().sum::<f64>() / n;
    let sdnn = (rri.iter().map(|x| (x - mean_rr).powi(2)).sum::<f64>() / n).sqrt();
    let (rmssd, pnn50) = if rri.len() >= 2 {
        let diffs: Vec<f64> = rri.windows(2).map(|w| w[1] - w[0]).collect();
        let m = diffs.len() as f64;
        let rmssd = (diffs.iter().map(|d| d * d).sum::<f64>() / m).sqrt();
        let over = diffs.iter().filter(|d| d.abs() > 50.0).count() as f64;
        (Some(rmssd), Some(100.0 * over / m))
    } else {
        (None, None)
    };
    Ok(TimeDomain {
        mean_rr,
        rmssd,
        sdnn,
        pnn50,
    })
}

fn features(rri: &[f64], segment: Segment) -> Result<HrvFeatures, HrvError> {
    let td = time_domain(rri)?;
    let mut flags = Vec::new();
    let seconds = rri.iter().sum::<f64>() / 1000.0;
    let (mut lf_power, mut hf_power, mut lf_hf_ratio) = (None, None, None);
    if seconds < MIN_SPECTRAL_SECONDS || rri.len() < 4 {
        flags.push(HrvFlag::TooShortForSpectral);
    } else {
        let series = resample_rri(rri)?;
        let psd = welch_psd(&series.values, series.fs)?;
        let lf = band_power(&psd, LF_BAND.0, LF_BAND.1)?;
        let hf = band_power(&psd, HF_BAND.0, HF_BAND.1)?;
        if lf.narrow_band || hf.narrow_band {
            flags.push(HrvFlag::NarrowBand);
        }
        lf_power = Some(lf.power);
        hf_power = Some(hf.power);
        lf_hf_ratio = (hf.power > 0.0).then(|| lf.power / hf.power);
    }
    Ok(HrvFeatures {
        mean_rr: td.mean_rr,
        rmssd: td.rmssd,
        sdnn: td.sdnn,
        pnn50: td.pnn50,
        lf_power,
        hf_power,
        lf_hf_ratio,
        n_beats: rri.len(),
        segment,
        flags,
    })
}

/// Full-recording features (`segment = "full"`).
pub fn baseline_metrics(rri: &[f64]) -> Result<HrvFeatures, HrvError> {
    if rri.len() < 2 {
        return Err(HrvError::TooFewBeats {
            need: 2,
            got: rri.len(),
        });
    }
    features(rri, Segment::Full)
}

/// One feature record per inclusive `(start, end)` region of `rri`.
pub fn region_metrics(rri: &[f64], regions: &[(usize, usize)]) -> Result<Vec<HrvFeatures>, HrvError> {
    regions
        .iter()
        .map(|&(start, end)| {
            if start > end || end >= rri.len() {
                return Err(HrvError::OutOfRange {
                    start,
                    end,
                    len: rri.len(),
                });
            }
            features(&rri[start..=end], Segment::Range { start, end })
        })
        .collect()
}
