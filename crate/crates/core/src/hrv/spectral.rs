use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::spline::CubicSpline;
use super::HrvError;

pub const RESAMPLE_HZ: f64 = 4.0;
const MAX_SEGMENT: usize = 256;
const MIN_SAMPLES: usize = 16;

/// Evenly sampled series.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformSeries {
    pub fs: f64,
    pub values: Vec<f64>,
}

impl UniformSeries {
    pub fn step(&self) -> f64 {
        1.0 / self.fs
    }

    pub fn duration(&self) -> f64 {
        self.values.len() as f64 / self.fs
    }
}

/// One-sided power spectral density.
#[derive(Clone, Debug, PartialEq)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub pxx: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPower {
    pub power: f64,
    /// No frequency bin fell inside the band.
    pub narrow_band: bool,
}

/// Resamples a tachogram onto a 4 Hz grid.
///
/// Interval `k` starts at `t_k = Σ_{j<k} rri_j / 1000` seconds and its value is
/// held as a knot there; one extra knot at the end of the last interval
/// carries the last value, so the grid covers the full recorded duration.
/// The mean is removed from the result.
pub fn resample_rri(rri: &[f64]) -> Result<UniformSeries, HrvError> {
    if rri.len() < 4 {
        return Err(HrvError::TooFewBeats {
            need: 4,
            got: rri.len(),
        });
    }
    let mut knots_t = Vec::with_capacity(rri.len() + 1);
    let mut knots_v = Vec::with_capacity(rri.len() + 1);
    let mut t = 0.0;
    for &r in rri {
        knots_t.push(t);
        knots_v.push(r);
        t += r / 1000.0;
    }
    knots_t.push(t);
    knots_v.push(*rri.last().expect("non-empty"));
    let spline = CubicSpline::new(&knots_t, &knots_v);
    let n = (t * RESAMPLE_HZ).floor() as usize + 1;
    let mut values: Vec<f64> = (0..n).map(|i| spline.eval(i as f64 / RESAMPLE_HZ)).collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    Ok(UniformSeries {
        fs: RESAMPLE_HZ,
        values,
    })
}

/// Welch estimate with a periodic Hann window, segments of
/// `min(256, len)` samples, 50 % overlap and per-segment mean removal.
/// Density scaling: the integral over `[0, fs/2]` approximates the variance.
pub fn welch_psd(series: &[f64], fs: f64) -> Result<Psd, HrvError> {
    if series.len() < MIN_SAMPLES {
        return Err(HrvError::TooShort {
            need: MIN_SAMPLES,
            got: series.len(),
        });
    }
    let seg = series.len().min(MAX_SEGMENT);
    let step = (seg / 2).max(1);
    let window: Vec<f64> = (0..seg)
        .map(|t| 0.5 - 0.5 * (2.0 * PI * t as f64 / seg as f64).cos())
        .collect();
    let win_energy: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(seg);
    let bins = seg / 2 + 1;
    let mut pxx = vec![0.0; bins];
    let mut count = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); seg];
    let mut start = 0;
    while start + seg <= series.len() {
        let chunk = &series[start..start + seg];
        let mean = chunk.iter().sum::<f64>() / seg as f64;
        for (b, (x, w)) in buf.iter_mut().zip(chunk.iter().zip(&window)) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in pxx.iter_mut().enumerate() {
            *p += buf[k].norm_sqr();
        }
        count += 1;
        start += step;
    }
    let scale = 1.0 / (fs * win_energy * count as f64);
    for (k, p) in pxx.iter_mut().enumerate() {
        *p *= scale;
        let nyquist = seg.is_multiple_of(2) && k == seg / 2;
        if k != 0 && !nyquist {
            *p *= 2.0;
        }
    }
    let freqs = (0..bins).map(|k| k as f64 * fs / seg as f64).collect();
    Ok(Psd { freqs, pxx })
}

/// Trapezoidal integral of the spectrum between `lo` and `hi`, with the
/// spectrum linearly interpolated at band edges that fall between bins.
/// The integral is therefore additive over adjacent bands.
pub fn band_power(psd: &Psd, lo: f64, hi: f64) -> Result<BandPower, HrvError> {
    let max = psd.freqs.last().copied().unwrap_or(0.0);
    if !(lo < hi) || hi > max + 1e-12 || lo < 0.0 {
        return Err(HrvError::InvalidBand { lo, hi, max });
    }
    if !psd.freqs.iter().any(|&f| f >= lo && f <= hi) {
        return Ok(BandPower {
            power: 0.0,
            narrow_band: true,
        });
    }
    let interp = |f: f64| -> f64 {
        let i = psd.freqs.partition_point(|&v| v <= f).clamp(1, psd.freqs.len() - 1) - 1;
        let (f0, f1) = (psd.freqs[i], psd.freqs[i + 1]);
        let a = ((f - f0) / (f1 - f0)).clamp(0.0, 1.0);
        psd.pxx[i] * (1.0 - a) + psd.pxx[i + 1] * a
    };
    let mut points: Vec<(f64, f64)> = vec![(lo, interp(lo))];
    points.extend(
        psd.freqs
            .iter()
            .zip(&psd.pxx)
            .filter(|(f, _)| **f > lo && **f < hi)
            .map(|(f, p)| (*f, *p)),
    );
    points.push((hi, interp(hi)));
    let power = points
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    Ok(BandPower {
        power,
        narrow_band: false,
    })
}
