//! Band-limited sample-rate conversion with a Kaiser-windowed sinc kernel.

use crate::audio::Clip;
use crate::error::{Error, Result};

const ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;
/// Fraction of the lower Nyquist frequency kept in the passband.
const ROLLOFF: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub clip: Clip,
    /// Samples hard-clipped back into [-1, 1] after conversion.
    pub clipped: usize,
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Output length is `round(n * target / source)`.
pub fn resampled_len(n: usize, from: u32, to: u32) -> usize {
    (n as f64 * f64::from(to) / f64::from(from)).round() as usize
}

pub fn resample(clip: &Clip, target_rate: u32) -> Result<Resampled> {
    if target_rate == 0 {
        return Err(Error::Precondition("target_rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(Resampled {
            clip: clip.clone(),
            clipped: 0,
        });
    }
    let from = f64::from(clip.sample_rate);
    let to = f64::from(target_rate);
    let n_in = clip.samples.len();
    let n_out = resampled_len(n_in, clip.sample_rate, target_rate);
    let cutoff = (to / from).min(1.0) * ROLLOFF;
    let half = (ZERO_CROSSINGS / cutoff).ceil();
    let i0_beta = bessel_i0(KAISER_BETA);
    let tap = |d: f64| {
        let r = d / half;
        cutoff * sinc(cutoff * d) * bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta
    };

    // Output m sits at input position q + p / step with q, p integers, so
    // the kernel only takes `step` distinct phases.
    let g = gcd(clip.sample_rate, target_rate);
    let (step, advance) = (u64::from(target_rate / g), u64::from(clip.sample_rate / g));
    let tabulate = step <= 4096;
    let phase_taps = |p: u64| -> (i64, Vec<f64>) {
        let frac = p as f64 / step as f64;
        let k_lo = (frac - half).ceil() as i64;
        let k_hi = (frac + half).floor() as i64;
        (k_lo, (k_lo..=k_hi).map(|k| tap(frac - k as f64)).collect())
    };
    let table: Vec<(i64, Vec<f64>)> = if tabulate { (0..step).map(phase_taps).collect() } else { Vec::new() };

    let mut out = Vec::with_capacity(n_out);
    let mut clipped = 0usize;
    for m in 0..n_out as u64 {
        let pos = m * advance;
        let (q, p) = ((pos / step) as i64, pos % step);
        let computed;
        let (k_lo, weights) = if tabulate {
            let (k, w) = &table[p as usize];
            (*k, w.as_slice())
        } else {
            computed = phase_taps(p);
            (computed.0, computed.1.as_slice())
        };
        let mut acc = 0.0f64;
        for (i, w) in weights.iter().enumerate() {
            let n = q + k_lo + i as i64;
            if n >= 0 && (n as usize) < n_in {
                acc += f64::from(clip.samples[n as usize]) * w;
            }
        }
        let mut y = acc as f32;
        if y.abs() > 1.0 {
            clipped += 1;
            y = y.clamp(-1.0, 1.0);
        }
        out.push(y);
    }
    if clipped > 0 {
        log::warn!(
            "resample {} Hz -> {} Hz clipped {clipped} samples of {}",
            clip.sample_rate,
            target_rate,
            clip.source_id
        );
    }
    Ok(Resampled {
        clip: Clip {
            samples: out,
            sample_rate: target_rate,
            source_id: clip.source_id.clone(),
            offset: clip.offset,
        },
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dft::peak_bin;

    /// Naive DFT magnitude peak, independent of the resampler.
    mod dft {
        pub fn peak_bin(x: &[f32], n_fft: usize) -> usize {
            let mut best = (0, 0.0f64);
            for k in 1..n_fft / 2 {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (i, &s) in x.iter().take(n_fft).enumerate() {
                    let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos();
                    let ph = -2.0 * std::f64::consts::PI * (k * i) as f64 / n_fft as f64;
                    re += f64::from(s) * w * ph.cos();
                    im += f64::from(s) * w * ph.sin();
                }
                let mag = re * re + im * im;
                if mag > best.1 {
                    best = (k, mag);
                }
            }
            best.0
        }
    }

    fn sine(freq: f64, rate: u32, n: usize, amp: f32) -> Clip {
        Clip::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(rate)).sin() as f32)
                .collect(),
            rate,
        )
    }

    #[test]
    fn cd_rate_four_seconds_to_24k() {
        let c = Clip::new(vec![0.0; 176_400], 44_100);
        assert_eq!(resample(&c, 24_000).unwrap().clip.len(), 96_000);
    }

    #[test]
    fn identity_when_rates_match() {
        let c = sine(440.0, 24_000, 1000, 0.5);
        assert_eq!(resample(&c, 24_000).unwrap().clip, c);
    }

    #[test]
    fn sine_peak_survives_downsampling() {
        let c = sine(1000.0, 44_100, 8820, 0.5);
        let out = resample(&c, 24_000).unwrap().clip;
        let n_fft = 2400;
        let bin = peak_bin(&out.samples[1000..], n_fft);
        let hz_per_bin = 24_000.0 / n_fft as f64;
        assert!((bin as f64 * hz_per_bin - 1000.0).abs() <= hz_per_bin, "bin {bin}");
    }

    #[test]
    fn upsampling_preserves_amplitude_midband() {
        let c = sine(500.0, 8000, 4000, 0.5);
        let out = resample(&c, 16_000).unwrap().clip;
        let peak = out.samples[2000..6000].iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!((peak - 0.5).abs() < 0.01, "peak {peak}");
    }

    #[test]
    fn overshoot_is_clipped_and_counted() {
        // full-scale square wave rings past +-1 after band-limiting
        let sq: Vec<f32> = (0..2000).map(|i| if (i / 20) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = resample(&Clip::new(sq, 48_000), 16_000).unwrap();
        assert!(r.clipped > 0);
        assert!(r.clip.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn zero_rate_rejected() {
        assert!(resample(&Clip::new(vec![0.0], 100), 0).is_err());
    }
}
