//! Interval-based F0 estimation.
//!
//! The estimator follows the DIO recipe in simplified form: the signal is
//! low-pass filtered with a bank of cutoffs on a log grid spanning the F0
//! search range; in each band four interval-based period estimates are formed
//! per frame (positive zero crossings, negative zero crossings, peak
//! intervals, dip intervals); the candidate whose four estimates agree best
//! (lowest relative standard deviation) wins, and frames whose best candidate
//! is still unreliable or out of range are marked unvoiced. No contour
//! refinement pass is applied.

use super::{frame_count, PitchTrack, SignalError, Waveform};

/// Bands per octave on the cutoff grid.
const CHANNELS_PER_OCTAVE: f64 = 2.0;
/// A frame is voiced when std(four estimates)/mean stays below this.
const RELIABILITY_THRESHOLD: f64 = 0.12;

/// Estimates one F0 value per hop over `[f0_floor, f0_ceil]`.
pub fn estimate_f0(
    w: &Waveform,
    hop_ms: u32,
    f0_floor: f64,
    f0_ceil: f64,
) -> Result<PitchTrack, SignalError> {
    if !matches!(hop_ms, 10 | 20 | 40) {
        return Err(SignalError::UnsupportedHop(hop_ms));
    }
    let fs = w.sample_rate() as f64;
    if !(f0_floor > 0.0 && f0_floor < f0_ceil && f0_ceil < fs / 2.0) {
        return Err(SignalError::InvalidF0Range {
            floor: f0_floor,
            ceil: f0_ceil,
            sample_rate: w.sample_rate(),
        });
    }
    let min_samples = (2.0 * fs / f0_floor).ceil() as usize;
    if w.len() < min_samples {
        return Err(SignalError::AudioTooShort { samples: w.len(), f0_floor });
    }

    // Work at a decimated rate (~4 kHz) that still leaves headroom above the
    // ceiling; interval positions are interpolated, so the period resolution
    // stays sub-sample.
    let decim = decimation_factor(w.sample_rate(), f0_ceil);
    let x = decimate(w.samples(), fs, decim);
    let dfs = fs / decim as f64;

    let n_frames = frame_count(w.len(), w.sample_rate(), hop_ms);
    let frame_times: Vec<f64> = (0..n_frames).map(|i| i as f64 * hop_ms as f64 / 1000.0).collect();

    let mut best_f0 = vec![0.0; n_frames];
    let mut best_rel = vec![f64::INFINITY; n_frames];
    for boundary in band_boundaries(f0_floor, f0_ceil) {
        let filtered = nuttall_lowpass(&x, dfs, boundary);
        let (cand, rel) = band_candidates(&filtered, dfs, boundary, f0_floor, f0_ceil, &frame_times);
        for t in 0..n_frames {
            if rel[t] < best_rel[t] {
                best_rel[t] = rel[t];
                best_f0[t] = cand[t];
            }
        }
    }

    let mut f0_hz = vec![0.0; n_frames];
    let mut voiced = vec![false; n_frames];
    for t in 0..n_frames {
        let ok = best_rel[t] <= RELIABILITY_THRESHOLD
            && best_f0[t] >= f0_floor
            && best_f0[t] <= f0_ceil;
        if ok {
            f0_hz[t] = best_f0[t];
            voiced[t] = true;
        }
    }
    Ok(PitchTrack { f0_hz, hop_ms, voiced })
}

fn decimation_factor(sample_rate: u32, f0_ceil: f64) -> usize {
    let by_rate = sample_rate / 4000;
    let by_ceil = (sample_rate as f64 / (4.0 * f0_ceil)).floor() as u32;
    by_rate.min(by_ceil).max(1) as usize
}

/// Log-spaced low-pass cutoffs covering `[f0_floor, f0_ceil]`; the grid stops
/// at the first boundary at or above the ceiling so every in-range F0 falls
/// inside some band's `[b/2, b]` octave.
fn band_boundaries(f0_floor: f64, f0_ceil: f64) -> Vec<f64> {
    let mut bands = Vec::new();
    let mut i = 1;
    loop {
        let b = f0_floor * 2f64.powf(i as f64 / CHANNELS_PER_OCTAVE);
        bands.push(b);
        if b >= f0_ceil {
            return bands;
        }
        i += 1;
    }
}

/// Anti-alias filter plus take-every-`factor` downsampling. DC is removed so
/// zero crossings are meaningful.
fn decimate(samples: &[f64], fs: f64, factor: usize) -> Vec<f64> {
    let filtered = if factor > 1 {
        let cutoff = 0.4 * fs / factor as f64;
        windowed_sinc_lowpass(samples, fs, cutoff, 97)
    } else {
        samples.to_vec()
    };
    let mut y: Vec<f64> = filtered.iter().step_by(factor).copied().collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    for v in &mut y {
        *v -= mean;
    }
    y
}

fn windowed_sinc_lowpass(x: &[f64], fs: f64, cutoff: f64, taps: usize) -> Vec<f64> {
    debug_assert!(taps % 2 == 1);
    let half = (taps / 2) as isize;
    let fc = cutoff / fs;
    let mut kernel = Vec::with_capacity(taps);
    for k in -half..=half {
        let t = k as f64;
        let sinc = if k == 0 { 2.0 * fc } else { (2.0 * std::f64::consts::PI * fc * t).sin() / (std::f64::consts::PI * t) };
        // Hamming window.
        let w = 0.54 + 0.46 * (std::f64::consts::PI * t / half as f64).cos();
        kernel.push(sinc * w);
    }
    let sum: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }
    convolve_same(x, &kernel)
}

/// Low-pass via a Nuttall window kernel spanning roughly two periods of the
/// cutoff, normalized to unit DC gain.
fn nuttall_lowpass(x: &[f64], fs: f64, cutoff: f64) -> Vec<f64> {
    let len = (2 * (fs / cutoff).round() as usize).max(4) + 1;
    let mut kernel = Vec::with_capacity(len);
    let (a0, a1, a2, a3) = (0.355768, 0.487396, 0.144232, 0.012604);
    for i in 0..len {
        let t = i as f64 / (len - 1) as f64;
        let w = a0 - a1 * (2.0 * std::f64::consts::PI * t).cos()
            + a2 * (4.0 * std::f64::consts::PI * t).cos()
            - a3 * (6.0 * std::f64::consts::PI * t).cos();
        kernel.push(w);
    }
    let sum: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }
    convolve_same(x, &kernel)
}

/// Linear-phase FIR with the group delay compensated; zero-padded edges.
fn convolve_same(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = kernel.len() / 2;
    let n = x.len();
    let mut y = vec![0.0; n];
    for (i, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        for j in lo..hi {
            // kernel index: j - (i - half) guarded by the bounds above
            acc += x[j] * kernel[j + half - i];
        }
        *out = acc;
    }
    y
}

/// Per-frame (candidate, reliability) for one band.
fn band_candidates(
    filtered: &[f64],
    fs: f64,
    boundary: f64,
    f0_floor: f64,
    f0_ceil: f64,
    frame_times: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n_frames = frame_times.len();
    let mut estimates: Vec<Vec<f64>> = Vec::with_capacity(4);

    let negated: Vec<f64> = filtered.iter().map(|v| -v).collect();
    let diff: Vec<f64> = filtered.windows(2).map(|w| w[1] - w[0]).collect();
    let neg_diff: Vec<f64> = diff.iter().map(|v| -v).collect();

    for signal in [filtered, &negated[..], &diff[..], &neg_diff[..]] {
        let events = falling_zero_crossings(signal, fs);
        match interval_track(&events) {
            Some((locs, freqs)) => estimates.push(interp1(&locs, &freqs, frame_times)),
            None => return (vec![0.0; n_frames], vec![f64::INFINITY; n_frames]),
        }
    }

    let mut cand = vec![0.0; n_frames];
    let mut rel = vec![f64::INFINITY; n_frames];
    let band_lo = (boundary / 2.0) * 0.9;
    let band_hi = boundary * 1.1;
    for t in 0..n_frames {
        let e = [estimates[0][t], estimates[1][t], estimates[2][t], estimates[3][t]];
        let mean = e.iter().sum::<f64>() / 4.0;
        if mean < band_lo || mean > band_hi || mean < f0_floor * 0.95 || mean > f0_ceil * 1.05 {
            continue;
        }
        let var = e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        cand[t] = mean;
        rel[t] = var.sqrt() / mean.max(1e-12);
    }
    (cand, rel)
}

/// Sub-sample positions (seconds) where the signal crosses zero going from
/// positive to non-positive.
fn falling_zero_crossings(x: &[f64], fs: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..x.len().saturating_sub(1) {
        if x[i] > 0.0 && x[i + 1] <= 0.0 {
            let frac = x[i] / (x[i] - x[i + 1]);
            out.push((i as f64 + frac) / fs);
        }
    }
    out
}

/// Converts successive event positions into (interval midpoint, 1/interval)
/// pairs. Returns `None` with fewer than two events.
fn interval_track(events: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    if events.len() < 2 {
        return None;
    }
    let mut locs = Vec::with_capacity(events.len() - 1);
    let mut freqs = Vec::with_capacity(events.len() - 1);
    for pair in events.windows(2) {
        let dt = pair[1] - pair[0];
        if dt > 0.0 {
            locs.push((pair[0] + pair[1]) / 2.0);
            freqs.push(1.0 / dt);
        }
    }
    if locs.is_empty() {
        None
    } else {
        Some((locs, freqs))
    }
}

/// Linear interpolation of `(xs, ys)` samples at `targets`; ends are clamped.
/// Both `xs` and `targets` must be ascending.
fn interp1(xs: &[f64], ys: &[f64], targets: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(targets.len());
    let mut seg = 0;
    for &t in targets {
        if t <= xs[0] {
            out.push(ys[0]);
            continue;
        }
        if t >= xs[xs.len() - 1] {
            out.push(ys[ys.len() - 1]);
            continue;
        }
        while seg + 1 < xs.len() && xs[seg + 1] < t {
            seg += 1;
        }
        let (x0, x1) = (xs[seg], xs[seg + 1]);
        let w = (t - x0) / (x1 - x0);
        out.push(ys[seg] * (1.0 - w) + ys[seg + 1] * w);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{frame_count, Waveform};

    fn sine(freq: f64, secs: f64, fs: u32) -> Waveform {
        let n = (secs * fs as f64) as usize;
        let samples = (0..n)
            .map(|i| 0.6 * (2.0 * std::f64::consts::PI * freq * i as f64 / fs as f64).sin())
            .collect();
        Waveform::new(samples, fs).unwrap()
    }

    /// Frames at least 50 ms away from either end.
    fn interior(track: &PitchTrack, dur_secs: f64) -> Vec<usize> {
        let hop = track.hop_ms as f64 / 1000.0;
        (0..track.len())
            .filter(|&i| {
                let t = i as f64 * hop;
                t >= 0.05 && t <= dur_secs - 0.05
            })
            .collect()
    }

    #[test]
    fn pure_sine_median_within_three_percent() {
        let w = sine(220.0, 1.0, 16000);
        let track = estimate_f0(&w, 10, 40.0, 800.0).unwrap();
        assert_eq!(track.len(), frame_count(w.len(), 16000, 10));
        let idx = interior(&track, 1.0);
        let voiced: Vec<f64> = idx
            .iter()
            .filter(|&&i| track.voiced[i])
            .map(|&i| track.f0_hz[i])
            .collect();
        assert!(
            voiced.len() as f64 >= 0.9 * idx.len() as f64,
            "only {}/{} interior frames voiced",
            voiced.len(),
            idx.len()
        );
        let mut sorted = voiced.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        assert!(
            (median - 220.0).abs() / 220.0 < 0.03,
            "median {median} off from 220"
        );
        // Every voiced interior frame individually within 3%.
        for f in &voiced {
            assert!((f - 220.0).abs() / 220.0 < 0.03, "frame f0 {f}");
        }
    }

    #[test]
    fn silence_is_fully_unvoiced() {
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        for hop in [10, 20, 40] {
            let track = estimate_f0(&w, hop, 40.0, 800.0).unwrap();
            assert!(track.voiced.iter().all(|&v| !v));
            assert!(track.f0_hz.iter().all(|&f| f == 0.0));
        }
    }

    #[test]
    fn chirp_tracks_instantaneous_frequency() {
        // 150 -> 300 Hz over 1 s: phase = 2*pi*(150 t + 75 t^2),
        // instantaneous frequency 150 + 150 t.
        let fs = 16000u32;
        let samples: Vec<f64> = (0..fs as usize)
            .map(|i| {
                let t = i as f64 / fs as f64;
                let phase = 2.0 * std::f64::consts::PI * (150.0 * t + 75.0 * t * t);
                0.6 * phase.sin()
            })
            .collect();
        let w = Waveform::new(samples, fs).unwrap();
        let track = estimate_f0(&w, 20, 40.0, 800.0).unwrap();
        let idx = interior(&track, 1.0);
        let mut last: Option<f64> = None;
        for &i in &idx {
            assert!(track.voiced[i], "frame {i} unvoiced");
            let t = i as f64 * 0.02;
            let truth = 150.0 + 150.0 * t;
            let est = track.f0_hz[i];
            assert!(
                (est - truth).abs() / truth < 0.05,
                "frame {i}: est {est}, truth {truth}"
            );
            if let Some(prev) = last {
                assert!(est >= prev * 0.99, "non-monotone at {i}: {prev} -> {est}");
            }
            last = Some(est);
        }
    }

    #[test]
    fn too_short_audio_errors() {
        let w = sine(220.0, 0.02, 16000);
        let err = estimate_f0(&w, 10, 40.0, 800.0).unwrap_err();
        assert_eq!(err.code(), "audio_too_short");
    }

    #[test]
    fn bad_hop_errors() {
        let w = sine(220.0, 1.0, 16000);
        let err = estimate_f0(&w, 15, 40.0, 800.0).unwrap_err();
        assert_eq!(err.code(), "unsupported_hop");
    }

    #[test]
    fn bad_range_errors() {
        let w = sine(220.0, 1.0, 16000);
        assert!(estimate_f0(&w, 10, 0.0, 800.0).is_err());
        assert!(estimate_f0(&w, 10, 900.0, 800.0).is_err());
        assert!(estimate_f0(&w, 10, 40.0, 9000.0).is_err());
    }

    #[test]
    fn track_length_law_for_all_hops() {
        let w = sine(220.0, 1.0, 16000);
        for (hop, want) in [(10u32, 101usize), (20, 51), (40, 26)] {
            let track = estimate_f0(&w, hop, 40.0, 800.0).unwrap();
            assert_eq!(track.len(), want, "hop {hop}");
        }
    }
}
