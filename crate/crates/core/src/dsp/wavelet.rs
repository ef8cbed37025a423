//! Discrete wavelet transform (db6) with soft-threshold denoising.
//!
//! The decomposition uses half-sample symmetric boundary extension and keeps
//! every analysis window that fits the extended signal, which makes the
//! transform slightly redundant but exactly invertible for any input length
//! at least `FILTER_LEN - 1`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// db6 scaling (low-pass) analysis filter, 12 taps.
pub const DB6_LO: [f64; 12] = [
    -1.077_301_085_308_479_6e-3,
    4.777_257_510_945_510_8e-3,
    5.538_422_011_614_961_3e-4,
    -3.158_203_931_748_603e-2,
    2.752_286_553_030_572_7e-2,
    9.750_160_558_732_304e-2,
    -1.297_668_675_672_619_4e-1,
    -2.262_646_939_654_398_3e-1,
    3.152_503_517_091_976_3e-1,
    7.511_339_080_210_954e-1,
    4.946_238_903_984_530_6e-1,
    1.115_407_433_501_094_7e-1,
];

const FILTER_LEN: usize = 12;

fn high_pass() -> [f64; FILTER_LEN] {
    let mut g = [0.0; FILTER_LEN];
    for (k, slot) in g.iter_mut().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        *slot = sign * DB6_LO[FILTER_LEN - 1 - k];
    }
    g
}

/// Multi-level decomposition: approximation plus per-level details
/// (`details[0]` is the finest level).
#[derive(Clone, Debug)]
pub struct WaveletDecomposition {
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    level_lens: Vec<usize>,
}

/// Half-sample symmetric extension by `pad` samples on each side.
fn sym_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (0..pad).rev() {
        ext.push(x[i]);
    }
    ext.extend_from_slice(x);
    for i in (0..pad).rev() {
        ext.push(x[n - 1 - i]);
    }
    ext
}

fn analysis_step(x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pad = FILTER_LEN - 1;
    if x.len() < pad {
        return Err(Error::SignalTooShort { need: pad, got: x.len() });
    }
    let ext = sym_extend(x, pad);
    let count = (ext.len() - FILTER_LEN) / 2 + 1;
    let g = high_pass();
    let mut approx = vec![0.0; count];
    let mut detail = vec![0.0; count];
    for k in 0..count {
        let window = &ext[2 * k..2 * k + FILTER_LEN];
        let mut a = 0.0;
        let mut d = 0.0;
        for (i, &v) in window.iter().enumerate() {
            a += DB6_LO[i] * v;
            d += g[i] * v;
        }
        approx[k] = a;
        detail[k] = d;
    }
    Ok((approx, detail))
}

fn synthesis_step(approx: &[f64], detail: &[f64], out_len: usize) -> Vec<f64> {
    let pad = FILTER_LEN - 1;
    let g = high_pass();
    let mut rec = vec![0.0; out_len + 2 * pad];
    for k in 0..approx.len() {
        let (a, d) = (approx[k], detail[k]);
        for i in 0..FILTER_LEN {
            rec[2 * k + i] += a * DB6_LO[i] + d * g[i];
        }
    }
    rec[pad..pad + out_len].to_vec()
}

/// Forward multi-level transform.
pub fn dwt(x: &[f64], levels: usize) -> Result<WaveletDecomposition> {
    if levels == 0 {
        return Err(Error::InvalidConfig(alloc::string::String::from("wavelet levels must be >= 1")));
    }
    if x.len() < 1 << levels {
        return Err(Error::SignalTooShort { need: 1 << levels, got: x.len() });
    }
    let mut approx = x.to_vec();
    let mut details = Vec::with_capacity(levels);
    let mut level_lens = Vec::with_capacity(levels);
    for _ in 0..levels {
        level_lens.push(approx.len());
        let (a, d) = analysis_step(&approx)?;
        details.push(d);
        approx = a;
    }
    Ok(WaveletDecomposition { approx, details, level_lens })
}

/// Exact inverse of [`dwt`].
pub fn idwt(dec: &WaveletDecomposition) -> Vec<f64> {
    let mut cur = dec.approx.clone();
    for (detail, &len) in dec.details.iter().rev().zip(dec.level_lens.iter().rev()) {
        cur = synthesis_step(&cur, detail, len);
    }
    cur
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("no NaN in detail coefficients"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Soft-threshold wavelet denoising: noise scale from the median absolute
/// deviation of the finest detail level, universal threshold
/// `sigma * sqrt(2 ln N)` applied to every detail level, approximation
/// untouched. Returns a signal of the original length.
pub fn wavelet_denoise(x: &[f64], levels: usize) -> Result<Vec<f64>> {
    let mut dec = dwt(x, levels)?;
    let mut abs_finest: Vec<f64> = dec.details[0].iter().map(|v| libm::fabs(*v)).collect();
    let sigma = median(&mut abs_finest) / 0.6745;
    let threshold = sigma * libm::sqrt(2.0 * libm::log(x.len() as f64));
    for detail in dec.details.iter_mut() {
        for v in detail.iter_mut() {
            *v = soft_threshold(*v, threshold);
        }
    }
    Ok(idwt(&dec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn filters_are_orthonormal() {
        let sum: f64 = DB6_LO.iter().sum();
        assert!((sum - core::f64::consts::SQRT_2).abs() < 1e-12, "sum {sum}");
        let sq: f64 = DB6_LO.iter().map(|v| v * v).sum();
        assert!((sq - 1.0).abs() < 1e-12, "energy {sq}");
        for shift in [2usize, 4, 6, 8, 10] {
            let dot: f64 = (0..FILTER_LEN - shift).map(|i| DB6_LO[i] * DB6_LO[i + shift]).sum();
            assert!(dot.abs() < 1e-12, "shift {shift} dot {dot}");
        }
    }

    #[test]
    fn round_trip_is_exact_for_many_lengths() {
        for &n in &[32usize, 33, 100, 977, 1954] {
            let mut r = rng::rng_from(n as u64);
            let x: Vec<f64> = (0..n).map(|_| rng::standard_normal(&mut r)).collect();
            let dec = dwt(&x, 5).unwrap();
            let xr = idwt(&dec);
            assert_eq!(xr.len(), n);
            let err = x.iter().zip(&xr).map(|(a, b)| libm::fabs(a - b)).fold(0.0, f64::max);
            assert!(err < 1e-10, "n={n} err={err}");
        }
    }

    #[test]
    fn zero_signal_stays_zero() {
        let x = vec![0.0; 977];
        let y = wavelet_denoise(&x, 5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn approximation_only_signal_passes_through() {
        // build a signal with (numerically) zero fine detail, so the
        // estimated noise scale vanishes and denoising is a round trip
        let mut r = rng::rng_from(3);
        let x: Vec<f64> = (0..977).map(|_| rng::standard_normal(&mut r)).collect();
        let mut dec = dwt(&x, 5).unwrap();
        for d in dec.details.iter_mut() {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        let smooth = idwt(&dec);
        let den = wavelet_denoise(&smooth, 5).unwrap();
        let err = smooth.iter().zip(&den).map(|(a, b)| libm::fabs(a - b)).fold(0.0, f64::max);
        assert!(err < 1e-8, "max err {err}");
    }

    #[test]
    fn white_noise_energy_drops_sharply() {
        let mut ratio_sum = 0.0;
        let seeds = 100;
        for seed in 0..seeds {
            let mut r = rng::rng_from(seed);
            let x: Vec<f64> = (0..977).map(|_| rng::standard_normal(&mut r)).collect();
            let y = wavelet_denoise(&x, 5).unwrap();
            let ein: f64 = x.iter().map(|v| v * v).sum();
            let eout: f64 = y.iter().map(|v| v * v).sum();
            ratio_sum += eout / ein;
        }
        let mean_ratio = ratio_sum / seeds as f64;
        assert!(mean_ratio < 0.5, "mean energy ratio {mean_ratio}");
    }

    #[test]
    fn rejects_too_short_signals() {
        assert!(dwt(&[0.0; 31], 5).is_err());
        assert!(dwt(&[0.0; 32], 5).is_ok());
    }
}
