use std::fmt::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;
use crate::data::PointCloud;
use crate::error::{Error, Result};

const MORTON_BITS: u32 = 21;

fn spread(mut v: u64) -> u64 {
    v &= (1 << MORTON_BITS) - 1;
    v = (v | v << 32) & 0x001f_0000_0000_ffff;
    v = (v | v << 16) & 0x001f_0000_ff00_00ff;
    v = (v | v << 8) & 0x100f_00f0_0f00_f00f;
    v = (v | v << 4) & 0x10c3_0c30_c30c_30c3;
    (v | v << 2) & 0x1249_2492_4924_9249
}

/// Interleaved-bit code of a point quantised inside the box `[lo, hi]`.
pub fn morton_code(p: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> u64 {
    let scale = ((1u64 << MORTON_BITS) - 1) as f64;
    let q = |a: usize| {
        let span = hi[a] - lo[a];
        let u = if span > 0.0 { ((p[a] - lo[a]) / span).clamp(0.0, 1.0) } else { 0.0 };
        (u * scale).round() as u64
    };
    spread(q(0)) | spread(q(1)) << 1 | spread(q(2)) << 2
}

/// Point indices sorted by Morton code, ties by index.
pub fn morton_order(xyz: &[[f64; 3]]) -> Vec<usize> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in xyz {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut idx: Vec<(u64, usize)> = xyz.iter().enumerate().map(|(i, &p)| (morton_code(p, lo, hi), i)).collect();
    idx.sort_unstable();
    idx.into_iter().map(|(_, i)| i).collect()
}

/// Channel-averaged DFT magnitude along `order`, for bins `0..=M/2`.
pub fn magnitude_profile(features: &Tensor, order: &[usize]) -> Result<Vec<f64>> {
    let (m, d) = features.require_matrix("magnitude_profile")?;
    if order.len() != m || m == 0 {
        return Err(Error::InvalidArgument(format!("ordering has {} entries for {m} rows", order.len())));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(m);
    let bins = m / 2 + 1;
    let mut profile = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for c in 0..d {
        for (slot, &i) in buf.iter_mut().zip(order) {
            *slot = Complex::new(features.get2(i, c), 0.0);
        }
        fft.process(&mut buf);
        for (acc, z) in profile.iter_mut().zip(&buf) {
            *acc += z.norm() / d as f64;
        }
    }
    Ok(profile)
}

/// Spectrum of per-point features laid out along the cloud's Morton order.
pub fn spectrum(features: &Tensor, cloud: &PointCloud) -> Result<Vec<f64>> {
    magnitude_profile(features, &morton_order(&cloud.xyz))
}

/// Share of magnitude in the upper half of the non-negative frequency bins.
pub fn high_band_fraction(profile: &[f64]) -> f64 {
    let total: f64 = profile.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    profile[profile.len() / 2..].iter().sum::<f64>() / total
}

pub fn spectrum_csv(profile: &[f64]) -> String {
    let mut s = String::from("frequency_bin,magnitude\n");
    for (k, v) in profile.iter().enumerate() {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

pub fn write_spectrum(profile: &[f64], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, spectrum_csv(profile))?;
    Ok(())
}
