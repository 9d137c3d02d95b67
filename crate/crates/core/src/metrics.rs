//! PSNR, SSIM and mean CIE76 color difference.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::layout::COLORS;
use crate::loss::{mse_loss, ssim_index};
use crate::real::Real;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1/MSE)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    let (mse, _) = mse_loss(a, b)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Same window and constants as [`crate::loss::ssim_loss`].
pub fn ssim_metric<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    ssim_index(a, b)
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// CIELAB of an sRGB color; the D65 white is the image of sRGB white.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (r, row) in SRGB_TO_XYZ.iter().enumerate() {
        let white: f64 = row.iter().sum();
        xyz[r] = row.iter().zip(&lin).map(|(m, v)| m * v).sum::<f64>() / white;
    }
    let [fx, fy, fz] = xyz.map(lab_f);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Mean per-pixel Euclidean distance in CIELAB.
pub fn delta_e<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    if a.channels() != COLORS || !a.same_shape(b) {
        return Err(Error::arg("delta E needs two 3-channel images of the same size"));
    }
    let mut sum = 0.0;
    for (pa, pb) in a.data().chunks_exact(COLORS).zip(b.data().chunks_exact(COLORS)) {
        let la = srgb_to_lab([pa[0].f64(), pa[1].f64(), pa[2].f64()]);
        let lb = srgb_to_lab([pb[0].f64(), pb[1].f64(), pb[2].f64()]);
        sum += la.iter().zip(&lb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    Ok(sum / a.pixel_count() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

impl MetricReport {
    pub fn evaluate<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<Self> {
        Ok(Self {
            psnr: psnr(a, b)?,
            ssim: ssim_metric(a, b)?,
            delta_e: delta_e(a, b)?,
        })
    }

    pub const CSV_HEADER: &'static str = "psnr,ssim,delta_e";

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.8},{:.6}", self.psnr, self.ssim, self.delta_e)
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PSNR {:.3} dB  SSIM {:.5}  dE {:.4}", self.psnr, self.ssim, self.delta_e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::ssim_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random_range(0.0..1.0))
    }

    /// Textbook conversion with the tabulated D65 white.
    fn lab_oracle(rgb: [f64; 3]) -> [f64; 3] {
        let lin: Vec<f64> = rgb
            .iter()
            .map(|&c| if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) })
            .collect();
        let x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
        let y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
        let z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
        let f = |t: f64| {
            if t > 216.0 / 24389.0 {
                t.powf(1.0 / 3.0)
            } else {
                (24389.0 / 27.0 * t + 16.0) / 116.0
            }
        };
        let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    #[test]
    fn psnr_closed_forms() {
        let a = rand_image(4, 4, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        assert_eq!(psnr_from_mse(1e-12), 99.0);
        let b = Image::from_fn(4, 4, 3, |y, x, c| a.get(y, x, c) + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_properties() {
        let a = rand_image(16, 16, 2);
        let b = rand_image(16, 16, 3);
        assert!((ssim_metric(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim_metric(&a, &b).unwrap(), ssim_metric(&b, &a).unwrap());
        let s = ssim_metric(&a, &b).unwrap();
        assert_eq!(s + ssim_loss(&a, &b).unwrap().0, 1.0);
    }

    #[test]
    fn delta_e_examples() {
        let white = Image::filled(2, 2, 3, 1.0f64);
        let black = Image::filled(2, 2, 3, 0.0f64);
        assert!((delta_e(&white, &black).unwrap() - 100.0).abs() < 0.1);
        assert_eq!(delta_e(&white, &white).unwrap(), 0.0);
        let lab = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((lab[0] - 100.0).abs() < 1e-9 && lab[1].abs() < 1e-9 && lab[2].abs() < 1e-9);

        let a = rand_image(6, 5, 4);
        let b = rand_image(6, 5, 5);
        let mut sum = 0.0;
        for (pa, pb) in a.data().chunks(3).zip(b.data().chunks(3)) {
            let la = lab_oracle([pa[0], pa[1], pa[2]]);
            let lb = lab_oracle([pb[0], pb[1], pb[2]]);
            sum += ((la[0] - lb[0]).powi(2) + (la[1] - lb[1]).powi(2) + (la[2] - lb[2]).powi(2)).sqrt();
        }
        assert!((delta_e(&a, &b).unwrap() - sum / 30.0).abs() < 1e-3);
        assert!((delta_e(&a, &b).unwrap() - delta_e(&b, &a).unwrap()).abs() < 1e-12);
        assert!(delta_e(&Image::<f64>::zeros(2, 2, 1), &Image::zeros(2, 2, 1)).is_err());
    }

    #[test]
    fn report_on_identical_images() {
        let a = rand_image(12, 12, 6);
        let r = MetricReport::evaluate(&a, &a).unwrap();
        assert_eq!((r.psnr, r.ssim, r.delta_e), (99.0, 1.0, 0.0));
    }
}
