//! Images and image-shaped maps, PNG I/O, area downsampling and pixel (un)shuffle.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;

/// An `height × width × channels` array, row-major with interleaved channels.
///
/// Used for pipeline inputs and outputs (values in `[0, 1]`) and also for
/// intermediate maps such as guidance, features and sliced parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// Per-pixel parameters read out of a grid, `H × W × P`.
pub type SlicedParams<T> = Image<T>;

impl<T: Real> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::arg(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite image value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row_len(&self) -> usize {
        self.width * self.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[T] {
        let n = self.row_len();
        &self.data[y * n..(y + 1) * n]
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn is_unit_range(&self) -> bool {
        self.data
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    /// Copies channel `c` into a single-channel map.
    pub fn channel(&self, c: usize) -> Image<T> {
        assert!(c < self.channels);
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Image<T>) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
    }
}

/// PNG sample depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::arg(format!("bit depth must be 8 or 16, got {other}"))),
        }
    }

    pub fn max_code(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Quantizes a unit-range value with round-half-up.
#[inline]
pub fn quantize(v: f64, depth: BitDepth) -> u32 {
    let max = depth.max_code() as f64;
    let q = (v.clamp(0.0, 1.0) * max + 0.5).floor();
    q.min(max) as u32
}

/// Reads an 8- or 16-bit grayscale or RGB PNG.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let decode_err = |e: png::DecodingError| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let (color, depth) = reader.output_color_type();
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("color type {other:?} (need grayscale or RGB)"),
            })
        }
    };
    let bytes_per_sample = match depth {
        png::BitDepth::Eight => 1,
        png::BitDepth::Sixteen => 2,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("bit depth {other:?} (need 8 or 16)"),
            })
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * channels);
    for y in 0..h {
        let line = &buf[y * info.line_size..y * info.line_size + w * channels * bytes_per_sample];
        if bytes_per_sample == 1 {
            data.extend(line.iter().map(|&b| b as f32 / 255.0));
        } else {
            data.extend(
                line.chunks_exact(2)
                    .map(|s| u16::from_be_bytes([s[0], s[1]]) as f32 / 65535.0),
            );
        }
    }
    Image::new(h, w, channels, data)
}

/// Writes a 1- or 3-channel image as PNG, replacing `path` atomically.
pub fn save_image<T: Real>(img: &Image<T>, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::arg(format!("cannot save a {c}-channel image as PNG"))),
    };
    let mut samples = Vec::with_capacity(img.data().len() * 2);
    for &v in img.data() {
        let q = quantize(v.f64(), depth);
        match depth {
            BitDepth::Eight => samples.push(q as u8),
            BitDepth::Sixteen => samples.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    write_atomic(path, |w| {
        let mut enc = png::Encoder::new(BufWriter::new(w), img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_depth(match depth {
            BitDepth::Eight => png::BitDepth::Eight,
            BitDepth::Sixteen => png::BitDepth::Sixteen,
        });
        let mut writer = enc.write_header().map_err(std::io::Error::other)?;
        writer
            .write_image_data(&samples)
            .map_err(std::io::Error::other)?;
        writer.finish().map_err(std::io::Error::other)
    })
}

/// Deterministic test scene in `[0, 1]`: color ramps, a few hard-edged
/// disks and seeded per-pixel noise.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Image<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let disks: Vec<[f32; 6]> = (0..6)
        .map(|_| {
            [
                rng.random::<f32>(),
                rng.random::<f32>(),
                0.05 + 0.2 * rng.random::<f32>(),
                rng.random::<f32>(),
                rng.random::<f32>(),
                rng.random::<f32>(),
            ]
        })
        .collect();
    let phase: [f32; 2] = [rng.random::<f32>() * 6.0, rng.random::<f32>() * 6.0];
    let mut img = Image::zeros(height, width, 3);
    let scale = 1.0 / height.max(width).max(1) as f32;
    par::for_each_row(img.data_mut(), width * 3, |y, row| {
        let mut noise = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (y as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let v = y as f32 * scale;
        for x in 0..width {
            let u = x as f32 * scale;
            let mut px = [
                0.5 + 0.35 * (6.0 * u + phase[0]).sin() * (2.0 * v).cos(),
                0.2 + 0.6 * v,
                0.5 + 0.3 * (4.0 * (u + v) + phase[1]).cos(),
            ];
            for d in &disks {
                let (du, dv) = (u - d[0], v - d[1]);
                if du * du + dv * dv < d[2] * d[2] {
                    px = [0.15 + 0.7 * d[3], 0.15 + 0.7 * d[4], 0.15 + 0.7 * d[5]];
                }
            }
            for (c, p) in px.iter().enumerate() {
                let n: f32 = noise.random_range(-0.02..0.02);
                row[x * 3 + c] = (p + n).clamp(0.0, 1.0);
            }
        }
    });
    img
}

/// Area-averaging downsample by an integer factor.
///
/// Dimensions that do not divide evenly are padded by edge replication, so the
/// output is `ceil(H / f) × ceil(W / f)`.
pub fn downsample<T: Real>(img: &Image<T>, factor: usize) -> Result<Image<T>> {
    if factor == 0 {
        return Err(Error::arg("downsample factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let oh = img.height().div_ceil(factor);
    let ow = img.width().div_ceil(factor);
    let c = img.channels();
    let norm = T::of(1.0 / (factor * factor) as f64);
    let mut out = Image::zeros(oh, ow, c);
    par::for_each_row(out.data_mut(), ow * c, |oy, row| {
        let mut acc = vec![T::zero(); c];
        for ox in 0..ow {
            acc.iter_mut().for_each(|a| *a = T::zero());
            for dy in 0..factor {
                let sy = (oy * factor + dy).min(img.height() - 1);
                for dx in 0..factor {
                    let sx = (ox * factor + dx).min(img.width() - 1);
                    for (a, &v) in acc.iter_mut().zip(img.pixel(sy, sx)) {
                        *a += v;
                    }
                }
            }
            for (o, &a) in row[ox * c..(ox + 1) * c].iter_mut().zip(&acc) {
                *o = a * norm;
            }
        }
    });
    Ok(out)
}

/// Space-to-depth: `H × W × C` → `(H/f) × (W/f) × (C·f²)`.
///
/// Output channel `c·f² + dy·f + dx` holds input channel `c` at offset
/// `(dy, dx)` inside each `f × f` block.
pub fn pixel_unshuffle<T: Real>(feat: &Image<T>, factor: usize) -> Result<Image<T>> {
    if factor == 0 || !feat.height().is_multiple_of(factor) || !feat.width().is_multiple_of(factor) {
        return Err(Error::arg(format!(
            "pixel_unshuffle: {}x{} is not divisible by factor {factor}",
            feat.height(),
            feat.width()
        )));
    }
    let (oh, ow, c) = (feat.height() / factor, feat.width() / factor, feat.channels());
    let ff = factor * factor;
    let mut out = Image::zeros(oh, ow, c * ff);
    let oc = c * ff;
    par::for_each_row(out.data_mut(), ow * oc, |oy, row| {
        for ox in 0..ow {
            for ch in 0..c {
                for dy in 0..factor {
                    for dx in 0..factor {
                        row[ox * oc + ch * ff + dy * factor + dx] =
                            feat.get(oy * factor + dy, ox * factor + dx, ch);
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Depth-to-space, the inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Real>(feat: &Image<T>, factor: usize) -> Result<Image<T>> {
    let ff = factor * factor;
    if factor == 0 || !feat.channels().is_multiple_of(ff) {
        return Err(Error::arg(format!(
            "pixel_shuffle: {} channels not divisible by {ff}",
            feat.channels()
        )));
    }
    let c = feat.channels() / ff;
    let (oh, ow) = (feat.height() * factor, feat.width() * factor);
    let mut out = Image::zeros(oh, ow, c);
    par::for_each_row(out.data_mut(), ow * c, |y, row| {
        let (iy, dy) = (y / factor, y % factor);
        for x in 0..ow {
            let (ix, dx) = (x / factor, x % factor);
            for ch in 0..c {
                row[x * c + ch] = feat.get(iy, ix, ch * ff + dy * factor + dx);
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.random::<f32>())
    }

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(Image::<f32>::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(Image::<f32>::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(1.0, BitDepth::Eight), 255);
        assert_eq!(quantize(0.5, BitDepth::Eight), 128);
        assert_eq!(quantize(0.0, BitDepth::Sixteen), 0);
        assert_eq!(quantize(1.0, BitDepth::Sixteen), 65535);
    }

    #[test]
    fn downsample_constant_and_block() {
        let img = Image::<f32>::filled(6, 6, 3, 0.3);
        let d = downsample(&img, 3).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let block = Image::<f32>::new(2, 2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let d = downsample(&block, 2).unwrap();
        assert_eq!(d.data(), &[0.5]);
        assert!(downsample(&block, 0).is_err());
    }

    #[test]
    fn downsample_matches_naive_block_mean() {
        let img = random_image(8, 8, 3, 7);
        let d = downsample(&img, 2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                for c in 0..3 {
                    let mut s = 0.0f64;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += img.get(2 * oy + dy, 2 * ox + dx, c) as f64;
                        }
                    }
                    assert!((d.get(oy, ox, c) as f64 - s / 4.0).abs() < 1e-6);
                }
            }
        }
        assert!((d.mean() - img.mean()).abs() < 1e-6);
    }

    #[test]
    fn downsample_pads_by_edge_replication() {
        let img = Image::<f64>::new(1, 3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let d = downsample(&img, 2).unwrap();
        assert_eq!((d.height(), d.width()), (1, 2));
        assert!((d.get(0, 0, 0) - 0.25).abs() < 1e-12);
        assert!((d.get(0, 1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unshuffle_channel_order() {
        let img = Image::<f32>::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f32);
        let u = pixel_unshuffle(&img, 4).unwrap();
        assert_eq!((u.height(), u.width(), u.channels()), (1, 1, 16));
        for k in 0..16 {
            assert_eq!(u.get(0, 0, k), img.get(k / 4, k % 4, 0));
        }
        let id = pixel_unshuffle(&img, 1).unwrap();
        assert_eq!(id, img);
        assert!(pixel_unshuffle(&img, 3).is_err());
    }

    #[test]
    fn shuffle_inverts_unshuffle() {
        let img = random_image(8, 12, 2, 3);
        let u = pixel_unshuffle(&img, 4).unwrap();
        assert_eq!(pixel_shuffle(&u, 4).unwrap(), img);
    }

    #[test]
    fn png_round_trip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(5, 7, 3, 11);
        for (depth, bits) in [(BitDepth::Eight, 255.0), (BitDepth::Sixteen, 65535.0)] {
            let p = dir.path().join(format!("img{bits}.png"));
            save_image(&img, &p, depth).unwrap();
            let back = load_image(&p).unwrap();
            assert!(back.same_shape(&img));
            let bound = 1.0 / (2.0 * bits) + 1e-7;
            assert!(img.max_abs_diff(&back) <= bound);
            // second trip through the codec is lossless
            save_image(&back, &p, depth).unwrap();
            assert_eq!(load_image(&p).unwrap(), back);
        }
        let gray = random_image(3, 3, 1, 2);
        let p = dir.path().join("g.png");
        save_image(&gray, &p, BitDepth::Eight).unwrap();
        assert_eq!(load_image(&p).unwrap().channels(), 1);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png at all").unwrap();
        assert!(matches!(load_image(&bad), Err(Error::Decode { .. })));
        let two = Image::<f32>::zeros(2, 2, 2);
        assert!(save_image(&two, dir.path().join("x.png"), BitDepth::Eight).is_err());
    }

    #[test]
    fn rgba_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        let f = std::fs::File::create(&p).unwrap();
        let mut enc = png::Encoder::new(f, 1, 1);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[1, 2, 3, 4]).unwrap();
        w.finish().unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
    }

    proptest::proptest! {
        #[test]
        fn unshuffle_preserves_values(h in 1usize..4, w in 1usize..4, c in 1usize..3, f in 1usize..4, seed in 0u64..1000) {
            let img = random_image(h * f, w * f, c, seed);
            let u = pixel_unshuffle(&img, f).unwrap();
            let mut a: Vec<f32> = img.data().to_vec();
            let mut b: Vec<f32> = u.data().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            proptest::prop_assert_eq!(a, b);
        }
    }
}
