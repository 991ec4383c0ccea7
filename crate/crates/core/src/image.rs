//! RGB images in `[0, 1]` and the pixel-space filters shared by the codec,
//! the degradation pipeline and the guidance map.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// A `[3, H, W]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        match t.shape() {
            [3, h, w] if *h > 0 && *w > 0 => {}
            s => return Err(shape_err!("an image must be [3, H, W], got {:?}", s)),
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("in image data".into()));
        }
        Ok(ImageTensor(t))
    }

    /// Clamps into `[0, 1]` after the shape check.
    pub fn clamped(t: Tensor<f32>) -> Result<Self> {
        Ok(ImageTensor::new(t)?.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        ImageTensor(Tensor::full([3, h, w], v))
    }

    /// `f(channel, y, x)`.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        ImageTensor(Tensor::from_fn([3, h, w], |i| {
            f(i / (h * w), (i / w) % h, i % w)
        }))
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.0.data()[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        ImageTensor(self.0.map(f))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(ImageTensor(self.0.crop(y0, x0, h, w)?))
    }

    /// 8-bit RGB, interleaved, values rounded to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for c in 0..3 {
                out.push(quantize8(self.0.data()[c * h * w + i]));
            }
        }
        out
    }

    pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * h * w {
            return Err(shape_err!("{} bytes for a {}x{} RGB image", rgb.len(), h, w));
        }
        Ok(ImageTensor::from_fn(h, w, |c, y, x| {
            rgb[(y * w + x) * 3 + c] as f32 / 255.0
        }))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let bad = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
        let mut reader = decoder.read_info().map_err(bad)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(Error::Image(format!("{}: palette was not expanded", path.display())))
            }
        };
        let stride = info.line_size;
        Ok(ImageTensor::from_fn(h, w, |c, y, x| {
            let px = &buf[y * stride + x * channels..];
            let v = if channels < 3 { px[0] } else { px[c] };
            v as f32 / 255.0
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width() as u32, self.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bad = |e: png::EncodingError| Error::Image(format!("{}: {e}", path.display()));
        let mut writer = enc.write_header().map_err(bad)?;
        writer.write_image_data(&self.to_rgb8()).map_err(bad)?;
        writer.finish().map_err(bad)
    }
}

pub(crate) fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Resampling kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Keys cubic with `a = -0.5`.
    Bicubic,
    Bilinear,
    /// Box average.
    Area,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Bicubic => "bicubic",
            Kernel::Bilinear => "bilinear",
            Kernel::Area => "area",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bicubic" => Some(Kernel::Bicubic),
            "bilinear" => Some(Kernel::Bilinear),
            "area" => Some(Kernel::Area),
            _ => None,
        }
    }

    fn support(self) -> f64 {
        match self {
            Kernel::Bicubic => 2.0,
            Kernel::Bilinear => 1.0,
            Kernel::Area => 0.5,
        }
    }

    fn eval(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Kernel::Bicubic => {
                let a = -0.5;
                if x <= 1.0 {
                    ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
                } else {
                    0.0
                }
            }
            Kernel::Bilinear => (1.0 - x).max(0.0),
            Kernel::Area => {
                if x < 0.5 {
                    1.0
                } else if x == 0.5 {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }
}

/// Sparse resampling matrix for one axis: per output sample, a list of
/// `(input index, weight)` with weights summing to one.
fn axis_weights(n_in: usize, n_out: usize, kernel: Kernel) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    // widen the kernel when shrinking so it also acts as the anti-alias filter
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = kernel.support() * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = kernel.eval((j as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, n_in as isize - 1) as usize;
                match taps.iter_mut().find(|t| t.0 == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= sum;
            }
            taps
        })
        .collect()
}

/// Separable resize of a stack of planes `[C, H, W]`.
pub fn resize_planes(t: &Tensor<f32>, out_h: usize, out_w: usize, kernel: Kernel) -> Result<Tensor<f32>> {
    let [c, h, w] = t.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("cannot resize to {}x{}", out_h, out_w));
    }
    if out_h == h && out_w == w {
        return Ok(t.clone());
    }
    if kernel == Kernel::Area && h % out_h == 0 && w % out_w == 0 {
        return Ok(block_mean(t, h / out_h, w / out_w));
    }
    let wy = axis_weights(h, out_h, kernel);
    let wx = axis_weights(w, out_w, kernel);
    let mut tmp = vec![0f64; c * h * out_w];
    for p in 0..c {
        for y in 0..h {
            let row = &t.data()[(p * h + y) * w..][..w];
            for (x, taps) in wx.iter().enumerate() {
                tmp[(p * h + y) * out_w + x] = taps.iter().map(|(i, k)| row[*i] as f64 * k).sum();
            }
        }
    }
    let mut out = vec![0f32; c * out_h * out_w];
    for p in 0..c {
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..out_w {
                out[(p * out_h + y) * out_w + x] = taps
                    .iter()
                    .map(|(i, k)| tmp[(p * h + i) * out_w + x] * k)
                    .sum::<f64>() as f32;
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

fn block_mean(t: &Tensor<f32>, fy: usize, fx: usize) -> Tensor<f32> {
    let [c, h, w] = t.chw().expect("rank 3");
    let (oh, ow) = (h / fy, w / fx);
    let norm = 1.0 / (fy * fx) as f64;
    Tensor::from_fn([c, oh, ow], |i| {
        let (p, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let mut s = 0f64;
        for dy in 0..fy {
            for dx in 0..fx {
                s += t.data()[(p * h + y * fy + dy) * w + x * fx + dx] as f64;
            }
        }
        (s * norm) as f32
    })
}

pub fn resize(img: &ImageTensor, out_h: usize, out_w: usize, kernel: Kernel) -> Result<ImageTensor> {
    ImageTensor::new(resize_planes(img.tensor(), out_h, out_w, kernel)?)
}

/// Symmetric boundary reflection: `-1 -> 0`, `n -> n - 1`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalized Gaussian taps truncated at `4 sigma`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with reflected borders; `sigma = 0` is the
/// identity.
pub fn gaussian_blur(t: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let [c, h, w] = t.chw()?;
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(invalid!("blur sigma must be a finite non-negative number, got {}", sigma));
    }
    if sigma == 0.0 {
        return Ok(t.clone());
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0f64; c * h * w];
    for p in 0..c {
        for y in 0..h {
            let row = &t.data()[(p * h + y) * w..][..w];
            for x in 0..w {
                tmp[(p * h + y) * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, tap)| tap * row[reflect(x as isize + k as isize - r, w)] as f64)
                    .sum();
            }
        }
    }
    let mut out = vec![0f32; c * h * w];
    for p in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(p * h + y) * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, tap)| tap * tmp[(p * h + reflect(y as isize + k as isize - r, h)) * w + x])
                    .sum::<f64>() as f32;
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Rec. 601 luma as an `[H, W]` plane.
pub fn luma(img: &ImageTensor) -> Vec<f32> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect()
}

/// 3x3 Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}
