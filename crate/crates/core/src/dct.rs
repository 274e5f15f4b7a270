//! JPEG-style frequency front end.
//!
//! RGB pixels are converted to full-range YCbCr, each plane is cut into
//! N x N blocks and transformed with an orthonormal 2-D DCT-II, and the
//! lowest-frequency coefficients of every component (in zigzag order) become
//! the channels of the network input. Spatial size shrinks by N while the
//! channel count grows to at most 3N².

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape, Tensor3};

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, `R,G,B` per pixel.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Reads a binary PPM (P6) file.
    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode_ppm(&bytes)
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(b"P6") {
            return Err(Error::Format("expected a binary PPM (P6) image".into()));
        }
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm)
            .map_err(|e| Error::Format(format!("cannot decode PPM: {e}")))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_ppm())?;
        Ok(())
    }

    /// Bilinear resize.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let buf = image::RgbImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.clone(),
        )
        .ok_or_else(|| Error::DimensionMismatch("pixel buffer too small".into()))?;
        let out = image::imageops::resize(
            &buf,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::new(width, height, out.into_raw())
    }

    /// RGB tensor in `[0, 1]` for the spatial-domain networks.
    pub fn to_tensor(&self) -> FloatTensor {
        let shape = Shape::new(3, self.height, self.width);
        let mut t = FloatTensor::zeros(shape);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                for (c, &v) in p.iter().enumerate() {
                    *t.at_mut(c, y, x) = v as f64 / 255.0;
                }
            }
        }
        t
    }
}

/// A single real-valued image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {height}x{width} plane",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Y,
    Cb,
    Cr,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Y, Component::Cb, Component::Cr];

    fn index(self) -> usize {
        self as usize
    }
}

/// Full-range BT.601 (JPEG/JFIF) conversion, clamped to `[0, 255]`.
pub fn rgb_to_ycbcr(img: &RgbImage) -> [Plane; 3] {
    let (h, w) = (img.height, img.width);
    let mut planes = [Plane::zeros(h, w), Plane::zeros(h, w), Plane::zeros(h, w)];
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = img.pixel(x, y).map(f64::from);
            let luma = 0.299 * r + 0.587 * g + 0.114 * b;
            let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
            let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
            let i = y * w + x;
            planes[0].data[i] = luma.clamp(0.0, 255.0);
            planes[1].data[i] = cb.clamp(0.0, 255.0);
            planes[2].data[i] = cr.clamp(0.0, 255.0);
        }
    }
    planes
}

/// Orthonormal DCT-II matrix `D[k][n] = a(k) cos(pi (2n+1) k / 2N)`, row-major.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for k in 0..n {
        let alpha = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            d[k * n + i] = alpha * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    d
}

fn check_divisible(h: usize, w: usize, n: usize) -> Result<()> {
    if n == 0 || !h.is_multiple_of(n) {
        return Err(Error::NotDivisible {
            dim: "height",
            value: h,
            filter: n,
        });
    }
    if !w.is_multiple_of(n) {
        return Err(Error::NotDivisible {
            dim: "width",
            value: w,
            filter: n,
        });
    }
    Ok(())
}

/// Block DCT of one plane. Channel `u * N + v` of the result holds
/// coefficient `(u, v)` (vertical frequency `u`, horizontal `v`) of every block.
pub fn forward_block_dct(plane: &Plane, n: usize) -> Result<FloatTensor> {
    check_divisible(plane.height, plane.width, n)?;
    let d = dct_matrix(n);
    let (bh, bw) = (plane.height / n, plane.width / n);
    let mut out = FloatTensor::zeros(Shape::new(n * n, bh, bw));
    let mut tmp = vec![0.0; n * n];
    for by in 0..bh {
        for bx in 0..bw {
            // tmp = D * X
            for u in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += d[u * n + i] * plane.at(by * n + i, bx * n + j);
                    }
                    tmp[u * n + j] = s;
                }
            }
            // C = tmp * D^T
            for u in 0..n {
                for v in 0..n {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += tmp[u * n + j] * d[v * n + j];
                    }
                    *out.at_mut(u * n + v, by, bx) = s;
                }
            }
        }
    }
    Ok(out)
}

pub fn inverse_block_dct(coeffs: &FloatTensor, n: usize) -> Result<Plane> {
    if n == 0 || coeffs.shape.c != n * n {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficient channels for filter size {n}",
            coeffs.shape.c
        )));
    }
    let d = dct_matrix(n);
    let (bh, bw) = (coeffs.shape.h, coeffs.shape.w);
    let mut plane = Plane::zeros(bh * n, bw * n);
    let width = plane.width;
    let mut tmp = vec![0.0; n * n];
    for by in 0..bh {
        for bx in 0..bw {
            // tmp = D^T * C
            for i in 0..n {
                for v in 0..n {
                    let mut s = 0.0;
                    for u in 0..n {
                        s += d[u * n + i] * coeffs.at(u * n + v, by, bx);
                    }
                    tmp[i * n + v] = s;
                }
            }
            // X = tmp * D
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for v in 0..n {
                        s += tmp[i * n + v] * d[v * n + j];
                    }
                    plane.data[(by * n + i) * width + bx * n + j] = s;
                }
            }
        }
    }
    Ok(plane)
}

/// JPEG zigzag scan of an N x N block as `(row, col)` pairs.
pub fn zigzag_indices(n: usize) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(n * n);
    if n == 0 {
        return order;
    }
    for s in 0..(2 * n - 1) {
        let lo = s.saturating_sub(n - 1);
        let hi = s.min(n - 1);
        if s % 2 == 1 {
            order.extend((lo..=hi).map(|r| (r, s - r)));
        } else {
            order.extend((lo..=hi).rev().map(|r| (r, s - r)));
        }
    }
    order
}

/// Per-component channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelAllocation {
    pub y: usize,
    pub cb: usize,
    pub cr: usize,
}

impl ChannelAllocation {
    pub fn get(&self, c: Component) -> usize {
        match c {
            Component::Y => self.y,
            Component::Cb => self.cb,
            Component::Cr => self.cr,
        }
    }

    pub fn total(&self) -> usize {
        self.y + self.cb + self.cr
    }
}

/// 2:1:1 luma/chroma split of `k_total` channels, each component capped at
/// N² with any excess handed to the chroma components alternately.
pub fn allocate_channels(k_total: usize, n: usize) -> Result<ChannelAllocation> {
    let full = n * n;
    if k_total == 0 || k_total > 3 * full {
        return Err(Error::InvalidConfig(format!(
            "channels_kept must lie in [1, {}] for filter size {n}, got {k_total}",
            3 * full
        )));
    }
    let chroma = k_total / 4;
    let mut counts = [k_total - 2 * chroma, chroma, chroma];
    let mut spill = 0;
    for c in counts.iter_mut() {
        if *c > full {
            spill += *c - full;
            *c = full;
        }
    }
    let mut turn = 1;
    while spill > 0 {
        let idx = if counts[turn] < full {
            turn
        } else if counts[3 - turn] < full {
            3 - turn
        } else {
            0
        };
        counts[idx] += 1;
        spill -= 1;
        turn = 3 - turn;
    }
    Ok(ChannelAllocation {
        y: counts[0],
        cb: counts[1],
        cr: counts[2],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DctConfig {
    pub filter_size: usize,
    pub channels_kept: usize,
    #[serde(default)]
    pub normalize: bool,
}

impl DctConfig {
    pub fn new(filter_size: usize, channels_kept: usize) -> Result<Self> {
        let cfg = Self {
            filter_size,
            channels_kept,
            normalize: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.filter_size, 4 | 8) {
            return Err(Error::InvalidConfig(format!(
                "filter size must be 4 or 8, got {}",
                self.filter_size
            )));
        }
        allocate_channels(self.channels_kept, self.filter_size).map(|_| ())
    }

    pub fn full_channels(&self) -> usize {
        3 * self.filter_size * self.filter_size
    }
}

/// Provenance of one frequency channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelSource {
    pub component: Component,
    pub zigzag: usize,
}

/// Per-channel mean and standard deviation used to whiten coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Fits statistics over every spatial position of every tensor.
    pub fn fit(tensors: &[&FloatTensor]) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidConfig("no tensors to fit normalization".into()))?;
        let c = first.shape.c;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for t in tensors {
            if t.shape.c != c {
                return Err(Error::DimensionMismatch(
                    "normalization inputs disagree on channel count".into(),
                ));
            }
            for ch in 0..c {
                for &v in t.channel(ch) {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += t.shape.plane();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                // constant channels keep unit scale
                if var.sqrt() < 1e-12 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, t: &mut FloatTensor) -> Result<()> {
        if t.shape.c != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "normalization has {} channels, tensor has {}",
                self.mean.len(),
                t.shape.c
            )));
        }
        for c in 0..t.shape.c {
            let (m, s) = (self.mean[c], self.std[c]);
            t.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}

/// Network input in the frequency domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTensor {
    pub data: FloatTensor,
    pub channel_map: Vec<ChannelSource>,
    pub config: DctConfig,
    pub normalization: Option<NormalizationStats>,
}

/// Converts, transforms and sub-selects. Channel order is all Y channels in
/// ascending zigzag order, then Cb, then Cr. No normalization is applied.
pub fn preprocess(img: &RgbImage, cfg: &DctConfig) -> Result<FrequencyTensor> {
    cfg.validate()?;
    let n = cfg.filter_size;
    check_divisible(img.height, img.width, n)?;
    let alloc = allocate_channels(cfg.channels_kept, n)?;
    let zz = zigzag_indices(n);
    let planes = rgb_to_ycbcr(img);
    let shape = Shape::new(cfg.channels_kept, img.height / n, img.width / n);
    let mut data = FloatTensor::zeros(shape);
    let mut channel_map = Vec::with_capacity(cfg.channels_kept);
    for comp in Component::ALL {
        let coeffs = forward_block_dct(&planes[comp.index()], n)?;
        for (zigzag, &(u, v)) in zz.iter().enumerate().take(alloc.get(comp)) {
            let dst = channel_map.len();
            data.channel_mut(dst)
                .copy_from_slice(coeffs.channel(u * n + v));
            channel_map.push(ChannelSource {
                component: comp,
                zigzag,
            });
        }
    }
    Ok(FrequencyTensor {
        data,
        channel_map,
        config: *cfg,
        normalization: None,
    })
}

/// Preprocesses a batch; when `cfg.normalize` is set, statistics are fitted
/// on the batch itself and applied to every member.
pub fn preprocess_batch(images: &[RgbImage], cfg: &DctConfig) -> Result<Vec<FrequencyTensor>> {
    let mut out = images
        .iter()
        .map(|img| preprocess(img, cfg))
        .collect::<Result<Vec<_>>>()?;
    if cfg.normalize && !out.is_empty() {
        let stats = NormalizationStats::fit(&out.iter().map(|t| &t.data).collect::<Vec<_>>())?;
        for t in out.iter_mut() {
            t.normalize_with(&stats)?;
        }
    }
    Ok(out)
}

impl FrequencyTensor {
    pub fn shape(&self) -> Shape {
        self.data.shape
    }

    pub fn normalize_with(&mut self, stats: &NormalizationStats) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::InvalidConfig("tensor is already normalized".into()));
        }
        stats.apply(&mut self.data)?;
        self.normalization = Some(stats.clone());
        self.config.normalize = true;
        Ok(())
    }

    /// Inverse transform with every dropped coefficient set to zero.
    pub fn reconstruct(&self) -> Result<[Plane; 3]> {
        let mut data = self.data.clone();
        if let Some(stats) = &self.normalization {
            for c in 0..data.shape.c {
                let (m, s) = (stats.mean[c], stats.std[c]);
                data.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
            }
        }
        let n = self.config.filter_size;
        let zz = zigzag_indices(n);
        let shape = Shape::new(n * n, data.shape.h, data.shape.w);
        let mut full: [FloatTensor; 3] = std::array::from_fn(|_| Tensor3::zeros(shape));
        for (ch, src) in self.channel_map.iter().enumerate() {
            let (u, v) = zz[src.zigzag];
            full[src.component.index()]
                .channel_mut(u * n + v)
                .copy_from_slice(data.channel(ch));
        }
        let [y, cb, cr] = full;
        Ok([
            inverse_block_dct(&y, n)?,
            inverse_block_dct(&cb, n)?,
            inverse_block_dct(&cr, n)?,
        ])
    }
}
