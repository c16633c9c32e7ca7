//! Leaf-image preprocessing: grayscale, Otsu threshold, opening, largest
//! component, principal-axis alignment, crop and resize.
//!
//! Coordinates are `x` = column, `y` = row (pointing down). Angles are in
//! degrees in `(−90, 90]`, measured from the `x` axis towards `y`.

use std::collections::VecDeque;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit image, row-major, 1 or 3 interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::InvalidArgument(format!(
                "image must be nonempty with 1 or 3 channels, got {}x{}x{}",
                height, width, channels
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "{}x{}x{} image needs {} bytes, got {}",
                height,
                width,
                channels,
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let o = (row * self.width + col) * self.channels;
        &self.pixels[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [u8] {
        let o = (row * self.width + col) * self.channels;
        &mut self.pixels[o..o + self.channels]
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&p| [p, p, p]).collect(),
        }
    }

    /// `H×W×3` tensor with values in `[0, 1]`; gray is replicated.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let rgb = self.to_rgb();
        Tensor::new(
            vec![self.height, self.width, 3],
            rgb.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
        .expect("pixel count matches shape")
    }

    fn to_dynamic(&self) -> image::DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, self.pixels.clone()).expect("sized")),
            _ => image::DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, self.pixels.clone()).expect("sized")),
        }
    }

    fn from_dynamic(img: image::DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(g) => Image::new(h, w, 1, g.into_raw()).expect("sized"),
            other => Image::new(h, w, 3, other.to_rgb8().into_raw()).expect("sized"),
        }
    }

    /// Bilinear-family resize (triangle filter).
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("resize target must be nonempty".into()));
        }
        let out = self
            .to_dynamic()
            .resize_exact(width as u32, height as u32, image::imageops::FilterType::Triangle);
        let out = Image::from_dynamic(out);
        Ok(if self.channels == 1 && out.channels == 3 { to_grayscale(&out) } else { out })
    }
}

/// Reads a PNG or binary PPM/PGM file. Gray images keep one channel; any
/// other layout is converted to 8-bit RGB.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: cannot decode image: {}", path.display(), e)))?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(_) | image::DynamicImage::ImageRgb8(_) => Image::from_dynamic(img),
        other => Image::from_dynamic(image::DynamicImage::ImageRgb8(other.to_rgb8())),
    })
}

/// PNG bytes of `img`.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.to_dynamic()
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("cannot encode PNG: {}", e)))?;
    Ok(buf.into_inner())
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    img.to_dynamic()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: cannot write PNG: {}", path.display(), e)))
}

/// Luma `0.299 R + 0.587 G + 0.114 B`, rounded half up.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8)
        .collect();
    Image {
        height: img.height,
        width: img.width,
        channels: 1,
        pixels,
    }
}

pub fn histogram(gray: &Image) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &p in &gray.pixels {
        h[p as usize] += 1;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct OtsuResult {
    pub threshold: u8,
    /// Set when the image has a single gray level; `threshold` is that level.
    pub degenerate: bool,
}

/// Otsu's threshold on a 256-bin histogram with class 0 = `{p ≤ t}`.
///
/// The between-class variance at `t` is proportional to
/// `(N·S₀ − n₀·S)² / (n₀·n₁)`, where `n₀`, `S₀` are the count and
/// intensity sum of class 0 and `N`, `S` the totals. It is compared exactly;
/// ties go to the smallest `t`.
pub fn otsu_threshold(gray: &Image) -> Result<OtsuResult> {
    if gray.channels != 1 {
        return Err(Error::InvalidArgument("otsu_threshold expects a gray image".into()));
    }
    Ok(otsu_from_histogram(&histogram(gray)))
}

pub fn otsu_from_histogram(hist: &[u64; 256]) -> OtsuResult {
    let levels: Vec<usize> = (0..256).filter(|&v| hist[v] > 0).collect();
    if levels.len() <= 1 {
        return OtsuResult {
            threshold: levels.first().copied().unwrap_or(0) as u8,
            degenerate: true,
        };
    }
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let (n_b, s_b) = (BigInt::from(n), BigInt::from(s));
    let mut best: Option<(BigRational, u8)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for t in 0..256usize {
        n0 += hist[t];
        s0 += t as u64 * hist[t];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = &n_b * BigInt::from(s0) - BigInt::from(n0) * &s_b;
        let score = BigRational::new(&diff * &diff, BigInt::from(n0) * BigInt::from(n1));
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, t as u8));
        }
    }
    OtsuResult {
        threshold: best.expect("two levels give a split").1,
        degenerate: false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{}x{} mask needs {} bits, got {}",
                height,
                width,
                height * width,
                bits.len()
            )));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Count of set bits in every `(rows+1)×(cols+1)` prefix rectangle.
    fn integral(&self) -> Vec<u32> {
        let w = self.width + 1;
        let mut s = vec![0u32; (self.height + 1) * w];
        for r in 0..self.height {
            let mut row = 0;
            for c in 0..self.width {
                row += self.bits[r * self.width + c] as u32;
                s[(r + 1) * w + c + 1] = s[r * w + c + 1] + row;
            }
        }
        s
    }

    /// Set bits in the `k×k` window centred on each pixel, clipped to the mask.
    fn window_counts(&self, k: usize) -> Vec<u32> {
        let s = self.integral();
        let w = self.width + 1;
        let h = k / 2;
        let mut out = vec![0; self.bits.len()];
        for r in 0..self.height {
            let (r0, r1) = (r.saturating_sub(h), (r + h + 1).min(self.height));
            for c in 0..self.width {
                let (c0, c1) = (c.saturating_sub(h), (c + h + 1).min(self.width));
                out[r * self.width + c] = s[r1 * w + c1] + s[r0 * w + c0] - s[r0 * w + c1] - s[r1 * w + c0];
            }
        }
        out
    }

    pub fn erode(&self, k: usize) -> Mask {
        let full = (k * k) as u32;
        Mask {
            height: self.height,
            width: self.width,
            bits: self.window_counts(k).into_iter().map(|n| n == full).collect(),
        }
    }

    pub fn dilate(&self, k: usize) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.window_counts(k).into_iter().map(|n| n > 0).collect(),
        }
    }
}

/// Which side of the threshold is foreground.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// `p ≤ t`: dark objects on a bright background.
    #[default]
    Dark,
    /// `p > t`.
    Bright,
}

pub fn threshold_mask(gray: &Image, t: u8, polarity: Polarity) -> Result<Mask> {
    if gray.channels != 1 {
        return Err(Error::InvalidArgument("threshold_mask expects a gray image".into()));
    }
    let bits = gray
        .pixels
        .iter()
        .map(|&p| match polarity {
            Polarity::Dark => p <= t,
            Polarity::Bright => p > t,
        })
        .collect();
    Mask::new(gray.height, gray.width, bits)
}

/// Erosion then dilation with a `k×k` square; pixels outside the mask
/// count as background.
pub fn morphological_open(mask: &Mask, kernel_size: usize) -> Result<Mask> {
    if kernel_size < 3 || kernel_size % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "opening kernel must be odd and >= 3, got {}",
            kernel_size
        )));
    }
    Ok(mask.erode(kernel_size).dilate(kernel_size))
}

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub mask: Mask,
    pub bbox: BBox,
    pub area: usize,
}

/// Largest 8-connected component; equal areas go to the component whose
/// bounding box is top-most, then left-most.
pub fn largest_component(mask: &Mask) -> Result<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![0u32; h * w];
    let mut best: Option<(usize, BBox, u32)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut area = 0;
        let mut bb = BBox {
            top: start / w,
            left: start % w,
            bottom: start / w,
            right: start % w,
        };
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (r, c) = (i / w, i % w);
            bb.top = bb.top.min(r);
            bb.bottom = bb.bottom.max(r);
            bb.left = bb.left.min(c);
            bb.right = bb.right.max(c);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask.bits[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        let better = match &best {
            None => true,
            Some((a, b, _)) => area > *a || (area == *a && (bb.top, bb.left) < (b.top, b.left)),
        };
        if better {
            best = Some((area, bb, next));
        }
    }
    let (area, bbox, id) = best.ok_or_else(|| Error::Data("no foreground".into()))?;
    Ok(Component {
        mask: Mask {
            height: h,
            width: w,
            bits: label.iter().map(|&l| l == id).collect(),
        },
        bbox,
        area,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AxisAngle {
    pub degrees: f64,
    /// Central moments give no preferred direction (`μ₂₀ = μ₀₂`, `μ₁₁ = 0`).
    pub symmetric: bool,
    /// Centroid `(x, y)`.
    pub centroid: (f64, f64),
}

/// Major-axis orientation `θ = ½·atan2(2μ₁₁, μ₂₀ − μ₀₂)` from second-order
/// central moments. Moments are accumulated in exact integers (scaled by
/// the pixel count squared) so the symmetry test is exact.
pub fn principal_axis_angle(mask: &Mask) -> Result<AxisAngle> {
    let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0i128, 0i128, 0i128, 0i128, 0i128, 0i128);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                let (x, y) = (c as i128, r as i128);
                n += 1;
                sx += x;
                sy += y;
                sxx += x * x;
                syy += y * y;
                sxy += x * y;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("no foreground".into()));
    }
    let mu20 = n * sxx - sx * sx;
    let mu02 = n * syy - sy * sy;
    let mu11 = n * sxy - sx * sy;
    let centroid = (sx as f64 / n as f64, sy as f64 / n as f64);
    if mu20 == mu02 && mu11 == 0 {
        return Ok(AxisAngle {
            degrees: 0.0,
            symmetric: true,
            centroid,
        });
    }
    let mut deg = 0.5 * ((2 * mu11) as f64).atan2((mu20 - mu02) as f64).to_degrees();
    if deg <= -90.0 {
        deg += 180.0;
    }
    Ok(AxisAngle {
        degrees: deg,
        symmetric: false,
        centroid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub kernel_size: usize,
    pub target_size: usize,
    pub pad_margin: usize,
    pub polarity: Polarity,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            kernel_size: 5,
            target_size: 224,
            pad_margin: 4,
            polarity: Polarity::Dark,
        }
    }
}

/// Per-image record written next to each output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreprocessMeta {
    pub threshold: u8,
    pub angle_degrees: f64,
    pub symmetric: bool,
    pub bbox: BBox,
    pub component_area: usize,
    /// Size of the aligned crop before squaring and resizing.
    pub crop_height: usize,
    pub crop_width: usize,
    /// Background pixels inside the aligned crop divided by the background
    /// pixels of the source image (both at source resolution).
    pub background_retained: f64,
}

/// Bilinear sample at `(x, y)` in pixel-centre coordinates; neighbours
/// outside the image read as `fill`.
fn sample_bilinear(img: &Image, x: f64, y: f64, fill: u8, out: &mut [u8]) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |r: i64, c: i64, ch: usize| -> f64 {
        if r < 0 || c < 0 || r >= img.height as i64 || c >= img.width as i64 {
            fill as f64
        } else {
            img.pixel(r as usize, c as usize)[ch] as f64
        }
    };
    for (ch, o) in out.iter_mut().enumerate().take(img.channels) {
        let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x0 + 1, ch))
            + fy * ((1.0 - fx) * at(y0 + 1, x0, ch) + fx * at(y0 + 1, x0 + 1, ch));
        *o = v.round().clamp(0.0, 255.0) as u8;
    }
}

/// Rotates the source by `−θ` about the component centroid and crops the
/// rotated component bounds plus `margin`, filling with white.
fn align_and_crop(img: &Image, comp: &Component, axis: &AxisAngle, margin: usize) -> Image {
    let (cx, cy) = axis.centroid;
    let th = axis.degrees.to_radians();
    let (s, c) = th.sin_cos();
    let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for r in comp.bbox.top..=comp.bbox.bottom {
        for col in comp.bbox.left..=comp.bbox.right {
            if comp.mask.get(r, col) {
                let (dx, dy) = (col as f64 - cx, r as f64 - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u0 = u0.min(u);
                u1 = u1.max(u);
                v0 = v0.min(v);
                v1 = v1.max(v);
            }
        }
    }
    let m = margin as f64;
    let (u0, v0) = ((u0 - m).floor(), (v0 - m).floor());
    let width = ((u1 + m).ceil() - u0) as usize + 1;
    let height = ((v1 + m).ceil() - v0) as usize + 1;
    let mut out = Image::filled(height, width, img.channels, 255);
    let mut px = vec![0u8; img.channels];
    for r in 0..height {
        for col in 0..width {
            let (u, v) = (u0 + col as f64, v0 + r as f64);
            let x = cx + c * u - s * v;
            let y = cy + s * u + c * v;
            sample_bilinear(img, x, y, 255, &mut px);
            out.pixel_mut(r, col).copy_from_slice(&px);
        }
    }
    out
}

/// Centres the image on a white square canvas.
pub fn letterbox(img: &Image) -> Image {
    let side = img.height.max(img.width);
    let mut out = Image::filled(side, side, img.channels, 255);
    let (top, left) = ((side - img.height) / 2, (side - img.width) / 2);
    for r in 0..img.height {
        for c in 0..img.width {
            out.pixel_mut(top + r, left + c).copy_from_slice(img.pixel(r, c));
        }
    }
    out
}

/// Grayscale, Otsu, opening, largest component, alignment of the major axis
/// with the horizontal, crop with margin, letterbox to a square and resize
/// to `target_size`. The result is RGB.
pub fn preprocess_pipeline(img: &Image, cfg: &PreprocessConfig) -> Result<(Image, PreprocessMeta)> {
    if cfg.target_size == 0 {
        return Err(Error::InvalidArgument("target_size must be >= 1".into()));
    }
    let gray = to_grayscale(img);
    let otsu = otsu_threshold(&gray)?;
    if otsu.degenerate {
        return Err(Error::Data(format!("no foreground: image is uniformly {}", otsu.threshold)));
    }
    let raw = threshold_mask(&gray, otsu.threshold, cfg.polarity)?;
    let opened = morphological_open(&raw, cfg.kernel_size)?;
    let comp = largest_component(&opened)?;
    let axis = principal_axis_angle(&comp.mask)?;
    let rgb = img.to_rgb();
    let crop = align_and_crop(&rgb, &comp, &axis, cfg.pad_margin);

    let source_background = raw.bits.iter().filter(|&&b| !b).count();
    let crop_mask = threshold_mask(&to_grayscale(&crop), otsu.threshold, cfg.polarity)?;
    let crop_background = crop_mask.bits.iter().filter(|&&b| !b).count();
    let background_retained = crop_background as f64 / source_background.max(1) as f64;

    let out = letterbox(&crop).resize(cfg.target_size, cfg.target_size)?;
    let meta = PreprocessMeta {
        threshold: otsu.threshold,
        angle_degrees: axis.degrees,
        symmetric: axis.symmetric,
        bbox: comp.bbox,
        component_area: comp.area,
        crop_height: crop.height,
        crop_width: crop.width,
        background_retained,
    };
    Ok((out, meta))
}
