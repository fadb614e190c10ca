//! Image I/O and the modality extractors feeding the backbone columns:
//! intensity, edge maps, Gaussian scale space and optical-flow orientation.
//!
//! All filters are pure. `convolve2d` zero-pads; the edge and scale-space
//! filters clamp to the nearest border pixel so that flat regions, including
//! those touching the frame, produce no response.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    NotFound(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed PNM header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("kernel of size {size} needs {needed} weights, got {got}")]
    KernelWeights { size: usize, needed: usize, got: usize },
    #[error("expected a single-channel image, got {0} channels")]
    NotGray(usize),
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("unknown edge method '{0}' (expected canny, sobel or prewitt)")]
    UnknownEdgeMethod(String),
    #[error("scale parameter must be positive, got {0}")]
    BadScale(f64),
    #[error("invalid image: {0}")]
    Invalid(String),
}

/// Row-major image with interleaved channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Invalid(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        if data.len() != height * width * channels {
            return Err(ImageError::Invalid(format!(
                "buffer length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(ImageError::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        Self::new(height, width, 1, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels: 1,
            data: vec![value; height * width],
        }
    }

    /// Builds a gray image from a generator, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    /// Gray image without the `[0, 1]` range check; used for filter
    /// intermediates such as signed gradients.
    pub(crate) fn raw_gray(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            channels: 1,
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn require_gray(&self) -> Result<(), ImageError> {
        if self.channels != 1 {
            return Err(ImageError::NotGray(self.channels));
        }
        Ok(())
    }

    /// Encodes as binary PGM (gray) or PPM (RGB) with maxval 255.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(&self.to_pnm_bytes())
            .map_err(|source| ImageError::Io {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Reads a binary PGM (`P5`) or PPM (`P6`) file with maxval 255.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            ImageError::NotFound(path.to_path_buf())
        } else {
            ImageError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    decode_pnm(&bytes)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)
        .ok_or_else(|| ImageError::MalformedHeader("missing magic number".into()))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(ImageError::MalformedHeader(format!(
                "unsupported magic '{other}'"
            )))
        }
    };
    let mut field = |name: &str| -> Result<usize, ImageError> {
        let tok = next_token(bytes, &mut pos)
            .ok_or_else(|| ImageError::MalformedHeader(format!("missing {name}")))?;
        tok.parse::<usize>()
            .map_err(|_| ImageError::MalformedHeader(format!("bad {name} '{tok}'")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(ImageError::MalformedHeader(format!(
            "maxval {maxval} unsupported (expected 255)"
        )));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::TruncatedPayload {
            expected: width * height * channels,
            found: 0,
        });
    }
    pos += 1;
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(Image {
        height,
        width,
        channels,
        data,
    })
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        None
    } else {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    }
}

/// Luminance conversion (`0.299 R + 0.587 G + 0.114 B`); gray input is returned as-is.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    Image {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    }
}

/// Square odd-sized correlation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self, ImageError> {
        if size % 2 == 0 {
            return Err(ImageError::EvenKernel(size));
        }
        if weights.len() != size * size {
            return Err(ImageError::KernelWeights {
                size,
                needed: size * size,
                got: weights.len(),
            });
        }
        Ok(Self { size, weights })
    }

    pub fn identity(size: usize) -> Result<Self, ImageError> {
        let mut w = vec![0.0; size * size];
        if size % 2 == 1 {
            w[size * size / 2] = 1.0;
        }
        Self::new(size, w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn sobel_x() -> Self {
        Self::new(3, vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]).unwrap()
    }

    pub fn sobel_y() -> Self {
        Self::new(3, vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]).unwrap()
    }

    pub fn prewitt_x() -> Self {
        Self::new(3, vec![-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0]).unwrap()
    }

    pub fn prewitt_y() -> Self {
        Self::new(3, vec![-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()
    }

    /// Normalized 2-D Gaussian with standard deviation `sigma`, radius `ceil(3 sigma)`.
    pub fn gaussian(sigma: f64) -> Result<Self, ImageError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(ImageError::BadScale(sigma * sigma));
        }
        let r = (3.0 * sigma).ceil() as usize;
        let size = 2 * r + 1;
        let mut w = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let dy = i as f64 - r as f64;
                let dx = j as f64 - r as f64;
                w.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
            }
        }
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        Self::new(size, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Border {
    Zero,
    Replicate,
}

/// Same-size correlation with zero padding:
/// `out(y, x) = sum_ij img(y + i - r, x + j - r) * k(i, j)`.
pub fn convolve2d(img: &Image, kern: &Kernel) -> Result<Image, ImageError> {
    img.require_gray()?;
    Ok(correlate(img, kern, Border::Zero))
}

fn correlate(img: &Image, kern: &Kernel, border: Border) -> Image {
    let (h, w) = img.dims();
    let r = kern.radius() as isize;
    let k = kern.size();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..k {
                let sy = y as isize + i as isize - r;
                let sy = match border {
                    Border::Zero if sy < 0 || sy >= h as isize => continue,
                    Border::Zero => sy as usize,
                    Border::Replicate => sy.clamp(0, h as isize - 1) as usize,
                };
                let row = &img.data[sy * w..(sy + 1) * w];
                for j in 0..k {
                    let sx = x as isize + j as isize - r;
                    let sx = match border {
                        Border::Zero if sx < 0 || sx >= w as isize => continue,
                        Border::Zero => sx as usize,
                        Border::Replicate => sx.clamp(0, w as isize - 1) as usize,
                    };
                    acc += row[sx] * kern.weights[i * k + j];
                }
            }
            out[y * w + x] = acc;
        }
    }
    Image::raw_gray(h, w, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMethod {
    Canny,
    Sobel,
    Prewitt,
}

impl FromStr for EdgeMethod {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "canny" => Ok(Self::Canny),
            "sobel" => Ok(Self::Sobel),
            "prewitt" => Ok(Self::Prewitt),
            _ => Err(ImageError::UnknownEdgeMethod(s.to_string())),
        }
    }
}

impl fmt::Display for EdgeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Canny => "canny",
            Self::Sobel => "sobel",
            Self::Prewitt => "prewitt",
        })
    }
}

/// Canny settings. Thresholds are fractions of the maximum gradient magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            low: 0.1,
            high: 0.2,
        }
    }
}

pub fn edge_detect(img: &Image, method: EdgeMethod) -> Image {
    edge_detect_with(img, method, &CannyParams::default())
}

/// Edge map with explicit Canny parameters (ignored by sobel/prewitt).
pub fn edge_detect_with(img: &Image, method: EdgeMethod, canny: &CannyParams) -> Image {
    let gray = to_grayscale(img);
    match method {
        EdgeMethod::Sobel => {
            let (mag, _, _) = gradient(&gray, &Kernel::sobel_x(), &Kernel::sobel_y());
            normalize_by_max(mag)
        }
        EdgeMethod::Prewitt => {
            let (mag, _, _) = gradient(&gray, &Kernel::prewitt_x(), &Kernel::prewitt_y());
            normalize_by_max(mag)
        }
        EdgeMethod::Canny => canny_edges(&gray, canny),
    }
}

/// Responses below this are rounding residue of flat regions, not edges.
const GRADIENT_FLOOR: f64 = 1e-12;

fn gradient(img: &Image, kx: &Kernel, ky: &Kernel) -> (Image, Image, Image) {
    let flush = |mut g: Image| {
        g.data.iter_mut().filter(|v| v.abs() < GRADIENT_FLOOR).for_each(|v| *v = 0.0);
        g
    };
    let gx = flush(correlate(img, kx, Border::Replicate));
    let gy = flush(correlate(img, ky, Border::Replicate));
    let mag = gx
        .data
        .iter()
        .zip(&gy.data)
        .map(|(a, b)| a.hypot(*b))
        .collect();
    (Image::raw_gray(img.height, img.width, mag), gx, gy)
}

fn normalize_by_max(mut img: Image) -> Image {
    let max = img.data.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        img.data.iter_mut().for_each(|v| *v /= max);
    }
    img
}

fn canny_edges(gray: &Image, p: &CannyParams) -> Image {
    let (h, w) = gray.dims();
    let smooth = match Kernel::gaussian(p.sigma) {
        Ok(k) => correlate(gray, &k, Border::Replicate),
        Err(_) => gray.clone(),
    };
    let (mag, gx, gy) = gradient(&smooth, &Kernel::sobel_x(), &Kernel::sobel_y());
    let max = mag.data.iter().copied().fold(0.0, f64::max);
    let mut out = vec![0.0; h * w];
    if max <= 0.0 {
        return Image::raw_gray(h, w, out);
    }

    // non-maximum suppression along the gradient direction quantized to 4 bins
    let m = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag.data[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = mag.data[i];
            if v <= 0.0 {
                continue;
            }
            let mut angle = gy.data[i].atan2(gx.data[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (yi, xi) = (y as isize, x as isize);
            if v >= m(yi + dy, xi + dx) && v >= m(yi - dy, xi - dx) {
                thin[i] = v;
            }
        }
    }

    // hysteresis, 8-connected growth from strong pixels through weak ones
    let high = p.high * max;
    let low = p.low * max;
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high && v > 0.0 {
            out[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= low && thin[j] > 0.0 {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Image::raw_gray(h, w, out)
}

/// Gaussian scale-space image at variance `t` (sigma = sqrt t).
pub fn gaussian_scale(img: &Image, t: f64) -> Result<Image, ImageError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(ImageError::BadScale(t));
    }
    let kern = Kernel::gaussian(t.sqrt())?;
    let gray = to_grayscale(img);
    let mut out = correlate(&gray, &kern, Border::Replicate);
    // rounding can push a saturated pixel a hair above 1
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Dense per-pixel displacement between two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn mean_u(&self) -> f64 {
        self.u.iter().sum::<f64>() / self.u.len() as f64
    }

    pub fn mean_v(&self) -> f64 {
        self.v.iter().sum::<f64>() / self.v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HornSchunckParams {
    /// Smoothness weight, alpha squared.
    pub alpha2: f64,
    pub iterations: usize,
}

impl Default for HornSchunckParams {
    fn default() -> Self {
        Self {
            alpha2: 100.0,
            iterations: 100,
        }
    }
}

pub fn optical_flow(prev: &Image, next: &Image) -> Result<FlowField, ImageError> {
    optical_flow_with(prev, next, &HornSchunckParams::default())
}

/// Horn-Schunck flow with Jacobi updates.
pub fn optical_flow_with(
    prev: &Image,
    next: &Image,
    params: &HornSchunckParams,
) -> Result<FlowField, ImageError> {
    if prev.dims() != next.dims() {
        return Err(ImageError::DimensionMismatch(prev.dims(), next.dims()));
    }
    let a = to_grayscale(prev);
    let b = to_grayscale(next);
    let (h, w) = a.dims();
    let px = |img: &Image, y: usize, x: usize| -> f64 {
        img.data[y.min(h - 1) * w + x.min(w - 1)]
    };

    // derivative estimates averaged over the 2x2x2 cube
    let mut ix = vec![0.0; h * w];
    let mut iy = vec![0.0; h * w];
    let mut it = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (a00, a01, a10, a11) = (px(&a, y, x), px(&a, y, x + 1), px(&a, y + 1, x), px(&a, y + 1, x + 1));
            let (b00, b01, b10, b11) = (px(&b, y, x), px(&b, y, x + 1), px(&b, y + 1, x), px(&b, y + 1, x + 1));
            let i = y * w + x;
            ix[i] = 0.25 * ((a01 - a00) + (a11 - a10) + (b01 - b00) + (b11 - b10));
            iy[i] = 0.25 * ((a10 - a00) + (a11 - a01) + (b10 - b00) + (b11 - b01));
            it[i] = 0.25 * ((b00 - a00) + (b01 - a01) + (b10 - a10) + (b11 - a11));
        }
    }

    let mut flow = FlowField::zeros(h, w);
    let mut u_next = vec![0.0; h * w];
    let mut v_next = vec![0.0; h * w];
    for _ in 0..params.iterations {
        for y in 0..h {
            for x in 0..w {
                let (ubar, vbar) = neighbour_average(&flow.u, &flow.v, h, w, y, x);
                let i = y * w + x;
                let num = ix[i] * ubar + iy[i] * vbar + it[i];
                let den = params.alpha2 + ix[i] * ix[i] + iy[i] * iy[i];
                let step = num / den;
                u_next[i] = ubar - ix[i] * step;
                v_next[i] = vbar - iy[i] * step;
            }
        }
        std::mem::swap(&mut flow.u, &mut u_next);
        std::mem::swap(&mut flow.v, &mut v_next);
    }
    Ok(flow)
}

/// Horn-Schunck weighted neighbourhood: 1/6 for edge neighbours, 1/12 for corners,
/// border samples clamped.
fn neighbour_average(u: &[f64], v: &[f64], h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
    let at = |dy: isize, dx: isize| -> usize {
        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        yy * w + xx
    };
    let edges = [at(-1, 0), at(1, 0), at(0, -1), at(0, 1)];
    let corners = [at(-1, -1), at(-1, 1), at(1, -1), at(1, 1)];
    let mut su = 0.0;
    let mut sv = 0.0;
    for &i in &edges {
        su += u[i] / 6.0;
        sv += v[i] / 6.0;
    }
    for &i in &corners {
        su += u[i] / 12.0;
        sv += v[i] / 12.0;
    }
    (su, sv)
}

/// Per-pixel flow angle `atan2(v, u)` mapped from `(-pi, pi]` onto `[0, 1)`;
/// zero-length vectors map to 0.
pub fn flow_orientation(flow: &FlowField) -> Image {
    let data = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(&u, &v)| {
            if u == 0.0 && v == 0.0 {
                return 0.0;
            }
            let t = (v.atan2(u) + PI) / (2.0 * PI);
            if t >= 1.0 {
                t - 1.0
            } else {
                t
            }
        })
        .collect();
    Image::raw_gray(flow.height, flow.width, data)
}

/// Second frame for still images: content moved one pixel right and down,
/// with the vacated border replicated.
pub fn diagonal_shift(img: &Image) -> Image {
    let gray = to_grayscale(img);
    let (h, w) = gray.dims();
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            gray.data[y.saturating_sub(1) * w + x.saturating_sub(1)]
        })
        .collect();
    Image::raw_gray(h, w, data)
}
