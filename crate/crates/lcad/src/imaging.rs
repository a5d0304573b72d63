//! CIELAB color math, grayscale extraction, and PNG I/O.
//!
//! Images are real-valued planar `[channel][y][x]` buffers; quantization to
//! 8 bits happens only at the PNG boundary. All conversions use sRGB
//! primaries with the D65/2° white point.

use std::path::Path;

use lcad_grad::Tensor;

use crate::error::{Error, Result};

pub const MIN_DIM: usize = 8;

const XN: f64 = 0.95047;
const YN: f64 = 1.0;
const ZN: f64 = 1.08883;

// sRGB (linear) -> XYZ, D65
const M_FWD: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

// XYZ -> sRGB (linear): the exact f64 inverse of M_FWD, so the conversion
// pair inverts to machine precision instead of the ~1e-7 of the published
// 7-digit constants.
#[allow(clippy::needless_range_loop)]
fn m_inv() -> &'static [[f64; 3]; 3] {
    static INV: std::sync::OnceLock<[[f64; 3]; 3]> = std::sync::OnceLock::new();
    INV.get_or_init(|| {
        let m = &M_FWD;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let c = |r: usize, cidx: usize| -> f64 {
            let (r1, r2) = match r {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c1, c2) = match cidx {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1];
            let sign = if (r + cidx).is_multiple_of(2) { 1.0 } else { -1.0 };
            sign * minor
        };
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for cc in 0..3 {
                inv[r][cc] = c(cc, r) / det;
            }
        }
        inv
    })
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// One sRGB pixel to (L, a, b).
pub fn rgb_pixel_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (rl, gl, bl) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = M_FWD[0][0] * rl + M_FWD[0][1] * gl + M_FWD[0][2] * bl;
    let y = M_FWD[1][0] * rl + M_FWD[1][1] * gl + M_FWD[1][2] * bl;
    let z = M_FWD[2][0] * rl + M_FWD[2][1] * gl + M_FWD[2][2] * bl;
    let fx = lab_f(x / XN);
    let fy = lab_f(y / YN);
    let fz = lab_f(z / ZN);
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// One (L, a, b) pixel to sRGB, clipped to [0,1].
pub fn lab_pixel_to_rgb(l: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let x = XN * lab_f_inv(fx);
    let y = YN * lab_f_inv(fy);
    let z = ZN * lab_f_inv(fz);
    let mi = m_inv();
    let rl = mi[0][0] * x + mi[0][1] * y + mi[0][2] * z;
    let gl = mi[1][0] * x + mi[1][1] * y + mi[1][2] * z;
    let bl = mi[2][0] * x + mi[2][1] * y + mi[2][2] * z;
    (
        linear_to_srgb(rl).clamp(0.0, 1.0),
        linear_to_srgb(gl).clamp(0.0, 1.0),
        linear_to_srgb(bl).clamp(0.0, 1.0),
    )
}

/// Whether a Lab triple maps into the sRGB cube without clipping.
pub fn lab_in_gamut(l: f64, a: f64, b: f64) -> bool {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let x = XN * lab_f_inv(fx);
    let y = YN * lab_f_inv(fy);
    let z = ZN * lab_f_inv(fz);
    let mi = m_inv();
    let rl = mi[0][0] * x + mi[0][1] * y + mi[0][2] * z;
    let gl = mi[1][0] * x + mi[1][1] * y + mi[1][2] * z;
    let bl = mi[2][0] * x + mi[2][1] * y + mi[2][2] * z;
    let eps = 1e-9;
    [rl, gl, bl].iter().all(|&c| (-eps..=1.0 + eps).contains(&c))
}

/// sRGB image, channels-first planes, every value in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>, // [3][H][W]
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_DIM || width < MIN_DIM {
            return Err(Error::Validation(format!(
                "image {height}x{width} below minimum {MIN_DIM}x{MIN_DIM}"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Validation(format!(
                "rgb buffer length {} != 3*{height}*{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("rgb channel value {v} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = vec![0.0; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    data[c * height * width + y * width + x] = px[c];
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let hw = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![3, self.height, self.width], self.data.clone())
    }

    /// Clamp a `[3,H,W]` tensor into a valid image.
    pub fn from_tensor_clipped(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected [3,H,W], got {s:?}")));
        }
        Self::new(s[1], s[2], t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

/// CIELAB image: L plane in [0,100], a/b planes in [-128,127].
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    data: Vec<f64>, // [3][H][W]: L, a, b
}

impl LabImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Validation("lab buffer length mismatch".into()));
        }
        let hw = height * width;
        if let Some(v) = data[..hw].iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Validation(format!("L value {v} outside [0,100]")));
        }
        if let Some(v) = data[hw..].iter().find(|v| !(-128.0..=127.0).contains(*v)) {
            return Err(Error::Validation(format!("a/b value {v} outside [-128,127]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn l(&self) -> &[f64] {
        &self.data[..self.height * self.width]
    }

    pub fn a(&self) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[hw..2 * hw]
    }

    pub fn b(&self) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[2 * hw..]
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let hw = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }
}

/// Grayscale conditioning signal: the Lab L channel, in [0,100].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    l: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, l: Vec<f64>) -> Result<Self> {
        if l.len() != height * width {
            return Err(Error::Validation("gray buffer length mismatch".into()));
        }
        if let Some(v) = l.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Validation(format!("L value {v} outside [0,100]")));
        }
        Ok(Self { height, width, l })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn l(&self) -> &[f64] {
        &self.l
    }

    /// `[1,H,W]` tensor with L rescaled to [0,1].
    pub fn to_tensor_norm(&self) -> Tensor {
        Tensor::from_vec(
            vec![1, self.height, self.width],
            self.l.iter().map(|&v| v / 100.0).collect(),
        )
    }

    /// Achromatic sRGB rendering of the L channel.
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.height, self.width, |y, x| {
            let (r, g, b) = lab_pixel_to_rgb(self.l[y * self.width + x], 0.0, 0.0);
            [r, g, b]
        })
        .expect("gray rendering is always a valid image")
    }
}

/// Standard sRGB -> CIELAB under D65, pixel-wise and deterministic.
pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("rgb channel value {v} outside [0,1]")));
    }
    let hw = img.height * img.width;
    let mut data = vec![0.0; 3 * hw];
    for i in 0..hw {
        let (l, a, b) = rgb_pixel_to_lab(img.data[i], img.data[hw + i], img.data[2 * hw + i]);
        // The sRGB matrix rows sum to 1 only to ~7 digits, so pure white can
        // land a few 1e-6 above 100; pin the result into the declared range.
        data[i] = l.clamp(0.0, 100.0);
        data[hw + i] = a.clamp(-128.0, 127.0);
        data[2 * hw + i] = b.clamp(-128.0, 127.0);
    }
    LabImage::new(img.height, img.width, data)
}

/// Inverse of [`rgb_to_lab`] on in-gamut pixels; out-of-gamut results are
/// clipped to [0,1].
pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    let hw = img.height * img.width;
    let mut data = vec![0.0; 3 * hw];
    for i in 0..hw {
        let (r, g, b) = lab_pixel_to_rgb(img.data[i], img.data[hw + i], img.data[2 * hw + i]);
        data[i] = r;
        data[hw + i] = g;
        data[2 * hw + i] = b;
    }
    RgbImage { height: img.height, width: img.width, data }
}

/// The L channel of `rgb_to_lab(img)`, exactly.
pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let lab = rgb_to_lab(img).expect("validated image");
    GrayImage { height: img.height, width: img.width, l: lab.data[..img.height * img.width].to_vec() }
}

/// Load an 8-bit RGB PNG.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, format!("not a decodable PNG: {e}")))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

/// Save as 8-bit RGB PNG (no alpha); values are rounded to 1/255 steps.
pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let hw = h * w;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = [
                (img.data[i] * 255.0).round().clamp(0.0, 255.0) as u8,
                (img.data[hw + i] * 255.0).round().clamp(0.0, 255.0) as u8,
                (img.data[2 * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, e))
}
