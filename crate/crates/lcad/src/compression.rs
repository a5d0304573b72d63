//! Pixel-space stage: compression encoder/decoder, luminance encoder with
//! multi-scale decoder injection, artifact-weighted reconstruction loss,
//! patch discriminator, and a fixed gradient-magnitude perceptual proxy.
//!
//! Encoders are plain conv + SiLU stacks with reflective padding (no
//! normalization layers), so features propagate constants and stay local:
//! a one-pixel input change can only move features inside the receptive
//! field.

use lcad_grad::nn::{Conv2d, Graph, ParamStore};
use lcad_grad::ops::{self, PadMode};
use lcad_grad::{ParamId, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, RgbImage};

#[derive(Clone, Debug)]
pub struct CompressionConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    /// Channel widths at full / half / quarter resolution.
    pub widths: [usize; 3],
    pub disc_width: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self { image_size: 64, latent_channels: 4, widths: [16, 32, 64], disc_width: 32 }
    }
}

impl CompressionConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(4) {
            return Err(Error::Config("image_size must be divisible by 4".into()));
        }
        Ok(())
    }
}

/// Multi-scale luminance features at full, 1/2 and 1/4 resolution.
pub struct LuminancePyramid {
    pub levels: Vec<Var>,
}

impl LuminancePyramid {
    /// Detached tensor copies, for caching across training steps.
    pub fn values(&self) -> Vec<Tensor> {
        self.levels.iter().map(|v| v.value().clone()).collect()
    }
}

struct ConvStack {
    conv_in: Conv2d,
    block0: Conv2d,
    down1: Conv2d,
    block1: Conv2d,
    down2: Conv2d,
    block2: Conv2d,
}

impl ConvStack {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, w: [usize; 3], rng: &mut impl Rng) -> Self {
        let r = PadMode::Reflect;
        Self {
            conv_in: Conv2d::new(store, &format!("{prefix}.conv_in"), cin, w[0], 3, 1, 1, r, rng),
            block0: Conv2d::new(store, &format!("{prefix}.block0"), w[0], w[0], 3, 1, 1, r, rng),
            down1: Conv2d::new(store, &format!("{prefix}.down1"), w[0], w[1], 3, 2, 1, r, rng),
            block1: Conv2d::new(store, &format!("{prefix}.block1"), w[1], w[1], 3, 1, 1, r, rng),
            down2: Conv2d::new(store, &format!("{prefix}.down2"), w[1], w[2], 3, 2, 1, r, rng),
            block2: Conv2d::new(store, &format!("{prefix}.block2"), w[2], w[2], 3, 1, 1, r, rng),
        }
    }

    /// Taps after each scale's block, coarsest last.
    fn forward_taps(&self, g: &Graph, x: &Var) -> [Var; 3] {
        let t = g.tape;
        let h = ops::silu(t, &self.conv_in.forward(g, x));
        let tap0 = ops::silu(t, &self.block0.forward(g, &h));
        let h = ops::silu(t, &self.down1.forward(g, &tap0));
        let tap1 = ops::silu(t, &self.block1.forward(g, &h));
        let h = ops::silu(t, &self.down2.forward(g, &tap1));
        let tap2 = ops::silu(t, &self.block2.forward(g, &h));
        [tap0, tap1, tap2]
    }
}

pub struct PixelModel {
    pub cfg: CompressionConfig,
    enc: ConvStack,
    enc_head: Conv2d,
    lum: ConvStack,
    dec_in: Conv2d,
    dec_block2: Conv2d,
    dec_up1: Conv2d,
    dec_block1: Conv2d,
    dec_up0: Conv2d,
    dec_block0: Conv2d,
    dec_out: Conv2d,
    inj: [Conv2d; 3],
    disc1: Conv2d,
    disc2: Conv2d,
    disc3: Conv2d,
    pub stats_mean: ParamId,
    pub stats_std: ParamId,
}

pub const PREFIX_ENC: &str = "pix.enc.";
pub const PREFIX_DEC: &str = "pix.dec.";
pub const PREFIX_LUM: &str = "pix.lum.";
pub const PREFIX_INJ: &str = "pix.inj.";
pub const PREFIX_DISC: &str = "pix.disc.";
pub const PREFIX_ALL: &str = "pix.";

impl PixelModel {
    pub fn new(store: &mut ParamStore, cfg: CompressionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths;
        let r = PadMode::Reflect;
        let enc = ConvStack::new(store, "pix.enc", 3, w, rng);
        let enc_head = Conv2d::new(store, "pix.enc.head", w[2], cfg.latent_channels, 3, 1, 1, r, rng);
        let lum = ConvStack::new(store, "pix.lum", 1, w, rng);
        let dec_in = Conv2d::new(store, "pix.dec.conv_in", cfg.latent_channels, w[2], 3, 1, 1, r, rng);
        let dec_block2 = Conv2d::new(store, "pix.dec.block2", w[2], w[2], 3, 1, 1, r, rng);
        let dec_up1 = Conv2d::new(store, "pix.dec.up1", w[2], w[1], 3, 1, 1, r, rng);
        let dec_block1 = Conv2d::new(store, "pix.dec.block1", w[1], w[1], 3, 1, 1, r, rng);
        let dec_up0 = Conv2d::new(store, "pix.dec.up0", w[1], w[0], 3, 1, 1, r, rng);
        let dec_block0 = Conv2d::new(store, "pix.dec.block0", w[0], w[0], 3, 1, 1, r, rng);
        let dec_out = Conv2d::new(store, "pix.dec.out", w[0], 3, 3, 1, 1, r, rng);
        // zero-initialized injections: fine-tuning starts exactly at the
        // pretrained reconstruction and the pyramid's influence grows from
        // zero (a random start saturates the output sigmoid)
        let inj = [
            Conv2d::new_proj_zeroed(store, "pix.inj.lvl0", w[0], w[0]),
            Conv2d::new_proj_zeroed(store, "pix.inj.lvl1", w[1], w[1]),
            Conv2d::new_proj_zeroed(store, "pix.inj.lvl2", w[2], w[2]),
        ];
        let dw = cfg.disc_width;
        let disc1 = Conv2d::new(store, "pix.disc.c1", 3, dw, 4, 2, 1, PadMode::Zero, rng);
        let disc2 = Conv2d::new(store, "pix.disc.c2", dw, 2 * dw, 4, 2, 1, PadMode::Zero, rng);
        // zero-init head: the critic's verdict (and so the generator-side
        // adversarial gradient) grows from zero as the critic trains,
        // instead of injecting a random O(1) gradient into a loss whose
        // reconstruction term is a per-pixel mean
        let disc3 = Conv2d::new_zeroed(store, "pix.disc.c3", 2 * dw, 1, 3, 1, 1, PadMode::Zero);
        let stats_mean = store.add("pix.stats.mean", Tensor::zeros([cfg.latent_channels]), false);
        let stats_std = store.add("pix.stats.std", Tensor::full([cfg.latent_channels], 1.0), false);
        Ok(Self {
            cfg,
            enc,
            enc_head,
            lum,
            dec_in,
            dec_block2,
            dec_up1,
            dec_block1,
            dec_up0,
            dec_block0,
            dec_out,
            inj,
            disc1,
            disc2,
            disc3,
            stats_mean,
            stats_std,
        })
    }

    /// Encode a `[3,H,W]` var into a `[C_z, H/4, W/4]` latent.
    pub fn encode(&self, g: &Graph, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "encoder expects [3, H, W] with H, W divisible by 4, got {s:?}"
            )));
        }
        let taps = self.enc.forward_taps(g, x);
        Ok(self.enc_head.forward(g, &taps[2]))
    }

    pub fn encode_image(&self, g: &Graph, img: &RgbImage) -> Result<Var> {
        let x = g.tape.constant(img.to_tensor());
        self.encode(g, &x)
    }

    /// Multi-scale features from a grayscale plane (`[1,H,W]`, L/100).
    pub fn luminance(&self, g: &Graph, gray: &Var) -> Result<LuminancePyramid> {
        let s = gray.shape();
        if s.len() != 3 || s[0] != 1 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "luminance encoder expects [1, H, W] with H, W divisible by 4, got {s:?}"
            )));
        }
        let taps = self.lum.forward_taps(g, gray);
        Ok(LuminancePyramid { levels: taps.to_vec() })
    }

    pub fn luminance_of_gray(&self, g: &Graph, gray: &GrayImage) -> Result<LuminancePyramid> {
        let x = g.tape.constant(gray.to_tensor_norm());
        self.luminance(g, &x)
    }

    /// Decode a latent, optionally guided by the luminance pyramid. Each
    /// pyramid level is channel-projected (no bias) and added at its scale,
    /// so a zero or absent pyramid gives the identical pure-latent path.
    pub fn decode(&self, g: &Graph, z: &Var, pyr: Option<&LuminancePyramid>) -> Result<Var> {
        let t = g.tape;
        if let Some(p) = pyr {
            if p.levels.len() != 3 {
                return Err(Error::Shape(format!(
                    "expected a 3-level pyramid, got {}",
                    p.levels.len()
                )));
            }
        }
        let mut h = ops::silu(t, &self.dec_in.forward(g, z));
        if let Some(p) = pyr {
            h = ops::add(t, &h, &self.inj[2].forward(g, &p.levels[2]));
        }
        let h = ops::silu(t, &self.dec_block2.forward(g, &h));
        let h = ops::upsample_nearest2x(t, &h);
        let mut h = ops::silu(t, &self.dec_up1.forward(g, &h));
        if let Some(p) = pyr {
            h = ops::add(t, &h, &self.inj[1].forward(g, &p.levels[1]));
        }
        let h = ops::silu(t, &self.dec_block1.forward(g, &h));
        let h = ops::upsample_nearest2x(t, &h);
        let mut h = ops::silu(t, &self.dec_up0.forward(g, &h));
        if let Some(p) = pyr {
            h = ops::add(t, &h, &self.inj[0].forward(g, &p.levels[0]));
        }
        let h = ops::silu(t, &self.dec_block0.forward(g, &h));
        Ok(ops::sigmoid(t, &self.dec_out.forward(g, &h)))
    }

    /// Patch discriminator logits.
    pub fn discriminate(&self, g: &Graph, x: &Var) -> Var {
        let t = g.tape;
        let h = ops::leaky_relu(t, &self.disc1.forward(g, x), 0.2);
        let h = ops::leaky_relu(t, &self.disc2.forward(g, &h), 0.2);
        self.disc3.forward(g, &h)
    }

    /// Standardize a raw latent with the stored per-channel statistics.
    pub fn standardize(&self, store: &ParamStore, z: &Tensor) -> Tensor {
        let mean = store.get(self.stats_mean);
        let std = store.get(self.stats_std);
        per_channel_affine(z, mean.data(), std.data(), true)
    }

    pub fn unstandardize(&self, store: &ParamStore, z: &Tensor) -> Tensor {
        let mean = store.get(self.stats_mean);
        let std = store.get(self.stats_std);
        per_channel_affine(z, mean.data(), std.data(), false)
    }
}

fn per_channel_affine(z: &Tensor, mean: &[f64], std: &[f64], forward: bool) -> Tensor {
    let s = z.shape();
    assert_eq!(s.len(), 3);
    let (c, hw) = (s[0], s[1] * s[2]);
    assert_eq!(c, mean.len());
    let mut out = z.data().to_vec();
    for ci in 0..c {
        for i in 0..hw {
            let v = &mut out[ci * hw + i];
            if forward {
                *v = (*v - mean[ci]) / std[ci];
            } else {
                *v = *v * std[ci] + mean[ci];
            }
        }
    }
    Tensor::from_vec(s.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Artifact map (windowed variance of the residual)
// ---------------------------------------------------------------------------

/// Local variance of the residual over an `n_win x n_win` window centered at
/// each pixel, reflective padding, channels averaged into one `[H,W]` map.
pub fn artifact_map(residual: &Tensor, n_win: usize) -> Result<Tensor> {
    if n_win < 3 || n_win.is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "artifact window must be odd and >= 3, got {n_win}"
        )));
    }
    if !residual.is_finite() {
        return Err(Error::Validation("residual contains non-finite values".into()));
    }
    let s = residual.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("residual must be [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let pad = n_win / 2;
    if pad >= h || pad >= w {
        return Err(Error::Validation(format!(
            "window {n_win} too large for {h}x{w} residual"
        )));
    }
    let n2 = (n_win * n_win) as f64;
    let mut map = vec![0.0; h * w];
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; ph * pw];
    for ci in 0..c {
        let plane = &residual.data()[ci * h * w..(ci + 1) * h * w];
        for py in 0..ph {
            let sy = reflect(py as isize - pad as isize, h as isize) as usize;
            for px in 0..pw {
                let sx = reflect(px as isize - pad as isize, w as isize) as usize;
                padded[py * pw + px] = plane[sy * w + sx];
            }
        }
        // summed-area tables over the padded plane
        let mut s1 = vec![0.0; (ph + 1) * (pw + 1)];
        let mut s2 = vec![0.0; (ph + 1) * (pw + 1)];
        for y in 0..ph {
            for x in 0..pw {
                let v = padded[y * pw + x];
                s1[(y + 1) * (pw + 1) + x + 1] =
                    v + s1[y * (pw + 1) + x + 1] + s1[(y + 1) * (pw + 1) + x] - s1[y * (pw + 1) + x];
                s2[(y + 1) * (pw + 1) + x + 1] = v * v
                    + s2[y * (pw + 1) + x + 1]
                    + s2[(y + 1) * (pw + 1) + x]
                    - s2[y * (pw + 1) + x];
            }
        }
        let window = |s: &[f64], y: usize, x: usize| -> f64 {
            let (y1, x1) = (y + n_win, x + n_win);
            s[y1 * (pw + 1) + x1] - s[y * (pw + 1) + x1] - s[y1 * (pw + 1) + x] + s[y * (pw + 1) + x]
        };
        for y in 0..h {
            for x in 0..w {
                let sum = window(&s1, y, x);
                let sq = window(&s2, y, x);
                let mean = sum / n2;
                map[y * w + x] += (sq / n2 - mean * mean).max(0.0);
            }
        }
    }
    let invc = 1.0 / c as f64;
    for v in &mut map {
        *v *= invc;
    }
    Ok(Tensor::from_vec(vec![h, w], map))
}

fn reflect(i: isize, n: isize) -> isize {
    if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    }
}

// ---------------------------------------------------------------------------
// Perceptual proxy and pixel loss
// ---------------------------------------------------------------------------

/// Pluggable perceptual distance; the default is a fixed (untrained)
/// multi-scale gradient-magnitude similarity.
pub trait PerceptualMeasure {
    fn loss(&self, g: &Graph, x: &Var, xt: &Var) -> Var;
}

pub struct GradMagPerceptual;

impl GradMagPerceptual {
    fn grad_mag(g: &Graph, img: &Var) -> Var {
        let t = g.tape;
        let kx = t.constant(Tensor::from_vec(
            vec![1, 1, 3, 3],
            vec![-0.25, 0.0, 0.25, -0.5, 0.0, 0.5, -0.25, 0.0, 0.25],
        ));
        let ky = t.constant(Tensor::from_vec(
            vec![1, 1, 3, 3],
            vec![-0.25, -0.5, -0.25, 0.0, 0.0, 0.0, 0.25, 0.5, 0.25],
        ));
        let gx = ops::conv2d(t, img, &kx, None, 1, 1, PadMode::Reflect);
        let gy = ops::conv2d(t, img, &ky, None, 1, 1, PadMode::Reflect);
        let gx2 = ops::square(t, &gx);
        let gy2 = ops::square(t, &gy);
        let sum = ops::add(t, &gx2, &gy2);
        ops::sqrt_eps(t, &sum, 1e-12)
    }
}

impl PerceptualMeasure for GradMagPerceptual {
    fn loss(&self, g: &Graph, x: &Var, xt: &Var) -> Var {
        let t = g.tape;
        let lx = ops::mean_channels(t, x);
        let lxt = ops::mean_channels(t, xt);
        let mut terms = Vec::new();
        for factor in [1usize, 2, 4] {
            let (a, b) = if factor == 1 {
                (lx.clone(), lxt.clone())
            } else {
                (ops::avg_pool(t, &lx, factor), ops::avg_pool(t, &lxt, factor))
            };
            let ga = Self::grad_mag(g, &a);
            let gb = Self::grad_mag(g, &b);
            let diff = ops::sub(t, &ga, &gb);
            terms.push(ops::mean_all(t, &ops::abs(t, &diff)));
        }
        let refs: Vec<(&Var, f64)> = terms.iter().map(|v| (v, 1.0 / 3.0)).collect();
        ops::lincomb(t, &refs)
    }
}

#[derive(Clone, Debug)]
pub struct PixelLossCfg {
    pub alpha: f64,
    pub beta: f64,
    pub n_win: usize,
}

impl Default for PixelLossCfg {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5, n_win: 7 }
    }
}

pub struct PixelLossOut {
    pub total: Var,
    pub rec: f64,
    pub dis: f64,
    pub per: f64,
    pub artifact: Tensor,
}

/// Gradient norm of the generator-side hinge term at the reconstruction,
/// measured on a probe tape. Used to scale the adversarial term so its
/// pull on x-tilde matches the (per-pixel mean) reconstruction term; an
/// unbalanced critic otherwise out-guns the mean-form L1 by orders of
/// magnitude and saturates the decoder.
fn disc_grad_norm(model: &PixelModel, store: &lcad_grad::ParamStore, xt: &Tensor) -> f64 {
    let tape = lcad_grad::Tape::new();
    let g = Graph::new(&tape, store);
    let leaf = tape.leaf(xt.clone());
    let logits = model.discriminate(&g, &leaf);
    let loss = ops::mul_scalar(&tape, &ops::mean_all(&tape, &logits), -1.0);
    let grads = tape.backward(&loss);
    grads.get(&leaf).map(|t| t.sq_norm().sqrt()).unwrap_or(0.0)
}

/// `L_pix = L_rec + alpha * L_dis + beta * L_per`, with the reconstruction
/// term weighted by `1 + M_art/max(M_art)`. Gradients do not flow through
/// the artifact map (it is recomputed from detached values each call).
/// The adversarial term enters the optimized total through an adaptive
/// weight that equalizes its gradient norm at x-tilde with the
/// reconstruction term's; the reported `dis` component stays unscaled.
pub fn pixel_loss(
    g: &Graph,
    model: &PixelModel,
    x: &Var,
    xt: &Var,
    cfg: &PixelLossCfg,
) -> Result<PixelLossOut> {
    let t = g.tape;
    if !x.value().is_finite() || !xt.value().is_finite() {
        return Err(Error::Validation("pixel_loss inputs must be finite".into()));
    }
    if x.shape() != xt.shape() {
        return Err(Error::Shape("pixel_loss shape mismatch".into()));
    }
    let residual = x.value().sub(xt.value());
    let art = artifact_map(&residual, cfg.n_win)?;
    let peak = art.max_abs();
    let weight = if peak > 0.0 {
        art.map(|v| 1.0 + v / peak)
    } else {
        art.map(|_| 1.0)
    };
    let diff = ops::sub(t, x, xt);
    let adiff = ops::abs(t, &diff);
    let weighted = ops::mul_map(t, &adiff, &weight);
    let rec = ops::mean_all(t, &weighted);

    let logits = model.discriminate(g, xt);
    let neg_mean = ops::mul_scalar(t, &ops::mean_all(t, &logits), -1.0);
    let disc_weight = if cfg.alpha == 0.0 {
        0.0
    } else {
        // |grad L_rec| at x-tilde is w/N per element (L1 subgradient)
        let n = x.value().numel() as f64;
        let rec_norm = (3.0 * weight.data().iter().map(|w| (w / n) * (w / n)).sum::<f64>()).sqrt();
        let dis_norm = disc_grad_norm(model, g.store, xt.value());
        (rec_norm / (dis_norm + 1e-10)).min(1e4)
    };

    let per = GradMagPerceptual.loss(g, x, xt);

    let total = ops::lincomb(
        t,
        &[(&rec, 1.0), (&neg_mean, cfg.alpha * disc_weight), (&per, cfg.beta)],
    );
    Ok(PixelLossOut {
        total,
        rec: rec.value().data()[0],
        dis: neg_mean.value().data()[0],
        per: per.value().data()[0],
        artifact: art,
    })
}

/// Hinge discriminator loss on a real image and a detached fake.
pub fn discriminator_loss(g: &Graph, model: &PixelModel, real: &Var, fake_detached: &Var) -> Var {
    let t = g.tape;
    let dr = model.discriminate(g, real);
    let df = model.discriminate(g, fake_detached);
    let one_minus = ops::add_scalar(t, &ops::mul_scalar(t, &dr, -1.0), 1.0);
    let real_term = ops::mean_all(t, &ops::relu(t, &one_minus));
    let one_plus = ops::add_scalar(t, &df, 1.0);
    let fake_term = ops::mean_all(t, &ops::relu(t, &one_plus));
    ops::lincomb(t, &[(&real_term, 1.0), (&fake_term, 1.0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcad_grad::fd::{finite_diff_grad, rel_err};
    use lcad_grad::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn model() -> (ParamStore, PixelModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let model = PixelModel::new(&mut store, CompressionConfig::default(), &mut rng).unwrap();
        (store, model)
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let (store, model) = model();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let img = crate::imaging::RgbImage::from_fn(64, 64, |_, _| {
            [rng.random(), rng.random(), rng.random()]
        })
        .unwrap();
        let run = || {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            model.encode_image(&g, &img).unwrap().value().clone()
        };
        let z1 = run();
        assert_eq!(z1.shape(), &[4, 16, 16]);
        assert_eq!(z1.data(), run().data());
        // wrong input shape errors
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let bad = tape.constant(Tensor::zeros([3, 30, 30]));
        assert!(model.encode(&g, &bad).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        // thin widths keep the FD loop fast
        let cfg = CompressionConfig { image_size: 16, widths: [4, 6, 8], ..Default::default() };
        let model = PixelModel::new(&mut store, cfg, &mut rng).unwrap();
        let x0 = Tensor::randn([3, 16, 16], &mut rng).map(|v| 0.5 + 0.1 * v.tanh());
        let loss_of = |xt: &Tensor| {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let x = tape.leaf(xt.clone());
            model.encode(&g, &x).unwrap().value().sum()
        };
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let x = tape.leaf(x0.clone());
        let z = model.encode(&g, &x).unwrap();
        let l = ops::sum_all(&tape, &z);
        let grads = tape.backward(&l);
        let analytic = grads.get(&x).unwrap();
        let numeric = finite_diff_grad(&x0, 1e-5, loss_of);
        let err = rel_err(analytic, &numeric);
        assert!(err < 1e-4, "encoder gradient rel err {err:.3e}");
    }

    #[test]
    fn luminance_pyramid_shapes_and_constant_propagation() {
        let (store, model) = model();
        let gray = crate::imaging::GrayImage::new(64, 64, vec![40.0; 4096]).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let pyr = model.luminance_of_gray(&g, &gray).unwrap();
        assert_eq!(pyr.levels.len(), 3);
        assert_eq!(pyr.levels[0].shape(), &[16, 64, 64]);
        assert_eq!(pyr.levels[1].shape(), &[32, 32, 32]);
        assert_eq!(pyr.levels[2].shape(), &[64, 16, 16]);
        for (s, lvl) in pyr.levels.iter().enumerate() {
            let v = lvl.value();
            let shape = v.shape().to_vec();
            let hw = shape[1] * shape[2];
            for c in 0..shape[0] {
                let plane = &v.data()[c * hw..(c + 1) * hw];
                let first = plane[0];
                for &p in plane {
                    assert!(
                        (p - first).abs() < 1e-5,
                        "level {s} channel {c} not constant: {p} vs {first}"
                    );
                }
            }
        }
    }

    #[test]
    fn luminance_features_stay_inside_the_receptive_field() {
        let (store, model) = model();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let base: Vec<f64> = (0..4096).map(|_| rng.random_range(20.0..80.0)).collect();
        let mut poked = base.clone();
        poked[32 * 64 + 32] += 15.0;
        let run = |l: &[f64]| {
            let gray = crate::imaging::GrayImage::new(64, 64, l.to_vec()).unwrap();
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            model
                .luminance_of_gray(&g, &gray)
                .unwrap()
                .levels
                .iter()
                .map(|v| v.value().clone())
                .collect::<Vec<_>>()
        };
        let a = run(&base);
        let b = run(&poked);
        // conv_in+block0 -> rf 5; +down1+block1 -> rf 11; +down2+block2 -> rf 23
        let radii = [2.0f64, 5.0, 11.0];
        for (lvl, (ta, tb)) in a.iter().zip(b.iter()).enumerate() {
            let stride = (1 << lvl) as f64;
            let shape = ta.shape().to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let i = ci * h * w + y * w + x;
                        if (ta.data()[i] - tb.data()[i]).abs() > 1e-12 {
                            // center of this output pixel in input coordinates
                            let cy = y as f64 * stride + (stride - 1.0) / 2.0;
                            let cx = x as f64 * stride + (stride - 1.0) / 2.0;
                            let dist = (cy - 32.0).abs().max((cx - 32.0).abs());
                            assert!(
                                dist <= radii[lvl] + stride,
                                "level {lvl}: change leaked to ({y},{x}), dist {dist}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn decode_output_shape_and_pyramid_contract() {
        let (store, model) = model();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z0 = Tensor::randn([4, 16, 16], &mut rng);
        let gray = crate::imaging::GrayImage::new(
            64,
            64,
            (0..4096).map(|i| (i % 97) as f64).collect(),
        )
        .unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let z = tape.constant(z0.clone());
        let pyr = model.luminance_of_gray(&g, &gray).unwrap();
        let out = model.decode(&g, &z, Some(&pyr)).unwrap();
        assert_eq!(out.shape(), &[3, 64, 64]);
        assert!(out.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        // zero pyramid decodes bit-identically to the no-pyramid path
        let zero_pyr = LuminancePyramid {
            levels: pyr
                .levels
                .iter()
                .map(|v| tape.constant(Tensor::zeros(v.shape().to_vec())))
                .collect(),
        };
        let with_zero = model.decode(&g, &z, Some(&zero_pyr)).unwrap();
        let without = model.decode(&g, &z, None).unwrap();
        assert_eq!(with_zero.value().data(), without.value().data());

        // level-count mismatch errors
        let short = LuminancePyramid { levels: pyr.levels[..2].to_vec() };
        assert!(model.decode(&g, &z, Some(&short)).is_err());
    }

    #[test]
    fn artifact_map_of_constant_residual_is_zero() {
        let r = Tensor::full([3, 16, 16], 0.37);
        let m = artifact_map(&r, 7).unwrap();
        assert!(m.data().iter().all(|&v| v.abs() < 1e-12));
        assert!(artifact_map(&r, 4).is_err());
        assert!(artifact_map(&r, 1).is_err());
    }

    #[test]
    fn artifact_map_impulse_matches_frozen_values() {
        // unit impulse at (8,8), window 3: every window containing the
        // impulse sees variance (1/9)((1-1/9)^2 + 8*(1/9)^2) = 8/81
        let mut d = vec![0.0; 3 * 256];
        for c in 0..3 {
            d[c * 256 + 8 * 16 + 8] = 1.0;
        }
        let r = Tensor::from_vec(vec![3, 16, 16], d);
        let m = artifact_map(&r, 3).unwrap();
        let want = 8.0 / 81.0;
        for y in 0..16 {
            for x in 0..16 {
                let v = m.data()[y * 16 + x];
                let hit = (7..=9).contains(&y) && (7..=9).contains(&x);
                if hit {
                    assert!((v - want).abs() < 1e-12, "({y},{x}) = {v}");
                } else {
                    assert!(v.abs() < 1e-12, "({y},{x}) = {v}");
                }
            }
        }
    }

    /// Direct sliding-window oracle with explicit reflect indexing.
    fn artifact_oracle(r: &Tensor, n_win: usize) -> Tensor {
        let s = r.shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let pad = n_win as isize / 2;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for ci in 0..c {
                    let plane = &r.data()[ci * h * w..(ci + 1) * h * w];
                    let mut vals = Vec::new();
                    for dy in -pad..=pad {
                        for dx in -pad..=pad {
                            let yy = reflect(y + dy, h as isize) as usize;
                            let xx = reflect(x + dx, w as isize) as usize;
                            vals.push(plane[yy * w as isize as usize + xx]);
                        }
                    }
                    let n = vals.len() as f64;
                    let mu = vals.iter().sum::<f64>() / n;
                    acc += vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                }
                out[(y * w as isize + x) as usize] = acc / c as f64;
            }
        }
        Tensor::from_vec(vec![h, w], out)
    }

    #[test]
    fn artifact_map_matches_brute_force_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        for trial in 0..100 {
            let r = Tensor::randn([3, 16, 16], &mut rng);
            for n_win in [3usize, 5, 7] {
                let got = artifact_map(&r, n_win).unwrap();
                let want = artifact_oracle(&r, n_win);
                let diff = got.max_abs_diff(&want);
                assert!(diff < 1e-10, "trial {trial} win {n_win}: {diff:e}");
            }
        }
    }

    #[test]
    fn artifact_map_is_shift_equivariant_and_offset_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let mut base = vec![0.0; 3 * 24 * 24];
        // structured residual confined to the interior
        for c in 0..3 {
            for y in 8..14 {
                for x in 8..14 {
                    base[c * 576 + y * 24 + x] = rng.random::<f64>() - 0.5;
                }
            }
        }
        let r = Tensor::from_vec(vec![3, 24, 24], base.clone());
        let (dy, dx) = (3usize, 2usize);
        let mut shifted = vec![0.0; 3 * 576];
        for c in 0..3 {
            for y in 0..24 {
                for x in 0..24 {
                    if y >= dy && x >= dx {
                        shifted[c * 576 + y * 24 + x] = base[c * 576 + (y - dy) * 24 + (x - dx)];
                    }
                }
            }
        }
        let rs = Tensor::from_vec(vec![3, 24, 24], shifted);
        let m = artifact_map(&r, 5).unwrap();
        let ms = artifact_map(&rs, 5).unwrap();
        // compare interior (away from borders by window + shift)
        for y in 6..16 {
            for x in 6..16 {
                let a = m.data()[y * 24 + x];
                let b = ms.data()[(y + dy) * 24 + x + dx];
                assert!((a - b).abs() < 1e-12, "({y},{x})");
            }
        }
        // adding a constant leaves the map unchanged
        let r_off = Tensor::from_vec(vec![3, 576], base).map(|v| v + 0.7).reshape(vec![3, 24, 24]);
        let mo = artifact_map(&r_off, 5).unwrap();
        assert!(m.max_abs_diff(&mo) < 1e-10);
    }

    #[test]
    fn pixel_loss_zero_at_identity_and_defaults() {
        let (store, model) = model();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x0 = Tensor::randn([3, 64, 64], &mut rng).map(|v| 0.5 + 0.2 * v.tanh());
        let cfg = PixelLossCfg::default();
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.n_win, 7);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let x = tape.constant(x0.clone());
        let xt = tape.constant(x0.clone());
        let out = pixel_loss(&g, &model, &x, &xt, &cfg).unwrap();
        assert_eq!(out.rec, 0.0);
        assert_eq!(out.per, 0.0);
        // non-finite input rejected
        let bad = tape.constant(Tensor::full([3, 64, 64], f64::NAN));
        assert!(pixel_loss(&g, &model, &x, &bad, &cfg).is_err());
    }

    #[test]
    fn sharp_errors_cost_more_than_smooth_errors() {
        let (store, model) = model();
        let x0 = Tensor::full([3, 64, 64], 0.5);
        // sharp: checkerboard +/-0.2 on a 12x12 patch (structured, high
        // local variance); smooth: a gentle global sine bump rescaled to
        // the same L1 energy (no sharp structure anywhere)
        let mut sharp_res = vec![0.0f64; 4096];
        for y in 26..38 {
            for x in 26..38 {
                sharp_res[y * 64 + x] = if (y + x) % 2 == 0 { 0.2 } else { -0.2 };
            }
        }
        let mut smooth_res: Vec<f64> = (0..4096)
            .map(|i| {
                let (y, x) = (i / 64, i % 64);
                let sy = (std::f64::consts::PI * y as f64 / 63.0).sin();
                let sx = (std::f64::consts::PI * x as f64 / 63.0).sin();
                sy * sx
            })
            .collect();
        let e_sharp: f64 = sharp_res.iter().map(|v| v.abs()).sum();
        let e_smooth: f64 = smooth_res.iter().map(|v| v.abs()).sum();
        let scale = e_sharp / e_smooth;
        for v in &mut smooth_res {
            *v *= scale;
        }
        let cfg = PixelLossCfg::default();
        let run = |res: &[f64]| {
            let mut xt = x0.data().to_vec();
            for c in 0..3 {
                for i in 0..4096 {
                    xt[c * 4096 + i] += res[i];
                }
            }
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let x = tape.constant(x0.clone());
            let xt = tape.constant(Tensor::from_vec(vec![3, 64, 64], xt));
            pixel_loss(&g, &model, &x, &xt, &cfg).unwrap().rec
        };
        let rec_sharp = run(&sharp_res);
        let rec_smooth = run(&smooth_res);
        assert!(
            rec_sharp > rec_smooth,
            "sharp {rec_sharp} should exceed smooth {rec_smooth}"
        );
    }

    #[test]
    fn latent_standardization_roundtrips() {
        let (mut store, model) = model();
        store.set(model.stats_mean, Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.0]));
        store.set(model.stats_std, Tensor::from_vec(vec![4], vec![2.0, 0.5, 1.5, 3.0]));
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let z = Tensor::randn([4, 16, 16], &mut rng);
        let back = model.unstandardize(&store, &model.standardize(&store, &z));
        assert!(z.max_abs_diff(&back) < 1e-12);
    }
}
