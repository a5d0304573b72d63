//! Instance-aware sampling: per timestep, read the cross-attention maps,
//! nudge each bound color token's map toward the downsampled instance
//! contour with one BCE gradient step, re-predict with the refined maps as
//! overrides, then take the DDIM step.

use std::collections::BTreeMap;

use lcad_grad::nn::Graph;
use lcad_grad::{ParamStore, Tape, Tensor};

use crate::denoiser::{AttentionMapSet, Denoiser, OverrideSet};
use crate::diffusion::{cfg_combine, ddim_step, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::synthdata::{Description, Mask, Palette, SceneSample};
use crate::textenc::{TextEncoder, Vocabulary, PAD};

/// A ground-truth or user-supplied instance contour bound to the color
/// token it should steer.
#[derive(Clone, Debug)]
pub struct ContourMask {
    pub mask: Mask,
    pub instance_index: usize,
    pub token_pos: usize,
}

impl ContourMask {
    pub fn new(mask: Mask, instance_index: usize, token_pos: usize) -> Result<Self> {
        if mask.area() == 0 {
            return Err(Error::Validation("contour mask has no positive pixels".into()));
        }
        Ok(Self { mask, instance_index, token_pos })
    }
}

/// Build contour masks for every binding of a description from the scene's
/// ground-truth instance masks.
pub fn contour_masks_from_scene(scene: &SceneSample, description: &Description) -> Result<Vec<ContourMask>> {
    description
        .bindings
        .iter()
        .map(|&(pos, idx)| ContourMask::new(scene.instances[idx].mask.clone(), idx, pos))
        .collect()
}

#[derive(Clone, Debug)]
pub struct RefineConfig {
    /// Gradient step size for the BCE refinement.
    pub lambda: f64,
    /// Halve lambda until the refined map does not increase the BCE.
    pub backtrack: bool,
    /// Gradient steps per block per timestep.
    pub inner_iters: usize,
    /// Skip blocks whose attention grid is smaller than this.
    pub refine_min_res: usize,
    /// Explicit CA block subset; `None` refines every block at or above
    /// `refine_min_res`.
    pub blocks: Option<Vec<usize>>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { lambda: 20.0, backtrack: true, inner_iters: 1, refine_min_res: 8, blocks: None }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.inner_iters == 0 {
            return Err(Error::Config("inner_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Area-average pooling of a binary mask to `target x target` coverage
/// fractions in [0,1]. The target must evenly divide the mask size.
pub fn downsample_mask(mask: &Mask, target: usize) -> Result<Tensor> {
    let (h, w) = (mask.height, mask.width);
    if target == 0 || target > h || target > w || h % target != 0 || w % target != 0 {
        return Err(Error::Validation(format!(
            "cannot pool {h}x{w} mask to {target}x{target}"
        )));
    }
    let (fy, fx) = (h / target, w / target);
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = vec![0.0; target * target];
    for oy in 0..target {
        for ox in 0..target {
            let mut acc = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    if mask.data[(oy * fy + dy) * w + ox * fx + dx] {
                        acc += 1.0;
                    }
                }
            }
            out[oy * target + ox] = acc * inv;
        }
    }
    Ok(Tensor::from_vec(vec![target, target], out))
}

const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy; probabilities are clamped to
/// `[1e-7, 1 - 1e-7]` before the logs.
pub fn bce(m: &[f64], target: &[f64]) -> Result<f64> {
    if m.len() != target.len() {
        return Err(Error::Shape("bce length mismatch".into()));
    }
    if m.is_empty() {
        return Err(Error::Validation("bce over an empty map".into()));
    }
    let mut total = 0.0;
    for (&p, &t) in m.iter().zip(target.iter()) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(total / m.len() as f64)
}

/// Analytic gradient of [`bce`] with respect to the probabilities.
pub fn bce_grad(m: &[f64], target: &[f64]) -> Vec<f64> {
    let n = m.len() as f64;
    m.iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            ((p - t) / (p * (1.0 - p))) / n
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sigmoid the raw attention scores of one token column, take
/// `inner_iters` BCE gradient steps toward the contour target (halving
/// lambda while the step would increase the loss, when backtracking is on),
/// and clamp into the open unit interval.
pub fn refine_attention(raw: &[f64], target: &[f64], cfg: &RefineConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if raw.len() != target.len() {
        return Err(Error::Shape(format!(
            "refine_attention: {} scores vs {} target values",
            raw.len(),
            target.len()
        )));
    }
    let mut m: Vec<f64> = raw.iter().map(|&v| sigmoid(v)).collect();
    for _ in 0..cfg.inner_iters {
        let grad = bce_grad(&m, target);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite refinement gradient".into()));
        }
        let step = |lambda: f64, m: &[f64]| -> Vec<f64> {
            m.iter()
                .zip(grad.iter())
                .map(|(&p, &g)| (p - lambda * g).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP))
                .collect()
        };
        let mut lambda = cfg.lambda;
        let mut next = step(lambda, &m);
        if cfg.backtrack && lambda > 0.0 {
            let before = bce(&m, target)?;
            for _ in 0..60 {
                if bce(&next, target)? <= before {
                    break;
                }
                lambda *= 0.5;
                next = step(lambda, &m);
            }
        }
        m = next;
    }
    Ok(m)
}

/// Denoiser evaluation counts for one sampling run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounter {
    /// Conditional-branch denoiser calls (the Alg-1 calls).
    pub cond_evals: usize,
    /// Guidance-branch calls on the scarce description.
    pub uncond_evals: usize,
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub refine: RefineConfig,
    /// Zero the luminance path into the CEC blocks (the latent-space
    /// ablation); the decoder pyramid is controlled separately.
    pub no_slr: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: GuidanceConfig::default(),
            refine: RefineConfig::default(),
            no_slr: false,
        }
    }
}

pub struct Sampler<'a> {
    pub store: &'a ParamStore,
    pub den: &'a Denoiser,
    pub text: &'a TextEncoder,
    pub vocab: &'a Vocabulary,
}

impl<'a> Sampler<'a> {
    pub fn new(store: &'a ParamStore, den: &'a Denoiser, text: &'a TextEncoder, vocab: &'a Vocabulary) -> Self {
        Self { store, den, text, vocab }
    }

    /// Guided prediction: `eps = eps_scarce + scale (eps_cond - eps_scarce)`,
    /// with the override applied to the conditional branch only. Returns the
    /// conditional branch's attention maps.
    #[allow(clippy::too_many_arguments)]
    pub fn cfg_predict(
        &self,
        z_t: &Tensor,
        t: usize,
        tokens_cond: &[usize],
        tokens_scarce: &[usize],
        pyr: Option<&[Tensor]>,
        scale: f64,
        overrides: Option<&OverrideSet>,
        counter: &mut EvalCounter,
    ) -> Result<(Tensor, AttentionMapSet)> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, self.store);
        let z = tape.constant(z_t.clone());
        let emb_c = self.text.encode(&g, tokens_cond)?;
        let (eps_c, maps) = self.den.predict(&g, &z, t, &emb_c, pyr, overrides)?;
        counter.cond_evals += 1;
        let eps = if scale == 1.0 {
            eps_c.value().clone()
        } else {
            let emb_u = self.text.encode(&g, tokens_scarce)?;
            let (eps_u, _) = self.den.predict(&g, &z, t, &emb_u, pyr, None)?;
            counter.uncond_evals += 1;
            cfg_combine(eps_c.value(), eps_u.value(), scale)
        };
        Ok((eps, maps))
    }

    /// Read-only denoiser call used to harvest attention maps (the first
    /// call of each Alg-1 iteration; its noise estimate is discarded).
    fn read_maps(
        &self,
        z_t: &Tensor,
        t: usize,
        tokens_cond: &[usize],
        pyr: Option<&[Tensor]>,
        counter: &mut EvalCounter,
    ) -> Result<AttentionMapSet> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, self.store);
        let z = tape.constant(z_t.clone());
        let emb_c = self.text.encode(&g, tokens_cond)?;
        let (_, maps) = self.den.predict(&g, &z, t, &emb_c, pyr, None)?;
        counter.cond_evals += 1;
        Ok(maps)
    }

    /// Plain guided DDIM sampling (the W/o ISS path).
    pub fn sample_plain(
        &self,
        z_init: &Tensor,
        tokens_cond: &[usize],
        tokens_scarce: &[usize],
        pyr: Option<&[Tensor]>,
        sched: &NoiseSchedule,
        opts: &SampleOptions,
    ) -> Result<(Tensor, EvalCounter)> {
        let mut counter = EvalCounter::default();
        let pyr = if opts.no_slr { None } else { pyr };
        let ts = sched.sampling_timesteps(opts.steps);
        let mut z = z_init.clone();
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = if i + 1 < ts.len() { ts[i + 1] as isize } else { -1 };
            let (eps, _) = self.cfg_predict(
                &z,
                t,
                tokens_cond,
                tokens_scarce,
                pyr,
                opts.guidance.scale,
                None,
                &mut counter,
            )?;
            z = ddim_step(&z, &eps, t, t_prev, sched)?;
        }
        Ok((z, counter))
    }

    fn validate_masks(&self, tokens_cond: &[usize], masks: &[ContourMask]) -> Result<()> {
        let palette = Palette::standard();
        for cm in masks {
            let tok = *tokens_cond.get(cm.token_pos).ok_or_else(|| {
                Error::Validation(format!("mask token position {} out of range", cm.token_pos))
            })?;
            if tok == PAD {
                return Err(Error::Validation(format!(
                    "mask binding references PAD position {}",
                    cm.token_pos
                )));
            }
            let word = self.vocab.token(tok);
            if palette.lab_of(word).is_none() {
                return Err(Error::Validation(format!(
                    "mask binding references non-color token {word:?} at position {}",
                    cm.token_pos
                )));
            }
        }
        Ok(())
    }

    /// Which CA blocks get refined, with their grid sizes.
    fn refined_blocks(&self, refine: &RefineConfig) -> Vec<(usize, usize)> {
        let sizes = self.den.cfg.stage_sizes();
        (0..sizes.len())
            .filter(|&l| match &refine.blocks {
                Some(list) => list.contains(&l),
                None => sizes[l] >= refine.refine_min_res,
            })
            .map(|l| (l, sizes[l]))
            .collect()
    }

    /// Instance-aware sampling: with no masks this is exactly
    /// [`Self::sample_plain`] (one conditional evaluation per step);
    /// otherwise two conditional evaluations per step.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_instance_aware(
        &self,
        z_init: &Tensor,
        tokens_cond: &[usize],
        tokens_scarce: &[usize],
        masks: &[ContourMask],
        pyr: Option<&[Tensor]>,
        sched: &NoiseSchedule,
        opts: &SampleOptions,
    ) -> Result<(Tensor, EvalCounter)> {
        if masks.is_empty() {
            return self.sample_plain(z_init, tokens_cond, tokens_scarce, pyr, sched, opts);
        }
        self.validate_masks(tokens_cond, masks)?;
        opts.refine.validate()?;
        let pyr = if opts.no_slr { None } else { pyr };
        let blocks = self.refined_blocks(&opts.refine);
        // contour targets are fixed per block resolution
        let mut targets: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); self.den.num_ca_blocks()];
        for &(l, size) in &blocks {
            for cm in masks {
                targets[l].push((cm.token_pos, downsample_mask(&cm.mask, size)?));
            }
        }
        let mut counter = EvalCounter::default();
        let ts = sched.sampling_timesteps(opts.steps);
        let mut z = z_init.clone();
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = if i + 1 < ts.len() { ts[i + 1] as isize } else { -1 };
            let maps = self.read_maps(&z, t, tokens_cond, pyr, &mut counter)?;
            let mut overrides: OverrideSet = vec![BTreeMap::new(); self.den.num_ca_blocks()];
            for &(l, _) in &blocks {
                let map = &maps.blocks[l];
                let s = map.h * map.w;
                let n_tok = self.text.cfg.n_tok;
                for (token_pos, target) in &targets[l] {
                    let raw_col: Vec<f64> =
                        (0..s).map(|r| map.raw.data()[r * n_tok + token_pos]).collect();
                    let refined = refine_attention(&raw_col, target.data(), &opts.refine)?;
                    overrides[l].insert(*token_pos, refined);
                }
            }
            let (eps, _) = self.cfg_predict(
                &z,
                t,
                tokens_cond,
                tokens_scarce,
                pyr,
                opts.guidance.scale,
                Some(&overrides),
                &mut counter,
            )?;
            z = ddim_step(&z, &eps, t, t_prev, sched)?;
        }
        Ok((z, counter))
    }
}
