//! Two-stage training: pixel-space compression (autoencoder pretrain, then
//! luminance-guided fine-tune with the weighted loss and discriminator),
//! followed by latent-space denoiser training (vanilla-conv base on scarce
//! text, then frozen-base channel extension + text pathway).

use std::io::Write as _;
use std::path::Path;

use lcad_grad::nn::Graph;
use lcad_grad::store::{load_checkpoint, restore_into, save_checkpoint};
use lcad_grad::{Adam, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::compression::{
    discriminator_loss, pixel_loss, LuminancePyramid, PixelModel, PREFIX_DEC, PREFIX_DISC,
    PREFIX_ENC, PREFIX_INJ, PREFIX_LUM,
};
use crate::config::RunConfig;
use crate::denoiser::{Denoiser, PREFIX_BASE};
use crate::diffusion::forward_diffuse;
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, RgbImage};
use crate::synthdata::{read_manifest, Dataset, Level};
use crate::textenc::{tokenize, TextEncoder, Vocabulary};

pub struct PixelStage {
    pub store: ParamStore,
    pub model: PixelModel,
}

impl PixelStage {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let model = PixelModel::new(&mut store, cfg.compression_config(), &mut rng)?;
        Ok(Self { store, model })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let path = cfg.pixel_ckpt();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(format!(
                "pixel checkpoint {} not found; run `lcad train-pixel` first",
                path.display()
            )));
        }
        let mut stage = Self::new(cfg, cfg.seed)?;
        let ckpt = load_checkpoint(&path)?;
        restore_into(&mut stage.store, &ckpt, &path)?;
        stage.store.set_trainable_prefix("pix.", false);
        Ok(stage)
    }

    /// Standardized latent of an image.
    pub fn encode_std(&self, img: &RgbImage) -> Result<Tensor> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, &self.store);
        let z = self.model.encode_image(&g, img)?;
        Ok(self.model.standardize(&self.store, z.value()))
    }

    /// Detached luminance pyramid levels for a grayscale image.
    pub fn pyramid_values(&self, gray: &GrayImage) -> Result<Vec<Tensor>> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, &self.store);
        Ok(self.model.luminance_of_gray(&g, gray)?.values())
    }

    /// Decode a standardized latent to an image, optionally with luminance
    /// guidance (None reproduces the pure-latent ablation path).
    pub fn decode_image(&self, z_std: &Tensor, pyr: Option<&[Tensor]>) -> Result<RgbImage> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, &self.store);
        let z = self.model.unstandardize(&self.store, z_std);
        let zv = tape.constant(z);
        let pyr_vars = pyr.map(|levels| LuminancePyramid {
            levels: levels.iter().map(|t| tape.constant(t.clone())).collect(),
        });
        let out = self.model.decode(&g, &zv, pyr_vars.as_ref())?;
        RgbImage::from_tensor_clipped(out.value())
    }
}

pub struct LatentStage {
    pub store: ParamStore,
    pub den: Denoiser,
    pub text: TextEncoder,
    pub vocab: Vocabulary,
}

impl LatentStage {
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
        let vocab = Vocabulary::standard();
        let text = TextEncoder::new(&mut store, vocab.size(), cfg.text_config(), &mut rng);
        let den = Denoiser::new(&mut store, cfg.denoiser_config(), &mut rng);
        Self { store, den, text, vocab }
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let path = cfg.latent_ckpt();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(format!(
                "latent checkpoint {} not found; run `lcad train-latent` first",
                path.display()
            )));
        }
        let mut stage = Self::new(cfg, cfg.seed);
        let ckpt = load_checkpoint(&path)?;
        restore_into(&mut stage.store, &ckpt, &path)?;
        Ok(stage)
    }
}

/// Deterministic parallel batch step: build each item's loss on its own
/// tape, average the gradients, and apply Adam to params matching the
/// given prefixes. Returns the mean loss.
fn batch_step<T: Sync>(
    store: &mut ParamStore,
    adam: &mut Adam,
    items: &[T],
    prefixes: &[&str],
    f: impl Fn(&Graph, &T) -> Result<Var> + Sync,
) -> Result<f64> {
    let results: Vec<(f64, Vec<(ParamId, Tensor)>)> = items
        .par_iter()
        .map(|item| -> Result<(f64, Vec<(ParamId, Tensor)>)> {
            let tape = Tape::new();
            let g = Graph::new(&tape, store);
            let loss = f(&g, item)?;
            let value = loss.value().data()[0];
            let grads = tape.backward(&loss);
            Ok((value, g.param_grads(&grads)))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / items.len() as f64;
    let mut merged: std::collections::BTreeMap<usize, (ParamId, Tensor)> = Default::default();
    let mut total = 0.0;
    for (value, grads) in results {
        total += value;
        for (id, g) in grads {
            match merged.get_mut(&id.index()) {
                Some((_, acc)) => acc.accumulate(&g, 1.0),
                None => {
                    merged.insert(id.index(), (id, g));
                }
            }
        }
    }
    let merged_len = merged.len();
    let filtered: Vec<(ParamId, Tensor)> = merged
        .into_values()
        .filter(|(id, _)| prefixes.iter().any(|p| store.name(*id).starts_with(p)))
        .map(|(id, g)| (id, g.scale(scale)))
        .collect();
    if std::env::var_os("LCAD_DEBUG_GRADS").is_some() {
        let gn: f64 = filtered.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
        eprintln!(
            "[debug] batch_step: {} grads, {} after filter {:?}, grad norm {gn:.3e}",
            merged_len, filtered.len(), prefixes
        );
    }
    adam.step(store, &filtered);
    Ok(total * scale)
}

fn append_loss_log(path: &Path, stage: &str, epoch: usize, loss: f64) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(file, "{stage},{epoch},{loss}").map_err(|e| Error::io(path, e))
}

fn batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[derive(Debug)]
pub struct PixelTrainReport {
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
}

/// Stage 1: autoencoder pretrain, then luminance fine-tune with the
/// artifact-weighted loss and patch discriminator (encoder/decoder frozen).
#[allow(clippy::needless_range_loop)]
pub fn train_pixel(cfg: &RunConfig, quiet: bool) -> Result<PixelTrainReport> {
    let dataset = read_manifest(&cfg.train_data_dir())?;
    let mut stage = PixelStage::new(cfg, cfg.seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(101));
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let log_path = cfg.run_dir.join("losses_pixel.csv");
    let _ = std::fs::remove_file(&log_path);

    let tensors: Vec<(Tensor, Tensor)> = dataset
        .samples
        .iter()
        .map(|s| (s.image.to_tensor(), s.gray.to_tensor_norm()))
        .collect();

    // Phase A: plain autoencoder on L1 reconstruction.
    let mut adam = Adam::new(cfg.lr_pixel);
    let mut pretrain_losses = Vec::new();
    for epoch in 0..cfg.pixel_pretrain_epochs {
        let mut epoch_loss = 0.0;
        let mut count = 0;
        for batch in batches(tensors.len(), cfg.batch_size, &mut rng) {
            let items: Vec<&(Tensor, Tensor)> = batch.iter().map(|&i| &tensors[i]).collect();
            let loss = batch_step(
                &mut stage.store,
                &mut adam,
                &items,
                &[PREFIX_ENC, PREFIX_DEC],
                |g, (img, _)| {
                    let x = g.tape.constant(img.clone());
                    let z = stage.model.encode(g, &x)?;
                    let xt = stage.model.decode(g, &z, None)?;
                    let diff = lcad_grad::ops::sub(g.tape, &x, &xt);
                    Ok(lcad_grad::ops::mean_all(g.tape, &lcad_grad::ops::abs(g.tape, &diff)))
                },
            )?;
            epoch_loss += loss * items.len() as f64;
            count += items.len();
        }
        let mean = epoch_loss / count as f64;
        pretrain_losses.push(mean);
        append_loss_log(&log_path, "pretrain", epoch, mean)?;
        if !quiet {
            eprintln!("[pixel/pretrain] epoch {epoch}: recon L1 {mean:.5}");
        }
    }

    // Phase B: freeze the compression pair, train luminance + injections +
    // discriminator under the weighted pixel loss.
    stage.store.set_trainable_prefix(PREFIX_ENC, false);
    stage.store.set_trainable_prefix(PREFIX_DEC, false);
    let mut adam_gen = Adam::new(cfg.lr_pixel);
    let mut adam_disc = Adam::new(cfg.lr_disc);
    let loss_cfg = cfg.pixel_loss_config();
    let mut finetune_losses = Vec::new();
    for epoch in 0..cfg.pixel_finetune_epochs {
        // the discriminator trains from the start, but its term only joins
        // the generator objective once D has seen real data; chasing a
        // random critic saturates the freshly attached luminance path
        let adversary_on = epoch >= cfg.disc_warmup_epochs;
        let mut epoch_loss = 0.0;
        let mut epoch_rec = 0.0;
        let mut count = 0;
        for batch in batches(tensors.len(), cfg.batch_size, &mut rng) {
            let items: Vec<&(Tensor, Tensor)> = batch.iter().map(|&i| &tensors[i]).collect();
            // generator pass
            let fakes: std::sync::Mutex<Vec<(usize, Tensor)>> =
                std::sync::Mutex::new(Vec::with_capacity(items.len()));
            let recs: std::sync::Mutex<Vec<f64>> = std::sync::Mutex::new(Vec::new());
            let loss = {
                let fakes = &fakes;
                let recs = &recs;
                batch_step(
                    &mut stage.store,
                    &mut adam_gen,
                    &items.iter().enumerate().collect::<Vec<_>>(),
                    &[PREFIX_LUM, PREFIX_INJ],
                    |g, (i, (img, gray))| {
                        let x = g.tape.constant(img.clone());
                        let z = stage.model.encode(g, &x)?;
                        let grayv = g.tape.constant(gray.clone());
                        let pyr = stage.model.luminance(g, &grayv)?;
                        let xt = stage.model.decode(g, &z, Some(&pyr))?;
                        fakes.lock().unwrap().push((*i, xt.value().clone()));
                        let mut lcfg = loss_cfg.clone();
                        if !adversary_on {
                            lcfg.alpha = 0.0;
                        }
                        let out = pixel_loss(g, &stage.model, &x, &xt, &lcfg)?;
                        recs.lock().unwrap().push(out.rec);
                        Ok(out.total)
                    },
                )?
            };
            {
                let r = recs.into_inner().unwrap();
                epoch_rec += r.iter().sum::<f64>();
            }
            // discriminator pass on detached fakes
            let mut fakes = fakes.into_inner().unwrap();
            fakes.sort_by_key(|(i, _)| *i);
            let disc_items: Vec<(Tensor, Tensor)> = fakes
                .into_iter()
                .map(|(i, fake)| (items[i].0.clone(), fake))
                .collect();
            batch_step(
                &mut stage.store,
                &mut adam_disc,
                &disc_items,
                &[PREFIX_DISC],
                |g, (real, fake)| {
                    let r = g.tape.constant(real.clone());
                    let f = g.tape.constant(fake.clone());
                    Ok(discriminator_loss(g, &stage.model, &r, &f))
                },
            )?;
            epoch_loss += loss * items.len() as f64;
            count += items.len();
        }
        let mean = epoch_loss / count as f64;
        let mean_rec = epoch_rec / count as f64;
        finetune_losses.push(mean);
        append_loss_log(&log_path, "finetune", epoch, mean)?;
        if !quiet {
            eprintln!("[pixel/finetune] epoch {epoch}: L_pix {mean:.5} (L_rec {mean_rec:.5})");
        }
    }

    // Channel-wise latent statistics over the training set.
    let stats: Vec<Tensor> = tensors
        .par_iter()
        .map(|(img, _)| {
            let tape = Tape::inference();
            let g = Graph::new(&tape, &stage.store);
            let x = tape.constant(img.clone());
            Ok(stage.model.encode(&g, &x)?.value().clone())
        })
        .collect::<Result<_>>()?;
    let c = cfg.latent_channels;
    let hw = (cfg.image_size / 4) * (cfg.image_size / 4);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let n = (stats.len() * hw) as f64;
    for z in &stats {
        for ci in 0..c {
            for i in 0..hw {
                mean[ci] += z.data()[ci * hw + i];
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for z in &stats {
        for ci in 0..c {
            for i in 0..hw {
                let d = z.data()[ci * hw + i] - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(1e-6)).collect();
    stage.store.set(stage.model.stats_mean, Tensor::from_vec(vec![c], mean));
    stage.store.set(stage.model.stats_std, Tensor::from_vec(vec![c], std));

    let meta = serde_json::json!({
        "kind": "pixel",
        "config_hash": cfg.content_hash(),
        "image_size": cfg.image_size,
        "widths": cfg.pixel_widths,
    });
    save_checkpoint(&cfg.pixel_ckpt(), &stage.store, &meta.to_string())?;
    Ok(PixelTrainReport { pretrain_losses, finetune_losses })
}

/// One latent training example with cached conditioning.
pub struct LatentItem {
    pub z0: Tensor,
    pub pyr: Vec<Tensor>,
    pub tokens_complete: Vec<usize>,
    pub tokens_partial: Vec<usize>,
}

/// Cache standardized latents, pyramids, and tokenizations for a dataset.
pub fn prepare_latent_items(
    cfg: &RunConfig,
    pixel: &PixelStage,
    dataset: &Dataset,
    vocab: &Vocabulary,
) -> Result<Vec<LatentItem>> {
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let z0 = pixel.encode_std(&s.image)?;
            let pyr = pixel.pyramid_values(&s.gray)?;
            let tokens_complete =
                tokenize(vocab, &s.descriptions[&Level::Complete].text, cfg.n_tok)?;
            let tokens_partial =
                tokenize(vocab, &s.descriptions[&Level::Partial].text, cfg.n_tok)?;
            Ok(LatentItem { z0, pyr, tokens_complete, tokens_partial })
        })
        .collect()
}

#[derive(Debug)]
pub struct LatentTrainReport {
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
}

struct Draw {
    item: usize,
    t: usize,
    eps: Tensor,
    tokens: Vec<usize>,
    with_pyr: bool,
}

/// Stage 2: train the denoiser. Phase one fits the vanilla-convolution base
/// on scarce descriptions only (no luminance); phase two freezes that base
/// as the fixed kernels, zero-extends to CEC, and trains the extension plus
/// the text pathway with 30% scarce replacement.
pub fn train_latent(cfg: &RunConfig, quiet: bool) -> Result<LatentTrainReport> {
    if !cfg.pixel_ckpt().exists() {
        return Err(Error::MissingCheckpoint(
            "pixel stage checkpoint missing: run `lcad train-pixel` before `lcad train-latent`"
                .into(),
        ));
    }
    let pixel = PixelStage::load(cfg)?;
    let dataset = read_manifest(&cfg.train_data_dir())?;
    let mut stage = LatentStage::new(cfg, cfg.seed);
    let items = prepare_latent_items(cfg, &pixel, &dataset, &stage.vocab)?;
    let scarce_tokens = tokenize(&stage.vocab, crate::synthdata::SCARCE_TEXT, cfg.n_tok)?;
    let sched = cfg.noise_schedule();
    let guidance = cfg.guidance_config();
    guidance.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(202));
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let log_path = cfg.run_dir.join("losses_latent.csv");
    let _ = std::fs::remove_file(&log_path);

    let run_epoch = |stage: &mut LatentStage,
                     adam: &mut Adam,
                     rng: &mut ChaCha12Rng,
                     scarce_only: bool,
                     prefixes: &[&str]|
     -> Result<f64> {
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in batches(items.len(), cfg.batch_size, rng) {
            let draws: Vec<Draw> = batch
                .iter()
                .map(|&i| {
                    let t = rng.random_range(0..sched.t_train);
                    let eps = Tensor::randn(items[i].z0.shape().to_vec(), rng);
                    let tokens = if scarce_only {
                        scarce_tokens.clone()
                    } else {
                        let replace = rng.random::<f64>() < guidance.drop_prob;
                        if replace {
                            scarce_tokens.clone()
                        } else if rng.random::<f64>() < 0.7 {
                            items[i].tokens_complete.clone()
                        } else {
                            items[i].tokens_partial.clone()
                        }
                    };
                    Draw { item: i, t, eps, tokens, with_pyr: !scarce_only }
                })
                .collect();
            let loss = batch_step(&mut stage.store, adam, &draws, prefixes, |g, d| {
                let item = &items[d.item];
                let z_t = forward_diffuse(&item.z0, d.t, &d.eps, &sched)?;
                let z_t = g.tape.constant(z_t);
                let emb = stage.text.encode(g, &d.tokens)?;
                let pyr = d.with_pyr.then_some(item.pyr.as_slice());
                let (eps_hat, _) = stage.den.predict(g, &z_t, d.t, &emb, pyr, None)?;
                let target = g.tape.constant(d.eps.clone());
                let diff = lcad_grad::ops::sub(g.tape, &eps_hat, &target);
                let sq = lcad_grad::ops::square(g.tape, &diff);
                Ok(lcad_grad::ops::sum_all(g.tape, &sq))
            })?;
            epoch_loss += loss * draws.len() as f64;
            count += draws.len();
        }
        Ok(epoch_loss / count as f64)
    };

    // Phase one: vanilla-convolution base on scarce descriptions.
    let mut adam = Adam::new(cfg.lr_latent);
    let mut pretrain_losses = Vec::new();
    for epoch in 0..cfg.latent_pretrain_epochs {
        let mean = run_epoch(&mut stage, &mut adam, &mut rng, true, &["den.", "text."])?;
        pretrain_losses.push(mean);
        append_loss_log(&log_path, "base", epoch, mean)?;
        if !quiet {
            eprintln!("[latent/base] epoch {epoch}: loss {mean:.2}");
        }
    }
    let base_meta = serde_json::json!({
        "kind": "latent_base",
        "config_hash": cfg.content_hash(),
        "vocab": stage.vocab.tokens(),
    });
    save_checkpoint(&cfg.latent_base_ckpt(), &stage.store, &base_meta.to_string())?;

    // Phase two: freeze the base as the fixed kernels; train extension
    // channels, luminance projections, cross-attention, and the text encoder.
    stage.store.set_trainable_prefix(PREFIX_BASE, false);
    let mut adam = Adam::new(cfg.lr_latent);
    let mut finetune_losses = Vec::new();
    for epoch in 0..cfg.latent_finetune_epochs {
        let mean = run_epoch(
            &mut stage,
            &mut adam,
            &mut rng,
            false,
            &["den.ext.", "den.lproj.", "den.ca.", "text."],
        )?;
        finetune_losses.push(mean);
        append_loss_log(&log_path, "cec", epoch, mean)?;
        if !quiet {
            eprintln!("[latent/cec] epoch {epoch}: loss {mean:.2}");
        }
    }
    let meta = serde_json::json!({
        "kind": "latent",
        "config_hash": cfg.content_hash(),
        "vocab": stage.vocab.tokens(),
    });
    save_checkpoint(&cfg.latent_ckpt(), &stage.store, &meta.to_string())?;
    Ok(LatentTrainReport { pretrain_losses, finetune_losses })
}
