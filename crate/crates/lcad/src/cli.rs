//! Command-line entry points: dataset generation, two-stage training,
//! colorization, and evaluation with ablation variants.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::config::RunConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, to_grayscale, GrayImage, RgbImage};
use crate::instsample::{contour_masks_from_scene, ContourMask, SampleOptions, Sampler};
use crate::metrics::{
    colorfulness, comparison_table, instance_color_accuracy, psnr, psnr_luminance, ssim,
    ImageMetrics, MetricReport,
};
use crate::synthdata::{
    generate_dataset, read_manifest, write_manifest, Dataset, Level, Mask, SceneSample,
};
use crate::textenc::tokenize;
use crate::train::{train_latent, train_pixel, LatentStage, PixelStage};

#[derive(Parser)]
#[command(name = "lcad", version, about = "Language-conditioned diffusion colorization at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// key=value configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation switches: any of no_lic, no_slr, no_iss.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Suppress per-epoch progress lines.
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Args)]
struct ColorizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Grayscale input PNG.
    #[arg(long)]
    gray: PathBuf,
    /// Any-level description text.
    #[arg(long)]
    description: String,
    /// Directory of binary instance-mask PNGs (instance-aware mode).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// JSON file mapping mask filenames to color bindings.
    #[arg(long)]
    bindings: Option<PathBuf>,
    /// Output PNG path.
    #[arg(long, default_value = "colorized.png")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory of colorized results named <scene id>.png.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Sample results before scoring (also used by ablation variants).
    #[arg(long, default_value_t = false)]
    generate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/eval datasets.
    GenData(CommonArgs),
    /// Train the pixel-space compression stage.
    TrainPixel(CommonArgs),
    /// Train the latent-space denoiser (requires the pixel checkpoint).
    TrainLatent(CommonArgs),
    /// Colorize one grayscale image from a description.
    Colorize(ColorizeArgs),
    /// Score results against the eval dataset, optionally with ablations.
    Evaluate(EvaluateArgs),
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for flag in &common.ablate {
        match flag.trim() {
            "no_lic" => cfg.no_lic = true,
            "no_slr" => cfg.no_slr = true,
            "no_iss" => cfg.no_iss = true,
            "" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?} (expected no_lic, no_slr, no_iss)"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(common) => load_config(&common).and_then(|cfg| cmd_gen_data(&cfg)),
        Command::TrainPixel(common) => {
            load_config(&common).and_then(|cfg| cmd_train_pixel(&cfg, common.quiet))
        }
        Command::TrainLatent(common) => {
            load_config(&common).and_then(|cfg| cmd_train_latent(&cfg, common.quiet))
        }
        Command::Colorize(args) => load_config(&args.common).and_then(|cfg| cmd_colorize(&cfg, &args)),
        Command::Evaluate(args) => load_config(&args.common).and_then(|cfg| cmd_evaluate(&cfg, &args)),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let gen = cfg.gen_config();
    let train = generate_dataset(cfg.seed, cfg.train_scenes, &gen)?;
    write_manifest(&train, &cfg.train_data_dir())?;
    // eval seeds live far from the train range
    let eval = generate_dataset(cfg.seed + 1_000_000, cfg.eval_scenes, &gen)?;
    write_manifest(&eval, &cfg.eval_data_dir())?;
    cfg.write_resolved(&cfg.data_dir, "gen-data")?;
    println!(
        "wrote {} train + {} eval scenes under {}",
        train.len(),
        eval.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

pub fn cmd_train_pixel(cfg: &RunConfig, quiet: bool) -> Result<()> {
    cfg.write_resolved(&cfg.run_dir, "train-pixel")?;
    let report = train_pixel(cfg, quiet)?;
    println!(
        "pixel stage done: recon L1 {:.5} -> L_pix {:.5}; checkpoint {}",
        report.pretrain_losses.last().copied().unwrap_or(f64::NAN),
        report.finetune_losses.last().copied().unwrap_or(f64::NAN),
        cfg.pixel_ckpt().display()
    );
    Ok(())
}

pub fn cmd_train_latent(cfg: &RunConfig, quiet: bool) -> Result<()> {
    cfg.write_resolved(&cfg.run_dir, "train-latent")?;
    let report = train_latent(cfg, quiet)?;
    let first = report.pretrain_losses.first().copied().unwrap_or(f64::NAN);
    let last = report
        .finetune_losses
        .last()
        .or(report.pretrain_losses.last())
        .copied()
        .unwrap_or(f64::NAN);
    println!(
        "latent stage done: loss {first:.1} -> {last:.1}; checkpoint {}",
        cfg.latent_ckpt().display()
    );
    Ok(())
}

/// Everything needed to sample and decode.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub pixel: PixelStage,
    pub latent: LatentStage,
    pub sched: NoiseSchedule,
}

impl Pipeline {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let pixel = PixelStage::load(cfg)?;
        let latent = LatentStage::load(cfg)?;
        let sched = cfg.noise_schedule();
        Ok(Self { cfg: cfg.clone(), pixel, latent, sched })
    }

    pub fn scarce_tokens(&self) -> Result<Vec<usize>> {
        tokenize(&self.latent.vocab, crate::synthdata::SCARCE_TEXT, self.cfg.n_tok)
    }

    /// Sample + decode one grayscale image under a description.
    /// Masks switch on the instance-aware strategy; ablation flags in the
    /// config select the degraded paths.
    pub fn colorize(
        &self,
        gray: &GrayImage,
        description: &str,
        masks: &[ContourMask],
        seed: u64,
    ) -> Result<RgbImage> {
        let cfg = &self.cfg;
        let tokens_cond = tokenize(&self.latent.vocab, description, cfg.n_tok)?;
        let tokens_scarce = self.scarce_tokens()?;
        let pyr = self.pixel.pyramid_values(gray)?;
        let sampler = Sampler::new(
            &self.latent.store,
            &self.latent.den,
            &self.latent.text,
            &self.latent.vocab,
        );
        let opts = SampleOptions {
            steps: cfg.sample_steps,
            guidance: cfg.guidance_config(),
            refine: cfg.refine_config(),
            no_slr: cfg.no_slr,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let z_init = lcad_grad::Tensor::randn(
            vec![cfg.latent_channels, cfg.image_size / 4, cfg.image_size / 4],
            &mut rng,
        );
        let (z0, _) = if cfg.no_iss || masks.is_empty() {
            sampler.sample_plain(&z_init, &tokens_cond, &tokens_scarce, Some(&pyr), &self.sched, &opts)?
        } else {
            sampler.sample_instance_aware(
                &z_init,
                &tokens_cond,
                &tokens_scarce,
                masks,
                Some(&pyr),
                &self.sched,
                &opts,
            )?
        };
        let dec_pyr = if cfg.no_lic { None } else { Some(pyr.as_slice()) };
        self.pixel.decode_image(&z0, dec_pyr)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BindingSpec {
    Pos { token_pos: usize },
    Color { color: String },
}

/// Load user-supplied masks plus their color-token bindings.
pub fn load_mask_bindings(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    description: &str,
    masks_dir: &Path,
    bindings_path: &Path,
) -> Result<Vec<ContourMask>> {
    let raw = std::fs::read_to_string(bindings_path).map_err(|e| Error::io(bindings_path, e))?;
    let speced: BTreeMap<String, BindingSpec> =
        serde_json::from_str(&raw).map_err(|e| Error::Validation(format!("bindings JSON: {e}")))?;
    let tokens = tokenize(&pipeline.latent.vocab, description, cfg.n_tok)?;
    let mut used = vec![false; tokens.len()];
    let mut out = Vec::new();
    for (idx, (file, spec)) in speced.iter().enumerate() {
        let img = load_image(&masks_dir.join(file))?;
        let mask = Mask::from_rgb(&img);
        let pos = match spec {
            BindingSpec::Pos { token_pos } => *token_pos,
            BindingSpec::Color { color } => {
                let want = pipeline.latent.vocab.id_of(color).ok_or_else(|| {
                    Error::Validation(format!("unknown color word {color:?} in bindings"))
                })?;
                tokens
                    .iter()
                    .enumerate()
                    .position(|(i, &t)| t == want && !used[i])
                    .ok_or_else(|| {
                        Error::Validation(format!(
                            "color {color:?} does not appear (unbound) in the description"
                        ))
                    })?
            }
        };
        if pos >= used.len() {
            return Err(Error::Validation(format!("token position {pos} out of range")));
        }
        used[pos] = true;
        out.push(ContourMask::new(mask, idx, pos)?);
    }
    Ok(out)
}

fn description_has_color_words(pipeline: &Pipeline, cfg: &RunConfig, description: &str) -> Result<bool> {
    let palette = crate::synthdata::Palette::standard();
    let tokens = tokenize(&pipeline.latent.vocab, description, cfg.n_tok)?;
    Ok(tokens
        .iter()
        .any(|&t| t != crate::textenc::PAD && palette.lab_of(pipeline.latent.vocab.token(t)).is_some()))
}

fn cmd_colorize(cfg: &RunConfig, args: &ColorizeArgs) -> Result<()> {
    let pipeline = Pipeline::load(cfg)?;
    let input = load_image(&args.gray)?;
    if input.height() != cfg.image_size || input.width() != cfg.image_size {
        return Err(Error::Validation(format!(
            "input is {}x{}, the model expects {}x{}",
            input.height(),
            input.width(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let gray = to_grayscale(&input);
    let masks = match (&args.masks, &args.bindings) {
        (Some(dir), Some(bindings)) => {
            load_mask_bindings(cfg, &pipeline, &args.description, dir, bindings)?
        }
        (Some(_), None) | (None, Some(_)) => {
            return Err(Error::Validation(
                "instance-aware mode needs both --masks and --bindings".into(),
            ))
        }
        (None, None) => Vec::new(),
    };
    if masks.is_empty()
        && !cfg.no_iss
        && description_has_color_words(&pipeline, cfg, &args.description)?
    {
        eprintln!(
            "warning: description names colors but no masks were given; falling back to plain sampling"
        );
    }
    let out = pipeline.colorize(&gray, &args.description, &masks, cfg.seed)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    save_image(&out, &args.out)?;
    let meta = serde_json::json!({
        "command": "colorize",
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "description": args.description,
        "gray": args.gray.display().to_string(),
        "resolved_config": cfg.render(),
    });
    let meta_path = args.out.with_extension("run.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(&meta_path, e))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation pipeline
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoIss,
    NoSlr,
    NoLic,
    Scarce,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "L-CAD",
            Variant::NoIss => "W/o ISS",
            Variant::NoSlr => "W/o SLR",
            Variant::NoLic => "W/o LIC",
            Variant::Scarce => "L-CAD*",
        }
    }

    pub fn dir_suffix(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIss => "no_iss",
            Variant::NoSlr => "no_slr",
            Variant::NoLic => "no_lic",
            Variant::Scarce => "scarce",
        }
    }
}

fn scene_seed(base: u64, index: usize) -> u64 {
    base ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1))
}

/// Colorize every eval scene under one variant. `dilate_px` grows the
/// ground-truth masks before sampling (mask-robustness probes).
pub fn generate_results(
    pipeline: &Pipeline,
    dataset: &Dataset,
    variant: Variant,
    out_dir: &Path,
    dilate_px: usize,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = &pipeline.cfg;
    dataset
        .samples
        .par_iter()
        .zip(dataset.ids.par_iter())
        .enumerate()
        .map(|(i, (scene, id))| -> Result<()> {
            let mut vcfg = cfg.clone();
            // each variant owns its flags; the comparison baseline is the
            // full model even when the evaluate command requested ablations
            vcfg.no_iss = false;
            vcfg.no_slr = false;
            vcfg.no_lic = false;
            let (level, masks) = match variant {
                Variant::Scarce => (Level::Scarce, Vec::new()),
                Variant::NoIss => {
                    vcfg.no_iss = true;
                    (Level::Complete, Vec::new())
                }
                Variant::NoSlr => {
                    vcfg.no_slr = true;
                    let d = &scene.descriptions[&Level::Complete];
                    (Level::Complete, contour_masks_from_scene(scene, d)?)
                }
                Variant::NoLic => {
                    vcfg.no_lic = true;
                    let d = &scene.descriptions[&Level::Complete];
                    (Level::Complete, contour_masks_from_scene(scene, d)?)
                }
                Variant::Full => {
                    let d = &scene.descriptions[&Level::Complete];
                    (Level::Complete, contour_masks_from_scene(scene, d)?)
                }
            };
            let masks: Vec<ContourMask> = if dilate_px > 0 {
                masks
                    .into_iter()
                    .map(|cm| ContourMask::new(cm.mask.dilate(dilate_px), cm.instance_index, cm.token_pos))
                    .collect::<Result<_>>()?
            } else {
                masks
            };
            let out = colorize_with(pipeline, &vcfg, scene, level, &masks, scene_seed(cfg.seed, i))?;
            save_image(&out, &out_dir.join(format!("{id}.png")))
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

/// Variant-aware single-scene colorization sharing the pipeline's stores.
fn colorize_with(
    pipeline: &Pipeline,
    vcfg: &RunConfig,
    scene: &SceneSample,
    level: Level,
    masks: &[ContourMask],
    seed: u64,
) -> Result<RgbImage> {
    let tokens_cond = tokenize(&pipeline.latent.vocab, &scene.descriptions[&level].text, vcfg.n_tok)?;
    let tokens_scarce = tokenize(&pipeline.latent.vocab, crate::synthdata::SCARCE_TEXT, vcfg.n_tok)?;
    let pyr = pipeline.pixel.pyramid_values(&scene.gray)?;
    let sampler = Sampler::new(
        &pipeline.latent.store,
        &pipeline.latent.den,
        &pipeline.latent.text,
        &pipeline.latent.vocab,
    );
    let opts = SampleOptions {
        steps: vcfg.sample_steps,
        guidance: vcfg.guidance_config(),
        refine: vcfg.refine_config(),
        no_slr: vcfg.no_slr,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let z_init = lcad_grad::Tensor::randn(
        vec![vcfg.latent_channels, vcfg.image_size / 4, vcfg.image_size / 4],
        &mut rng,
    );
    let (z0, _) = if vcfg.no_iss || masks.is_empty() {
        sampler.sample_plain(&z_init, &tokens_cond, &tokens_scarce, Some(&pyr), &pipeline.sched, &opts)?
    } else {
        sampler.sample_instance_aware(
            &z_init,
            &tokens_cond,
            &tokens_scarce,
            masks,
            Some(&pyr),
            &pipeline.sched,
            &opts,
        )?
    };
    let dec_pyr = if vcfg.no_lic { None } else { Some(pyr.as_slice()) };
    pipeline.pixel.decode_image(&z0, dec_pyr)
}

/// Score a directory of results against the eval dataset.
pub fn score_results(
    dataset: &Dataset,
    results_dir: &Path,
    level: Level,
) -> Result<MetricReport> {
    let missing: Vec<String> = dataset
        .ids
        .iter()
        .filter(|id| !results_dir.join(format!("{id}.png")).exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "results in {} missing {} ids: {}",
            results_dir.display(),
            missing.len(),
            missing.join(", ")
        )));
    }
    let rows: Vec<ImageMetrics> = dataset
        .samples
        .par_iter()
        .zip(dataset.ids.par_iter())
        .map(|(scene, id)| -> Result<ImageMetrics> {
            let result = load_image(&results_dir.join(format!("{id}.png")))?;
            let d = &scene.descriptions[&level];
            let acc = if d.bindings.is_empty() {
                None
            } else {
                Some(instance_color_accuracy(&result, &scene.instances, d)?)
            };
            let result_l = to_grayscale(&result);
            Ok(ImageMetrics {
                id: id.clone(),
                psnr: psnr(&result, &scene.image)?,
                ssim: ssim(&result, &scene.image)?,
                colorfulness: colorfulness(&result),
                delta_colorfulness: (colorfulness(&result) - colorfulness(&scene.image)).abs(),
                l_psnr: psnr_luminance(result_l.l(), scene.gray.l()),
                instance_color_accuracy: acc,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport::from_rows(rows))
}

/// Autoencoder reconstruction PSNR over the eval set, with and without the
/// luminance pyramid in the decoder.
pub fn reconstruction_psnr(pixel: &PixelStage, dataset: &Dataset) -> Result<(f64, f64)> {
    let vals: Vec<(f64, f64)> = dataset
        .samples
        .par_iter()
        .map(|scene| -> Result<(f64, f64)> {
            let z = pixel.encode_std(&scene.image)?;
            let pyr = pixel.pyramid_values(&scene.gray)?;
            let with_pyr = pixel.decode_image(&z, Some(&pyr))?;
            let without = pixel.decode_image(&z, None)?;
            Ok((psnr(&with_pyr, &scene.image)?, psnr(&without, &scene.image)?))
        })
        .collect::<Result<_>>()?;
    let n = vals.len() as f64;
    Ok((
        vals.iter().map(|(a, _)| a).sum::<f64>() / n,
        vals.iter().map(|(_, b)| b).sum::<f64>() / n,
    ))
}

fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let dataset = read_manifest(&cfg.eval_data_dir())?;
    let results_dir = args
        .results
        .clone()
        .unwrap_or_else(|| cfg.run_dir.join("results"));
    let mut variants: Vec<Variant> = vec![];
    if cfg.no_lic {
        variants.push(Variant::NoLic);
    }
    if cfg.no_slr {
        variants.push(Variant::NoSlr);
    }
    if cfg.no_iss {
        variants.push(Variant::NoIss);
    }
    let needs_pipeline = args.generate || !variants.is_empty();
    let pipeline = if needs_pipeline { Some(Pipeline::load(cfg)?) } else { None };

    if args.generate {
        let p = pipeline.as_ref().unwrap();
        generate_results(p, &dataset, Variant::Full, &results_dir, 0)?;
    }
    let main_report = score_results(&dataset, &results_dir, Level::Complete)?;

    let mut table_rows: Vec<(String, MetricReport)> = vec![("L-CAD".into(), main_report.clone())];
    for v in &variants {
        let p = pipeline.as_ref().unwrap();
        let dir = results_dir.with_file_name(format!(
            "{}_{}",
            results_dir.file_name().and_then(|n| n.to_str()).unwrap_or("results"),
            v.dir_suffix()
        ));
        generate_results(p, &dataset, *v, &dir, 0)?;
        let report = score_results(&dataset, &dir, Level::Complete)?;
        table_rows.push((v.label().to_string(), report));
    }

    // reconstruction comparison needs only the pixel stage
    let owned_pixel;
    let pixel: &PixelStage = match &pipeline {
        Some(p) => &p.pixel,
        None => {
            owned_pixel = PixelStage::load(cfg)?;
            &owned_pixel
        }
    };
    let (recon, recon_no_lic) = reconstruction_psnr(pixel, &dataset)?;

    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let report_json = serde_json::json!({
        "main": main_report,
        "recon_psnr": recon,
        "recon_psnr_no_lic": recon_no_lic,
        "ablations": table_rows
            .iter()
            .skip(1)
            .map(|(name, r)| (name.clone(), serde_json::to_value(r).unwrap()))
            .collect::<serde_json::Map<String, serde_json::Value>>(),
    });
    let json_path = cfg.run_dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report_json).unwrap())
        .map_err(|e| Error::io(&json_path, e))?;
    let table = comparison_table(
        &table_rows.iter().map(|(n, r)| (n.clone(), r)).collect::<Vec<_>>(),
    );
    let table_path = cfg.run_dir.join("report.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    cfg.write_resolved(&cfg.run_dir, "evaluate")?;
    println!("{table}");
    println!(
        "recon PSNR {recon:.2} dB (zeroed pyramid {recon_no_lic:.2} dB); report at {}",
        json_path.display()
    );
    Ok(())
}

