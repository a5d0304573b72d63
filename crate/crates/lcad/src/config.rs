//! Flat key=value run configuration shared by every command.
//!
//! Unknown keys are rejected, and each command writes its resolved
//! configuration next to its outputs so any run can be replayed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::compression::{CompressionConfig, PixelLossCfg};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::instsample::RefineConfig;
use crate::synthdata::GenConfig;
use crate::textenc::TextEncoderConfig;

macro_rules! config_fields {
    ($(($field:ident, $key:literal, $ty:ty, $default:expr, $parse:ident, $show:ident)),+ $(,)?) => {
        #[derive(Clone, Debug)]
        pub struct RunConfig {
            $(pub $field: $ty),+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default),+ }
            }
        }

        impl RunConfig {
            fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = $parse(key, value)?;
                        Ok(())
                    })+
                    _ => Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            }

            /// Canonical key=value rendering of the resolved configuration.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{}={}", $key, $show(&self.$field)).unwrap();)+
                out
            }
        }
    };
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

fn parse_path(_key: &str, v: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(v.trim()))
}

fn parse_string(_key: &str, v: &str) -> Result<String> {
    Ok(v.trim().to_string())
}

fn parse_widths(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| parse_usize(key, p))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key}: expected three comma-separated widths")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn show_display<T: std::fmt::Display>(v: &T) -> String {
    v.to_string()
}

fn show_path(v: &Path) -> String {
    v.display().to_string()
}

fn show_widths(v: &[usize; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

config_fields![
    (data_dir, "data_dir", PathBuf, PathBuf::from("data"), parse_path, show_path),
    (run_dir, "run_dir", PathBuf, PathBuf::from("runs/default"), parse_path, show_path),
    (image_size, "image_size", usize, 64, parse_usize, show_display),
    (train_scenes, "train_scenes", usize, 2000, parse_usize, show_display),
    (eval_scenes, "eval_scenes", usize, 200, parse_usize, show_display),
    (instance_min, "instance_min", usize, 2, parse_usize, show_display),
    (instance_max, "instance_max", usize, 3, parse_usize, show_display),
    (bg_l_min, "bg_l_min", f64, 30.0, parse_f64, show_display),
    (bg_l_max, "bg_l_max", f64, 75.0, parse_f64, show_display),
    (shade_amp, "shade_amp", f64, 10.0, parse_f64, show_display),
    (n_tok, "n_tok", usize, 12, parse_usize, show_display),
    (d_text, "d_text", usize, 64, parse_usize, show_display),
    (text_heads, "text_heads", usize, 2, parse_usize, show_display),
    (latent_channels, "latent_channels", usize, 4, parse_usize, show_display),
    (pixel_widths, "pixel_widths", [usize; 3], [16, 32, 64], parse_widths, show_widths),
    (disc_width, "disc_width", usize, 32, parse_usize, show_display),
    (den_widths, "den_widths", [usize; 3], [48, 64, 64], parse_widths, show_widths),
    (n_ext, "n_ext", usize, 32, parse_usize, show_display),
    (den_heads, "den_heads", usize, 1, parse_usize, show_display),
    (t_emb_dim, "t_emb_dim", usize, 64, parse_usize, show_display),
    (gn_groups, "gn_groups", usize, 8, parse_usize, show_display),
    (t_train, "t_train", usize, 1000, parse_usize, show_display),
    (schedule, "schedule", String, "scaled_linear".to_string(), parse_string, show_display),
    (sample_steps, "sample_steps", usize, 50, parse_usize, show_display),
    (guidance_scale, "guidance_scale", f64, 3.0, parse_f64, show_display),
    (drop_prob, "drop_prob", f64, 0.30, parse_f64, show_display),
    (alpha, "alpha", f64, 1.0, parse_f64, show_display),
    (beta, "beta", f64, 0.5, parse_f64, show_display),
    (n_win, "n_win", usize, 7, parse_usize, show_display),
    (lambda, "lambda", f64, 20.0, parse_f64, show_display),
    (refine_min_res, "refine_min_res", usize, 8, parse_usize, show_display),
    (inner_iters, "inner_iters", usize, 1, parse_usize, show_display),
    (backtrack, "backtrack", bool, true, parse_bool, show_display),
    (batch_size, "batch_size", usize, 8, parse_usize, show_display),
    (pixel_pretrain_epochs, "pixel_pretrain_epochs", usize, 8, parse_usize, show_display),
    (pixel_finetune_epochs, "pixel_finetune_epochs", usize, 12, parse_usize, show_display),
    (latent_pretrain_epochs, "latent_pretrain_epochs", usize, 15, parse_usize, show_display),
    (latent_finetune_epochs, "latent_finetune_epochs", usize, 25, parse_usize, show_display),
    (lr_pixel, "lr_pixel", f64, 1e-3, parse_f64, show_display),
    (lr_disc, "lr_disc", f64, 1e-5, parse_f64, show_display),
    (disc_warmup_epochs, "disc_warmup_epochs", usize, 4, parse_usize, show_display),
    (lr_latent, "lr_latent", f64, 1e-3, parse_f64, show_display),
    (seed, "seed", u64, 0, parse_u64, show_display),
    (no_lic, "no_lic", bool, false, parse_bool, show_display),
    (no_slr, "no_slr", bool, false, parse_bool, show_display),
    (no_iss, "no_iss", bool, false, parse_bool, show_display),
];

impl RunConfig {
    /// Parse a key=value file; later duplicate keys are an error.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_checked(&text)
    }

    pub fn from_str_checked(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), lineno + 1) {
                return Err(Error::Config(format!(
                    "duplicate key {key:?} on lines {prev} and {}",
                    lineno + 1
                )));
            }
            cfg.set_key(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::Config("scene counts must be at least 1".into()));
        }
        if !self.image_size.is_multiple_of(4) || self.image_size < 16 {
            return Err(Error::Config("image_size must be >= 16 and divisible by 4".into()));
        }
        let worst_tokens = self.instance_max * 4 - 1;
        if self.n_tok < worst_tokens {
            return Err(Error::Config(format!(
                "n_tok={} cannot hold a complete description of {} instances ({} tokens)",
                self.n_tok, self.instance_max, worst_tokens
            )));
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_train {
            return Err(Error::Config("sample_steps must be in [1, t_train]".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config("drop_prob must lie in [0,1]".into()));
        }
        if !self.d_text.is_multiple_of(self.text_heads) {
            return Err(Error::Config("d_text must be divisible by text_heads".into()));
        }
        for w in self.den_widths {
            if w % self.den_heads != 0 {
                return Err(Error::Config("den_widths must be divisible by den_heads".into()));
            }
        }
        if !matches!(self.schedule.as_str(), "scaled_linear" | "cosine") {
            return Err(Error::Config(format!(
                "schedule must be scaled_linear or cosine, got {:?}",
                self.schedule
            )));
        }
        self.gen_config().validate()?;
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            image_size: self.image_size,
            instance_min: self.instance_min,
            instance_max: self.instance_max,
            bg_l_range: (self.bg_l_min, self.bg_l_max),
            shade_amp: self.shade_amp,
            ..GenConfig::default()
        }
    }

    pub fn compression_config(&self) -> CompressionConfig {
        CompressionConfig {
            image_size: self.image_size,
            latent_channels: self.latent_channels,
            widths: self.pixel_widths,
            disc_width: self.disc_width,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: self.latent_channels,
            latent_size: self.image_size / 4,
            widths: self.den_widths,
            n_ext: self.n_ext,
            heads: self.den_heads,
            t_emb_dim: self.t_emb_dim,
            d_text: self.d_text,
            groups: self.gn_groups,
            pyr_channels: self.pixel_widths,
            pyr_sizes: [self.image_size, self.image_size / 2, self.image_size / 4],
        }
    }

    pub fn text_config(&self) -> TextEncoderConfig {
        TextEncoderConfig { n_tok: self.n_tok, d_text: self.d_text, heads: self.text_heads }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            scale: self.guidance_scale,
            drop_prob: self.drop_prob,
            ..GuidanceConfig::default()
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            lambda: self.lambda,
            backtrack: self.backtrack,
            inner_iters: self.inner_iters,
            refine_min_res: self.refine_min_res,
            blocks: None,
        }
    }

    pub fn pixel_loss_config(&self) -> PixelLossCfg {
        PixelLossCfg { alpha: self.alpha, beta: self.beta, n_win: self.n_win }
    }

    pub fn noise_schedule(&self) -> crate::diffusion::NoiseSchedule {
        match self.schedule.as_str() {
            "cosine" => crate::diffusion::NoiseSchedule::cosine(self.t_train),
            _ => crate::diffusion::NoiseSchedule::scaled_linear(self.t_train),
        }
    }

    pub fn pixel_ckpt(&self) -> PathBuf {
        self.run_dir.join("pixel.ckpt")
    }

    pub fn latent_base_ckpt(&self) -> PathBuf {
        self.run_dir.join("latent_base.ckpt")
    }

    pub fn latent_ckpt(&self) -> PathBuf {
        self.run_dir.join("latent.ckpt")
    }

    pub fn train_data_dir(&self) -> PathBuf {
        self.data_dir.join("train")
    }

    pub fn eval_data_dir(&self) -> PathBuf {
        self.data_dir.join("eval")
    }

    /// FNV-1a hash of the canonical rendering, for run metadata.
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.render().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Write the resolved config and a metadata file beside run outputs.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("resolved_config.txt");
        std::fs::write(&cfg_path, self.render()).map_err(|e| Error::io(&cfg_path, e))?;
        let meta_path = dir.join(format!("run_metadata_{command}.json"));
        let meta = serde_json::json!({
            "command": command,
            "config_hash": self.content_hash(),
            "seed": self.seed,
            "unix_time": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        });
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
            .map_err(|e| Error::io(&meta_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render_and_parse() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.drop_prob, 0.30);
        assert_eq!(cfg.sample_steps, 50);
        assert_eq!(cfg.train_scenes, 2000);
        assert_eq!(cfg.eval_scenes, 200);
        let text = cfg.render();
        let back = RunConfig::from_str_checked(&text).unwrap();
        assert_eq!(back.render(), text);
        assert_eq!(back.content_hash(), cfg.content_hash());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(RunConfig::from_str_checked("bogus_key=3").is_err());
        assert!(RunConfig::from_str_checked("alpha=1.0\nalpha=2.0").is_err());
        assert!(RunConfig::from_str_checked("alpha").is_err());
        // comments and blanks are fine
        let cfg = RunConfig::from_str_checked("# comment\n\nalpha=2.5\n").unwrap();
        assert_eq!(cfg.alpha, 2.5);
    }

    #[test]
    fn validation_catches_inconsistent_settings() {
        assert!(RunConfig::from_str_checked("train_scenes=0").is_err());
        assert!(RunConfig::from_str_checked("instance_max=4").is_err()); // 15 tokens > 12
        let ok = RunConfig::from_str_checked("instance_max=4\nn_tok=16").unwrap();
        assert_eq!(ok.n_tok, 16);
        assert!(RunConfig::from_str_checked("sample_steps=0").is_err());
        assert!(RunConfig::from_str_checked("drop_prob=1.5").is_err());
    }
}
