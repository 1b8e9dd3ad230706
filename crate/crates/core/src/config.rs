//! Run configuration: a flat UTF-8 file of `section.key = value` lines
//! covering model widths, training, fine-tuning, and stencil settings.
//! Unknown keys are rejected; parse -> render -> parse is the identity.

use std::path::Path;

use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model widths (spatial dim and channel count come from the data)
    pub n_c: usize,
    pub n_g: usize,
    pub heads: usize,
    pub attn_layers: usize,
    pub mamba_layers: usize,
    pub state_width: usize,
    pub k: usize,
    // stage 1
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sampling_rate: f64,
    // stage 2
    pub ft_lambda_phi: f64,
    pub ft_lambda_r: f64,
    pub ft_xi: f64,
    pub ft_steps: usize,
    pub ft_lr: f64,
    pub ft_seed: u64,
    // stencil
    pub fd_dx_rel: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = FinetuneConfig::default();
        RunConfig {
            n_c: t.model.n_c,
            n_g: t.model.n_g,
            heads: t.model.heads,
            attn_layers: t.model.attn_layers,
            mamba_layers: t.model.mamba_layers,
            state_width: t.model.state_width,
            k: t.model.k,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            sampling_rate: t.sampling_rate,
            ft_lambda_phi: f.lambda_phi,
            ft_lambda_r: f.lambda_r,
            ft_xi: f.xi,
            ft_steps: f.steps,
            ft_lr: f.lr,
            ft_seed: f.seed,
            fd_dx_rel: f.fd_fraction,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $ty:ty, $desc:literal;)*) => {
        pub const KEY_DESCRIPTIONS: &[(&str, &str)] = &[
            $(($key, $desc),)*
        ];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = value.parse::<$ty>().map_err(|_| {
                            Error::Config(format!("key {key}: cannot parse {value:?}"))
                        })?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown config key {key}"))),
                }
            }

            /// Canonical rendering: every key, schema order, LF endings.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $key, self.$field));)*
                out
            }
        }
    };
}

config_keys! {
    "model.n_c" => n_c: usize, "embedding width per input branch";
    "model.n_g" => n_g: usize, "latent feature width";
    "model.heads" => heads: usize, "attention heads (divides model.n_g)";
    "model.attn_layers" => attn_layers: usize, "encoder self-attention layers";
    "model.mamba_layers" => mamba_layers: usize, "latent state-space layers";
    "model.state_width" => state_width: usize, "state width per latent channel";
    "model.k" => k: usize, "nearest neighbors per point";
    "train.lr" => lr: f64, "stage-1 learning rate";
    "train.beta1" => beta1: f64, "first-moment decay";
    "train.beta2" => beta2: f64, "second-moment decay";
    "train.eps" => eps: f64, "optimizer epsilon";
    "train.weight_decay" => weight_decay: f64, "decoupled weight decay";
    "train.epochs" => epochs: usize, "passes over the dataset";
    "train.batch_size" => batch_size: usize, "samples per optimizer step";
    "train.seed" => seed: u64, "stage-1 seed (init, masks)";
    "train.sampling_rate" => sampling_rate: f64, "fraction of query points in the loss";
    "finetune.lambda_phi" => ft_lambda_phi: f64, "anchor term weight";
    "finetune.lambda_r" => ft_lambda_r: f64, "residual term weight";
    "finetune.xi" => ft_xi: f64, "self-supervision proportion per channel";
    "finetune.steps" => ft_steps: usize, "fine-tune optimizer steps";
    "finetune.lr" => ft_lr: f64, "fine-tune learning rate";
    "finetune.seed" => ft_seed: u64, "fine-tune seed (init, masks)";
    "fd.dx_rel" => fd_dx_rel: f64, "stencil step as a fraction of the bbox diagonal";
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `section.key = value`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn model_config(&self, d: usize, n_phi: usize) -> ModelConfig {
        ModelConfig {
            d,
            n_phi,
            n_c: self.n_c,
            n_g: self.n_g,
            heads: self.heads,
            attn_layers: self.attn_layers,
            mamba_layers: self.mamba_layers,
            state_width: self.state_width,
            k: self.k,
        }
    }

    pub fn train_config(&self, d: usize, n_phi: usize) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            sampling_rate: self.sampling_rate,
            model: self.model_config(d, n_phi),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lambda_phi: self.ft_lambda_phi,
            lambda_r: self.ft_lambda_r,
            xi: self.ft_xi,
            steps: self.ft_steps,
            lr: self.ft_lr,
            seed: self.ft_seed,
            fd_fraction: self.fd_dx_rel,
            ..FinetuneConfig::default()
        }
    }

    /// One line per key with its default, for `--help`.
    pub fn describe_keys() -> String {
        let defaults = RunConfig::default();
        let rendered = defaults.render();
        let default_of = |key: &str| -> String {
            rendered
                .lines()
                .find(|l| l.starts_with(&format!("{key} ")))
                .and_then(|l| l.split(" = ").nth(1))
                .unwrap_or("")
                .to_string()
        };
        let mut out = String::from("Config file keys (section.key = value):\n");
        for (key, desc) in KEY_DESCRIPTIONS {
            out.push_str(&format!("  {key} = {} — {desc}\n", default_of(key)));
        }
        out
    }
}
