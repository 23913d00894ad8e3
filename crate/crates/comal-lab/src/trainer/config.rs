//! Flat key-value training configuration.

use std::fmt;
use std::str::FromStr;

use crate::bimal::TauForm;
use crate::losses::{ClassDistribution, ObjectiveCfg};
use crate::synthworld::WorldConfig;
use crate::{Error, Real, Result};

/// Training regime; the likelihood regimes carry their ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    SourceOnly,
    EntMin,
    Bimal { use_tau: bool },
    Comal { use_comal: bool },
}

impl Regime {
    pub const ABLATION_ORDER: [Regime; 5] = [
        Regime::SourceOnly,
        Regime::Bimal { use_tau: false },
        Regime::Bimal { use_tau: true },
        Regime::Comal { use_comal: false },
        Regime::Comal { use_comal: true },
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::SourceOnly => "source-only",
            Regime::EntMin => "entmin",
            Regime::Bimal { use_tau: false } => "bimal-llk",
            Regime::Bimal { use_tau: true } => "bimal",
            Regime::Comal { use_comal: false } => "comal-cls",
            Regime::Comal { use_comal: true } => "comal",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Regime> {
        match s {
            "source-only" => Ok(Regime::SourceOnly),
            "entmin" => Ok(Regime::EntMin),
            "bimal" => Ok(Regime::Bimal { use_tau: true }),
            "bimal-llk" => Ok(Regime::Bimal { use_tau: false }),
            "comal" => Ok(Regime::Comal { use_comal: true }),
            "comal-cls" => Ok(Regime::Comal { use_comal: false }),
            other => Err(Error::Parse(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub lambda: Real,
    pub source_count: usize,
    pub target_count: usize,
    pub eval_count: usize,
    pub batch: usize,
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub warmup_epochs: usize,
    pub adapt_epochs: usize,
    /// Evaluate mIoU every this many epochs (the final epoch always runs).
    pub eval_every: usize,
    pub flow_epochs: usize,
    pub flow_lr: Real,
    pub struct_epochs: usize,
    pub struct_lr: Real,
    pub struct_batch: usize,
    pub lambda_bimal: Real,
    pub lambda_comal: Real,
    pub lambda_ent: Real,
    pub pseudo_threshold: Real,
    pub weight_clamp: Real,
    pub sigma1: Real,
    pub sigma2: Real,
    pub tau_form: TauForm,
    pub num_anchors: usize,
    /// None = uniform ideal distribution.
    pub qprime: Option<ClassDistribution>,
    /// Refresh the target-side class histogram from pseudo-labels each
    /// epoch instead of reusing the source histogram.
    pub refresh_target_hist: bool,
    /// Target-domain rendering shift knobs.
    pub target_hue: Real,
    pub target_brightness: Real,
    pub target_noise: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            height: 32,
            width: 32,
            lambda: 1.0,
            source_count: 64,
            target_count: 64,
            eval_count: 32,
            batch: 8,
            lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 30,
            adapt_epochs: 60,
            eval_every: 5,
            flow_epochs: 40,
            flow_lr: 2e-3,
            struct_epochs: 12,
            struct_lr: 0.02,
            struct_batch: 4,
            lambda_bimal: 1e-3,
            lambda_comal: 1e-3,
            lambda_ent: 0.25,
            pseudo_threshold: 0.9,
            weight_clamp: 10.0,
            sigma1: 0.5,
            sigma2: 0.5,
            tau_form: TauForm::Bilateral,
            num_anchors: 1,
            qprime: None,
            refresh_target_hist: false,
            target_hue: 1.4,
            target_brightness: 0.10,
            target_noise: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn world(&self) -> WorldConfig {
        let mut w = WorldConfig {
            height: self.height,
            width: self.width,
            tail_lambda: self.lambda,
            ..WorldConfig::default()
        };
        w.target.hue_rot = self.target_hue;
        w.target.brightness = self.target_brightness;
        w.target.noise_sigma = self.target_noise;
        w
    }

    pub fn objective(&self, regime: Regime) -> ObjectiveCfg {
        ObjectiveCfg {
            lambda_bimal: self.lambda_bimal,
            lambda_comal: self.lambda_comal,
            lambda_ent: self.lambda_ent,
            pseudo_threshold: self.pseudo_threshold,
            weight_clamp: self.weight_clamp,
            qprime: self.qprime.clone(),
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            tau_form: self.tau_form,
            use_tau: matches!(regime, Regime::Bimal { use_tau: true }),
            use_comal: matches!(regime, Regime::Comal { use_comal: true }),
            num_anchors: self.num_anchors,
        }
    }

    /// Parse the flat `key = value` format (one pair per line, `#` comments).
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Parse(format!("line {}: bad {what}: {value:?}", lineno + 1));
            macro_rules! set {
                ($field:ident, $ty:ty, $what:expr) => {
                    cfg.$field = value.parse::<$ty>().map_err(|_| bad($what))?
                };
            }
            match key {
                "seed" => set!(seed, u64, "integer"),
                "height" => set!(height, usize, "integer"),
                "width" => set!(width, usize, "integer"),
                "lambda" => set!(lambda, Real, "number"),
                "source_count" => set!(source_count, usize, "integer"),
                "target_count" => set!(target_count, usize, "integer"),
                "eval_count" => set!(eval_count, usize, "integer"),
                "batch" => set!(batch, usize, "integer"),
                "lr" => set!(lr, Real, "number"),
                "momentum" => set!(momentum, Real, "number"),
                "weight_decay" => set!(weight_decay, Real, "number"),
                "warmup_epochs" => set!(warmup_epochs, usize, "integer"),
                "adapt_epochs" => set!(adapt_epochs, usize, "integer"),
                "eval_every" => set!(eval_every, usize, "integer"),
                "flow_epochs" => set!(flow_epochs, usize, "integer"),
                "flow_lr" => set!(flow_lr, Real, "number"),
                "struct_epochs" => set!(struct_epochs, usize, "integer"),
                "struct_lr" => set!(struct_lr, Real, "number"),
                "struct_batch" => set!(struct_batch, usize, "integer"),
                "lambda_bimal" => set!(lambda_bimal, Real, "number"),
                "lambda_comal" => set!(lambda_comal, Real, "number"),
                "lambda_ent" => set!(lambda_ent, Real, "number"),
                "pseudo_threshold" => set!(pseudo_threshold, Real, "number"),
                "weight_clamp" => set!(weight_clamp, Real, "number"),
                "sigma1" => set!(sigma1, Real, "number"),
                "sigma2" => set!(sigma2, Real, "number"),
                "tau_form" => cfg.tau_form = value.parse()?,
                "num_anchors" => set!(num_anchors, usize, "integer"),
                "refresh_target_hist" => set!(refresh_target_hist, bool, "bool"),
                "target_hue" => set!(target_hue, Real, "number"),
                "target_brightness" => set!(target_brightness, Real, "number"),
                "target_noise" => set!(target_noise, Real, "number"),
                "qprime" => {
                    if value == "uniform" {
                        cfg.qprime = None;
                    } else {
                        let dist = value
                            .split(',')
                            .map(|s| s.trim().parse::<Real>().map_err(|_| bad("distribution")))
                            .collect::<Result<Vec<Real>>>()?;
                        cfg.qprime = Some(dist);
                    }
                }
                other => {
                    return Err(Error::Parse(format!(
                        "line {}: unknown config key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    /// Canonical echo; `parse(echo(cfg))` reproduces `cfg`.
    pub fn echo(&self) -> String {
        let tau = match self.tau_form {
            TauForm::Paper => "paper",
            TauForm::Bilateral => "bilateral",
        };
        let qprime = match &self.qprime {
            None => "uniform".to_string(),
            Some(d) => d
                .iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(","),
        };
        format!(
            "seed = {}\nheight = {}\nwidth = {}\nlambda = {}\n\
             source_count = {}\ntarget_count = {}\neval_count = {}\n\
             batch = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\n\
             warmup_epochs = {}\nadapt_epochs = {}\neval_every = {}\n\
             flow_epochs = {}\nflow_lr = {}\n\
             struct_epochs = {}\nstruct_lr = {}\nstruct_batch = {}\n\
             lambda_bimal = {}\nlambda_comal = {}\nlambda_ent = {}\n\
             pseudo_threshold = {}\nweight_clamp = {}\n\
             sigma1 = {}\nsigma2 = {}\ntau_form = {}\nnum_anchors = {}\n\
             qprime = {}\nrefresh_target_hist = {}\n\
             target_hue = {}\ntarget_brightness = {}\ntarget_noise = {}\n",
            self.seed,
            self.height,
            self.width,
            self.lambda,
            self.source_count,
            self.target_count,
            self.eval_count,
            self.batch,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.warmup_epochs,
            self.adapt_epochs,
            self.eval_every,
            self.flow_epochs,
            self.flow_lr,
            self.struct_epochs,
            self.struct_lr,
            self.struct_batch,
            self.lambda_bimal,
            self.lambda_comal,
            self.lambda_ent,
            self.pseudo_threshold,
            self.weight_clamp,
            self.sigma1,
            self.sigma2,
            tau,
            self.num_anchors,
            qprime,
            self.refresh_target_hist,
            self.target_hue,
            self.target_brightness,
            self.target_noise,
        )
    }

    /// Stable hash of the canonical echo.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.echo().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}
