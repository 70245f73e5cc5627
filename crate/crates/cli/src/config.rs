//! The run configuration: a JSON file whose fields any flag can override.

use std::fs;
use std::path::PathBuf;

use cessl::data::SplitSpec;
use cessl::model::BackboneConfig;
use cessl::trainer::TrainerConfig;
use cessl::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::{Init, RunArgs, SplitFlags, TrainerFlags};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub split: SplitSpec,
    /// Architecture of randomly initialized runs; checkpoints carry their own.
    pub backbone: Option<BackboneConfig>,
    pub random_init: bool,
    pub paths: Paths,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.split.validate()?;
        if let Some(b) = &self.backbone {
            b.validate().map_err(|e| Error::Config(format!("backbone: {e}")))?;
        }
        if self.random_init && self.paths.checkpoint.is_some() {
            return Err(Error::Config("--checkpoint and --init random are mutually exclusive".into()));
        }
        Ok(())
    }
}

pub fn apply_trainer(t: &mut TrainerConfig, f: &TrainerFlags) {
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = f.$field { t.$field = v; })*
        };
    }
    set!(labeled_batch, unlabeled_batch, lr, eps, weight_decay, p, r, c, sigma);
    set!(max_iters, eval_every, patience, freeze_first_k_conv, semi_bn, cutmix, threshold);
    if let Some(s) = f.unlabeled_source {
        t.unlabeled_source = s.into();
    }
}

pub fn apply_split(s: &mut SplitSpec, f: &SplitFlags) {
    if let Some(v) = f.test_frac {
        s.test_frac = v;
    }
    if let Some(v) = f.labeled_frac_of_train {
        s.labeled_frac_of_train = v;
    }
    if let Some(v) = f.val_frac_of_labeled {
        s.val_frac_of_labeled = v;
    }
    if let Some(v) = f.split_seed {
        s.seed = v;
    }
    if let Some(v) = f.group_by_patient {
        s.group_by_patient = v;
    }
}

/// Reads `--config` (if any) and applies every flag on top of it.
pub fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.trainer.seed = seed;
        cfg.split.seed = seed;
    }
    apply_trainer(&mut cfg.trainer, &args.trainer);
    apply_split(&mut cfg.split, &args.split);
    if args.init == Some(Init::Random) {
        cfg.random_init = true;
    }
    for (slot, flag) in [
        (&mut cfg.paths.data, &args.data),
        (&mut cfg.paths.checkpoint, &args.checkpoint),
        (&mut cfg.paths.out, &args.out),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    Ok(cfg)
}
