//! Run configuration as `key = value` text. Every key is optional; unknown
//! keys are errors. [`RunConfig::to_text`] writes every key, so the output
//! parses back to an equal value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::ShapesConfig;
use crate::error::{Error, Result};
use crate::kv;
use crate::localpod::PodConfig;
use crate::model::Architecture;
use crate::protocol::{Mode, Scenario};
use crate::pseudolabel::DEFAULT_TAU_MAX;

/// Feature-distillation weight for the small default network. It has no
/// normalization layers, so its tap statistics are far larger than those of a
/// deep normalized backbone and heavier weights make training diverge.
pub const DESK_LAMBDA_FEATURES: f64 = 1e-5;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Plop,
    Finetune,
    Kd,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plop" => Ok(Method::Plop),
            "finetune" => Ok(Method::Finetune),
            "kd" => Ok(Method::Kd),
            _ => Err(Error::Config(format!("unknown method {s:?} (expected plop, finetune or kd)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Plop => "plop",
            Method::Finetune => "finetune",
            Method::Kd => "kd",
        })
    }
}

/// Whether reports record wall-clock seconds. `Off` writes 0 so reports of
/// identical runs are byte-identical.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Timing {
    Wall,
    Off,
}

impl FromStr for Timing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wall" => Ok(Timing::Wall),
            "off" => Ok(Timing::Off),
            _ => Err(Error::Config(format!("unknown timing {s:?} (expected wall or off)"))),
        }
    }
}

impl fmt::Display for Timing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Timing::Wall => "wall",
            Timing::Off => "off",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generated in memory from the shapes config.
    Shapes(ShapesConfig),
    /// Directories written by `generate` or [`crate::data::save_dataset`].
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoConfig {
    /// Cap on per-class thresholds; `inf` disables it.
    pub tau_max: f64,
    pub normalized: bool,
    /// Scale the classification loss by the accepted-background ratio.
    pub nu_weighting: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_first: f64,
    pub lr_next: f64,
    /// Per-epoch multiplicative decay.
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_first: usize,
    pub epochs_next: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: String,
    pub mode: Mode,
    pub method: Method,
    /// Class learning order; `None` is `1..=n_classes`.
    pub ordering: Option<Vec<usize>>,
    pub seed: u64,
    pub timing: Timing,
    pub out: Option<PathBuf>,
    pub model: Architecture,
    pub pod: PodConfig,
    pub pseudo: PseudoConfig,
    pub kd_weight: f64,
    /// Fine-tune on non-background pixels only.
    pub finetune_ignore_background: bool,
    pub optim: OptimConfig,
    pub flip: bool,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: "3-1".into(),
            mode: Mode::Overlapped,
            method: Method::Plop,
            ordering: None,
            seed: 0,
            timing: Timing::Wall,
            out: None,
            model: Architecture::default(),
            pod: PodConfig {
                lambda_features: DESK_LAMBDA_FEATURES,
                ..PodConfig::default()
            },
            pseudo: PseudoConfig {
                tau_max: DEFAULT_TAU_MAX,
                normalized: true,
                nu_weighting: true,
            },
            kd_weight: 1.0,
            finetune_ignore_background: false,
            optim: OptimConfig {
                lr_first: 1e-2,
                lr_next: 1e-3,
                lr_decay: 0.9,
                momentum: 0.9,
                batch_size: 8,
                epochs_first: 30,
                epochs_next: 30,
            },
            flip: true,
            data: DataSource::Shapes(ShapesConfig::default()),
        }
    }
}

struct Keys(BTreeMap<String, String>);

impl Keys {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.0.remove(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))?;
        }
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some(v) = self.0.remove(key) {
            *slot = kv::list(&v).ok_or_else(|| Error::Config(format!("bad list {v:?} for {key}")))?;
        }
        Ok(())
    }

    fn take_bool(&mut self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.0.remove(key) {
            *slot = match v.as_str() {
                "true" => true,
                "false" => false,
                _ => return Err(Error::Config(format!("{key} must be true or false, got {v:?}"))),
            };
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut k = Keys(kv::parse(text)?);
        let mut c = RunConfig::default();
        k.take("scenario", &mut c.scenario)?;
        k.take("mode", &mut c.mode)?;
        k.take("method", &mut c.method)?;
        if let Some(v) = k.0.remove("ordering") {
            c.ordering = if v == "identity" {
                None
            } else {
                Some(kv::list(&v).ok_or_else(|| Error::Config(format!("bad ordering {v:?}")))?)
            };
        }
        k.take("seed", &mut c.seed)?;
        k.take("timing", &mut c.timing)?;
        if let Some(v) = k.0.remove("out") {
            c.out = Some(PathBuf::from(v));
        }
        k.take_list("model.channels", &mut c.model.channels)?;
        k.take("model.kernel", &mut c.model.kernel)?;
        k.take_list("pod.divisions", &mut c.pod.divisions)?;
        k.take_bool("pod.square_values", &mut c.pod.square_values)?;
        k.take("pod.lambda_features", &mut c.pod.lambda_features)?;
        k.take("pod.lambda_logits", &mut c.pod.lambda_logits)?;
        k.take_bool("pod.adaptive_weighting", &mut c.pod.adaptive_weighting)?;
        k.take("pseudo.tau_max", &mut c.pseudo.tau_max)?;
        k.take_bool("pseudo.normalized", &mut c.pseudo.normalized)?;
        k.take_bool("pseudo.nu_weighting", &mut c.pseudo.nu_weighting)?;
        k.take("kd.weight", &mut c.kd_weight)?;
        k.take_bool("finetune.ignore_background", &mut c.finetune_ignore_background)?;
        k.take("optim.lr_first", &mut c.optim.lr_first)?;
        k.take("optim.lr_next", &mut c.optim.lr_next)?;
        k.take("optim.lr_decay", &mut c.optim.lr_decay)?;
        k.take("optim.momentum", &mut c.optim.momentum)?;
        k.take("optim.batch_size", &mut c.optim.batch_size)?;
        k.take("optim.epochs_first", &mut c.optim.epochs_first)?;
        k.take("optim.epochs_next", &mut c.optim.epochs_next)?;
        k.take_bool("augment.flip", &mut c.flip)?;

        let train = k.0.remove("data.train");
        let test = k.0.remove("data.test");
        let mut shapes = ShapesConfig::default();
        let shape_keys = k.0.keys().filter(|key| key.starts_with("shapes.")).count();
        k.take("shapes.n_classes", &mut shapes.n_classes)?;
        k.take("shapes.height", &mut shapes.height)?;
        k.take("shapes.width", &mut shapes.width)?;
        k.take("shapes.n_train", &mut shapes.n_train)?;
        k.take("shapes.n_test", &mut shapes.n_test)?;
        if let Some(v) = k.0.remove("shapes.domains") {
            shapes.domains = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(|s| s.trim().to_string()).collect()
            };
        }
        k.take("shapes.seed", &mut shapes.seed)?;
        c.data = match (train, test) {
            (None, None) => DataSource::Shapes(shapes),
            (Some(train), Some(test)) if shape_keys == 0 => DataSource::Files {
                train: train.into(),
                test: test.into(),
            },
            (Some(_), Some(_)) => {
                return Err(Error::Config("data.train/data.test cannot be combined with shapes.* keys".into()))
            }
            _ => return Err(Error::Config("data.train and data.test must be given together".into())),
        };

        if let Some(key) = k.0.keys().next() {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let scenario: Scenario = self.scenario.parse()?;
        if scenario.domain != (self.mode == Mode::DomainIncremental) {
            return Err(Error::Config(format!(
                "scenario {:?} does not match mode {}",
                self.scenario, self.mode
            )));
        }
        self.model.validate()?;
        self.pod.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.pseudo.tau_max.is_nan() || self.pseudo.tau_max < 0.0 {
            return Err(Error::Config("pseudo.tau_max must be >= 0".into()));
        }
        if !(self.kd_weight >= 0.0) {
            return Err(Error::Config("kd.weight must be >= 0".into()));
        }
        let o = &self.optim;
        if !(o.lr_first > 0.0 && o.lr_next > 0.0 && o.lr_decay > 0.0 && o.lr_decay <= 1.0) {
            return Err(Error::Config("learning rates must be > 0 and lr_decay in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config("optim.momentum must be in [0, 1)".into()));
        }
        if o.batch_size == 0 || o.epochs_first == 0 || o.epochs_next == 0 {
            return Err(Error::Config("batch size and epoch counts must be positive".into()));
        }
        if let DataSource::Shapes(s) = &self.data {
            s.validate()?;
            self.pod.check_divides(s.height, s.width).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("scenario = {}", self.scenario),
            format!("mode = {}", self.mode),
            format!("method = {}", self.method),
            format!(
                "ordering = {}",
                self.ordering.as_ref().map_or("identity".to_string(), |o| kv::join(o))
            ),
            format!("seed = {}", self.seed),
            format!("timing = {}", self.timing),
        ];
        if let Some(out) = &self.out {
            lines.push(format!("out = {}", out.display()));
        }
        lines.extend([
            format!("model.channels = {}", kv::join(&self.model.channels)),
            format!("model.kernel = {}", self.model.kernel),
            format!("pod.divisions = {}", kv::join(&self.pod.divisions)),
            format!("pod.square_values = {}", self.pod.square_values),
            format!("pod.lambda_features = {:e}", self.pod.lambda_features),
            format!("pod.lambda_logits = {:e}", self.pod.lambda_logits),
            format!("pod.adaptive_weighting = {}", self.pod.adaptive_weighting),
            format!("pseudo.tau_max = {:e}", self.pseudo.tau_max),
            format!("pseudo.normalized = {}", self.pseudo.normalized),
            format!("pseudo.nu_weighting = {}", self.pseudo.nu_weighting),
            format!("kd.weight = {}", self.kd_weight),
            format!("finetune.ignore_background = {}", self.finetune_ignore_background),
            format!("optim.lr_first = {:e}", self.optim.lr_first),
            format!("optim.lr_next = {:e}", self.optim.lr_next),
            format!("optim.lr_decay = {}", self.optim.lr_decay),
            format!("optim.momentum = {}", self.optim.momentum),
            format!("optim.batch_size = {}", self.optim.batch_size),
            format!("optim.epochs_first = {}", self.optim.epochs_first),
            format!("optim.epochs_next = {}", self.optim.epochs_next),
            format!("augment.flip = {}", self.flip),
        ]);
        match &self.data {
            DataSource::Shapes(s) => lines.extend([
                format!("shapes.n_classes = {}", s.n_classes),
                format!("shapes.height = {}", s.height),
                format!("shapes.width = {}", s.width),
                format!("shapes.n_train = {}", s.n_train),
                format!("shapes.n_test = {}", s.n_test),
                format!("shapes.domains = {}", s.domains.join(",")),
                format!("shapes.seed = {}", s.seed),
            ]),
            DataSource::Files { train, test } => lines.extend([
                format!("data.train = {}", train.display()),
                format!("data.test = {}", test.display()),
            ]),
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}
