use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticShiftSpec;
use crate::error::{Error, Result};
use crate::graph::Task;
use crate::losses::{LossConfig, Reduction};
use crate::optim::AdadeltaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Plain model trained on the merged sources.
    Src,
    /// Plain model trained on the labeled target.
    Tar,
    /// Alignment layers, sources plus unlabeled target.
    Msdial,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "src" => Ok(Method::Src),
            "tar" => Ok(Method::Tar),
            "msdial" => Ok(Method::Msdial),
            other => Err(Error::Config(format!("unknown method `{other}` (src|tar|msdial)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Src => "src",
            Method::Tar => "tar",
            Method::Msdial => "msdial",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// Feature table; one path per split.
    Table,
    /// IDX pair; `images,labels` per split.
    Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainFiles {
    pub name: String,
    pub format: DataFormat,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainSource {
    /// Generated afresh for every replication from the replication seed.
    /// Domains are named `d0`, `d1`, …; the spec's own target index and seed
    /// are overridden by the experiment.
    Synthetic(SyntheticShiftSpec),
    Files(Vec<DomainFiles>),
}

impl DomainSource {
    pub fn names(&self) -> Vec<String> {
        match self {
            DomainSource::Synthetic(spec) => (0..spec.domains.len()).map(|d| format!("d{d}")).collect(),
            DomainSource::Files(files) => files.iter().map(|f| f.name.clone()).collect(),
        }
    }
}

pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.001, 0.005, 0.01, 0.05, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub classes: usize,
    pub domains: DomainSource,
    /// Name of the held-out domain.
    pub target: String,
    pub method: Method,
    pub loss: LossConfig,
    pub optimizer: AdadeltaConfig,
    pub epochs: usize,
    /// Rows per step across all participating domains; each domain
    /// contributes `batch_size / domain_count` of them.
    pub batch_size: usize,
    pub replications: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Hidden FC widths; the task's reference widths when `None`.
    pub hidden: Option<Vec<usize>>,
    pub conv_dropout: f64,
    pub fc_dropout: f64,
    pub batchnorm: bool,
    /// Per-domain subsample sizes for file-backed domains.
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
    /// Grid for the λ sweep.
    pub lambdas: Vec<f64>,
}

impl ExperimentConfig {
    /// Features task on a synthetic benchmark, target `d{spec.target}`.
    pub fn synthetic(spec: SyntheticShiftSpec) -> Self {
        let target = format!("d{}", spec.target);
        ExperimentConfig {
            task: Task::Features,
            classes: spec.class_count,
            domains: DomainSource::Synthetic(spec),
            target,
            method: Method::Msdial,
            loss: LossConfig::default(),
            optimizer: AdadeltaConfig::default(),
            epochs: 50,
            batch_size: default_batch_size(Task::Features),
            replications: 20,
            seed: 0,
            output_dir: PathBuf::from("out"),
            hidden: None,
            conv_dropout: 0.2,
            fc_dropout: 0.5,
            batchnorm: false,
            train_samples: None,
            test_samples: None,
            lambdas: DEFAULT_LAMBDA_GRID.to_vec(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.names()
    }

    pub fn target_index(&self) -> Result<usize> {
        self.names()
            .iter()
            .position(|n| *n == self.target)
            .ok_or_else(|| Error::Config(format!("target `{}` is not one of the domains", self.target)))
    }

    pub fn domain_count(&self) -> usize {
        self.names().len()
    }

    /// Rows each participating domain contributes to a step.
    pub fn per_domain(&self) -> usize {
        self.batch_size / self.domain_count().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.target_index()?;
        let names = self.names();
        if names.len() < 2 {
            return Err(Error::Config("need at least one source besides the target".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("domain `{n}` listed twice")));
            }
        }
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.per_domain() < 2 {
            return Err(Error::Config(format!(
                "batch_size {} leaves fewer than 2 rows for each of {} domains",
                self.batch_size,
                names.len()
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        for p in [self.conv_dropout, self.fc_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        LossConfig::with_lambda(self.loss.lambda)?;
        if let DomainSource::Files(files) = &self.domains {
            for f in files {
                let want = match f.format {
                    DataFormat::Table => 1,
                    DataFormat::Idx => 2,
                };
                if f.train.len() != want || f.test.len() != want {
                    return Err(Error::Config(format!(
                        "domain `{}` needs {want} path(s) per split",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative data
    /// paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());

        let source = match (get("synthetic"), get("domains")) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("set either `synthetic` or `domains`, not both".into()))
            }
            (Some(preset), None) => {
                let mut spec = match preset {
                    "shift" => SyntheticShiftSpec::shift_benchmark(0),
                    "no-shift" => SyntheticShiftSpec::no_shift_control(0),
                    other => return Err(Error::Config(format!("unknown synthetic preset `{other}`"))),
                };
                if let Some(v) = get("synthetic.train_per_domain") {
                    spec.train_per_domain = parse_value("synthetic.train_per_domain", v)?;
                }
                if let Some(v) = get("synthetic.test_per_domain") {
                    spec.test_per_domain = parse_value("synthetic.test_per_domain", v)?;
                }
                DomainSource::Synthetic(spec)
            }
            (None, Some(list)) => {
                let mut files = Vec::new();
                for name in list.split(',').map(str::trim).filter(|n| !n.is_empty()) {
                    let key = |field: &str| format!("domain.{name}.{field}");
                    let format = match get(&key("format")).unwrap_or("table") {
                        "table" => DataFormat::Table,
                        "idx" => DataFormat::Idx,
                        other => return Err(Error::Config(format!("unknown format `{other}`"))),
                    };
                    let paths = |field: &str| -> Result<Vec<PathBuf>> {
                        let v = get(&key(field))
                            .ok_or_else(|| Error::Config(format!("missing `{}`", key(field))))?;
                        Ok(v.split(',').map(|p| base.join(p.trim())).collect())
                    };
                    files.push(DomainFiles {
                        name: name.to_string(),
                        format,
                        train: paths("train")?,
                        test: paths("test")?,
                    });
                }
                DomainSource::Files(files)
            }
            (None, None) => return Err(Error::Config("missing `synthetic` or `domains`".into())),
        };

        let mut cfg = ExperimentConfig::synthetic(SyntheticShiftSpec::shift_benchmark(0));
        cfg.domains = source;
        cfg.target = cfg.names().last().cloned().unwrap_or_default();
        for (key, value) in &pairs {
            let v = value.as_str();
            match key.as_str() {
                "synthetic" | "domains" => {}
                k if k.starts_with("synthetic.") || k.starts_with("domain.") => {}
                "task" => cfg.task = v.parse()?,
                "classes" => cfg.classes = parse_value(key, v)?,
                "target" => cfg.target = v.to_string(),
                "method" => cfg.method = v.parse()?,
                "lambda" => cfg.loss.lambda = parse_value(key, v)?,
                "source_reduction" => cfg.loss.source_reduction = v.parse::<Reduction>()?,
                "target_reduction" => cfg.loss.target_reduction = v.parse::<Reduction>()?,
                "epochs" => cfg.epochs = parse_value(key, v)?,
                "batch_size" => cfg.batch_size = parse_value(key, v)?,
                "replications" => cfg.replications = parse_value(key, v)?,
                "seed" => cfg.seed = parse_value(key, v)?,
                "output_dir" => cfg.output_dir = base.join(v),
                "hidden" => cfg.hidden = Some(parse_list(key, v)?),
                "conv_dropout" => cfg.conv_dropout = parse_value(key, v)?,
                "fc_dropout" => cfg.fc_dropout = parse_value(key, v)?,
                "batchnorm" => cfg.batchnorm = parse_value(key, v)?,
                "train_samples" => cfg.train_samples = Some(parse_value(key, v)?),
                "test_samples" => cfg.test_samples = Some(parse_value(key, v)?),
                "lambdas" => cfg.lambdas = parse_list(key, v)?,
                "rho" => cfg.optimizer.rho = parse_value(key, v)?,
                "eps" => cfg.optimizer.eps = parse_value(key, v)?,
                "lr" => cfg.optimizer.lr = parse_value(key, v)?,
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        if !pairs.iter().any(|(k, _)| k == "batch_size") {
            cfg.batch_size = default_batch_size(cfg.task);
        }
        if !pairs.iter().any(|(k, _)| k == "classes") {
            if let DomainSource::Synthetic(spec) = &cfg.domains {
                cfg.classes = spec.class_count;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// 128 rows per step for digits, 32 for pre-computed features.
pub fn default_batch_size(task: Task) -> usize {
    match task {
        Task::Digits => 128,
        Task::Features => 32,
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_value(key, p.trim())).collect()
}
