//! Run configuration: one key=value file merging model, optimiser, data and
//! output settings.

use std::path::{Path, PathBuf};

use fbnet_core::data::{AugmentConfig, SyntheticSpec, SYNTHETIC_KEYS};
use fbnet_core::kv::KvMap;
use fbnet_core::model::{ModelConfig, MODEL_KEYS};
use fbnet_core::train::{OptimConfig, TrainConfig, OPTIM_KEYS};
use fbnet_core::{Error, Result};

const GENERAL_KEYS: [&str; 13] = [
    "preset",
    "seed",
    "output",
    "data.dir",
    "data.train_fraction",
    "synth.count",
    "augment.enabled",
    "augment.base_size",
    "augment.crop_size",
    "augment.scale_min",
    "augment.scale_max",
    "augment.flip",
    "eval.base_size",
];

/// Every key a run configuration may contain.
pub fn known_keys() -> Vec<String> {
    GENERAL_KEYS
        .iter()
        .chain(&MODEL_KEYS)
        .chain(&OPTIM_KEYS)
        .map(|k| k.to_string())
        .chain(SYNTHETIC_KEYS.iter().map(|k| format!("synth.{k}")))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("preset = {other:?}: expected toy or paper"))),
        }
    }

    fn key(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generated in memory from the spec.
    Synthetic { spec: SyntheticSpec, count: usize },
    /// Directory of FBT1 sample pairs.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub train_fraction: f64,
    pub output: PathBuf,
}

impl RunConfig {
    /// Resolves `text` on top of the chosen preset. Relative paths are taken
    /// relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let known = known_keys();
        kv.check_known(&known.iter().map(String::as_str).collect::<Vec<_>>())?;

        let preset = kv.get("preset").map(Preset::parse).transpose()?.unwrap_or(Preset::Toy);
        let (mut model, mut augment) = match preset {
            Preset::Toy => (ModelConfig::toy(), AugmentConfig::toy()),
            Preset::Paper => (ModelConfig::paper_scale(), AugmentConfig::paper_scale()),
        };
        model.apply_kv(&kv)?;
        model.validate()?;

        let mut optim = OptimConfig::default();
        optim.apply_kv(&kv)?;
        kv.read_into("augment.base_size", &mut augment.base_size)?;
        kv.read_into("augment.crop_size", &mut augment.crop_size)?;
        kv.read_into("augment.scale_min", &mut augment.scale_min)?;
        kv.read_into("augment.scale_max", &mut augment.scale_max)?;
        kv.read_into("augment.flip", &mut augment.flip)?;
        let enabled = kv.parse_opt::<bool>("augment.enabled")?.unwrap_or(true);
        let eval_base = kv.parse_opt("eval.base_size")?.unwrap_or(augment.base_size);
        let seed = kv.parse_opt("seed")?.unwrap_or(0);
        let train = TrainConfig {
            optim,
            augment: enabled.then_some(augment),
            eval_base,
            seed,
        };
        train.validate()?;

        let has_synth = kv.keys().any(|k| k.starts_with("synth."));
        let data = match kv.get("data.dir") {
            Some(_) if has_synth => {
                return Err(Error::Config("data.dir and synth.* keys are mutually exclusive".into()));
            }
            Some(dir) => DataSource::Directory(base_dir.join(dir)),
            None => {
                let mut spec = SyntheticSpec {
                    num_classes: model.num_classes,
                    ..SyntheticSpec::default()
                };
                spec.apply_kv(&kv, "synth.")?;
                spec.validate()?;
                if spec.num_classes != model.num_classes {
                    return Err(Error::Config(format!(
                        "synth.num_classes = {} differs from model.num_classes = {}",
                        spec.num_classes, model.num_classes
                    )));
                }
                let count = kv.parse_opt("synth.count")?.unwrap_or(250);
                DataSource::Synthetic { spec, count }
            }
        };
        let train_fraction = kv.parse_opt("data.train_fraction")?.unwrap_or(0.8);
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config("data.train_fraction must lie strictly between 0 and 1".into()));
        }
        let output = base_dir.join(kv.get("output").unwrap_or("runs/default"));
        Ok(RunConfig {
            preset,
            model,
            train,
            data,
            train_fraction,
            output,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    /// Every resolved value, defaults included.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("preset", self.preset.key());
        kv.set("seed", self.train.seed);
        kv.set("output", self.output.display());
        kv.set("data.train_fraction", self.train_fraction);
        match &self.data {
            DataSource::Synthetic { spec, count } => {
                kv.set("synth.count", count);
                extend(&mut kv, spec.to_kv("synth."));
            }
            DataSource::Directory(dir) => kv.set("data.dir", dir.display()),
        }
        kv.set("augment.enabled", self.train.augment.is_some());
        if let Some(a) = &self.train.augment {
            kv.set("augment.base_size", a.base_size);
            kv.set("augment.crop_size", a.crop_size);
            kv.set("augment.scale_min", a.scale_min);
            kv.set("augment.scale_max", a.scale_max);
            kv.set("augment.flip", a.flip);
        }
        kv.set("eval.base_size", self.train.eval_base);
        extend(&mut kv, self.model.to_kv());
        extend(&mut kv, self.train.optim.to_kv());
        kv
    }
}

fn extend(into: &mut KvMap, from: KvMap) {
    for (k, v) in from.iter() {
        into.set(k, v);
    }
}

/// Reads a UTF-8 file, reporting absence as a missing file.
pub fn read_text(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/cfg"))
    }

    #[test]
    fn empty_file_gives_the_toy_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.model, ModelConfig::toy());
        assert_eq!(cfg.train, TrainConfig::toy());
        assert_eq!(cfg.output, Path::new("/cfg/runs/default"));
        let DataSource::Synthetic { spec, count } = &cfg.data else {
            panic!("synthetic data expected");
        };
        assert_eq!((spec.num_classes, *count), (5, 250));
    }

    #[test]
    fn resolved_config_parses_back_to_itself() {
        let cfg = parse("model.strategy = cam\noptim.epochs = 3\nsynth.height = 48\naugment.enabled = false").unwrap();
        let again = RunConfig::parse(&cfg.to_kv().to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn schema_violations_are_config_errors() {
        for text in [
            "bogus = 1",
            "preset = huge",
            "optim.epochs = many",
            "model.strategy = both",
            "synth.num_classes = 4",
            "data.dir = d\nsynth.count = 3",
            "data.train_fraction = 1",
            "augment.crop_size = 60",
        ] {
            assert!(matches!(parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn paper_preset_selects_paper_widths() {
        let cfg = parse("preset = paper").unwrap();
        assert_eq!(cfg.model.fused_channels(), 1280);
        assert_eq!(cfg.train.eval_base, 520);
    }
}
