//! Flat `key = value` run configuration with dotted namespaces.
//!
//! ```text
//! # comment
//! objective = nnclr
//! queue_size = 4096
//! optim.base_lr = 1.0
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::augment::AugmentMode;
use crate::data::{gen_blobs, load_cifar10_subset, BlobSpec, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::scalar::Scalar;
use crate::train::{Objective, TrainConfig};

pub const REQUIRED_KEYS: [&str; 4] = ["objective", "queue_size", "batch_size", "epochs"];

pub const KNOWN_KEYS: &[&str] = &[
    "objective",
    "queue_size",
    "batch_size",
    "epochs",
    "tau",
    "top_k",
    "nn_kind",
    "soft_temperature",
    "replacement",
    "use_prediction_head",
    "symmetric_denominator",
    "seed",
    "eval_every",
    "deterministic",
    "precision",
    "optim.name",
    "optim.base_lr",
    "optim.warmup_epochs",
    "optim.momentum",
    "optim.weight_decay",
    "optim.trust_coefficient",
    "optim.lars_eps",
    "optim.scale_lr_by_batch",
    "momentum_encoder.enabled",
    "momentum_encoder.m",
    "augment.mode",
    "augment.crop_scale_min",
    "augment.crop_scale_max",
    "augment.flip_prob",
    "augment.brightness",
    "augment.contrast",
    "augment.saturation",
    "augment.jitter_prob",
    "augment.grayscale_prob",
    "augment.output_height",
    "augment.output_width",
    "augment.noise_std",
    "augment.mask_prob",
    "encoder.backbone_dims",
    "encoder.feature_dim",
    "encoder.projection_hidden",
    "encoder.prediction_hidden",
    "encoder.embed_dim",
    "data.kind",
    "data.classes",
    "data.samples_per_class",
    "data.test_samples_per_class",
    "data.dim",
    "data.std",
    "data.seed",
    "data.cifar_dir",
    "data.train_limit",
    "data.test_limit",
    "probe.epochs",
    "probe.lr",
    "probe.momentum",
    "probe.weight_decay",
    "probe.batch_size",
    "probe.label_fraction",
    "probe.seed",
    "diagnostics.labels",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataConfig {
    Blobs {
        spec: BlobSpec,
        test_samples_per_class: usize,
    },
    Cifar10 {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

impl DataConfig {
    /// Train and test splits.
    pub fn load<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        match self {
            DataConfig::Blobs {
                spec,
                test_samples_per_class,
            } => {
                let test_spec = BlobSpec {
                    samples_per_class: *test_samples_per_class,
                    ..spec.clone()
                };
                Ok((
                    gen_blobs(spec, Split::Train)?,
                    gen_blobs(&test_spec, Split::Test)?,
                ))
            }
            DataConfig::Cifar10 {
                dir,
                train_limit,
                test_limit,
            } => load_cifar10_subset(dir, *train_limit, *test_limit),
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    pub precision: Precision,
    /// Hand labels to the queue label buffer for match-rate diagnostics.
    pub diagnostic_labels: bool,
}

/// Ordered key-value document; the canonical text form is one `key = value`
/// line per entry, sorted by key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigDoc {
    entries: BTreeMap<String, String>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got {line:?}"),
                ));
            };
            doc.set(key.trim(), value.trim())?;
        }
        Ok(doc)
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "override must look like key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Points the data section at `spec`: `config` keeps it, `blobs` or
    /// `blobs:key=value,...` selects blobs with `data.*` overrides, and
    /// `cifar10:<dir>` selects the CIFAR-10 binaries in `dir`.
    pub fn apply_data_spec(&mut self, spec: &str) -> Result<()> {
        let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
        match kind {
            "config" if rest.is_empty() => Ok(()),
            "blobs" => {
                self.set("data.kind", "blobs")?;
                for kv in rest.split(',').filter(|s| !s.trim().is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::config("data", format!("bad blob option {kv:?}")))?;
                    self.set(&format!("data.{}", k.trim()), v.trim())?;
                }
                Ok(())
            }
            "cifar10" if !rest.is_empty() => {
                self.set("data.kind", "cifar10")?;
                self.set("data.cifar_dir", rest)
            }
            _ => Err(Error::config(
                "data",
                format!("unrecognized data spec {spec:?}"),
            )),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<V>()
                    .map_err(|e| Error::config(key, format!("cannot parse {v:?}: {e}")))
            })
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                other => Err(Error::config(
                    key,
                    format!("expected a boolean, got {other:?}"),
                )),
            })
            .transpose()
    }

    fn list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|e| Error::config(key, format!("cannot parse {s:?}: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    fn set_from<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: std::fmt::Display,
    {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_flag(&self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.flag(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn build(&self) -> Result<RunConfig> {
        for key in REQUIRED_KEYS {
            if self.get(key).is_none() {
                return Err(Error::config(key, "required key is missing"));
            }
        }
        let objective: Objective = self.parsed("objective")?.expect("checked");
        let queue_size = self.parsed("queue_size")?.expect("checked");
        let batch_size = self.parsed("batch_size")?.expect("checked");
        let epochs = self.parsed("epochs")?.expect("checked");
        let mut t = TrainConfig::new(objective, queue_size, batch_size, epochs);

        self.set_from("tau", &mut t.tau)?;
        self.set_from("top_k", &mut t.top_k)?;
        self.set_from("nn_kind", &mut t.nn_kind)?;
        self.set_from("soft_temperature", &mut t.soft_temperature)?;
        self.set_from("replacement", &mut t.replacement)?;
        self.set_flag("use_prediction_head", &mut t.use_prediction_head)?;
        self.set_flag("symmetric_denominator", &mut t.symmetric_denominator)?;
        self.set_from("seed", &mut t.seed)?;
        self.set_from("eval_every", &mut t.eval_every)?;
        self.set_flag("deterministic", &mut t.deterministic)?;

        self.set_from("optim.name", &mut t.optimizer)?;
        self.set_from("optim.base_lr", &mut t.base_lr)?;
        self.set_from("optim.warmup_epochs", &mut t.warmup_epochs)?;
        self.set_from("optim.momentum", &mut t.optim.momentum)?;
        self.set_from("optim.weight_decay", &mut t.optim.weight_decay)?;
        self.set_from("optim.trust_coefficient", &mut t.optim.trust_coefficient)?;
        self.set_from("optim.lars_eps", &mut t.optim.lars_eps)?;
        self.set_flag("optim.scale_lr_by_batch", &mut t.scale_lr_by_batch)?;

        self.set_flag("momentum_encoder.enabled", &mut t.use_momentum_encoder)?;
        self.set_from("momentum_encoder.m", &mut t.momentum_coeff)?;

        let a = &mut t.augment;
        self.set_from::<AugmentMode>("augment.mode", &mut a.mode)?;
        self.set_from("augment.crop_scale_min", &mut a.crop_scale.0)?;
        self.set_from("augment.crop_scale_max", &mut a.crop_scale.1)?;
        self.set_from("augment.flip_prob", &mut a.flip_prob)?;
        self.set_from("augment.brightness", &mut a.brightness)?;
        self.set_from("augment.contrast", &mut a.contrast)?;
        self.set_from("augment.saturation", &mut a.saturation)?;
        self.set_from("augment.jitter_prob", &mut a.jitter_prob)?;
        self.set_from("augment.grayscale_prob", &mut a.grayscale_prob)?;
        self.set_from("augment.noise_std", &mut a.noise_std)?;
        self.set_from("augment.mask_prob", &mut a.mask_prob)?;
        match (
            self.parsed::<usize>("augment.output_height")?,
            self.parsed::<usize>("augment.output_width")?,
        ) {
            (Some(h), Some(w)) => a.output_size = Some((h, w)),
            (None, None) => {}
            _ => {
                return Err(Error::config(
                    "augment.output_height",
                    "output height and width must be given together",
                ))
            }
        }

        let e = &mut t.encoder;
        if let Some(dims) = self.list("encoder.backbone_dims")? {
            e.backbone_dims = dims;
        }
        self.set_from("encoder.feature_dim", &mut e.feature_dim)?;
        if let Some(dims) = self.list("encoder.projection_hidden")? {
            e.projection_hidden = dims.try_into().map_err(|_| {
                Error::config("encoder.projection_hidden", "expected exactly two widths")
            })?;
        }
        self.set_from("encoder.prediction_hidden", &mut e.prediction_hidden)?;
        self.set_from("encoder.embed_dim", &mut e.embed_dim)?;

        t.validate()?;

        let data = match self.get("data.kind").unwrap_or("blobs") {
            "blobs" => {
                let mut spec = BlobSpec {
                    num_classes: 8,
                    samples_per_class: 1000,
                    ambient_dim: 16,
                    cluster_std: 0.15,
                    seed: 0,
                };
                self.set_from("data.classes", &mut spec.num_classes)?;
                self.set_from("data.samples_per_class", &mut spec.samples_per_class)?;
                self.set_from("data.dim", &mut spec.ambient_dim)?;
                self.set_from("data.std", &mut spec.cluster_std)?;
                self.set_from("data.seed", &mut spec.seed)?;
                let mut test_samples_per_class = spec.samples_per_class / 4;
                self.set_from("data.test_samples_per_class", &mut test_samples_per_class)?;
                if spec.num_classes < 2 {
                    return Err(Error::config("data.classes", "need at least 2 classes"));
                }
                if !(spec.cluster_std > 0.0) {
                    return Err(Error::config("data.std", "must be positive"));
                }
                DataConfig::Blobs {
                    spec,
                    test_samples_per_class,
                }
            }
            "cifar10" => DataConfig::Cifar10 {
                dir: self
                    .get("data.cifar_dir")
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::config("data.cifar_dir", "required for cifar10"))?,
                train_limit: self.parsed("data.train_limit")?,
                test_limit: self.parsed("data.test_limit")?,
            },
            other => {
                return Err(Error::config(
                    "data.kind",
                    format!("unknown data kind {other:?}"),
                ))
            }
        };

        let mut probe = ProbeConfig::default();
        self.set_from("probe.epochs", &mut probe.epochs)?;
        self.set_from("probe.lr", &mut probe.lr)?;
        self.set_from("probe.momentum", &mut probe.momentum)?;
        self.set_from("probe.weight_decay", &mut probe.weight_decay)?;
        self.set_from("probe.batch_size", &mut probe.batch_size)?;
        self.set_from("probe.label_fraction", &mut probe.label_fraction)?;
        self.set_from("probe.seed", &mut probe.seed)?;
        if !(probe.label_fraction > 0.0 && probe.label_fraction <= 1.0) {
            return Err(Error::config("probe.label_fraction", "must lie in (0, 1]"));
        }

        let precision = match self.get("precision").unwrap_or("f64") {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => {
                return Err(Error::config(
                    "precision",
                    format!("expected f32 or f64, got {other:?}"),
                ))
            }
        };
        let mut diagnostic_labels = true;
        self.set_flag("diagnostics.labels", &mut diagnostic_labels)?;

        Ok(RunConfig {
            train: t,
            data,
            probe,
            precision,
            diagnostic_labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::NnKind;

    const BASE: &str = "
        # minimal run
        objective = nnclr
        queue_size = 128   # m
        batch_size = 32
        epochs = 3
    ";

    #[test]
    fn parses_required_and_defaults() {
        let cfg = ConfigDoc::parse(BASE).unwrap().build().unwrap();
        assert_eq!(cfg.train.objective, Objective::Nnclr);
        assert_eq!(cfg.train.queue_size, 128);
        assert_eq!(cfg.train.tau, 0.1);
        assert_eq!(cfg.precision, Precision::F64);
    }

    #[test]
    fn missing_required_key_is_named() {
        let text = BASE.replace("queue_size = 128   # m", "");
        match ConfigDoc::parse(&text).unwrap().build() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "queue_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_named() {
        match ConfigDoc::parse(&format!("{BASE}\nqueue_sise = 3")) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "queue_sise"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_and_canonical_text() {
        let mut doc = ConfigDoc::parse(BASE).unwrap();
        doc.apply_override("objective=simclr").unwrap();
        doc.apply_override("nn_kind = soft").unwrap();
        doc.apply_override("encoder.backbone_dims=").unwrap();
        let cfg = doc.build().unwrap();
        assert_eq!(cfg.train.objective, Objective::Simclr);
        assert_eq!(cfg.train.nn_kind, NnKind::Soft);
        assert!(cfg.train.encoder.backbone_dims.is_empty());
        let again = ConfigDoc::parse(&doc.to_text()).unwrap();
        assert_eq!(again, doc);
    }

    #[test]
    fn bad_values_name_their_key() {
        for (kv, key) in [
            ("tau=-1", "tau"),
            ("epochs=x", "epochs"),
            ("augment.mode=blur", "augment.mode"),
            ("encoder.projection_hidden=3", "encoder.projection_hidden"),
            ("precision=f16", "precision"),
        ] {
            let mut doc = ConfigDoc::parse(BASE).unwrap();
            doc.apply_override(kv).unwrap();
            match doc.build() {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{kv}"),
                other => panic!("{kv}: {other:?}"),
            }
        }
    }

    #[test]
    fn data_specs() {
        let mut doc = ConfigDoc::parse(BASE).unwrap();
        doc.apply_data_spec("config").unwrap();
        assert_eq!(doc, ConfigDoc::parse(BASE).unwrap());
        doc.apply_data_spec("blobs:classes=4,std=0.2").unwrap();
        match doc.build().unwrap().data {
            DataConfig::Blobs { spec, .. } => {
                assert_eq!((spec.num_classes, spec.cluster_std), (4, 0.2))
            }
            other => panic!("{other:?}"),
        }
        doc.apply_data_spec("cifar10:/data/cifar").unwrap();
        assert!(matches!(
            doc.build().unwrap().data,
            DataConfig::Cifar10 { .. }
        ));
        for bad in ["imagenet", "blobs:nope", "blobs:colour=red", "cifar10"] {
            assert!(
                matches!(
                    ConfigDoc::parse(BASE).unwrap().apply_data_spec(bad),
                    Err(Error::Config { .. })
                ),
                "{bad}"
            );
        }
    }
}
