//! Sectioned key=value run configuration. Every key is optional and falls
//! back to the library defaults; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use lidar_uda::geometry::{AugmentationSpec, SensorConfig};
use lidar_uda::io::Manifest;
use lidar_uda::lam::TrainConfig;
use lidar_uda::selftrain::{
    AdaptationConfig, AggregationConfig, CbstConfig, FlipNoise, KernelKind, MockPredictor, MockRule,
};
use lidar_uda::subsample::{SubsampleMode, SubsampleSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}`: {message}")]
    Value {
        key: String,
        value: String,
        message: String,
    },
    #[error("config key `{key}`: path {path} does not exist")]
    MissingPath { key: String, path: PathBuf },
    #[error("config section `{section}`: {message}")]
    Invalid { section: String, message: String },
    #[error("{0}")]
    Usage(String),
}

/// Teacher used by `pipeline` and by `lam-train` when no predictions are given.
#[derive(Debug, Clone, PartialEq)]
pub struct MockConfig {
    pub rule: MockRule,
    pub confidence: f64,
    pub noise: FlipNoise,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            rule: MockRule::HeightThreshold(vec![-1.5, 0.3]),
            confidence: 1.0,
            noise: FlipNoise::uniform(0.0, 0),
        }
    }
}

impl MockConfig {
    pub fn predictor(&self) -> MockPredictor {
        MockPredictor::new(self.rule.clone())
            .with_noise(self.noise)
            .softened(self.confidence)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub ignore: Option<u32>,
    pub target_sensor: SensorConfig,
    pub source_sensor: SensorConfig,
    pub subsample: SubsampleSpec,
    pub aggregation: AggregationConfig,
    pub train: TrainConfig,
    /// Every n-th source point becomes a LAM training neighborhood.
    pub query_step: usize,
    pub cbst: CbstConfig,
    pub iterations: usize,
    pub augmentation: AugmentationSpec,
    pub mock: MockConfig,
    pub bins: usize,
    /// Classes counted as dynamic for the static/dynamic condensation.
    pub dynamic_classes: Vec<u32>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let adaptation = AdaptationConfig::default();
        Self {
            seed: 0,
            dataset: None,
            source: None,
            checkpoint: None,
            ignore: None,
            target_sensor: SensorConfig::hdl64(),
            source_sensor: SensorConfig::hdl64(),
            subsample: adaptation.subsample,
            aggregation: adaptation.aggregation,
            train: TrainConfig::default(),
            query_step: 10,
            cbst: adaptation.cbst,
            iterations: adaptation.iterations,
            augmentation: adaptation.augmentation,
            mock: MockConfig::default(),
            bins: 10,
            dynamic_classes: Vec::new(),
        }
    }
}

struct Entries {
    values: BTreeMap<String, String>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, out: &mut T) -> Result<(), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.values.remove(key) {
            *out = parse_value(key, &v)?;
        }
        Ok(())
    }

    fn take_opt<T: FromStr>(&mut self, key: &str, out: &mut Option<T>) -> Result<(), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.values.remove(key) {
            *out = if v.eq_ignore_ascii_case("none") {
                None
            } else {
                Some(parse_value(key, &v)?)
            };
        }
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.values.remove(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_value(key, s))
            .collect::<Result<_, _>>()
            .map(Some)
    }

    fn take_path(
        &mut self,
        key: &str,
        base: &Path,
        out: &mut Option<PathBuf>,
    ) -> Result<(), ConfigError> {
        if let Some(v) = self.values.remove(key) {
            let p = base.join(v);
            if !p.exists() {
                return Err(ConfigError::MissingPath {
                    key: key.into(),
                    path: p,
                });
            }
            *out = Some(p);
        }
        Ok(())
    }

    fn take_sensor(&mut self, prefix: &str, out: &mut SensorConfig) -> Result<(), ConfigError> {
        self.take(&format!("{prefix}.height"), &mut out.height)?;
        self.take(&format!("{prefix}.width"), &mut out.width)?;
        self.take(&format!("{prefix}.fov_up"), &mut out.fov_up)?;
        self.take(&format!("{prefix}.fov_down"), &mut out.fov_down)?;
        self.take(&format!("{prefix}.beams"), &mut out.beams)?;
        out.validate().map_err(|e| ConfigError::Invalid {
            section: prefix.into(),
            message: e.to_string(),
        })
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: T::Err| ConfigError::Value {
            key: key.into(),
            value: value.into(),
            message: e.to_string(),
        })
}

fn invalid(section: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        section: section.into(),
        message: e.to_string(),
    }
}

impl PipelineConfig {
    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.into(),
                message,
            },
            e => e,
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        let mut values = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_string(),
                };
                values.insert(key, v.to_string());
            }
        }
        let mut e = Entries { values };
        let mut c = PipelineConfig::default();

        e.take("seed", &mut c.seed)?;
        e.take_path("dataset.root", base, &mut c.dataset)?;
        e.take_path("dataset.source", base, &mut c.source)?;
        e.take_opt("dataset.ignore_label", &mut c.ignore)?;
        e.take_sensor("sensor.target", &mut c.target_sensor)?;
        e.take_sensor("sensor.source", &mut c.source_sensor)?;

        if let Some(mode) = e.values.remove("subsample.mode") {
            c.subsample.mode = match mode.trim() {
                "random" => SubsampleMode::Random,
                "regular" => SubsampleMode::Regular,
                _ => {
                    return Err(ConfigError::Value {
                        key: "subsample.mode".into(),
                        value: mode,
                        message: "expected random or regular".into(),
                    })
                }
            };
        }
        e.take("subsample.ratio", &mut c.subsample.ratio)?;
        e.take("subsample.trials", &mut c.subsample.trials)?;
        e.take(
            "subsample.include_identity",
            &mut c.subsample.include_identity,
        )?;

        if let Some(kernel) = e.values.remove("aggregation.kernel") {
            c.aggregation.kernel = match kernel.trim() {
                "uniform" => KernelKind::Uniform,
                "lam" => KernelKind::Lam,
                _ => {
                    return Err(ConfigError::Value {
                        key: "aggregation.kernel".into(),
                        value: kernel,
                        message: "expected uniform or lam".into(),
                    })
                }
            };
        }
        e.take("aggregation.k", &mut c.aggregation.k)?;
        e.take_opt("aggregation.eps", &mut c.aggregation.eps)?;
        e.take("aggregation.window", &mut c.aggregation.window)?;
        e.take("aggregation.stride", &mut c.aggregation.stride)?;
        e.take("aggregation.modulate", &mut c.aggregation.modulate)?;

        e.take("lam.learning_rate", &mut c.train.learning_rate)?;
        e.take("lam.epochs", &mut c.train.epochs)?;
        e.take("lam.batch", &mut c.train.batch)?;
        e.take("lam.ce_weight", &mut c.train.loss_mix.ce)?;
        e.take("lam.lovasz_weight", &mut c.train.loss_mix.lovasz)?;
        e.take("lam.seed", &mut c.train.seed)?;
        if let Some(h) = e.take_list("lam.hidden")? {
            c.train.hidden = h;
        }
        e.take("lam.query_step", &mut c.query_step)?;
        e.take_path("lam.checkpoint", base, &mut c.checkpoint)?;

        e.take("cbst.portion", &mut c.cbst.portion)?;
        e.take("adaptation.iterations", &mut c.iterations)?;

        let g = &mut c.augmentation;
        e.take("augmentation.rotation_range", &mut g.rotation_range)?;
        e.take("augmentation.flip_x", &mut g.flip_x)?;
        e.take("augmentation.flip_y", &mut g.flip_y)?;
        e.take("augmentation.scale_min", &mut g.scale_range.0)?;
        e.take("augmentation.scale_max", &mut g.scale_range.1)?;
        e.take("augmentation.translation_sigma", &mut g.translation_sigma)?;

        let rule = e.values.remove("mock.rule");
        let thresholds: Option<Vec<f64>> = e.take_list("mock.thresholds")?;
        let thresholds = thresholds.unwrap_or_else(|| match &c.mock.rule {
            MockRule::HeightThreshold(t) | MockRule::RadialBands(t) => t.clone(),
        });
        c.mock.rule = match rule.as_deref().map(str::trim) {
            None | Some("height") => MockRule::HeightThreshold(thresholds),
            Some("radial") => MockRule::RadialBands(thresholds),
            Some(other) => {
                return Err(ConfigError::Value {
                    key: "mock.rule".into(),
                    value: other.into(),
                    message: "expected height or radial".into(),
                })
            }
        };
        e.take("mock.confidence", &mut c.mock.confidence)?;
        e.take("mock.near_rate", &mut c.mock.noise.near_rate)?;
        e.take("mock.far_rate", &mut c.mock.noise.far_rate)?;
        e.take("mock.near_range", &mut c.mock.noise.near_range)?;
        e.take("mock.far_range", &mut c.mock.noise.far_range)?;
        e.take("mock.noise_seed", &mut c.mock.noise.seed)?;

        e.take("analysis.bins", &mut c.bins)?;
        if let Some(d) = e.take_list("metrics.dynamic_classes")? {
            c.dynamic_classes = d;
        }

        if let Some(key) = e.values.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.subsample
            .validate()
            .map_err(|e| invalid("subsample", e))?;
        self.aggregation
            .validate()
            .map_err(|e| invalid("aggregation", e))?;
        self.train.validate().map_err(|e| invalid("lam", e))?;
        if self.query_step == 0 {
            return Err(invalid("lam", "query_step must be >= 1"));
        }
        self.cbst.validate().map_err(|e| invalid("cbst", e))?;
        if self.iterations == 0 {
            return Err(invalid("adaptation", "iterations must be >= 1"));
        }
        self.augmentation
            .validate()
            .map_err(|e| invalid("augmentation", e))?;
        let m = &self.mock;
        if !(m.confidence > 0.0 && m.confidence <= 1.0) {
            return Err(invalid("mock", "confidence must be in (0, 1]"));
        }
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(m.noise.near_rate) || !rate_ok(m.noise.far_rate) {
            return Err(invalid("mock", "flip rates must be in [0, 1]"));
        }
        let (MockRule::HeightThreshold(t) | MockRule::RadialBands(t)) = &m.rule;
        if t.windows(2).any(|w| !(w[0] < w[1])) || t.iter().any(|v| !v.is_finite()) {
            return Err(invalid("mock", "thresholds must be finite and increasing"));
        }
        if self.bins == 0 {
            return Err(invalid("analysis", "bins must be >= 1"));
        }
        Ok(())
    }

    /// Library configuration for labeling a sequence seen by `sensor`.
    pub fn adaptation(&self, sensor: SensorConfig) -> AdaptationConfig {
        AdaptationConfig {
            iterations: self.iterations,
            sensor,
            subsample: self.subsample,
            aggregation: self.aggregation,
            cbst: self.cbst,
            augmentation: self.augmentation,
            seed: self.seed,
            ..AdaptationConfig::default()
        }
    }

    /// Every setting that affects outputs, for run manifests.
    pub fn manifest(&self) -> Manifest {
        let mut m = self.adaptation(self.target_sensor).manifest();
        let s = &self.source_sensor;
        m.set("sensor.source.height", s.height);
        m.set("sensor.source.width", s.width);
        m.set("sensor.source.fov_up", s.fov_up);
        m.set("sensor.source.fov_down", s.fov_down);
        m.set("sensor.source.beams", s.beams);
        let t = &self.train;
        m.set("lam.learning_rate", t.learning_rate);
        m.set("lam.epochs", t.epochs);
        m.set("lam.batch", t.batch);
        m.set("lam.ce_weight", t.loss_mix.ce);
        m.set("lam.lovasz_weight", t.loss_mix.lovasz);
        m.set("lam.seed", t.seed);
        m.set("lam.hidden", join(&t.hidden));
        m.set("lam.query_step", self.query_step);
        m.set(
            "dataset.ignore_label",
            self.ignore.map_or("none".into(), |v| v.to_string()),
        );
        let (kind, th) = match &self.mock.rule {
            MockRule::HeightThreshold(t) => ("height", t),
            MockRule::RadialBands(t) => ("radial", t),
        };
        m.set("mock.rule", kind);
        m.set("mock.thresholds", join(th));
        m.set("mock.confidence", self.mock.confidence);
        let n = &self.mock.noise;
        m.set("mock.near_rate", n.near_rate);
        m.set("mock.far_rate", n.far_rate);
        m.set("mock.near_range", n.near_range);
        m.set("mock.far_range", n.far_range);
        m.set("mock.noise_seed", n.seed);
        m.set("analysis.bins", self.bins);
        m.set("metrics.dynamic_classes", join(&self.dynamic_classes));
        m
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// A config file matching a synthetic scene, as written by `synthgen`.
pub fn render_synthetic(root: &Path, sensor: &SensorConfig, thresholds: &[f64]) -> String {
    let mut s = String::new();
    s.push_str("seed = 0\n\n[dataset]\n");
    s.push_str(&format!("root = {}\n\n", root.display()));
    for section in ["sensor.target", "sensor.source"] {
        s.push_str(&format!(
            "[{section}]\nheight = {}\nwidth = {}\nfov_up = {}\nfov_down = {}\nbeams = {}\n\n",
            sensor.height, sensor.width, sensor.fov_up, sensor.fov_down, sensor.beams
        ));
    }
    s.push_str(&format!(
        "[mock]\nrule = height\nthresholds = {}\n",
        join(thresholds)
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_library() {
        let c = PipelineConfig::parse("", Path::new(".")).unwrap();
        assert_eq!(c.aggregation.k, 60);
        assert_eq!(c.aggregation.eps, Some(0.2));
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.epochs, 25);
        assert_eq!(c.cbst.portion, 0.2);
    }

    #[test]
    fn reads_sections() {
        let text = "seed = 4\n[aggregation]\nkernel = uniform\neps = none\nwindow = 20\n[lam]\nhidden = 4, 8\n[mock]\nrule = radial\nthresholds = 5,10\n";
        let c = PipelineConfig::parse(text, Path::new(".")).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.aggregation.kernel, KernelKind::Uniform);
        assert_eq!(c.aggregation.eps, None);
        assert_eq!(c.aggregation.window, 20);
        assert_eq!(c.train.hidden, vec![4, 8]);
        assert_eq!(c.mock.rule, MockRule::RadialBands(vec![5.0, 10.0]));
    }

    #[test]
    fn errors_name_the_key() {
        let err = PipelineConfig::parse("[aggregation]\nkk = 3\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("aggregation.kk"), "{err}");
        let err = PipelineConfig::parse("[lam]\nepochs = many\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("lam.epochs"), "{err}");
        let err =
            PipelineConfig::parse("[dataset]\nroot = /no/such/dir\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("dataset.root"), "{err}");
        let err = PipelineConfig::parse("[cbst]\nportion = 1.5\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("cbst"), "{err}");
    }

    #[test]
    fn synthetic_config_round_trips() {
        let dir = std::env::temp_dir();
        let sensor = SensorConfig {
            height: 32,
            width: 360,
            fov_up: 3.0,
            fov_down: 25.0,
            beams: 32,
        };
        let c = PipelineConfig::parse(
            &render_synthetic(&dir, &sensor, &[-1.5, 0.3]),
            Path::new("/"),
        )
        .unwrap();
        assert_eq!(c.target_sensor, sensor);
        assert_eq!(c.dataset.as_deref(), Some(dir.as_path()));
    }
}
