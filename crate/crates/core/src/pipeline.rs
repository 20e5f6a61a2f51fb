//! Configuration files and the commands that turn them into artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetConfig, TrainingSet, build_training_set};
use crate::error::{Error, Result};
use crate::forward::StimulationProtocol;
use crate::geometry::{ElectrodeLayout, Point, PolygonDomain, uniform_layout};
use crate::metrics::{
    ComparisonReport, DistinguishReport, MeshSpec, MetricConfig, compare, distinguish_pairs, distinguish_study,
    evaluate_layout, metric_samples,
};
use crate::network::{InputTransform, TrainConfig, TrainedNetwork, optimize_layout, train};
use crate::reconstruct::{EllipseSpec, ReconstructOptions, StudyConfig, StudyOutcome, reconstruction_study};
use crate::sampler::{ConductivitySample, PriorParams};
use crate::seeds::derive_seed;
use crate::svg;

pub const SCHEMA_VERSION: u32 = 1;

pub const DATASET_DIR: &str = "dataset";
pub const NETWORK_FILE: &str = "network.json";
pub const OPTIMIZED_LAYOUT_FILE: &str = "layout_optimized.csv";
pub const UNIFORM_LAYOUT_FILE: &str = "layout_uniform.csv";
pub const RECONSTRUCTION_DIR: &str = "reconstruction";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "square-1x1")]
    Square,
    #[serde(rename = "rect-2x1")]
    Rectangle,
    #[serde(rename = "right-triangle")]
    RightTriangle,
}

impl Preset {
    pub fn domain(&self) -> PolygonDomain {
        match self {
            Preset::Square => PolygonDomain::square(1.0),
            Preset::Rectangle => PolygonDomain::rectangle(2.0, 1.0),
            Preset::RightTriangle => PolygonDomain::right_triangle(1.0),
        }
    }

    /// Electrodes per side in boundary order.
    pub fn per_side(&self) -> Vec<usize> {
        match self {
            Preset::Square => vec![3, 3, 3, 3],
            Preset::Rectangle => vec![4, 2, 4, 2],
            Preset::RightTriangle => vec![4, 3, 3],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Square => "square-1x1",
            Preset::Rectangle => "rect-2x1",
            Preset::RightTriangle => "right-triangle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometrySpec {
    Preset(Preset),
    Polygon {
        outer: Vec<[f64; 2]>,
        #[serde(default)]
        holes: Vec<Vec<[f64; 2]>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub input_transform: InputTransform,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            alpha: d.alpha,
            tol: d.tol,
            max_epochs: d.max_epochs,
            patience: d.patience,
            input_transform: d.input_transform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Samples for the modeling error and condition-number means.
    pub n_samples: usize,
    /// Field pairs for distinguishability.
    pub n_pairs: usize,
    /// Fine mesh size as a fraction of the coarse one.
    pub fine_factor: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            n_samples: 200,
            n_pairs: 50,
            fine_factor: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionSection {
    pub fine_h: f64,
    pub coarse_h: f64,
    pub noise_levels: Vec<f64>,
    /// Defaults to an inclusion placed relative to the bounding box.
    pub ellipse: Option<EllipseSpec>,
    pub options: ReconstructOptions,
}

impl Default for ReconstructionSection {
    fn default() -> Self {
        ReconstructionSection {
            fine_h: 0.04,
            coarse_h: 0.075,
            noise_levels: vec![0.01, 0.05, 0.1],
            ellipse: None,
            options: ReconstructOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub dataset: u64,
    pub train: u64,
    pub mesh: u64,
    pub metrics: u64,
    pub distinguish: u64,
    pub reconstruct: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_base(0)
    }
}

impl Seeds {
    /// Independent per-stage seeds derived from one base seed.
    pub fn from_base(base: u64) -> Self {
        let s = |i| derive_seed(base, &[0x5eed, i]);
        Seeds {
            dataset: s(1),
            train: s(2),
            mesh: s(3),
            metrics: s(4),
            distinguish: s(5),
            reconstruct: s(6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub per_side: Option<Vec<usize>>,
    #[serde(default = "default_width")]
    pub width: f64,
    /// Defaults to the electrode width.
    #[serde(default)]
    pub h_max: Option<f64>,
    /// Defaults to half the electrode width.
    #[serde(default)]
    pub h_min: Option<f64>,
    /// Defaults to `h_max`.
    #[serde(default)]
    pub min_gap: Option<f64>,
    #[serde(default = "default_z")]
    pub z: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Defaults to values scaled by the domain diameter.
    #[serde(default)]
    pub prior: Option<PriorParams>,
    #[serde(default = "default_n_layouts")]
    pub n_layouts: usize,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_max_resamples")]
    pub max_resamples: usize,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub reconstruction: ReconstructionSection,
    #[serde(default)]
    pub seeds: Seeds,
}

fn default_width() -> f64 {
    0.075
}
fn default_z() -> f64 {
    1e-5
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_n_layouts() -> usize {
    200
}
fn default_n_samples() -> usize {
    50
}
fn default_max_resamples() -> usize {
    20
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            geometry: GeometrySpec::Preset(p),
            per_side: None,
            width: default_width(),
            h_max: None,
            h_min: None,
            min_gap: None,
            z: default_z(),
            amplitude: default_amplitude(),
            prior: None,
            n_layouts: default_n_layouts(),
            n_samples: default_n_samples(),
            max_resamples: default_max_resamples(),
            train: TrainSection::default(),
            metrics: MetricsSection::default(),
            reconstruction: ReconstructionSection::default(),
            seeds: Seeds::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// A validated configuration with every default resolved.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub domain: PolygonDomain,
    pub per_side: Vec<usize>,
    pub h_max: f64,
    pub h_min: f64,
    pub min_gap: f64,
    pub prior: PriorParams,
    pub hash: String,
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be positive and finite, got {v}")))
    }
}

fn points(ring: &[[f64; 2]]) -> Vec<Point> {
    ring.iter().map(|p| Point::new(p[0], p[1])).collect()
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let c = &config;
        if c.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", c.schema_version),
            ));
        }
        let (domain, preset_counts) = match &c.geometry {
            GeometrySpec::Preset(p) => (p.domain(), Some(p.per_side())),
            GeometrySpec::Polygon { outer, holes } => (
                PolygonDomain::new(points(outer), holes.iter().map(|h| points(h)).collect())
                    .map_err(|e| Error::config("geometry.polygon", e.to_string()))?,
                None,
            ),
        };
        let per_side = c
            .per_side
            .clone()
            .or(preset_counts)
            .ok_or_else(|| Error::config("per_side", "required for polygon geometries"))?;
        if per_side.len() != domain.side_count() {
            return Err(Error::config(
                "per_side",
                format!("{} entries for {} sides", per_side.len(), domain.side_count()),
            ));
        }
        if per_side.iter().sum::<usize>() < 2 {
            return Err(Error::config("per_side", "need at least two electrodes"));
        }
        positive("width", c.width)?;
        let h_max = c.h_max.unwrap_or(c.width);
        let h_min = c.h_min.unwrap_or(0.5 * c.width);
        let min_gap = c.min_gap.unwrap_or(h_max);
        positive("h_max", h_max)?;
        positive("h_min", h_min)?;
        if h_min > h_max {
            return Err(Error::config("h_min", format!("{h_min} exceeds h_max {h_max}")));
        }
        if !(min_gap >= 0.0) {
            return Err(Error::config("min_gap", "must be non-negative"));
        }
        positive("z", c.z)?;
        positive("amplitude", c.amplitude)?;
        let prior = c.prior.unwrap_or_else(|| PriorParams::default_for(domain.diameter()));
        positive("prior.a", prior.a)?;
        positive("prior.b", prior.b)?;
        positive("prior.c", prior.c)?;
        if c.n_layouts == 0 {
            return Err(Error::config("n_layouts", "must be at least 1"));
        }
        if c.n_samples == 0 {
            return Err(Error::config("n_samples", "must be at least 1"));
        }
        if c.n_layouts * c.n_samples < 3 {
            return Err(Error::config("n_samples", "need at least 3 training columns"));
        }
        positive("train.tol", c.train.tol)?;
        if !(c.train.alpha >= 0.0) {
            return Err(Error::config("train.alpha", "must be non-negative"));
        }
        if c.metrics.n_samples == 0 {
            return Err(Error::config("metrics.n_samples", "must be at least 1"));
        }
        if !(c.metrics.fine_factor > 0.0 && c.metrics.fine_factor <= 1.0) {
            return Err(Error::config("metrics.fine_factor", "must lie in (0, 1]"));
        }
        positive("reconstruction.fine_h", c.reconstruction.fine_h)?;
        positive("reconstruction.coarse_h", c.reconstruction.coarse_h)?;
        if c.reconstruction.fine_h == c.reconstruction.coarse_h {
            return Err(Error::config(
                "reconstruction.fine_h",
                "simulation and inversion meshes must differ",
            ));
        }
        for (i, &eta) in c.reconstruction.noise_levels.iter().enumerate() {
            positive(&format!("reconstruction.noise_levels[{i}]"), eta)?;
        }
        uniform_layout(&domain, &per_side, c.width).map_err(|e| Error::config("per_side", e.to_string()))?;
        let hash = hex::encode(&Sha256::digest(serde_json::to_string(c)?.as_bytes())[..8]);
        Ok(Pipeline {
            config,
            domain,
            per_side,
            h_max,
            h_min,
            min_gap,
            prior,
            hash,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::new(PipelineConfig::read(path)?)
    }

    /// Replaces every stage seed by one derived from `seed`.
    pub fn with_seed(mut config: PipelineConfig, seed: u64) -> Result<Self> {
        config.seeds = Seeds::from_base(seed);
        Self::new(config)
    }

    pub fn k(&self) -> usize {
        self.per_side.iter().sum()
    }

    pub fn protocol(&self) -> Result<StimulationProtocol> {
        StimulationProtocol::new(self.k(), self.config.amplitude)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let c = &self.config;
        DatasetConfig {
            domain: self.domain.clone(),
            per_side: self.per_side.clone(),
            width: c.width,
            min_gap: self.min_gap,
            n_layouts: c.n_layouts,
            n_samples: c.n_samples,
            h_max: self.h_max,
            h_min: self.h_min,
            prior: self.prior,
            z: c.z,
            amplitude: c.amplitude,
            seed: c.seeds.dataset,
            max_resamples: c.max_resamples,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.config.train;
        TrainConfig {
            alpha: t.alpha,
            tol: t.tol,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: self.config.seeds.train,
            input_transform: t.input_transform,
        }
    }

    pub fn coarse_spec(&self) -> MeshSpec {
        MeshSpec {
            h_max: self.h_max,
            h_min: self.h_min,
            seed: self.config.seeds.mesh,
        }
    }

    pub fn metric_config(&self) -> MetricConfig {
        let coarse = self.coarse_spec();
        MetricConfig {
            coarse,
            fine: coarse.scaled(self.config.metrics.fine_factor),
            prior: self.prior,
            n_samples: self.config.metrics.n_samples,
            z: self.config.z,
            amplitude: self.config.amplitude,
            seed: self.config.seeds.metrics,
        }
    }

    pub fn ellipse(&self) -> EllipseSpec {
        self.config.reconstruction.ellipse.unwrap_or_else(|| {
            let (lo, hi) = self.domain.bbox();
            let (w, h) = (hi.x - lo.x, hi.y - lo.y);
            EllipseSpec {
                center: Point::new(lo.x + 0.62 * w, lo.y + 0.55 * h),
                semi_axes: (0.15 * w, 0.18 * h),
                angle: 0.5,
                background: 1.0,
                inclusion: 2.0,
            }
        })
    }

    pub fn study_config(&self) -> StudyConfig {
        let r = &self.config.reconstruction;
        let seed = self.config.seeds.mesh;
        StudyConfig {
            fine: MeshSpec {
                h_max: r.fine_h,
                h_min: 0.5 * r.fine_h,
                seed,
            },
            coarse: MeshSpec {
                h_max: r.coarse_h,
                h_min: 0.5 * r.coarse_h,
                seed,
            },
            prior: self.prior,
            z: self.config.z,
            amplitude: self.config.amplitude,
            noise_levels: r.noise_levels.clone(),
            ellipse: self.ellipse(),
            seed: self.config.seeds.reconstruct,
            options: r.options,
        }
    }

    pub fn uniform_layout(&self) -> Result<ElectrodeLayout> {
        uniform_layout(&self.domain, &self.per_side, self.config.width)
    }
}

/// Files written by one command, with content digests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub outputs: Vec<(String, String)>,
}

struct Writer<'a> {
    out: &'a Path,
    record: RunRecord,
}

impl<'a> Writer<'a> {
    fn new(out: &'a Path, command: &str, hash: &str) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Writer {
            out,
            record: RunRecord {
                command: command.into(),
                config_hash: hash.into(),
                outputs: Vec::new(),
            },
        })
    }

    fn put(&mut self, rel: &str, content: &str) -> Result<()> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, content)?;
        self.note(rel, content.as_bytes());
        Ok(())
    }

    fn note(&mut self, rel: &str, bytes: &[u8]) {
        self.record.outputs.push((rel.into(), hex::encode(Sha256::digest(bytes))));
    }

    fn finish(self) -> Result<RunRecord> {
        let text = serde_json::to_string_pretty(&self.record)? + "\n";
        std::fs::write(self.out.join(format!("{}.run.json", self.record.command)), text)?;
        Ok(self.record)
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub config_hash: String,
    pub columns: usize,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sentinel_columns: usize,
}

pub fn summarize(set: &TrainingSet, hash: &str) -> DatasetSummary {
    let (inputs, _, excluded) = set.usable_columns();
    let fold = |f: fn(&[f64; 2]) -> f64| {
        let v: Vec<f64> = inputs.iter().map(f).collect();
        (
            v.iter().cloned().fold(f64::INFINITY, f64::min),
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (kappa_min, kappa_max) = fold(|t| t[0]);
    let (beta_min, beta_max) = fold(|t| t[1]);
    DatasetSummary {
        config_hash: hash.into(),
        columns: set.columns(),
        kappa_min,
        kappa_max,
        beta_min,
        beta_max,
        sentinel_columns: excluded,
    }
}

pub fn cmd_gen_data(p: &Pipeline, out: &Path) -> Result<(TrainingSet, DatasetSummary)> {
    let mut w = Writer::new(out, "gen-data", &p.hash)?;
    let set = build_training_set(&p.dataset_config())?;
    let dir = out.join(DATASET_DIR);
    set.write(&dir)?;
    for f in [crate::dataset::E_BAR_FILE, crate::dataset::THETA_BAR_FILE, crate::dataset::MANIFEST_FILE] {
        let bytes = std::fs::read(dir.join(f))?;
        w.note(&format!("{DATASET_DIR}/{f}"), &bytes);
    }
    let summary = summarize(&set, &p.hash);
    w.put("dataset_summary.json", &json(&summary)?)?;
    w.finish()?;
    Ok((set, summary))
}

fn record_csv(net: &TrainedNetwork) -> String {
    let r = &net.record;
    let mut out = String::from("epoch,loss,gradient_norm,validation_loss\n");
    for e in 0..r.loss.len() {
        let _ = writeln!(out, "{e},{},{},{}", r.loss[e], r.gradient_norm[e], r.validation_loss[e]);
    }
    out
}

pub fn cmd_train(p: &Pipeline, out: &Path, dataset: Option<&Path>) -> Result<TrainedNetwork> {
    let dir = dataset.map(PathBuf::from).unwrap_or_else(|| out.join(DATASET_DIR));
    let set = TrainingSet::read(&dir)?;
    if set.k() != p.k() {
        return Err(Error::config(
            "per_side",
            format!("dataset has {} electrodes, config has {}", set.k(), p.k()),
        ));
    }
    if set.manifest.geometry_id != p.domain.id() {
        return Err(Error::config("geometry", "dataset was generated for a different geometry"));
    }
    let mut w = Writer::new(out, "train", &p.hash)?;
    let net = train(&set, &p.train_config())?;
    w.put(NETWORK_FILE, &net.to_json()?)?;
    w.put("training_record.csv", &record_csv(&net))?;
    w.put("training.svg", &svg::training_curves(&net.record, &format!("config {}", p.hash)))?;
    w.finish()?;
    Ok(net)
}

/// Largest midpoint displacement between two layouts.
pub fn max_deviation(a: &ElectrodeLayout, b: &ElectrodeLayout) -> f64 {
    (0..a.k().min(b.k()))
        .map(|e| a.midpoint(e).dist(b.midpoint(e)))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub config_hash: String,
    pub optimized_id: String,
    pub uniform_id: String,
    pub max_deviation: f64,
}

pub fn cmd_optimize(p: &Pipeline, out: &Path, network: Option<&Path>) -> Result<(ElectrodeLayout, ElectrodeLayout)> {
    let path = network.map(PathBuf::from).unwrap_or_else(|| out.join(NETWORK_FILE));
    let net = TrainedNetwork::read(&path)?;
    if net.architecture.output_dim != 2 * p.k() {
        return Err(Error::config(
            "per_side",
            format!("network predicts {} coordinates, config needs {}", net.architecture.output_dim, 2 * p.k()),
        ));
    }
    let mut w = Writer::new(out, "optimize", &p.hash)?;
    let opt = optimize_layout(&net, &p.domain, &p.per_side, p.config.width, p.min_gap)?;
    opt.validate(&p.domain, p.min_gap)?;
    let uni = p.uniform_layout()?;
    let tag = format!("config {}", p.hash);
    w.put(OPTIMIZED_LAYOUT_FILE, &opt.to_csv())?;
    w.put(UNIFORM_LAYOUT_FILE, &uni.to_csv())?;
    w.put("layout_overlay.svg", &svg::layout_overlay(&p.domain, &opt, &uni, &tag))?;
    let spec = p.coarse_spec();
    w.put("mesh_optimized.svg", &svg::mesh_plot(&spec.build(&p.domain, &opt)?, &p.domain, &tag))?;
    w.put("mesh_uniform.svg", &svg::mesh_plot(&spec.build(&p.domain, &uni)?, &p.domain, &tag))?;
    let summary = OptimizeSummary {
        config_hash: p.hash.clone(),
        optimized_id: opt.id(),
        uniform_id: uni.id(),
        max_deviation: max_deviation(&opt, &uni),
    };
    w.put("optimize_summary.json", &json(&summary)?)?;
    w.finish()?;
    Ok((opt, uni))
}

/// Loads layout A (reference, default uniform) and layout B (candidate,
/// default optimized).
pub fn load_layouts(p: &Pipeline, out: &Path, a: Option<&Path>, b: Option<&Path>) -> Result<(ElectrodeLayout, ElectrodeLayout)> {
    let pa = a.map(PathBuf::from).unwrap_or_else(|| out.join(UNIFORM_LAYOUT_FILE));
    let pb = b.map(PathBuf::from).unwrap_or_else(|| out.join(OPTIMIZED_LAYOUT_FILE));
    let la = ElectrodeLayout::read_csv(&p.domain, &pa)?;
    let lb = ElectrodeLayout::read_csv(&p.domain, &pb)?;
    for (l, path) in [(&la, &pa), (&lb, &pb)] {
        if l.k() != p.k() {
            return Err(Error::config(
                path.display().to_string(),
                format!("layout has {} electrodes, config needs {}", l.k(), p.k()),
            ));
        }
    }
    Ok((la, lb))
}

fn distinguish_report(p: &Pipeline, a: &ElectrodeLayout, b: &ElectrodeLayout) -> Result<DistinguishReport> {
    let mc = p.metric_config();
    let pairs = distinguish_pairs(&p.domain, p.h_max, p.prior, p.config.metrics.n_pairs, p.config.seeds.distinguish)?;
    distinguish_study(&p.domain, a, b, &pairs, &[mc.coarse, mc.fine], p.config.z, p.config.amplitude)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub config_hash: String,
    pub report: ComparisonReport,
}

pub fn cmd_evaluate(p: &Pipeline, out: &Path, a: &ElectrodeLayout, b: &ElectrodeLayout) -> Result<ComparisonReport> {
    let mut w = Writer::new(out, "evaluate", &p.hash)?;
    let mc = p.metric_config();
    let samples = metric_samples(&p.domain, p.h_max, p.prior, mc.n_samples, mc.seed)?;
    let ra = evaluate_layout(&p.domain, a, &samples, &mc)?;
    let rb = evaluate_layout(&p.domain, b, &samples, &mc)?;
    let d = distinguish_report(p, a, b)?;
    let report = compare(ra, rb, Some(d));
    let file = EvaluationFile {
        config_hash: p.hash.clone(),
        report: report.clone(),
    };
    w.put("evaluation.json", &json(&file)?)?;
    w.put("evaluation.csv", &report.summary_csv())?;
    w.put("mu.csv", &report.mu_csv(&p.protocol()?))?;
    w.put(
        "mu.svg",
        &svg::mu_bars(&report.a.mu, &report.b.mu, ("layout A", "layout B"), &format!("config {}", p.hash)),
    )?;
    w.finish()?;
    Ok(report)
}

pub fn cmd_distinguish(p: &Pipeline, out: &Path, a: &ElectrodeLayout, b: &ElectrodeLayout) -> Result<DistinguishReport> {
    let mut w = Writer::new(out, "distinguish", &p.hash)?;
    let d = distinguish_report(p, a, b)?;
    let mut csv = String::from("h_max,pair,delta_a,delta_b\n");
    for l in &d.levels {
        for (i, (x, y)) in l.delta_a.iter().zip(&l.delta_b).enumerate() {
            let _ = writeln!(csv, "{},{},{x},{y}", l.h_max, i + 1);
        }
    }
    w.put("distinguish.json", &json(&(&p.hash, &d))?)?;
    w.put("distinguish.csv", &csv)?;
    w.finish()?;
    Ok(d)
}

pub fn cmd_reconstruct(p: &Pipeline, out: &Path, standard: &ElectrodeLayout, optimized: &ElectrodeLayout) -> Result<StudyOutcome> {
    let mut w = Writer::new(out, "reconstruct", &p.hash)?;
    let layouts = vec![("standard".to_string(), standard.clone()), ("optimized".to_string(), optimized.clone())];
    let study = reconstruction_study(&p.domain, &layouts, &p.study_config())?;
    let tag = format!("config {}", p.hash);
    w.put(&format!("{RECONSTRUCTION_DIR}/rmse.csv"), &study.table_csv())?;
    w.put(&format!("{RECONSTRUCTION_DIR}/study.json"), &json(&(&p.hash, &study.cells))?)?;
    let targets: Vec<String> = study.layouts[0].truths.iter().map(|t| t.0.clone()).collect();
    for target in &targets {
        // shared color scale per target
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for l in &study.layouts {
            for v in l.truths.iter().filter(|t| &t.0 == target).flat_map(|t| &t.1) {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        for c in study.cells.iter().filter(|c| &c.target == target) {
            for v in &c.sigma_hat {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        for l in &study.layouts {
            let truth = &l.truths.iter().find(|t| &t.0 == target).expect("target exists").1;
            let name = format!("{RECONSTRUCTION_DIR}/truth_{}_{target}.svg", l.name);
            w.put(&name, &svg::field_plot(&l.fine, &p.domain, truth, (lo, hi), &format!("truth {target}"), &tag))?;
        }
        for c in study.cells.iter().filter(|c| &c.target == target) {
            let l = study.layouts.iter().find(|l| l.name == c.layout).expect("layout exists");
            let stem = format!("{RECONSTRUCTION_DIR}/sigma_{}_{}_eta{}", c.layout, c.target, c.eta);
            let sample = ConductivitySample {
                values: c.sigma_hat.clone(),
                mesh_id: l.coarse.id(),
            };
            w.put(&format!("{stem}.csv"), &sample.to_csv())?;
            let title = format!("{} {} eta {} rmse {:.2}%", c.layout, c.target, c.eta, c.rmse_pct);
            w.put(&format!("{stem}.svg"), &svg::field_plot(&l.coarse, &p.domain, &c.sigma_hat, (lo, hi), &title, &tag))?;
        }
    }
    w.finish()?;
    Ok(study)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub geometry: String,
    pub dataset: DatasetSummary,
    pub epochs: usize,
    pub stop_reason: String,
    pub max_deviation: f64,
    pub mu_ratio: f64,
    pub kappa_h_reduction_pct: f64,
    pub kappa_r_reduction_pct: f64,
    pub delta_win_rates: Vec<(f64, f64)>,
    pub rmse_table: String,
}

pub fn cmd_full(p: &Pipeline, out: &Path) -> Result<PipelineSummary> {
    let (_, dataset) = cmd_gen_data(p, out)?;
    let net = cmd_train(p, out, None)?;
    let (opt, uni) = cmd_optimize(p, out, None)?;
    let report = cmd_evaluate(p, out, &uni, &opt)?;
    let study = cmd_reconstruct(p, out, &uni, &opt)?;
    let summary = PipelineSummary {
        config_hash: p.hash.clone(),
        geometry: p.domain.id(),
        dataset,
        epochs: net.record.epochs,
        stop_reason: net.record.stop_reason.clone(),
        max_deviation: max_deviation(&opt, &uni),
        mu_ratio: report.mu_ratio,
        kappa_h_reduction_pct: report.kappa_h_reduction_pct,
        kappa_r_reduction_pct: report.kappa_r_reduction_pct,
        delta_win_rates: report
            .distinguish
            .iter()
            .flat_map(|d| d.levels.iter().map(|l| (l.h_max, l.win_rate_b)))
            .collect(),
        rmse_table: study.table_csv(),
    };
    let mut w = Writer::new(out, "full-pipeline", &p.hash)?;
    w.put("summary.json", &json(&summary)?)?;
    w.finish()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(p: Preset) -> PipelineConfig {
        let mut c = PipelineConfig::preset(p);
        c.width = 0.1;
        c.h_max = Some(0.2);
        c.h_min = Some(0.1);
        c.n_layouts = 2;
        c.n_samples = 2;
        c.train.max_epochs = 5;
        c.metrics.n_samples = 2;
        c.metrics.n_pairs = 2;
        c.reconstruction.noise_levels = vec![0.05];
        c.reconstruction.fine_h = 0.15;
        c.reconstruction.coarse_h = 0.25;
        c
    }

    #[test]
    fn presets_resolve() {
        for (p, k) in [(Preset::Square, 12), (Preset::Rectangle, 12), (Preset::RightTriangle, 10)] {
            let pl = Pipeline::new(PipelineConfig::preset(p)).unwrap();
            assert_eq!(pl.k(), k);
            assert_eq!(pl.h_max, 0.075);
            assert_eq!(pl.h_min, 0.0375);
            assert_eq!(pl.min_gap, pl.h_max);
        }
    }

    #[test]
    fn config_round_trip_and_hash() {
        let c = PipelineConfig::preset(Preset::Square);
        let back = PipelineConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        let a = Pipeline::new(c.clone()).unwrap();
        let b = Pipeline::with_seed(c, 9).unwrap();
        assert_ne!(a.hash, b.hash);
        assert_eq!(a.hash, Pipeline::new(back).unwrap().hash);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = PipelineConfig::from_json(r#"{"schema_version": 1, "geometry": {"preset": "square-1x1"}, "train": {"alpha": "x"}}"#)
            .unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "train.alpha"),
            e => panic!("{e}"),
        }
        let mut c = PipelineConfig::preset(Preset::Square);
        c.per_side = Some(vec![3, 3, 3]);
        assert!(matches!(Pipeline::new(c).unwrap_err(), Error::Config { path, .. } if path == "per_side"));
        let minimal = PipelineConfig::from_json(r#"{"schema_version": 1, "geometry": {"preset": "rect-2x1"}}"#).unwrap();
        assert_eq!(Pipeline::new(minimal).unwrap().per_side, vec![4, 2, 4, 2]);
        assert!(PipelineConfig::from_json(r#"{"schema_version": 1, "geometry": {"preset": "square-1x1"}, "bogus": 1}"#).is_err());
    }

    #[test]
    fn input_transform_option() {
        let d = PipelineConfig::from_json(r#"{"schema_version": 1, "geometry": {"preset": "square-1x1"}}"#).unwrap();
        assert_eq!(Pipeline::new(d).unwrap().train_config().input_transform, InputTransform::Identity);
        let c = PipelineConfig::from_json(
            r#"{"schema_version": 1, "geometry": {"preset": "square-1x1"}, "train": {"input_transform": "log10_kappa"}}"#,
        )
        .unwrap();
        assert_eq!(Pipeline::new(c).unwrap().train_config().input_transform, InputTransform::Log10Kappa);
        let bad = PipelineConfig::from_json(
            r#"{"schema_version": 1, "geometry": {"preset": "square-1x1"}, "train": {"input_transform": "log"}}"#,
        );
        assert!(matches!(bad.unwrap_err(), Error::Config { path, .. } if path == "train.input_transform"));
    }

    #[test]
    fn gen_data_writes_expected_shapes_and_is_repeatable() {
        let p = Pipeline::new(tiny(Preset::Square)).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (set, _) = cmd_gen_data(&p, d1.path()).unwrap();
        assert_eq!(set.columns(), 4);
        assert_eq!(set.e_bar.nrows(), 24);
        cmd_gen_data(&p, d2.path()).unwrap();
        for f in ["E_bar.csv", "Theta_bar.csv", "manifest.json"] {
            let a = std::fs::read(d1.path().join(DATASET_DIR).join(f)).unwrap();
            let b = std::fs::read(d2.path().join(DATASET_DIR).join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }

    #[test]
    fn full_pipeline_runs_on_a_tiny_config() {
        let p = Pipeline::new(tiny(Preset::RightTriangle)).unwrap();
        let d = tempfile::tempdir().unwrap();
        let s = cmd_full(&p, d.path()).unwrap();
        assert_eq!(s.config_hash, p.hash);
        assert!(!s.stop_reason.is_empty());
        let net = TrainedNetwork::read(&d.path().join(NETWORK_FILE)).unwrap();
        assert!(!net.record.stop_reason.is_empty());
        let (uni, opt) = load_layouts(&p, d.path(), None, None).unwrap();
        opt.validate(&p.domain, p.min_gap).unwrap();
        assert_eq!(uni.k(), 10);
        let overlay = std::fs::read_to_string(d.path().join("layout_overlay.svg")).unwrap();
        assert_eq!(overlay.matches("marker optimized").count(), 20);
        assert_eq!(overlay.matches("marker uniform").count(), 20);
        let table = std::fs::read_to_string(d.path().join(RECONSTRUCTION_DIR).join("rmse.csv")).unwrap();
        assert_eq!(table.lines().count(), 3);
        let self_cmp = cmd_evaluate(&p, &d.path().join("self"), &uni, &uni).unwrap();
        assert_eq!(self_cmp.mu_ratio, 1.0);
        assert_eq!(self_cmp.kappa_h_reduction_pct, 0.0);
    }
}
