//! Metrics and analytic oracles: Gaussian Fréchet distance, masked MSE, the
//! Bayes-optimal noise predictor for diagonal Gaussian data, and the task
//! battery that ties them to the samplers.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::latent::{LatentShape, MultimodalLatent, SegmentMask};
use crate::predictor::{DifferentiablePredictor, NoisePredictor};
use crate::rng::{label, stream, Rng};
use crate::sampling::{
    reconstruction_guided_sample, replacement_sample, sample, task_condition, task_mask, SamplerConfig, Task,
    TaskParams,
};
use crate::schedule::{NoiseSchedule, TimestepVector};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Added to both covariance diagonals before the matrix square root.
pub const FRECHET_RIDGE: f64 = 1e-6;

/// `rows × dim` sample matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != rows * dim {
            return Err(shape_err(format!("{rows}x{dim} values"), data.len()));
        }
        Ok(Self { rows, dim, data })
    }

    /// One row per latent: the concatenated entries of every cell where
    /// `mask` is false (all cells when `mask` is `None`).
    pub fn from_region(latents: &[MultimodalLatent], mask: Option<&SegmentMask>) -> Result<Self> {
        let first = latents.first().ok_or(Error::EmptyRegion)?;
        let mut data = Vec::new();
        let mut dim = 0;
        for (i, x) in latents.iter().enumerate() {
            first.ensure_same_shape(x)?;
            if let Some(mask) = mask {
                mask.matches(x.shape())?;
            }
            for m in 0..x.modalities() {
                for n in 0..x.segments() {
                    if mask.is_some_and(|k| k.get(m, n)) {
                        continue;
                    }
                    data.extend_from_slice(x.segment(m, n));
                    if i == 0 {
                        dim += x.width(m);
                    }
                }
            }
        }
        if dim == 0 {
            return Err(Error::EmptyRegion);
        }
        Self::new(latents.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.rows, self.dim);
        let mut mean = DVector::zeros(d);
        for i in 0..n {
            for (j, v) in self.row(i).iter().enumerate() {
                mean[j] += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..n {
            let c = DVector::from_iterator(d, self.row(i).iter().zip(mean.iter()).map(|(v, m)| v - m));
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
        (mean, cov)
    }
}

/// Fréchet distance between Gaussians fitted to `a` and `b`:
/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2})`.
///
/// The trace of the square root is computed as `Tr((S Σ_B S)^{1/2})` with
/// `S = Σ_A^{1/2}`, both via symmetric eigendecompositions.
pub fn frechet_gaussian(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim != b.dim {
        return Err(shape_err(format!("feature dim {}", a.dim), b.dim));
    }
    for f in [a, b] {
        if f.rows < f.dim + 1 {
            return Err(Error::InvalidConfig(format!(
                "{} samples cannot estimate a {}-dimensional covariance",
                f.rows, f.dim
            )));
        }
        if f.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite feature".into()));
        }
    }
    let (mu_a, mut cov_a) = a.moments();
    let (mu_b, mut cov_b) = b.moments();
    for i in 0..a.dim {
        cov_a[(i, i)] += FRECHET_RIDGE;
        cov_b[(i, i)] += FRECHET_RIDGE;
    }
    let sqrt_a = psd_sqrt(&cov_a, "first")?;
    let mut inner = &sqrt_a * &cov_b * &sqrt_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    check_psd(&eig.eigenvalues, "product")?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let value = diff.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

fn check_psd(eigenvalues: &DVector<f64>, which: &str) -> Result<()> {
    let scale = eigenvalues.iter().fold(1.0f64, |m, l| m.max(l.abs()));
    if let Some(&bad) = eigenvalues.iter().find(|&&l| l < -1e-8 * scale) {
        return Err(Error::NotPsd(format!("{which} matrix has eigenvalue {bad:e}")));
    }
    Ok(())
}

fn psd_sqrt(m: &DMatrix<f64>, which: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    check_psd(&eig.eigenvalues, which)?;
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * roots * eig.eigenvectors.transpose())
}

/// MSE over the generated (mask-false) entries only.
pub fn conditional_mse(generated: &MultimodalLatent, truth: &MultimodalLatent, mask: &SegmentMask) -> Result<f64> {
    generated.ensure_same_shape(truth)?;
    mask.matches(truth.shape())?;
    let mut sse = 0.0;
    let mut count = 0usize;
    for m in 0..truth.modalities() {
        for n in 0..truth.segments() {
            if mask.get(m, n) {
                continue;
            }
            for (g, t) in generated.segment(m, n).iter().zip(truth.segment(m, n)) {
                sse += (g - t) * (g - t);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sse / count as f64)
}

/// Mean and (population) variance.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// `z₀ ~ N(μ₀, diag(σ₀²))`, elementwise.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDataSpec {
    pub mean: MultimodalLatent,
    pub var: MultimodalLatent,
}

impl GaussianDataSpec {
    pub fn new(mean: MultimodalLatent, var: MultimodalLatent) -> Result<Self> {
        mean.ensure_same_shape(&var)?;
        if var.values().any(|&v| !(v > 0.0 && v.is_finite())) || !mean.is_finite() {
            return Err(Error::InvalidConfig("Gaussian spec needs finite mean and positive variance".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn shape(&self) -> &LatentShape {
        self.mean.shape()
    }

    pub fn sample(&self, rng: &mut Rng) -> MultimodalLatent {
        let eps = MultimodalLatent::standard_normal(self.shape(), rng);
        let scaled = eps.zip_map(&self.var, |e, v| e * v.sqrt()).expect("same shape");
        scaled.zip_map(&self.mean, |a, b| a + b).expect("same shape")
    }
}

/// ∂E[ε | z_t]/∂z_t for one element of variance `var` at `ᾱ`.
fn oracle_slope(var: f64, ab: f64) -> f64 {
    (1.0 - ab).sqrt() / (ab * var + 1.0 - ab)
}

/// Bayes-optimal ε̂ for diagonal Gaussian data, per element at its own
/// timestep; zero at t = 0.
pub fn analytic_optimal_eps(
    spec: &GaussianDataSpec,
    z_t: &MultimodalLatent,
    tvec: &TimestepVector,
    sched: &NoiseSchedule,
) -> Result<MultimodalLatent> {
    z_t.ensure_same_shape(&spec.mean)?;
    if tvec.modalities() != z_t.modalities() || tvec.segments() != z_t.segments() {
        return Err(shape_err(
            format!("{}x{} timesteps", z_t.modalities(), z_t.segments()),
            format!("{}x{}", tvec.modalities(), tvec.segments()),
        ));
    }
    tvec.check_range(sched.steps())?;
    let mut out = MultimodalLatent::zeros(z_t.shape());
    for m in 0..z_t.modalities() {
        for n in 0..z_t.segments() {
            let t = tvec.get(m, n);
            if t == 0 {
                continue;
            }
            let ab = sched.alpha_bar(t);
            let sa = ab.sqrt();
            let sb = (1.0 - ab).sqrt();
            let (mu, var) = (spec.mean.segment(m, n), spec.var.segment(m, n));
            for (k, o) in out.segment_mut(m, n).iter_mut().enumerate() {
                let z = z_t.segment(m, n)[k];
                let post = (sa * var[k] * z + (1.0 - ab) * mu[k]) / (ab * var[k] + 1.0 - ab);
                *o = (z - sa * post) / sb;
            }
        }
    }
    Ok(out)
}

/// [`analytic_optimal_eps`] as a predictor.
#[derive(Clone, Debug)]
pub struct GaussianOracle<'a> {
    pub spec: &'a GaussianDataSpec,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for GaussianOracle<'_> {
    fn predict(&self, z_t: &MultimodalLatent, tvec: &TimestepVector, _: Option<&MultimodalLatent>) -> Result<MultimodalLatent> {
        analytic_optimal_eps(self.spec, z_t, tvec, self.sched)
    }
}

impl DifferentiablePredictor for GaussianOracle<'_> {
    fn predict_vjp(
        &self,
        z_t: &MultimodalLatent,
        tvec: &TimestepVector,
        self_cond: Option<&MultimodalLatent>,
        upstream: &mut dyn FnMut(&MultimodalLatent) -> Result<MultimodalLatent>,
    ) -> Result<(MultimodalLatent, MultimodalLatent)> {
        let eps = self.predict(z_t, tvec, self_cond)?;
        let mut g = upstream(&eps)?;
        for m in 0..z_t.modalities() {
            for n in 0..z_t.segments() {
                let t = tvec.get(m, n);
                let ab = if t == 0 { 1.0 } else { self.sched.alpha_bar(t) };
                let var = self.spec.var.segment(m, n);
                for (k, gk) in g.segment_mut(m, n).iter_mut().enumerate() {
                    *gk *= if t == 0 { 0.0 } else { oracle_slope(var[k], ab) };
                }
            }
        }
        Ok((eps, g))
    }
}

/// How the conditioned cells are imposed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Method {
    /// Conditioned cells clean at t = 0 (the trained-in mechanism).
    Masked,
    Replacement,
    ReconGuided { lambda: f64 },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Masked => "masked".into(),
            Method::Replacement => "replacement".into(),
            Method::ReconGuided { lambda } => format!("recon-guided(lambda={lambda})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub sampler: SamplerConfig,
    pub method: Method,
    pub seed: u64,
    pub task_params: TaskParams,
    /// Use at most this many evaluation examples.
    pub max_examples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub frechet: Option<f64>,
    pub mse: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub sampler: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub tasks: BTreeMap<String, TaskMetrics>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tasks: BTreeMap::new(),
        }
    }

    /// Number of metric values present.
    pub fn metric_count(&self) -> usize {
        self.tasks
            .values()
            .map(|t| t.frechet.is_some() as usize + t.mse.is_some() as usize)
            .sum()
    }
}

impl Default for MetricsReport {
    fn default() -> Self {
        Self::new()
    }
}

/// Checks a report document: schema version, known task names, and the
/// required per-task fields (the joint task carries no MSE).
pub fn validate_report(doc: &serde_json::Value) -> Result<MetricsReport> {
    let bad = |m: String| Error::Format(format!("metrics report: {m}"));
    let version = doc
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing schema_version".into()))?;
    if version != REPORT_SCHEMA_VERSION as u64 {
        return Err(Error::Version {
            expected: REPORT_SCHEMA_VERSION,
            found: version as u32,
        });
    }
    let report: MetricsReport = serde_json::from_value(doc.clone()).map_err(|e| bad(e.to_string()))?;
    if report.tasks.is_empty() {
        return Err(bad("no tasks".into()));
    }
    for (name, t) in &report.tasks {
        let task: Task = name.parse().map_err(|_| bad(format!("unknown task '{name}'")))?;
        if t.error.is_some() {
            continue;
        }
        let fr = t.frechet.ok_or_else(|| bad(format!("{name}: missing frechet")))?;
        if !(fr >= 0.0 && fr.is_finite()) {
            return Err(bad(format!("{name}: frechet {fr} is not a finite non-negative number")));
        }
        match (task, t.mse) {
            (Task::Joint, Some(_)) => return Err(bad("joint: unexpected mse".into())),
            (Task::Joint, None) => {}
            (_, None) => return Err(bad(format!("{name}: missing mse"))),
            (_, Some(v)) if !(v >= 0.0 && v.is_finite()) => {
                return Err(bad(format!("{name}: mse {v} is not a finite non-negative number")))
            }
            _ => {}
        }
        if t.n == 0 {
            return Err(bad(format!("{name}: n = 0")));
        }
    }
    Ok(report)
}

/// Generates one sample per truth example for `task`. Example `i` uses the
/// random stream `(seed, EVAL, task, i)`.
pub fn generate_task_samples<P: DifferentiablePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    truths: &[MultimodalLatent],
    task: Task,
    cfg: &BatteryConfig,
) -> Result<Vec<MultimodalLatent>> {
    truths
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let cond = task_condition(task, x, cfg.task_params)?;
            let mut rng = stream(cfg.seed, &[label::EVAL, task as u64, i as u64]);
            match cfg.method {
                Method::Masked => sample(model, sched, &cond, &cfg.sampler, &mut rng),
                Method::Replacement => replacement_sample(model, sched, &cond, &cfg.sampler, &mut rng),
                Method::ReconGuided { lambda } => {
                    reconstruction_guided_sample(model, sched, &cond, &cfg.sampler, lambda, &mut rng)
                }
            }
        })
        .collect()
}

/// Fréchet distance between generated and true regions, plus the mean
/// conditional MSE for conditional tasks.
pub fn score_task(
    task: Task,
    generated: &[MultimodalLatent],
    truths: &[MultimodalLatent],
    params: TaskParams,
) -> Result<(f64, Option<f64>)> {
    if generated.len() != truths.len() || truths.is_empty() {
        return Err(shape_err(format!("{} samples", truths.len()), generated.len()));
    }
    let mask = task_mask(task, truths[0].modalities(), truths[0].segments(), params)?;
    let fr = frechet_gaussian(
        &FeatureSet::from_region(generated, Some(&mask))?,
        &FeatureSet::from_region(truths, Some(&mask))?,
    )?;
    if task == Task::Joint {
        return Ok((fr, None));
    }
    let mut total = 0.0;
    for (g, t) in generated.iter().zip(truths) {
        total += conditional_mse(g, t, &mask)?;
    }
    Ok((fr, Some(total / truths.len() as f64)))
}

/// Runs every task, recording per-task failures instead of aborting.
pub fn run_task_battery<P: DifferentiablePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    truths: &[MultimodalLatent],
    tasks: &[Task],
    cfg: &BatteryConfig,
) -> MetricsReport {
    let truths = &truths[..cfg.max_examples.unwrap_or(truths.len()).min(truths.len())];
    let mut report = MetricsReport::new();
    let sampler = format!("{}({} steps, s={}) {}", cfg.sampler.kind, cfg.sampler.steps, cfg.sampler.guidance_scale, cfg.method.name());
    for &task in tasks {
        let result = generate_task_samples(model, sched, truths, task, cfg)
            .and_then(|g| score_task(task, &g, truths, cfg.task_params));
        let mut m = TaskMetrics {
            frechet: None,
            mse: None,
            n: truths.len(),
            seed: cfg.seed,
            sampler: sampler.clone(),
            error: None,
        };
        match result {
            Ok((fr, mse)) => {
                m.frechet = Some(fr);
                m.mse = mse;
            }
            Err(e) => m.error = Some(e.to_string()),
        }
        report.tasks.insert(task.name().to_string(), m);
    }
    report
}

/// A Gaussian spec with means in `[-1, 1]` and variances in `[0.25, 2]`.
pub fn random_gaussian_spec(shape: &LatentShape, rng: &mut Rng) -> GaussianDataSpec {
    let mean = MultimodalLatent::standard_normal(shape, rng).map(|v| v.tanh());
    let var = MultimodalLatent::standard_normal(shape, rng).map(|v| 0.25 + 1.75 / (1.0 + (-v).exp()));
    GaussianDataSpec { mean, var }
}

/// Draws `(z₀, ε, z_t)` jointly for the Monte-Carlo check of the oracle.
pub fn joint_draw(
    spec: &GaussianDataSpec,
    tvec: &TimestepVector,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(MultimodalLatent, MultimodalLatent, MultimodalLatent)> {
    let z0 = spec.sample(rng);
    let eps = MultimodalLatent::standard_normal(spec.shape(), rng);
    let zt = crate::forward::q_sample(&z0, tvec, &eps, sched)?;
    Ok((z0, eps, zt))
}
