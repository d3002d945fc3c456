//! Job configuration and the commands run on it: train, eval, plan and
//! bench.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cluster::{launch, MetricRow, MetricsPhase, RunReport, RunSpec, Topology};
use crate::costmodel::{profiles_from_net, recommend_plan, FragmentNet, LayerCostProfile, PartitionPlan, PlanFragment};
use crate::data::{DataSource, Dataset};
use crate::error::{Error, Result};
use crate::netgraph::{BuildOptions, NetConfig, NeuralNet};
use crate::paramserver::UpdaterConfig;
use crate::training::{evaluate, train_one_batch, Algorithm, EvalMetrics, LocalContext};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "MINISINGA_SEED";

pub const METRICS_HEADER: [&str; 5] = ["iteration", "phase", "loss", "accuracy", "wall_ms"];

fn default_algorithm() -> Algorithm {
    Algorithm::Bp
}

fn default_true() -> bool {
    true
}

/// A training job as written in its JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub net: NetConfig,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    pub updater: UpdaterConfig,
    #[serde(default)]
    pub cluster: Topology,
    pub data: DataSource,
    /// Evaluation set; the training set is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_data: Option<DataSource>,
    pub batch_size: usize,
    pub iterations: u64,
    #[serde(default)]
    pub test_every: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
    /// Checkpoint whose parameters replace the fresh initialization.
    /// Parameters it does not name keep their initial values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restore_from: Option<PathBuf>,
    #[serde(default)]
    pub shuffle: bool,
    /// Prefetch all parameters at the start of each iteration.
    #[serde(default = "default_true")]
    pub overlap: bool,
}

/// A loaded config together with the directory relative paths resolve
/// against.
#[derive(Debug, Clone)]
pub struct Job {
    pub config: JobConfig,
    pub base: PathBuf,
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::validation(path.display().to_string(), e.to_string())
}

/// Reads a seed override from `MINISINGA_SEED`, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::validation(SEED_ENV, format!("must be an unsigned 64-bit integer, got {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::validation(SEED_ENV, e.to_string())),
    }
}

impl JobConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<JobConfig> {
        serde_json::from_str(text).map_err(|e| json_error(origin, e))
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::validation("name", "must not be empty"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::validation("iterations", "must be at least 1"));
        }
        self.net.validate()?;
        match self.algorithm {
            Algorithm::Cd { k } => {
                if k == 0 {
                    return Err(Error::validation("algorithm.k", "needs at least one Gibbs step"));
                }
                if !self.net.has_rbm() {
                    return Err(Error::validation("algorithm", "cd needs rbm_vis and rbm_hid layers in the net"));
                }
            }
            Algorithm::Bptt => {
                if !self.net.has_recurrent() {
                    return Err(Error::validation("algorithm", "bptt needs a recurrent layer in the net"));
                }
            }
            Algorithm::Bp => {
                if self.net.has_rbm() {
                    return Err(Error::validation("algorithm", "nets with rbm layers are trained with cd"));
                }
            }
        }
        self.updater.validate("updater")?;
        self.cluster.validate("cluster")?;
        if self.cluster.server_groups > 1 && self.cluster.sync_every == 0 {
            return Err(Error::validation("cluster.sync_every", "must be at least 1 with several server groups"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::validation("checkpoint_path", "is required when checkpoint_every is set"));
        }
        for (field, src) in [("data", Some(&self.data)), ("test_data", self.test_data.as_ref())] {
            if let Some(DataSource::Synthetic { spec }) = src {
                spec.validate(&format!("{field}.spec"))?;
            }
        }
        Ok(())
    }
}

impl Job {
    /// Parses and validates `path`, applying the seed override.
    pub fn load(path: &Path) -> Result<Job> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::validation(path.display().to_string(), format!("cannot read config: {e}")))?;
        let mut config = JobConfig::from_json(&text, path)?;
        if let Some(seed) = seed_override()? {
            config.seed = seed;
        }
        config.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Job { config, base })
    }

    pub fn from_config(config: JobConfig, base: impl Into<PathBuf>) -> Result<Job> {
        config.validate()?;
        Ok(Job {
            config,
            base: base.into(),
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn train_data(&self) -> Result<Dataset> {
        let data = self.config.data.load(&self.base, self.config.seed)?;
        Ok(if self.config.shuffle { data.shuffled(self.config.seed) } else { data })
    }

    pub fn test_data(&self) -> Result<Dataset> {
        match &self.config.test_data {
            Some(src) => src.load(&self.base, self.config.seed.wrapping_add(1)),
            None => self.config.data.load(&self.base, self.config.seed),
        }
    }

    /// Applies a partition plan produced by [`plan`].
    pub fn apply_plan(&mut self, plan: &PlanFragment) -> Result<()> {
        plan.apply(&mut self.config.net)?;
        self.config.validate()
    }

    pub fn run_spec(&self) -> Result<RunSpec> {
        let c = &self.config;
        let mut spec = RunSpec::new(c.net.clone(), c.updater, self.train_data()?, c.batch_size, c.iterations);
        spec.algorithm = c.algorithm;
        spec.topology = c.cluster.clone();
        spec.seed = c.seed;
        spec.test_every = c.test_every;
        if c.test_every > 0 {
            spec.test = Some(self.test_data()?);
        }
        spec.checkpoint_every = c.checkpoint_every;
        spec.checkpoint_path = c.checkpoint_path.as_deref().map(|p| self.resolve(p));
        spec.restore = match &c.restore_from {
            Some(p) => Some(Checkpoint::load(&self.resolve(p))?),
            None => None,
        };
        spec.overlap = c.overlap;
        Ok(spec)
    }
}

/// Writes metric rows as CSV with the standard header.
pub fn write_metrics<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.phase.as_str().to_string(),
            r.loss.to_string(),
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            format!("{:.3}", r.wall_ms),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the job on the cluster runtime.
pub fn train(job: &Job) -> Result<RunReport> {
    launch(&job.run_spec()?)
}

/// Test-phase metrics of the parameters in `checkpoint`, which must cover
/// every parameter of the net.
pub fn eval(job: &Job, checkpoint: &Path) -> Result<(u64, EvalMetrics)> {
    let c = &job.config;
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut net = NeuralNet::build(
        &c.net.pipeline(1)?,
        BuildOptions {
            batch: c.batch_size,
            seed: c.seed,
        },
    )?;
    let missing: Vec<&str> = net
        .param_specs()
        .map(|s| s.base_name())
        .filter(|n| !ckpt.params.contains_key(*n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("checkpoint lacks parameters {}", missing.join(", "))));
    }
    ckpt.restore(&mut net)?;
    let data = job.test_data()?;
    let m = evaluate(&mut net, &mut LocalContext::new(c.seed), &data, c.batch_size)?;
    Ok((ckpt.iteration, m))
}

/// Renders eval output: the metrics header and one row.
pub fn eval_csv(iteration: u64, m: &EvalMetrics) -> Result<String> {
    let row = MetricRow {
        iteration,
        phase: MetricsPhase::Test,
        loss: m.loss,
        accuracy: m.accuracy,
        wall_ms: 0.0,
    };
    let mut buf = Vec::new();
    write_metrics(&mut buf, &[row])?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

/// What `plan` prints: the plan plus the config fragment that applies it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutput {
    #[serde(flatten)]
    pub plan: PartitionPlan,
    pub net: FragmentNet,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    profiles: Vec<LayerCostProfile>,
}

/// Recommends a partition plan. `input` is either a job config, whose net
/// is profiled, or a file holding `{"profiles": [...]}`.
pub fn plan(input: &Path, b: i64, k: i64) -> Result<PlanOutput> {
    let text = fs::read_to_string(input)
        .map_err(|e| Error::validation(input.display().to_string(), format!("cannot read: {e}")))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_error(input, e))?;
    let profiles = if value.get("profiles").is_some() {
        serde_json::from_value::<ProfileFile>(value).map_err(|e| json_error(input, e))?.profiles
    } else {
        let job = Job::load(input)?;
        if b < 1 || k < 1 {
            return Err(Error::validation(if b < 1 { "b" } else { "k" }, "must be at least 1"));
        }
        profiles_from_net(&job.config.net, b as usize, k as usize)?
    };
    let plan = recommend_plan(&profiles, b, k)?;
    Ok(PlanOutput {
        net: plan.fragment().net,
        plan,
    })
}

/// Reads the fragment from a file written by [`plan`], or from a bare
/// `{"net": {"layers": [...]}}` fragment.
pub fn read_plan(path: &Path) -> Result<PlanFragment> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::validation(path.display().to_string(), format!("cannot read plan: {e}")))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
    let net = value
        .get("net")
        .cloned()
        .ok_or_else(|| Error::validation(format!("{}.net", path.display()), "missing"))?;
    Ok(PlanFragment {
        net: serde_json::from_value(net).map_err(|e| json_error(path, e))?,
    })
}

/// Milliseconds per iteration of single-threaded training at `batch`.
pub fn measure_compute(job: &Job, batch: usize, iterations: u64) -> Result<f64> {
    let c = &job.config;
    let data = job.train_data()?;
    let mut net = NeuralNet::build(&c.net.pipeline(1)?, BuildOptions { batch, seed: c.seed })?;
    let mut ctx = LocalContext::new(c.seed).with_updater(c.updater);
    let start = Instant::now();
    for t in 0..iterations {
        net.set_batch(data.batch((t as usize * batch) % data.len(), batch));
        train_one_batch(&mut net, &mut ctx, c.algorithm, t)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / iterations.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub batch: usize,
    pub latency_ms: f64,
    pub overlap_on_ms: f64,
    pub overlap_off_ms: f64,
}

impl BenchRow {
    /// Fraction of the overlap-off time saved by overlapping.
    pub fn benefit(&self) -> f64 {
        1.0 - self.overlap_on_ms / self.overlap_off_ms
    }
}

/// Per-iteration wall time with overlap on and off, for each batch size,
/// with every message delayed by `latency_ms`.
pub fn bench(job: &Job, latency_ms: f64, batches: &[usize], iterations: u64) -> Result<Vec<BenchRow>> {
    if !(latency_ms >= 0.0 && latency_ms.is_finite()) {
        return Err(Error::validation("latency_ms", "must be a finite non-negative number"));
    }
    if !job.config.cluster.is_sync() {
        return Err(Error::validation("cluster.worker_groups", "bench needs a synchronous topology (one worker group)"));
    }
    if batches.contains(&0) {
        return Err(Error::validation("batch", "must be at least 1"));
    }
    let spec_for = |batch: usize, iterations: u64, overlap: bool| -> Result<RunSpec> {
        let mut spec = job.run_spec()?;
        spec.batch_size = batch;
        spec.iterations = iterations;
        spec.overlap = overlap;
        spec.latency = Duration::from_secs_f64(latency_ms / 1e3);
        spec.test = None;
        spec.test_every = 0;
        spec.checkpoint_path = None;
        spec.checkpoint_every = 0;
        Ok(spec)
    };
    // Untimed warm-up so the first timed run does not pay for cold caches.
    if let Some(&first) = batches.first() {
        launch(&spec_for(first, iterations.min(5), true)?)?;
    }
    let mut rows = Vec::new();
    for &batch in batches {
        let mut times = [0.0; 2];
        for (i, overlap) in [true, false].into_iter().enumerate() {
            times[i] = launch(&spec_for(batch, iterations, overlap)?)?.ms_per_iteration(iterations);
        }
        rows.push(BenchRow {
            batch,
            latency_ms,
            overlap_on_ms: times[0],
            overlap_off_ms: times[1],
        });
    }
    Ok(rows)
}
