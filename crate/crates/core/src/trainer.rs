//! One training session end-to-end, plus N-session studies with distinct
//! seeds on a bounded worker pool.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::field::{mse_equil, mse_sigma, rms_divergence, MetricPair, ScalarField2D, StressField};
use crate::losses::{discriminator_loss, generator_loss, LossConfig, RealDivergenceEma};
use crate::nn::{
    adam_step, read_checkpoint, seed_all, write_checkpoint, AdamState, DiscriminatorNet,
    GeneratorNet,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub total_iterations: usize,
    pub checkpoint_every: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub session_seed: u64,
}

impl TrainConfig {
    pub fn new(loss: LossConfig, session_seed: u64) -> Self {
        Self {
            loss,
            total_iterations: 4_000,
            checkpoint_every: 200,
            batch_size: 4,
            learning_rate: 2e-4,
            session_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.total_iterations == 0
            || self.checkpoint_every == 0
            || self.batch_size == 0
            || self.learning_rate < 0.0
        {
            return Err(Error::Usage("train config fields must be positive".into()));
        }
        if self.total_iterations % self.checkpoint_every != 0 {
            return Err(Error::Usage(
                "checkpoint_every must divide total_iterations".into(),
            ));
        }
        Ok(())
    }
}

/// Test-set statistics recorded at one checkpoint. Stds use the n-1
/// denominator over the test pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub iteration: usize,
    pub mse_sigma_mean: f64,
    pub mse_sigma_std: f64,
    pub mse_equil_mean: f64,
    pub mse_equil_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestSummary {
    pub iteration: usize,
    pub mse_sigma: f64,
    pub mse_equil: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SessionStatus {
    Completed,
    /// The session hit a non-finite loss or gradient; the record is kept as
    /// a first-class diagnostic.
    Aborted { iteration: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_seed: u64,
    pub method: crate::losses::Method,
    pub checkpoints: Vec<CheckpointMetrics>,
    pub best: Option<BestSummary>,
    pub status: SessionStatus,
}

/// The train/validation/test datasets one study trains on.
#[derive(Debug, Clone)]
pub struct DataTriple {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DataTriple {
    pub fn validate(&self) -> Result<()> {
        let shape = self.train.shape();
        if self.validation.shape() != shape || self.test.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?}"),
                found: format!("{:?}/{:?}", self.validation.shape(), self.test.shape()),
                context: "DataTriple".into(),
            });
        }
        Ok(())
    }
}

fn stress_to_channels(s: &StressField, out: &mut Vec<f64>) {
    for c in s.components() {
        out.extend_from_slice(c.values());
    }
}

fn batch_tensors(data: &Dataset, idxs: &[usize]) -> (Tensor, Tensor) {
    let (h, w) = data.shape();
    let mut micro = Vec::with_capacity(idxs.len() * h * w);
    let mut target = Vec::with_capacity(idxs.len() * 3 * h * w);
    for &i in idxs {
        micro.extend_from_slice(data.pairs[i].input.phase().values());
        stress_to_channels(&data.pairs[i].target, &mut target);
    }
    (
        Tensor::new(vec![idxs.len(), 1, h, w], micro).expect("micro batch"),
        Tensor::new(vec![idxs.len(), 3, h, w], target).expect("target batch"),
    )
}

fn tensor_to_stress(t: &Tensor, image: usize) -> StressField {
    let (h, w) = (t.shape[2], t.shape[3]);
    let per = h * w;
    let base = image * 3 * per;
    let comp = |c: usize| {
        ScalarField2D::new(h, w, t.data[base + c * per..base + (c + 1) * per].to_vec()).unwrap()
    };
    StressField::new(comp(0), comp(1), comp(2)).unwrap()
}

fn batch_mean_rms_divergence(target: &Tensor) -> Result<f64> {
    let n = target.shape[0];
    let mut acc = 0.0;
    for i in 0..n {
        acc += rms_divergence(&tensor_to_stress(target, i), 1.0)?;
    }
    Ok(acc / n as f64)
}

/// Per-pair test metrics for a generator.
pub fn evaluate_generator(gen: &GeneratorNet, data: &Dataset) -> Result<Vec<MetricPair>> {
    let mut out = Vec::with_capacity(data.pairs.len());
    for i in 0..data.pairs.len() {
        let (micro, _) = batch_tensors(data, &[i]);
        let pred = gen.predict(&micro)?;
        let pred_field = tensor_to_stress(&pred, 0);
        let target = &data.pairs[i].target;
        out.push(MetricPair {
            mse_sigma: mse_sigma(&pred_field, target)?,
            mse_equil: mse_equil(&pred_field, target, 1.0)?,
        });
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn checkpoint_metrics(
    gen: &GeneratorNet,
    test: &Dataset,
    iteration: usize,
) -> Result<CheckpointMetrics> {
    let pairs = evaluate_generator(gen, test)?;
    let sigmas: Vec<f64> = pairs.iter().map(|p| p.mse_sigma).collect();
    let equils: Vec<f64> = pairs.iter().map(|p| p.mse_equil).collect();
    let (sm, ss) = mean_std(&sigmas);
    let (em, es) = mean_std(&equils);
    Ok(CheckpointMetrics {
        iteration,
        mse_sigma_mean: sm,
        mse_sigma_std: ss,
        mse_equil_mean: em,
        mse_equil_std: es,
    })
}

fn named_params(gen: &GeneratorNet, disc: &DiscriminatorNet) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (n, t) in gen.params.entries() {
        out.push((format!("gen.{n}"), t.clone()));
    }
    for (n, t) in disc.params.entries() {
        out.push((format!("disc.{n}"), t.clone()));
    }
    out
}

/// Load the generator half of a checkpoint.
pub fn load_generator_checkpoint(path: &Path) -> Result<(u64, GeneratorNet)> {
    let (iteration, params) = read_checkpoint(path)?;
    let saved: Vec<(String, Tensor)> = params
        .into_iter()
        .filter_map(|(name, t)| {
            name.strip_prefix("gen.").map(|n| (n.to_string(), t))
        })
        .collect();
    let mut gen = GeneratorNet::init(0);
    gen.params.load(&saved)?;
    Ok((iteration, gen))
}

fn next_batch(
    deck: &mut Vec<usize>,
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut idxs = Vec::with_capacity(batch_size);
    while idxs.len() < batch_size {
        if deck.is_empty() {
            let mut fresh: Vec<usize> = (0..n).collect();
            fresh.shuffle(rng);
            *deck = fresh;
        }
        idxs.push(deck.pop().expect("deck refilled"));
    }
    idxs
}

/// True when an error means "the numbers went bad" rather than a usage or
/// IO problem; such sessions abort into a diagnostic record.
fn is_numeric_failure(err: &Error) -> bool {
    matches!(err, Error::DataIntegrity { .. } | Error::Training { .. })
}

fn one_iteration(
    config: &TrainConfig,
    data: &DataTriple,
    gen: &mut GeneratorNet,
    disc: &mut DiscriminatorNet,
    gen_opt: &mut AdamState,
    disc_opt: &mut AdamState,
    ema: &mut RealDivergenceEma,
    deck: &mut Vec<usize>,
    order: &mut ChaCha8Rng,
) -> Result<()> {
    let idxs = next_batch(deck, data.train.pairs.len(), config.batch_size, order);
    let (micro_t, target_t) = batch_tensors(&data.train, &idxs);
    let r_real = ema.update(batch_mean_rms_divergence(&target_t)?);

    // discriminator step on a detached fake
    let fake = gen.predict(&micro_t)?;
    {
        let mut tape = Tape::new();
        let db = disc.bind(&mut tape)?;
        let m = tape.leaf(micro_t.clone())?;
        let r = tape.leaf(target_t.clone())?;
        let f = tape.leaf(fake)?;
        let (d_loss, _) =
            discriminator_loss(&mut tape, &config.loss, disc, &db, m, r, f, r_real)?;
        let grads = tape.backward(d_loss)?;
        let g = db.collect_grads(&tape, &grads);
        adam_step(disc_opt, &mut disc.params, &g)?;
    }

    // generator step
    {
        let mut tape = Tape::new();
        let gb = gen.bind(&mut tape)?;
        let db = disc.bind(&mut tape)?;
        let m = tape.leaf(micro_t)?;
        let t = tape.leaf(target_t)?;
        let pred = gen.forward(&mut tape, &gb, m)?;
        let (g_loss, _) =
            generator_loss(&mut tape, &config.loss, disc, &db, m, pred, t, r_real)?;
        let grads = tape.backward(g_loss)?;
        let g = gb.collect_grads(&tape, &grads);
        adam_step(gen_opt, &mut gen.params, &g)?;
    }
    Ok(())
}

fn train_session_impl(
    config: &TrainConfig,
    data: &DataTriple,
    out_dir: Option<&Path>,
    mut gen: GeneratorNet,
    mut disc: DiscriminatorNet,
    mut order: ChaCha8Rng,
) -> Result<SessionRecord> {
    config.validate()?;
    data.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let started = Instant::now();
    let mut gen_opt = AdamState::with_lr(&gen.params, config.learning_rate);
    let mut disc_opt = AdamState::with_lr(&disc.params, config.learning_rate);
    let mut ema = RealDivergenceEma::default();
    let mut deck: Vec<usize> = Vec::new();
    let mut checkpoints = Vec::new();
    let mut status = SessionStatus::Completed;

    for iteration in 1..=config.total_iterations {
        let step = one_iteration(
            config, data, &mut gen, &mut disc, &mut gen_opt, &mut disc_opt, &mut ema, &mut deck,
            &mut order,
        );
        match step {
            Ok(()) => {}
            Err(err) if is_numeric_failure(&err) => {
                status = SessionStatus::Aborted {
                    iteration,
                    reason: err.to_string(),
                };
                break;
            }
            Err(err) => return Err(err),
        }
        if iteration % config.checkpoint_every == 0 {
            checkpoints.push(checkpoint_metrics(&gen, &data.test, iteration)?);
            if let Some(dir) = out_dir {
                write_checkpoint(
                    &dir.join("checkpoints").join(format!("iter-{iteration}.eqck")),
                    iteration as u64,
                    &named_params(&gen, &disc),
                )?;
            }
        }
    }

    let best = checkpoints
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.mse_sigma_mean.total_cmp(&b.mse_sigma_mean))
        .map(|(_, c)| BestSummary {
            iteration: c.iteration,
            mse_sigma: c.mse_sigma_mean,
            mse_equil: c.mse_equil_mean,
        });

    let record = SessionRecord {
        session_seed: config.session_seed,
        method: config.loss.method,
        checkpoints,
        best,
        status,
    };

    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join("metrics.csv"), &record.checkpoints)?;
        let session = serde_json::json!({
            "config": config,
            "record": record,
            "wall_time_secs": started.elapsed().as_secs_f64(),
        });
        let bytes = serde_json::to_vec_pretty(&session).map_err(|e| Error::Parse {
            path: dir.join("session.json").display().to_string(),
            reason: e.to_string(),
        })?;
        fs::write(dir.join("session.json"), bytes)?;
    }
    Ok(record)
}

/// Run one fully deterministic training session. `out_dir`, when given,
/// receives `checkpoints/iter-<k>.eqck`, `metrics.csv`, and `session.json`.
pub fn train_session(
    config: &TrainConfig,
    data: &DataTriple,
    out_dir: Option<&Path>,
) -> Result<SessionRecord> {
    let (gen, disc, order) = seed_all(config.session_seed);
    train_session_impl(config, data, out_dir, gen, disc, order)
}

fn write_metrics_csv(path: &Path, checkpoints: &[CheckpointMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    w.write_record([
        "iteration",
        "mse_sigma_mean",
        "mse_sigma_std",
        "mse_equil_mean",
        "mse_equil_std",
    ])
    .map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    for c in checkpoints {
        w.write_record([
            c.iteration.to_string(),
            format!("{:e}", c.mse_sigma_mean),
            format!("{:e}", c.mse_sigma_std),
            format!("{:e}", c.mse_equil_mean),
            format!("{:e}", c.mse_equil_std),
        ])
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Run `n_sessions` sessions with seeds `seed_stream[0..n]` on at most
/// `workers` concurrent workers. Results are ordered by seed index
/// regardless of scheduling. `out_root`, when given, receives
/// `<method>/<seed>/` session directories.
pub fn run_study(
    base: &TrainConfig,
    n_sessions: usize,
    seed_stream: &[u64],
    workers: usize,
    data: &DataTriple,
    out_root: Option<&Path>,
) -> Result<Vec<SessionRecord>> {
    if n_sessions < 2 {
        return Err(Error::Usage("a study needs at least 2 sessions".into()));
    }
    if seed_stream.len() < n_sessions {
        return Err(Error::Usage(format!(
            "seed stream has {} entries, need {n_sessions}",
            seed_stream.len()
        )));
    }
    base.validate()?;
    let method = base.loss.method.slug();
    let dirs: Vec<Option<PathBuf>> = (0..n_sessions)
        .map(|i| out_root.map(|r| r.join(method).join(seed_stream[i].to_string())))
        .collect();
    let results: Vec<Result<SessionRecord>> = exec::map_indexed_bounded(n_sessions, workers, |i| {
        let config = TrainConfig {
            session_seed: seed_stream[i],
            ..base.clone()
        };
        train_session(&config, data, dirs[i].as_deref())
    });
    results.into_iter().collect()
}

/// Count of aborted sessions in a study; aborted records are excluded from
/// analysis but never dropped.
pub fn aborted_count(records: &[SessionRecord]) -> usize {
    records
        .iter()
        .filter(|r| !matches!(r.status, SessionStatus::Completed))
        .count()
}

/// Argmin over checkpoints by mean test mse_sigma; earliest iteration wins
/// ties.
pub fn select_best_iteration(record: &SessionRecord) -> Result<(usize, MetricPair)> {
    let best = record
        .checkpoints
        .iter()
        .min_by(|a, b| a.mse_sigma_mean.total_cmp(&b.mse_sigma_mean))
        .ok_or_else(|| Error::Usage("session record has no checkpoints".into()))?;
    Ok((
        best.iteration,
        MetricPair {
            mse_sigma: best.mse_sigma_mean,
            mse_equil: best.mse_equil_mean,
        },
    ))
}
