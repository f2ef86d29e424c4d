//! SGD with momentum and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{derive_rng, NormStats, PatchPair};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::layers::{ParamStore, PATCH_SIZE};
use crate::losses::{combined_loss, LossBreakdown, LossWeights};
use crate::model::{Model, ModelSpec};
use crate::tensor::{Graph, Real, Tensor};

/// Epochs on synthetic data unless configured otherwise.
pub const DESK_EPOCHS: usize = 40;
/// Epochs on a real dataset unless configured otherwise.
pub const DATASET_EPOCHS: usize = 150;

const STREAM_INIT: u32 = 100;
const STREAM_SHUFFLE: u32 = 101;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Weight decay added to the gradient.
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.95,
            l2: 1e-3,
            batch_size: 32,
            epochs: DESK_EPOCHS,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(None, m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be non-negative, got {}", self.l2));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        self.loss.validate()
    }
}

/// `v ← μ·v + (g + l2·w)`, `w ← w − lr·v` for every parameter.
///
/// A parameter without a gradient is treated as having a zero gradient.
pub fn sgd_momentum_step<T: Real>(
    store: &mut ParamStore<T>,
    velocities: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
    l2: f64,
) -> Result<()> {
    if velocities.len() != store.len() {
        return Err(Error::contract(format!(
            "{} velocity buffers for {} parameters",
            velocities.len(),
            store.len()
        )));
    }
    let (lr, mu, l2) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(l2),
    );
    for (p, v) in store.iter_mut().zip(velocities.iter_mut()) {
        if v.shape() != p.value.shape() || p.grad.as_ref().is_some_and(|g| g.shape() != v.shape()) {
            return Err(Error::contract(format!(
                "shape mismatch updating {}",
                p.name
            )));
        }
        let grad = p.grad.as_ref().map(|g| g.data());
        for (i, (w, vel)) in p.value.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let g = grad.map_or(T::zero(), |g| g[i]);
            *vel = mu * *vel + (g + l2 * *w);
            *w = *w - lr * *vel;
        }
    }
    Ok(())
}

pub fn zero_velocities<T: Real>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store
        .iter()
        .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
        .collect()
}

/// Header of the per-epoch metrics CSV.
pub const METRICS_HEADER: &str =
    "epoch,total,tsnet_en,siam_en,pseudo_en,siam_con,pseudo_con,val_err95";

/// One line of the metrics log: epoch means of the loss components and the
/// validation error rate after the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_err95: Option<f64>,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let c = self.loss.components();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss.total,
            f(c[0]),
            f(c[1]),
            f(c[2]),
            f(c[3]),
            f(c[4]),
            f(self.val_err95)
        )
    }
}

/// Where a run writes its outputs.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(RunDir { root })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best.tsck")
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("last.tsck")
    }

    fn append_metrics(&self, rec: &EpochRecord) -> Result<()> {
        let path = self.metrics();
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        if fresh {
            writeln!(f, "{METRICS_HEADER}")?;
        }
        writeln!(f, "{}", rec.csv_line())?;
        Ok(())
    }
}

/// Model, optimizer state and schedule position of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub velocities: Vec<Tensor<f32>>,
    pub cfg: TrainConfig,
    pub stats: NormStats,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Best validation error rate so far (`+∞` before any validation).
    pub best_val: f64,
}

impl Trainer {
    /// Freshly initialized parameters, seeded from `cfg.seed`.
    pub fn new(spec: ModelSpec, cfg: TrainConfig, stats: NormStats) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(spec, &mut store, &mut derive_rng(cfg.seed, STREAM_INIT, 0))?;
        Ok(Trainer {
            velocities: zero_velocities(&store),
            model,
            store,
            cfg,
            stats,
            rng: derive_rng(cfg.seed, STREAM_SHUFFLE, 0),
            epoch: 0,
            best_val: f64::INFINITY,
        })
    }

    /// Continues a run from its checkpoint.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = ck.restore()?;
        let velocities = if ck.velocities.is_empty() {
            zero_velocities(&store)
        } else {
            ck.velocities.clone()
        };
        Ok(Trainer {
            model,
            store,
            velocities,
            cfg,
            stats: ck.stats,
            rng: ck.rng_state.to_rng(),
            epoch: ck.epoch,
            best_val: ck.best_val,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    /// One SGD step on `batch`; returns the batch's loss components.
    pub fn step(&mut self, batch: &[&PatchPair], batch_index: usize) -> Result<LossBreakdown> {
        let (epoch, lr) = (self.epoch + 1, self.cfg.lr);
        let diverged = move |detail: String| Error::Diverged {
            epoch,
            batch: batch_index,
            lr,
            detail,
        };
        let mut g = Graph::<f32>::new();
        let patch = |g: &mut Graph<f32>, p: &[f32]| {
            g.constant(Tensor::new(vec![1, PATCH_SIZE, PATCH_SIZE], p.to_vec()).expect("patch"))
        };
        let x1: Vec<_> = batch.iter().map(|p| patch(&mut g, &p.patch_a)).collect();
        let x2: Vec<_> = batch.iter().map(|p| patch(&mut g, &p.patch_b)).collect();
        let labels: Vec<u8> = batch.iter().map(|p| p.label).collect();
        let spec = self.model.spec;
        let run = |g: &mut Graph<f32>| -> Result<_> {
            let out = self.model.forward(g, &self.store, &x1, &x2)?;
            let obj = combined_loss(g, &out, &labels, &self.cfg.loss, spec.kind, spec.loss_mode)?;
            if !obj.breakdown.total.is_finite() {
                return Err(Error::NonFinite { op: "loss" });
            }
            g.backward(obj.total)?;
            Ok(obj.breakdown)
        };
        let breakdown = run(&mut g).map_err(|e| match e {
            Error::NonFinite { op } => diverged(format!("non-finite value in {op}")),
            other => other,
        })?;
        self.store.zero_grads();
        self.store.accumulate_grads(&g, 1.0);
        sgd_momentum_step(
            &mut self.store,
            &mut self.velocities,
            self.cfg.lr,
            self.cfg.momentum,
            self.cfg.l2,
        )?;
        self.store.zero_grads();
        if self.store.iter().any(|(_, p)| !p.value.all_finite()) {
            return Err(diverged("parameters became non-finite".into()));
        }
        Ok(breakdown)
    }

    /// One pass over `train` in a seeded shuffled order; returns the mean of
    /// each loss component over the batches.
    pub fn train_epoch(&mut self, train: &[PatchPair]) -> Result<LossBreakdown> {
        if train.is_empty() {
            return Err(Error::contract("empty training split"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0f64; 6];
        let mut present = [false; 5];
        let mut n_batches = 0usize;
        for (bi, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&PatchPair> = idx.iter().map(|&i| &train[i]).collect();
            let b = self.step(&batch, bi)?;
            sums[0] += b.total;
            for (k, c) in b.components().into_iter().enumerate() {
                if let Some(v) = c {
                    sums[k + 1] += v;
                    present[k] = true;
                }
            }
            n_batches += 1;
        }
        let n = n_batches as f64;
        let comp = |k: usize| present[k].then(|| sums[k + 1] / n);
        Ok(LossBreakdown {
            total: sums[0] / n,
            tsnet_en: comp(0),
            siam_en: comp(1),
            pseudo_en: comp(2),
            siam_con: comp(3),
            pseudo_con: comp(4),
        })
    }

    /// Trains until `self.epoch == epochs`, validating after every epoch.
    ///
    /// With a run directory, appends to its metrics CSV, rewrites
    /// `last.tsck` every epoch and `best.tsck` on each validation improvement.
    pub fn fit(
        &mut self,
        train: &[PatchPair],
        val: &[PatchPair],
        epochs: usize,
        out: Option<&RunDir>,
    ) -> Result<Vec<EpochRecord>> {
        let mut log = Vec::new();
        while self.epoch < epochs {
            let loss = self.train_epoch(train)?;
            self.epoch += 1;
            let val_err95 = if val.is_empty() {
                None
            } else {
                Some(evaluate(&self.model, &self.store, val)?.err_rate_95)
            };
            let improved = val_err95.is_some_and(|v| v < self.best_val);
            if let Some(v) = val_err95.filter(|_| improved) {
                self.best_val = v;
            }
            let rec = EpochRecord {
                epoch: self.epoch,
                loss,
                val_err95,
            };
            log::info!("{}", rec.csv_line());
            if let Some(dir) = out {
                dir.append_metrics(&rec)?;
                let ck = self.checkpoint();
                if improved {
                    ck.save(&dir.best())?;
                }
                ck.save(&dir.last())?;
            }
            log.push(rec);
        }
        Ok(log)
    }
}

/// Reads a metrics CSV back as lines (header excluded).
pub fn read_metrics(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect())
}
