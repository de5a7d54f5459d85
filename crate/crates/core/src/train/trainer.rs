use super::data::{make_batch, Sample};
use super::loss::IGNORE_INDEX;
use crate::error::{config_err, Error, Result};
use crate::network::{round_f32, Checkpoint, NamedTensor, Network, NetworkSpec};
use crate::tensor::{Tape, Tensor4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_power: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            lr_power: 0.9,
            max_iters: 2000,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return config_err("base learning rate must be positive");
        }
        if self.batch_size == 0 || self.max_iters == 0 {
            return config_err("batch size and iteration count must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return config_err("momentum must be in [0, 1) and weight decay non-negative");
        }
        Ok(())
    }
}

/// `base · (1 − iter/max)^power`, zero at and past `max`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter >= cfg.max_iters {
        return 0.0;
    }
    cfg.base_lr * (1.0 - iter as f64 / cfg.max_iters as f64).powf(cfg.lr_power)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.9e},{:.9e}\n", r.iter, r.lr, r.loss));
        }
        s
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    /// Mean loss over the last `window` iterations.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let n = self.records.len();
        if n == 0 {
            return None;
        }
        let tail = &self.records[n - window.clamp(1, n)..];
        Some(tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
/// Parameters and buffers are kept at single-precision values so a saved
/// checkpoint resumes bit-exactly.
pub struct Trainer {
    pub net: Network,
    pub cfg: TrainConfig,
    velocity: Vec<Tensor4>,
    iter: usize,
}

fn order_for_epoch(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mixed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    idx
}

/// Sample indices of batch `iter`: consecutive slices of a per-epoch
/// shuffle, so the order depends only on `(seed, iter)`.
pub fn batch_indices(seed: u64, iter: usize, batch: usize, len: usize) -> Vec<usize> {
    (0..batch)
        .map(|k| {
            let pos = iter * batch + k;
            order_for_epoch(seed, pos / len, len)[pos % len]
        })
        .collect()
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = net.params().iter().map(|p| Tensor4::zeros(p.value.shape())).collect();
        Ok(Self {
            net,
            cfg,
            velocity,
            iter: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.max_iters
    }

    /// Loss of the batch for the current iteration without updating anything.
    pub fn peek_loss(&self, data: &[Sample]) -> Result<f64> {
        let (x, labels) = self.batch(data)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pass = self.net.forward_on_tape(&mut tape, xv, true, false)?;
        let loss = tape.cross_entropy(pass.logits, &labels, IGNORE_INDEX)?;
        Ok(tape.value(loss)?.data()[0])
    }

    fn batch(&self, data: &[Sample]) -> Result<(Tensor4, Vec<u8>)> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let idx = batch_indices(self.cfg.seed, self.iter, self.cfg.batch_size, data.len());
        let samples: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        make_batch(&samples)
    }

    /// One forward/backward/update on the batch for the current iteration.
    pub fn step(&mut self, data: &[Sample]) -> Result<StepRecord> {
        let (x, labels) = self.batch(data)?;
        let lr = poly_lr(self.iter, &self.cfg);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pass = self.net.forward_on_tape(&mut tape, xv, true, true)?;
        let loss_var = tape.cross_entropy(pass.logits, &labels, IGNORE_INDEX)?;
        let loss = tape.value(loss_var)?.data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { iter: self.iter, loss });
        }
        let mut grads = tape.backward(loss_var, None)?;
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for ((p, v), &var) in self.net.params_mut().iter_mut().zip(&mut self.velocity).zip(&pass.params) {
            let Some(g) = grads.take(var) else { continue };
            let pd = p.value.data_mut();
            for ((w, vel), &gr) in pd.iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = round_f32(mu * *vel + gr + wd * *w);
                *w = round_f32(*w - lr * *vel);
            }
        }
        self.net.update_running_stats(&pass.batch_stats);
        for rs in self.net.running_stats_mut() {
            rs.mean.iter_mut().chain(rs.var.iter_mut()).for_each(|x| *x = round_f32(*x));
        }
        let rec = StepRecord {
            iter: self.iter,
            lr,
            loss,
        };
        self.iter += 1;
        if self.cfg.checkpoint_every > 0 && self.iter % self.cfg.checkpoint_every == 0 {
            if let Some(dir) = &self.cfg.checkpoint_dir {
                self.save(&dir.join(format!("iter_{:06}.ckpt", self.iter)))?;
            }
        }
        Ok(rec)
    }

    /// Runs until `max_iters`, calling `on_step` after every iteration.
    pub fn run(&mut self, data: &[Sample], mut on_step: impl FnMut(&StepRecord)) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        while !self.is_done() {
            let r = self.step(data)?;
            on_step(&r);
            log.records.push(r);
        }
        Ok(log)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.net.to_checkpoint(serde_json::json!({
            "iter": self.iter,
            "train": self.cfg,
        }));
        for (p, v) in self.net.params().iter().zip(&self.velocity) {
            ck.tensors.push(NamedTensor {
                name: format!("optimizer.{}", p.name),
                shape: v.shape().dims().to_vec(),
                data: v.data().iter().map(|&x| x as f32).collect(),
            });
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Restores network, momentum buffers and iteration count. The schedule
    /// is taken from `cfg`, which should match the original run.
    pub fn resume(ckpt: &Checkpoint, expected: Option<&NetworkSpec>, cfg: TrainConfig) -> Result<Self> {
        let net = Network::from_checkpoint(ckpt, expected)?;
        let iter = ckpt
            .extra
            .get("iter")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("checkpoint has no iteration count".into()))? as usize;
        let mut t = Trainer::new(net, cfg)?;
        t.iter = iter;
        for (p, v) in t.net.params().iter().zip(t.velocity.iter_mut()) {
            let name = format!("optimizer.{}", p.name);
            let saved = ckpt
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if saved.data.len() != v.len() {
                return Err(Error::Checkpoint(format!("tensor {name} has the wrong size")));
            }
            for (d, &s) in v.data_mut().iter_mut().zip(&saved.data) {
                *d = s as f64;
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_points() {
        let cfg = TrainConfig {
            max_iters: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(poly_lr(0, &cfg), 0.01);
        assert_eq!(poly_lr(1000, &cfg), 0.0);
        assert!((poly_lr(500, &cfg) - 5.359e-3).abs() < 1e-6);
        assert!((poly_lr(500, &cfg) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..4).flat_map(|i| batch_indices(3, i, 5, 20)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, 5, 20), batch_indices(3, 7, 5, 20));
    }

    #[test]
    fn final_loss_window() {
        let log = TrainLog {
            records: (0..5)
                .map(|i| StepRecord {
                    iter: i,
                    lr: 0.0,
                    loss: i as f64,
                })
                .collect(),
        };
        assert_eq!(log.initial_loss(), Some(0.0));
        assert_eq!(log.final_loss(2), Some(3.5));
        assert_eq!(log.final_loss(100), Some(2.0));
    }
}
