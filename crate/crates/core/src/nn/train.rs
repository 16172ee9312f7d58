//! SGD with momentum on the pixel-wise softmax loss.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, ShapeError};
use crate::noisegen::{make_sample, NoiseConfig};
use crate::raster::{BinaryMask, GrayImage};
use crate::synthgen::GeneratorConfig;

use super::checkpoint::{Checkpoint, RngState};
use super::layers::softmax_ce;
use super::network::Network;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// RNG stream used for the trainer's sample draws.
const TRAIN_STREAM: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total iterations; a resumed run continues up to this count.
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
    /// Seeds both weight initialization and the sample stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

/// Supplies training pairs. `index` is the global sample position
/// (`iteration * batch_size + slot`); `rng` is the trainer's checkpointed
/// stream.
pub trait SampleSource {
    fn next_sample(&mut self, index: u64, rng: &mut ChaCha8Rng) -> Result<(GrayImage, BinaryMask), NnError>;
}

/// Draws a fresh seed per sample and generates it on the fly.
#[derive(Debug, Clone)]
pub struct GeneratedSource {
    pub generator: GeneratorConfig,
    pub noise: NoiseConfig,
}

impl SampleSource for GeneratedSource {
    fn next_sample(&mut self, _index: u64, rng: &mut ChaCha8Rng) -> Result<(GrayImage, BinaryMask), NnError> {
        let seed = rng.next_u64();
        let s = make_sample(&self.generator, &self.noise, seed).map_err(|e| NnError::Source(e.to_string()))?;
        Ok((s.image, s.label))
    }
}

/// Stacks equally sized images (and optional masks) into `N x 1 x H x W`
/// tensors.
pub fn batch_tensors<T: Scalar>(pairs: &[(GrayImage, BinaryMask)]) -> Result<(Tensor<T>, Tensor<T>), ShapeError> {
    let Some(((first, _), _)) = pairs.split_first() else {
        return Err(ShapeError::new("empty batch"));
    };
    let (w, h) = first.dims();
    let mut x = Vec::with_capacity(pairs.len() * w * h);
    let mut y = Vec::with_capacity(pairs.len() * w * h);
    for (img, lbl) in pairs {
        if img.dims() != (w, h) || lbl.dims() != (w, h) {
            return Err(ShapeError::new(format!(
                "batch mixes sizes: {w}x{h} vs image {:?} / label {:?}",
                img.dims(),
                lbl.dims()
            )));
        }
        x.extend(img.as_slice().iter().map(|&v| T::of(f64::from(v))));
        y.extend(lbl.as_slice().iter().map(|&v| if v != 0 { T::one() } else { T::zero() }));
    }
    let shape = [pairs.len(), 1, h, w];
    Ok((Tensor::from_vec(shape, x)?, Tensor::from_vec(shape, y)?))
}

#[derive(Debug)]
pub struct Trainer<T> {
    net: Network<T>,
    velocity: Vec<Vec<T>>,
    iteration: u64,
    rng: ChaCha8Rng,
    config: TrainConfig,
}

/// What a [`Trainer::run`] call produced.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// `(iteration, loss)` with 1-based iteration numbers.
    pub losses: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, config: TrainConfig) -> Self {
        let velocity = net.parameters().iter().map(|p| vec![T::zero(); p.len()]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Self {
            net,
            velocity,
            iteration: 0,
            rng,
            config,
        }
    }

    /// Continues from a checkpoint; the result is bit-identical to a run
    /// that was never interrupted, given the same sample source.
    pub fn resume(ckpt: Checkpoint<T>, config: TrainConfig) -> Self {
        let velocity = ckpt
            .velocity
            .unwrap_or_else(|| ckpt.network.parameters().iter().map(|p| vec![T::zero(); p.len()]).collect());
        Self {
            net: ckpt.network,
            velocity,
            iteration: ckpt.iteration,
            rng: ckpt.rng.restore(),
            config,
        }
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            network: self.net.clone(),
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            velocity: Some(self.velocity.clone()),
        }
    }

    /// Loss of the current weights on one batch, in train mode, without
    /// updating anything.
    pub fn probe_loss(&self, batch: &[(GrayImage, BinaryMask)]) -> Result<f64, NnError> {
        let (x, y) = batch_tensors::<T>(batch)?;
        let mut scratch = self.net.clone();
        let pass = scratch.forward_train(&x)?;
        Ok(softmax_ce(pass.logits(), &y, true)?.0)
    }

    /// One optimizer step on an explicit batch; returns the batch loss
    /// before the update.
    pub fn step_on(&mut self, batch: &[(GrayImage, BinaryMask)]) -> Result<f64, NnError> {
        let (x, y) = batch_tensors::<T>(batch)?;
        let pass = self.net.forward_train(&x)?;
        let (loss, d_logits) = softmax_ce(pass.logits(), &y, true)?;
        if !loss.is_finite() {
            return Err(NnError::NonFinite {
                iteration: self.iteration,
                norms: pass.activation_norms(self.net.spec()),
            });
        }
        let grads = self.net.backward(&pass, &d_logits)?;
        let lr = T::of(self.config.learning_rate);
        let mu = T::of(self.config.momentum);
        for ((p, g), v) in self.net.parameters_mut().into_iter().zip(grads.flat()).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi - lr * gi;
                *pi += *vi;
            }
        }
        self.iteration += 1;
        Ok(loss)
    }

    /// Draws one batch from `source` and steps.
    pub fn step(&mut self, source: &mut dyn SampleSource) -> Result<f64, NnError> {
        let b = self.config.batch_size.max(1) as u64;
        let batch = (0..b)
            .map(|slot| source.next_sample(self.iteration * b + slot, &mut self.rng))
            .collect::<Result<Vec<_>, _>>()?;
        self.step_on(&batch)
    }

    /// Trains until `config.iterations`. With `out_dir`, appends to
    /// `loss.csv` (`iteration,loss`) and writes `checkpoint_XXXXXXX.ckpt`
    /// every `checkpoint_every` iterations plus `final.ckpt`.
    pub fn run(&mut self, source: &mut dyn SampleSource, out_dir: Option<&Path>) -> Result<TrainLog, NnError> {
        let mut log = TrainLog::default();
        let mut csv = match out_dir {
            Some(dir) => {
                let path = dir.join("loss.csv");
                let io = |source| NnError::Io {
                    path: path.clone(),
                    source,
                };
                let fresh = self.iteration == 0 || !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(io)?;
                if fresh {
                    writeln!(f, "iteration,loss").map_err(io)?;
                }
                Some((f, path))
            }
            None => None,
        };
        while self.iteration < self.config.iterations {
            let loss = self.step(source)?;
            log.losses.push((self.iteration, loss));
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{},{}", self.iteration, loss).map_err(|source| NnError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.iteration.is_multiple_of(every) {
                    let path = dir.join(format!("checkpoint_{:07}.ckpt", self.iteration));
                    self.checkpoint().save(&path)?;
                    log.checkpoints.push(path);
                }
            }
            if self.iteration.is_multiple_of(500) {
                log::info!("iteration {} loss {:.5}", self.iteration, loss);
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join("final.ckpt");
            self.checkpoint().save(&path)?;
            log.checkpoints.push(path);
        }
        Ok(log)
    }
}

/// Trains `net` from scratch and returns the final checkpoint.
pub fn train<T: Scalar>(
    net: Network<T>,
    source: &mut dyn SampleSource,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint<T>, TrainLog), NnError> {
    let mut trainer = Trainer::new(net, config.clone());
    let log = trainer.run(source, out_dir)?;
    Ok((trainer.checkpoint(), log))
}
