//! Optimizer, training loop and checkpoints.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! model.safetensors   parameters and running statistics
//! optim.safetensors   first and second moments
//! state.json          RunConfig, class names, epoch, step, shuffling RNG
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{token_pooling_weights, two_view_augment_with, AugmentedPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{
    gdc_loss, ipc_loss, mpb_loss, pso_loss, total_loss, FrozenFeatureExtractor, GdcView, LossComponents, LossTerms,
};
use crate::model::{background_fraction, Model, OptimConfig, RunConfig};
use crate::nn::ParamStore;
use crate::pki::cls_loss;
use crate::synthdata::{load_dataset, Dataset};

/// Background share of the part map above which a run is flagged.
pub const BACKGROUND_WARNING: f64 = 0.95;

pub const STEP_LOG_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.json";

/// `base * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with decoupled weight decay; decay skips vector-shaped parameters
/// (biases, norms, filter parameters, tokens).
pub struct AdamW {
    cfg: OptimConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    steps: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in store.params() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { cfg: cfg.clone(), m, v, steps: 0 })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m = ((&self.m[name] * b1)? + (g * (1.0 - b1))?)?;
            let v = ((&self.v[name] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.cfg.eps)?)?;
            let theta = var.as_tensor();
            let mut next = (theta - (update * lr)?)?;
            if theta.rank() > 1 && self.cfg.weight_decay > 0.0 {
                next = (next - (theta * (lr * self.cfg.weight_decay))?)?;
            }
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = std::collections::HashMap::new();
        for (k, t) in &self.m {
            all.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            all.insert(format!("v/{k}"), t.clone());
        }
        candle_core::safetensors::save(&all, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, steps: usize) -> Result<()> {
        let stored = candle_core::safetensors::load(path, &candle_core::Device::Cpu)?;
        for (prefix, map) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (k, t) in map.iter_mut() {
                let key = format!("{prefix}/{k}");
                let s =
                    stored.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
                if s.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("optimizer tensor `{key}` has the wrong shape")));
                }
                *t = s.clone();
            }
        }
        self.steps = steps;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointState {
    pub format: u32,
    pub config: RunConfig,
    pub classes: Vec<String>,
    pub epoch: usize,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Component means over the epoch's steps.
    pub losses: LossComponents,
    pub train_accuracy: f64,
    #[serde(default)]
    pub eval: Option<EvalReport>,
    /// Mean background share of the view-1 part maps.
    #[serde(default)]
    pub background_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<LossComponents>,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn final_total(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.losses.total)
    }

    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref().map(|r| r.accuracy))
    }
}

pub struct Trainer {
    pub run: RunConfig,
    pub model: Model,
    pub classes: Vec<String>,
    optimizer: AdamW,
    phi: FrozenFeatureExtractor,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
}

/// Per-sample augmentation stream, independent of batch order.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

impl Trainer {
    pub fn new(run: &RunConfig, classes: Vec<String>) -> Result<Self> {
        let model = Model::new(run, classes.len())?;
        let optimizer = AdamW::new(&model.store, &run.optim)?;
        Ok(Self {
            run: run.clone(),
            model,
            classes,
            optimizer,
            phi: FrozenFeatureExtractor::new(run.feature_seed),
            rng: ChaCha8Rng::seed_from_u64(run.seed),
            epoch: 0,
            step: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn total_steps(&self, n: usize) -> usize {
        self.run.optim.epochs * n.div_ceil(self.run.optim.batch_size)
    }

    /// One optimization step on a batch of augmented pairs.
    fn train_step(
        &mut self,
        pairs: &[AugmentedPair],
        total_steps: usize,
    ) -> Result<(LossComponents, usize, Option<f64>)> {
        let model = &self.model;
        let cfg = model.config();
        let losses = self.run.active_losses();
        let w = &self.run.loss;
        let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
        let x1 = model.batch_tensor(&pairs.iter().map(|p| &p.view1).collect::<Vec<_>>())?;
        let out1 = model.forward(&x1, true)?;
        let cls = cls_loss(&out1.logits, &labels)?;
        let predicted = out1.logits.argmax(1)?.to_vec1::<u32>()?;
        let correct = predicted.iter().zip(&labels).filter(|(p, l)| **p as usize == **l).count();
        let bg = out1.part_map.as_ref().map(background_fraction).transpose()?;

        let mut terms = LossTerms { cls, ipc: None, mpb: None, gdc: None, pso: None };
        if losses.any() {
            let x2 = model.batch_tensor(&pairs.iter().map(|p| &p.view2).collect::<Vec<_>>())?;
            let out2 = model.forward(&x2, true)?;
            let (Some(v1), Some(v2), Some(p1), Some(p2)) =
                (&out1.part_map, &out2.part_map, &out1.part_tokens, &out2.part_tokens)
            else {
                return Err(Error::Config("part losses need the part transformer".into()));
            };
            let (b, g, k1) = (pairs.len(), cfg.grid(), cfg.parts + 1);
            let grid = |v: &Tensor| v.reshape((b, g, g, k1));
            let both = |a: Tensor, c: Tensor| -> Result<Tensor> { Ok(((a + c)? * 0.5)?) };
            if losses.ipc {
                terms.ipc = Some(both(ipc_loss(&grid(v1)?, w.epsilon)?, ipc_loss(&grid(v2)?, w.epsilon)?)?);
            }
            if losses.mpb {
                let alpha = w.alpha_for(cfg.tokens());
                terms.mpb = Some(both(mpb_loss(v1, alpha, w.epsilon)?, mpb_loss(v2, alpha, w.epsilon)?)?);
            }
            if losses.pso {
                let anchors = model.anchors().expect("anchors exist when the orthogonality loss is on");
                let fg = |p: &Tensor| p.narrow(1, 1, cfg.parts);
                terms.pso = Some(both(
                    pso_loss(&fg(p1)?, anchors, w.margin, w.scale)?,
                    pso_loss(&fg(p2)?, anchors, w.margin, w.scale)?,
                )?);
            }
            if losses.gdc {
                let decoder = model.decoder().expect("decoder exists when the reconstruction loss is on");
                let dev = model.store.device();
                let fdim = self.phi.feature_dim();
                let feats = |views: Vec<&crate::conv::Plane>| -> Result<Tensor> {
                    let data: Vec<f64> = views.iter().flat_map(|v| self.phi.pooled(v)).collect();
                    Ok(Tensor::from_vec(data, (b, fdim), dev)?)
                };
                let f1 = feats(pairs.iter().map(|p| &p.view1).collect())?;
                let f2 = feats(pairs.iter().map(|p| &p.view2).collect())?;
                let pool = |src_first: bool| -> Result<Tensor> {
                    let mut data = Vec::with_capacity(b * g * g);
                    for p in pairs {
                        let (src, tgt) = if src_first { (&p.a1, &p.a2) } else { (&p.a2, &p.a1) };
                        data.extend(token_pooling_weights(src, tgt, g, g, cfg.patch)?);
                    }
                    Ok(Tensor::from_vec(data, (b, 1, g * g), dev)?)
                };
                let (pool21, pool12) = (pool(false)?, pool(true)?);
                let to1 = GdcView { target_features: &f1, source_map: v2, source_parts: p2, pooling: &pool21 };
                let to2 = GdcView { target_features: &f2, source_map: v1, source_parts: p1, pooling: &pool12 };
                terms.gdc = Some(gdc_loss(&to1, &to2, decoder, w.epsilon)?);
            }
        }
        let (total, comps) = total_loss(&terms, w, self.step)?;
        let grads = total.backward()?;
        let lr = cosine_lr(self.run.optim.lr, self.step, total_steps);
        self.optimizer.step(&self.model.store, &grads, lr)?;
        self.step += 1;
        Ok((comps, correct, bg))
    }

    /// Runs one epoch; `log` receives one CSV row per step.
    pub fn train_epoch(
        &mut self,
        data: &Dataset,
        log: &mut dyn FnMut(usize, &LossComponents) -> Result<()>,
    ) -> Result<EpochMetrics> {
        let n = data.len();
        let total_steps = self.total_steps(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let (mut sum, mut steps, mut correct) = (LossComponents::default(), 0usize, 0usize);
        let (mut bg_sum, mut bg_steps) = (0.0, 0usize);
        for chunk in order.chunks(self.run.optim.batch_size) {
            let pairs = chunk
                .iter()
                .map(|&i| {
                    let mut rng = sample_rng(self.run.seed, self.epoch, i);
                    two_view_augment_with(&data.images[i], data.labels[i], &mut rng, &self.run.augment)
                })
                .collect::<Result<Vec<_>>>()?;
            let step = self.step;
            let (comps, ok, bg) = self.train_step(&pairs, total_steps)?;
            log(step, &comps)?;
            correct += ok;
            if let Some(f) = bg {
                bg_sum += f;
                bg_steps += 1;
            }
            for (acc, v) in [
                (&mut sum.cls, comps.cls),
                (&mut sum.ipc, comps.ipc),
                (&mut sum.mpb, comps.mpb),
                (&mut sum.gdc, comps.gdc),
                (&mut sum.pso, comps.pso),
                (&mut sum.total, comps.total),
            ] {
                *acc += v;
            }
            steps += 1;
        }
        let s = steps.max(1) as f64;
        let losses = LossComponents {
            cls: sum.cls / s,
            ipc: sum.ipc / s,
            mpb: sum.mpb / s,
            gdc: sum.gdc / s,
            pso: sum.pso / s,
            total: sum.total / s,
        };
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            losses,
            train_accuracy: correct as f64 / n.max(1) as f64,
            eval: None,
            background_fraction: (bg_steps > 0).then(|| bg_sum / bg_steps as f64),
        })
    }

    /// Trains until the configured epoch count, evaluating after each epoch
    /// when `eval` is given. `log` receives one CSV row per step.
    pub fn fit(
        &mut self,
        train: &Dataset,
        eval: Option<&Dataset>,
        log: &mut dyn FnMut(usize, &LossComponents) -> Result<()>,
    ) -> Result<TrainReport> {
        if train.classes != self.classes {
            return Err(Error::ClassMismatch(format!(
                "training data classes {:?} differ from model classes {:?}",
                train.classes, self.classes
            )));
        }
        let mut report = TrainReport::default();
        while self.epoch < self.run.optim.epochs {
            let mut steps = Vec::new();
            let mut metrics = self.train_epoch(train, &mut |step, c| {
                steps.push(*c);
                log(step, c)
            })?;
            report.steps.extend(steps);
            if let Some(e) = eval {
                metrics.eval = Some(evaluate(&self.model, &self.classes, e, self.run.optim.batch_size)?.0);
            }
            if let Some(f) = metrics.background_fraction {
                if f > BACKGROUND_WARNING {
                    let msg = format!(
                        "epoch {}: background-dominant part map ({:.1}% of mass on the background channel)",
                        metrics.epoch,
                        100.0 * f
                    );
                    log::warn!("{msg}");
                    report.warnings.push(msg);
                }
            }
            log::info!(
                "epoch {} total {:.5} cls {:.5} train acc {:.3}{}",
                metrics.epoch,
                metrics.losses.total,
                metrics.losses.cls,
                metrics.train_accuracy,
                metrics.eval.as_ref().map(|r| format!(" eval acc {:.3}", r.accuracy)).unwrap_or_default()
            );
            report.epochs.push(metrics);
        }
        Ok(report)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.store.save(&dir.join("model.safetensors"))?;
        self.optimizer.save(&dir.join("optim.safetensors"))?;
        let state = CheckpointState {
            format: 1,
            config: self.run.clone(),
            classes: self.classes.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }

    /// Restores a trainer exactly as saved, ready to continue.
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let state = read_state(dir)?;
        let mut trainer = Trainer::new(&state.config, state.classes.clone())?;
        trainer.model.store.load(&dir.join("model.safetensors"))?;
        trainer.optimizer.load(&dir.join("optim.safetensors"), state.step)?;
        trainer.epoch = state.epoch;
        trainer.step = state.step;
        trainer.rng = state.rng;
        Ok(trainer)
    }
}

fn read_state(dir: &Path) -> Result<CheckpointState> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let state: CheckpointState = serde_json::from_str(&text)?;
    if state.format != 1 {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", state.format)));
    }
    Ok(state)
}

/// Model and metadata for inference.
pub fn load_model(dir: &Path) -> Result<(Model, CheckpointState)> {
    let state = read_state(dir)?;
    let model = Model::new(&state.config, state.classes.len())?;
    model.store.load(&dir.join("model.safetensors"))?;
    Ok((model, state))
}

/// Loads the configured data, trains, and writes the checkpoint, the per-step
/// loss CSV and the epoch metrics JSON into `run.output`.
pub fn train(run: &RunConfig) -> Result<TrainReport> {
    run.validate()?;
    let size = Some(run.model.image_size);
    let train_data = load_dataset(&run.data.root, run.data.train_split.as_deref(), size)?;
    let eval_data = run.data.eval_split.as_deref().map(|s| load_dataset(&run.data.root, Some(s), size)).transpose()?;
    fs::create_dir_all(&run.output)?;
    let mut csv = std::io::BufWriter::new(fs::File::create(run.output.join(STEP_LOG_FILE))?);
    writeln!(csv, "step,cls,ipc,mpb,gdc,pso,total")?;
    let mut trainer = Trainer::new(run, train_data.classes.clone())?;
    let report = trainer.fit(&train_data, eval_data.as_ref(), &mut |step, c| {
        writeln!(csv, "{step},{},{},{},{},{},{}", c.cls, c.ipc, c.mpb, c.gdc, c.pso, c.total)?;
        Ok(())
    })?;
    csv.flush()?;
    trainer.save_checkpoint(&run.output)?;
    fs::write(run.output.join(METRICS_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
