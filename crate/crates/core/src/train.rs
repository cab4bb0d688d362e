//! Training loop, inference, evaluation and attention export.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Role, StoredTensor};
use crate::config::RunConfig;
use crate::data::{augment, load_image, write_pgm, AugmentDraw, DatasetManifest};
use crate::error::{Error, Result};
use crate::head::{class_weights, evaluate_metrics, AuWeights, MetricsReport, PredictionRecord};
use crate::model::{ForwardPass, Model, ModelSpec};
use crate::optim::{Sgd, StepSchedule};
use crate::tensor::{NormMode, Tensor, Var};

/// Images (`[H, W, 3]`, `H, W >= l`) with their AU labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledImages {
    pub images: Vec<Tensor<f64>>,
    pub labels: Vec<Vec<bool>>,
}

impl LabelledImages {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let images = manifest
            .entries
            .iter()
            .map(|e| load_image(&e.image))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelledImages {
            images,
            labels: manifest.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_aus(&self) -> Option<usize> {
        self.labels.first().map(Vec::len)
    }
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over batches.
    pub loss: f64,
    pub detection_loss: f64,
}

/// Batch-norm layers of the backbone, which come first in the model's norm order.
const BACKBONE_NORM_LAYERS: usize = 4;

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f64>,
    pub optimizer: Sgd<f64>,
    /// Epochs completed.
    pub epoch: usize,
    pub weights: AuWeights,
}

fn eval_view(image: &Tensor<f64>, l: usize) -> Result<Tensor<f64>> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    augment(image, l, AugmentDraw::centered(h, w, l))
}

fn batch_tensor(items: Vec<Tensor<f64>>) -> Result<Tensor<f64>> {
    let items = items
        .into_iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

impl Trainer {
    /// Fresh model; loss weights come from the training labels.
    pub fn new(config: RunConfig, train: &LabelledImages) -> Result<Self> {
        config.validate()?;
        if train.n_aus() != Some(config.n) {
            return Err(Error::structure(format!(
                "config has {} AUs but the data has {:?}",
                config.n,
                train.n_aus()
            )));
        }
        let model = Model::new(ModelSpec::from_config(&config), config.seed)?;
        let optimizer = Sgd::new(&model.params, config.momentum, config.weight_decay);
        Ok(Trainer {
            weights: class_weights(&train.labels)?,
            config,
            model,
            optimizer,
            epoch: 0,
        })
    }

    /// Resumes from a checkpoint; the run config is the stored one.
    pub fn from_checkpoint(ckpt: &Checkpoint, train: &LabelledImages) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config.clone(), train)?;
        ckpt.restore(&mut t.model, &mut t.optimizer)?;
        t.epoch = ckpt.epoch as usize;
        Ok(t)
    }

    /// Model only, for inference from a checkpoint.
    pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model<f64>> {
        let mut model = Model::new(ModelSpec::from_config(&ckpt.config), ckpt.config.seed)?;
        let mut opt = Sgd::new(&model.params, 0.0, 0.0);
        ckpt.restore(&mut model, &mut opt)?;
        Ok(model)
    }

    /// Initialises parameters and batch-norm statistics from another run
    /// before training starts. The backbone must match; branch heads are
    /// copied only when the AU count matches and keep their fresh
    /// initialisation otherwise. Momentum and the epoch counter start over.
    pub fn warm_start(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let same_aus = ckpt.config.n == self.config.n;
        let stored: Vec<&StoredTensor> = ckpt.tensors.iter().filter(|t| t.role == Role::Parameter).collect();
        let mut copied = 0;
        for p in self.model.params.iter_mut() {
            let backbone = p.name.starts_with("backbone.");
            if !backbone && !same_aus {
                continue;
            }
            match stored.iter().find(|t| t.name == p.name) {
                Some(t) if t.shape == p.tensor.shape() => {
                    p.tensor.data_mut().copy_from_slice(&t.data);
                    copied += 1;
                }
                _ if backbone => {
                    return Err(Error::Checkpoint(format!(
                        "warm start: backbone parameter {} missing or of a different shape",
                        p.name
                    )))
                }
                _ => {}
            }
        }
        let means: Vec<&StoredTensor> = ckpt.tensors.iter().filter(|t| t.role == Role::RunningMean).collect();
        let vars: Vec<&StoredTensor> = ckpt.tensors.iter().filter(|t| t.role == Role::RunningVar).collect();
        let keep = if same_aus { usize::MAX } else { BACKBONE_NORM_LAYERS };
        for ((st, m), v) in self
            .model
            .norm_states_mut()
            .into_iter()
            .zip(&means)
            .zip(&vars)
            .take(keep)
        {
            if m.data.len() == st.channels() && v.data.len() == st.channels() {
                st.running_mean.copy_from_slice(&m.data);
                st.running_var.copy_from_slice(&v.data);
            }
        }
        log::info!(
            "warm start copied {copied} of {} parameter tensors{}",
            self.model.params.len(),
            if same_aus {
                ""
            } else {
                "; branch heads reinitialised for the new AU count"
            }
        );
        Ok(())
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base: self.config.base_lr,
            decay: self.config.lr_decay,
            every: self.config.lr_decay_every,
        }
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.epoch as u64, &mut self.model, &self.optimizer)
    }

    /// Random stream for `epoch`, independent of how many epochs ran before.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// One pass over `data` in a seeded random order.
    pub fn train_epoch(&mut self, data: &LabelledImages) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::structure("cannot train on an empty dataset"));
        }
        let epoch = self.epoch;
        let lr = self.schedule().rate(epoch);
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let l = self.config.l;
        let aug = self.config.augmentation;
        let (mut loss_sum, mut det_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut items = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len() * self.config.n);
            for &i in chunk {
                let img = &data.images[i];
                let (h, w) = (img.shape()[0], img.shape()[1]);
                let draw = if aug.is_active() {
                    AugmentDraw::sample(&mut rng, h, w, l, aug.random_crop_margin, aug.horizontal_flip)
                } else {
                    AugmentDraw::centered(h, w, l)
                };
                items.push(augment(img, l, draw)?);
                labels.extend_from_slice(&data.labels[i]);
            }
            let images = batch_tensor(items)?;
            let (mut pass, nodes) = self
                .model
                .forward_loss(&images, &labels, &self.weights, NormMode::Training)?;
            let total = pass.graph.value(nodes.total).data()[0];
            let det = pass.graph.value(nodes.detection).data()[0];
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("total {total}, detection {det}, samples {chunk:?}"),
                });
            }
            pass.graph.backward(nodes.total)?;
            self.model.params.collect_grads(&pass.graph, &pass.bind);
            self.optimizer.step(&mut self.model.params, lr)?;
            loss_sum += total;
            det_sum += det;
            batches += 1;
        }
        self.epoch += 1;
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            detection_loss: det_sum / batches as f64,
        };
        log::info!(
            "epoch {} lr {:.3e} loss {:.5} detection {:.5}",
            log.epoch,
            log.lr,
            log.loss,
            log.detection_loss
        );
        Ok(log)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit(
        &mut self,
        data: &LabelledImages,
        mut on_epoch: impl FnMut(&mut Self, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.train_epoch(data)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Runs `model` in inference mode over centred `l x l` views, `batch` at a time.
pub fn predict(model: &mut Model<f64>, images: &[Tensor<f64>], batch: usize) -> Result<Vec<Vec<f64>>> {
    let l = model.spec.l;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let views = chunk.iter().map(|img| eval_view(img, l)).collect::<Result<Vec<_>>>()?;
        let pass = model.forward(&batch_tensor(views)?, NormMode::Inference)?;
        out.extend(pass.probabilities());
    }
    Ok(out)
}

/// Inference-mode metrics of `model` on `data`.
pub fn evaluate(model: &mut Model<f64>, data: &LabelledImages, batch: usize, threshold: f64) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::structure("cannot evaluate an empty dataset"));
    }
    if data.n_aus() != Some(model.spec.n) {
        return Err(Error::structure(format!(
            "model predicts {} AUs but the data has {:?}",
            model.spec.n,
            data.n_aus()
        )));
    }
    let probs = predict(model, &data.images, batch)?;
    let records: Vec<PredictionRecord> = probs
        .into_iter()
        .zip(&data.labels)
        .map(|(p, y)| PredictionRecord {
            probabilities: p,
            labels: y.clone(),
        })
        .collect();
    evaluate_metrics(&records, threshold)
}

/// Attention maps of every AU for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    /// Side of the spatial maps `v0us` and `v_us`.
    pub side: usize,
    /// Side of `v_s`.
    pub feature_side: usize,
    pub per_au: Vec<AuAttention>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuAttention {
    pub v_c: Option<Vec<f64>>,
    pub v0us: Option<Vec<f64>>,
    pub v_us: Option<Vec<f64>>,
    pub v_s: Option<Vec<f64>>,
    pub probability: f64,
}

fn values(pass: &ForwardPass<f64>, v: Option<Var>) -> Option<Vec<f64>> {
    v.map(|v| pass.graph.value(v).data().to_vec())
}

/// Inference-mode attention for a single source image.
pub fn attention_maps(model: &mut Model<f64>, image: &Tensor<f64>) -> Result<AttentionMaps> {
    let l = model.spec.l;
    let view = eval_view(image, l)?;
    let pass = model.forward(&batch_tensor(vec![view])?, NormMode::Inference)?;
    let probs = pass.probabilities();
    let per_au = pass
        .branches
        .iter()
        .enumerate()
        .map(|(i, b)| AuAttention {
            v_c: values(&pass, b.v_c),
            v0us: values(&pass, b.v0us),
            v_us: values(&pass, b.v_us),
            v_s: values(&pass, b.v_s),
            probability: probs[0][i],
        })
        .collect();
    Ok(AttentionMaps {
        side: l,
        feature_side: l / 4,
        per_au,
    })
}

/// Writes `au{i}_v0us.pgm`, `au{i}_vus.pgm`, `au{i}_vs.pgm` and `au{i}_vc.txt`
/// for every AU whose maps exist under the model's ablation settings.
pub fn export_attention(maps: &AttentionMaps, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (i, au) in maps.per_au.iter().enumerate() {
        let k = i + 1;
        let mut put = |name: String, side: usize, v: &Option<Vec<f64>>| -> Result<()> {
            if let Some(v) = v {
                let path = out_dir.join(name);
                write_pgm(&path, side, side, v)?;
                written.push(path);
            }
            Ok(())
        };
        put(format!("au{k}_v0us.pgm"), maps.side, &au.v0us)?;
        put(format!("au{k}_vus.pgm"), maps.side, &au.v_us)?;
        put(format!("au{k}_vs.pgm"), maps.feature_side, &au.v_s)?;
        if let Some(vc) = &au.v_c {
            let path = out_dir.join(format!("au{k}_vc.txt"));
            let line: Vec<String> = vc.iter().map(|v| format!("{v}")).collect();
            fs::write(&path, line.join(" ") + "\n").map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
