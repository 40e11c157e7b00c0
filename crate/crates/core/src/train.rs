//! Single-threaded, seeded training loop with AdamW, JSONL logging,
//! checkpointing and a diagnostic dump on non-finite losses.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::save_checkpoint;
use crate::error::{param_err, Error, Result};
use crate::image::Image;
use crate::losses::{total_loss, LossWeights, PyramidGradientDistance};
use crate::model::{ModelConfig, TextSrModel};
use crate::params::ParamStore;
use crate::synth::{load_sample, Manifest, Split, StoredSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    /// Directory written by dataset generation.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Steps between checkpoint writes; the last step always writes one.
    pub checkpoint_interval: usize,
    pub model: ModelConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 1,
            max_steps: 2000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            checkpoint_interval: 500,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(param_err!("max_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(param_err!("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(param_err!("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return Err(param_err!("invalid optimizer hyperparameters"));
        }
        if self.checkpoint_interval == 0 {
            return Err(param_err!("checkpoint_interval must be at least 1"));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Loss weights after ablation switches.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss.clone();
        if !self.model.ablation.use_mf_loss {
            w.lambda_mf = 0.0;
        }
        w
    }
}

/// AdamW with decoupled weight decay over the trainable parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// Applies one update; `grads[i]` belongs to parameter `i`.
    pub fn update(&mut self, store: &mut ParamStore, grads: Vec<Option<Tensor>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
        for ((id, trainable), grad) in ids.into_iter().zip(grads) {
            let (true, Some(grad)) = (trainable, grad) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let p = store.value_mut(id);
            for (((w, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_img: f64,
    pub loss_seg: f64,
    /// Weighted contribution of the mask-focused term.
    pub loss_mf: f64,
}

/// Loss values of one evaluated sample, with parameter gradients.
pub struct StepResult {
    pub record: LogRecord,
    pub grads: Vec<Option<Tensor>>,
}

/// Forward and backward on one sample.
pub fn compute_step(
    model: &TextSrModel,
    loss: &LossWeights,
    x_l: &Image,
    x_h: &Image,
    mask: &Image,
    step: usize,
) -> Result<StepResult> {
    let mut g = Graph::new();
    g.bind(&model.store);
    let f = model.forward(&mut g, x_l)?;
    let target = g.constant(x_h.to_tensor());
    let s = g.constant(mask.to_tensor());
    let detach = !model.config().ablation.use_jsd;
    let terms = total_loss(&mut g, f.image, target, f.mask, s, loss, &PyramidGradientDistance::default(), detach)?;
    let record = LogRecord {
        step,
        loss_total: g.scalar(terms.total),
        loss_img: g.scalar(terms.img),
        loss_seg: g.scalar(terms.seg),
        loss_mf: g.scalar(terms.mf_weighted),
    };
    if !record.loss_total.is_finite() {
        return Ok(StepResult { record, grads: Vec::new() });
    }
    let mut grads = g.backward(terms.total);
    let grads = model
        .store
        .iter()
        .map(|(id, _)| grads.take(g.param(id)))
        .collect();
    Ok(StepResult { record, grads })
}

fn add_grads(acc: &mut [Option<Tensor>], more: Vec<Option<Tensor>>, weight: f64) {
    for (a, m) in acc.iter_mut().zip(more) {
        let Some(m) = m else { continue };
        match a {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(m.data()) {
                    *x += weight * y;
                }
            }
            None => *a = Some(m.map(|v| v * weight)),
        }
    }
}

fn dump_batch(dir: &Path, samples: &[&StoredSample], record: &LogRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let i = s.entry.index;
        s.x_l.save_png(&dir.join(format!("{i:06}_lr.png")))?;
        s.x_h.save_png(&dir.join(format!("{i:06}_hr.png")))?;
        s.mask.save_png(&dir.join(format!("{i:06}_mask.png")))?;
    }
    let info = serde_json::json!({
        "losses": record,
        "samples": samples.iter().map(|s| &s.entry).collect::<Vec<_>>(),
    });
    let p = dir.join("diagnostic.json");
    std::fs::write(&p, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&p, e))
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TextSrModel,
    pub log: Vec<LogRecord>,
    pub checkpoint: PathBuf,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Loads the training split of a generated dataset.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<StoredSample>> {
    let manifest = Manifest::load(root)?;
    manifest.split(split).map(|e| load_sample(root, e)).collect()
}

/// Trains from scratch on the dataset's training split.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_split(&cfg.data_dir, Split::Train)?;
    if data.is_empty() {
        return Err(param_err!("dataset at {} has no training samples", cfg.data_dir.display()));
    }
    train_on(cfg, &data)
}

/// Trains on in-memory samples. Sample order is a seeded shuffle per epoch.
pub fn train_on(cfg: &TrainConfig, data: &[StoredSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(param_err!("no training samples"));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut model = TextSrModel::new(&cfg.model, cfg.seed)?;
    let loss = cfg.effective_loss();
    let mut opt = AdamW::new(cfg, &model.store);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let log_path = cfg.out_dir.join(LOG_FILE);
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    let mut log = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            batch.push(&data[order.pop().unwrap()]);
        }
        let weight = 1.0 / batch.len() as f64;
        let mut grads = vec![None; model.store.len()];
        let mut rec = LogRecord {
            step,
            loss_total: 0.0,
            loss_img: 0.0,
            loss_seg: 0.0,
            loss_mf: 0.0,
        };
        for s in &batch {
            let r = compute_step(&model, &loss, &s.x_l, &s.x_h, &s.mask, step)?;
            rec.loss_total += weight * r.record.loss_total;
            rec.loss_img += weight * r.record.loss_img;
            rec.loss_seg += weight * r.record.loss_seg;
            rec.loss_mf += weight * r.record.loss_mf;
            if !r.record.loss_total.is_finite() {
                let dir = cfg.out_dir.join("nonfinite_dump");
                dump_batch(&dir, &batch, &rec)?;
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("sample {} (batch dumped to {})", s.entry.index, dir.display()),
                });
            }
            add_grads(&mut grads, r.grads, weight);
        }
        writeln!(log_file, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        log.push(rec);
        opt.update(&mut model.store, grads);
        let done = step + 1;
        if done % cfg.checkpoint_interval == 0 || done == cfg.max_steps {
            save_checkpoint(&ckpt, &model, done)?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        checkpoint: ckpt,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, BackgroundSource, SynthConfig};

    fn dataset(dir: &Path, n: usize) {
        generate_dataset(dir, n, &SynthConfig::default(), 5, &BackgroundSource::Procedural).unwrap();
    }

    fn cfg(data: &Path, out: &Path) -> TrainConfig {
        TrainConfig {
            max_steps: 2,
            data_dir: data.to_path_buf(),
            out_dir: out.to_path_buf(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_run_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        dataset(&data, 4);
        let out = train(&cfg(&data, &dir.path().join("a"))).unwrap();
        let log = read_log(&dir.path().join("a").join(LOG_FILE)).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log, out.log);
        assert!(log.iter().all(|r| r.loss_total.is_finite()));
        let files: Vec<_> = std::fs::read_dir(dir.path().join("a"))
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
            .collect();
        assert_eq!(files.len(), 1);

        let again = train(&cfg(&data, &dir.path().join("b"))).unwrap();
        assert_eq!(again.log, out.log);
        assert_eq!(again.model.store, out.model.store);
    }

    #[test]
    fn disabled_mf_loss_logs_exact_zero() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        dataset(&data, 2);
        let mut c = cfg(&data, &dir.path().join("run"));
        c.model.ablation.use_mf_loss = false;
        let out = train(&c).unwrap();
        assert!(out.log.iter().all(|r| r.loss_mf == 0.0));
    }

    #[test]
    fn missing_dataset_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(&dir.path().join("nope"), &dir.path().join("run"));
        assert!(train(&c).unwrap_err().is_io());
        let bad = TrainConfig {
            max_steps: 0,
            ..c
        };
        assert!(matches!(train(&bad), Err(Error::Parameter(_))));
    }
}
