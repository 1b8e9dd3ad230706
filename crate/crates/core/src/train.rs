//! Stage-1 data-driven training: reconstruction loss, AdamW, and a
//! deterministic single-threaded training loop.

use crate::dataio::FieldPack;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of query points used in the loss; the selected subset is
    /// fixed per sample for the whole run.
    pub sampling_rate: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 1,
            seed: 0,
            sampling_rate: 1.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::Config("sampling_rate must be in (0, 1]".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.model.validate()
    }
}

/// Fixed query subset for one sample, derived statelessly from the run seed.
pub fn sample_mask(seed: u64, sample_index: usize, n_q: usize, rate: f64) -> Option<Vec<usize>> {
    if rate >= 1.0 {
        return None;
    }
    let m = ((rate * n_q as f64).ceil() as usize).clamp(1, n_q);
    let mut rng = Rng::new(seed ^ 0x6d61736b).derive(sample_index as u64);
    Some(rng.sample_indices(n_q, m))
}

/// Sum over channels of the mean squared error over (steps, query points),
/// restricted to `mask` when given. The mean is taken over the points that
/// participate.
pub fn loss_l1(
    tape: &mut Tape,
    fields: &[NodeId],
    gt: &[f64],
    n_q: usize,
    n_phi: usize,
    mask: Option<&[usize]>,
) -> Result<NodeId> {
    let t = fields.len();
    if gt.len() != t * n_q * n_phi {
        return Err(Error::Validation(format!(
            "ground truth has {} values, expected {}",
            gt.len(),
            t * n_q * n_phi
        )));
    }
    let rows = mask.map(|m| m.len()).unwrap_or(n_q);
    let mut total: Option<NodeId> = None;
    for (s, &f) in fields.iter().enumerate() {
        let gt_step = &gt[s * n_q * n_phi..(s + 1) * n_q * n_phi];
        let (pred, target) = match mask {
            Some(idx) => {
                let pred = tape.gather_rows(f, idx)?;
                let mut sel = Vec::with_capacity(idx.len() * n_phi);
                for &q in idx {
                    sel.extend_from_slice(&gt_step[q * n_phi..(q + 1) * n_phi]);
                }
                let tgt = tape.constant(vec![idx.len(), n_phi], sel)?;
                (pred, tgt)
            }
            None => {
                let tgt = tape.constant(vec![n_q, n_phi], gt_step.to_vec())?;
                (f, tgt)
            }
        };
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let s_sum = tape.sum_all(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, s_sum)?,
            None => s_sum,
        });
    }
    let total = total.ok_or_else(|| Error::Validation("loss needs at least one step".into()))?;
    Ok(tape.scale(total, 1.0 / (rows * t) as f64))
}

// -- AdamW ---------------------------------------------------------------------

/// Decoupled-weight-decay Adam with bias-corrected moments. Moment buffers
/// align with the caller's tensor traversal order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// One update over an ordered parameter list. Missing gradients count
    /// as zero (decay still applies).
    pub fn step(&mut self, tensors: &mut [&mut Tensor]) {
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.v = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        }
        assert_eq!(self.m.len(), tensors.len(), "optimizer state misaligned");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, tensor) in tensors.iter_mut().enumerate() {
            let grad_owned: Vec<f64> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.numel()],
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad_owned[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[j]);
            }
        }
    }
}

// -- trainer ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

pub fn render_log(log: &[LogEntry]) -> String {
    let mut out = String::from("step,epoch,loss\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.step, e.epoch, e.loss));
    }
    out
}

/// Stage-1 training state. Stepping is deterministic given the seed; the
/// sample schedule is round-robin and derived from the step counter alone,
/// so a restored checkpoint continues bit-for-bit.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams<Tensor>,
    pub opt: AdamW,
    pub step: u64,
    pub rng: Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let params = ModelParams::init(&mut rng, &cfg.model);
        let opt = AdamW::from_config(&cfg);
        Ok(Trainer {
            cfg,
            params,
            opt,
            step: 0,
            rng,
        })
    }

    /// One optimizer step on one sample. Returns the loss before the update.
    pub fn train_step(&mut self, pack: &FieldPack, sample_index: usize) -> Result<f64> {
        let mask = sample_mask(
            self.cfg.seed,
            sample_index,
            pack.n_q,
            self.cfg.sampling_rate,
        );
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fwd = model::forward_pack(&mut tape, &bound, &self.cfg.model, pack, None, pack.t)?;
        let loss = loss_l1(
            &mut tape,
            &fwd.fields,
            &pack.phi,
            pack.n_q,
            pack.n_phi,
            mask.as_deref(),
        )?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at step {}", self.step),
            });
        }
        tape.backward(loss)?;
        self.params.collect_grads(&tape, &bound);
        let mut tensors: Vec<&mut Tensor> = Vec::new();
        self.params.visit_mut(&mut |_, t| tensors.push(t));
        self.opt.step(&mut tensors);
        self.params.zero_grads();
        self.step += 1;
        Ok(value)
    }

    /// Persist the full training state; resuming from the file continues
    /// bit-for-bit.
    pub fn save(&self, path: &std::path::Path, config_echo: &str) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let data = crate::checkpoint::CheckpointData {
            kind: crate::checkpoint::KIND_STAGE1,
            config_echo: config_echo.to_string(),
            model_cfg: self.cfg.model.clone(),
            rng_state: self.rng.state(),
            step: self.step,
            opt_t: self.opt.t,
            hyper_f: vec![
                self.cfg.lr,
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.eps,
                self.cfg.weight_decay,
                self.cfg.sampling_rate,
            ],
            hyper_u: vec![
                self.cfg.epochs as u64,
                self.cfg.batch_size as u64,
                self.cfg.seed,
            ],
            m: if self.opt.m.is_empty() {
                tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect()
            } else {
                self.opt.m.clone()
            },
            v: if self.opt.v.is_empty() {
                tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect()
            } else {
                self.opt.v.clone()
            },
            tensors,
        };
        crate::checkpoint::save_checkpoint(path, &data)
    }

    pub fn load(path: &std::path::Path) -> Result<(Trainer, String)> {
        let data = crate::checkpoint::load_checkpoint(path)?;
        if data.kind != crate::checkpoint::KIND_STAGE1 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: format!("checkpoint kind {} is not a stage-1 model", data.kind),
            });
        }
        if data.hyper_f.len() != 6 || data.hyper_u.len() != 3 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: "unexpected hyperparameter layout".into(),
            });
        }
        let cfg = TrainConfig {
            lr: data.hyper_f[0],
            beta1: data.hyper_f[1],
            beta2: data.hyper_f[2],
            eps: data.hyper_f[3],
            weight_decay: data.hyper_f[4],
            sampling_rate: data.hyper_f[5],
            epochs: data.hyper_u[0] as usize,
            batch_size: data.hyper_u[1] as usize,
            seed: data.hyper_u[2],
            model: data.model_cfg.clone(),
        };
        let mut trainer = Trainer::new(cfg)?;
        crate::checkpoint::restore_named(
            &data.tensors,
            |f| trainer.params.visit_mut(f),
            path,
        )?;
        if data.m.len() != data.tensors.len() || data.v.len() != data.tensors.len() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: "optimizer moment tables misaligned".into(),
            });
        }
        trainer.opt.m = data.m;
        trainer.opt.v = data.v;
        trainer.opt.t = data.opt_t;
        trainer.step = data.step;
        trainer.rng = Rng::restore(data.rng_state);
        Ok((trainer, data.config_echo))
    }

    /// Round-robin over the dataset for `steps` optimizer steps.
    pub fn run_steps(&mut self, dataset: &[FieldPack], steps: usize) -> Result<Vec<LogEntry>> {
        if dataset.is_empty() {
            return Err(Error::Validation("training needs at least one sample".into()));
        }
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let i = (self.step as usize) % dataset.len();
            let epoch = (self.step as usize) / dataset.len();
            let loss = self.train_step(&dataset[i], i)?;
            log.push(LogEntry {
                step: self.step,
                epoch,
                loss,
            });
        }
        Ok(log)
    }
}

/// Config-driven training over the whole dataset for `cfg.epochs` epochs.
pub fn train_loop(dataset: &[FieldPack], cfg: TrainConfig) -> Result<(Trainer, Vec<LogEntry>)> {
    let mut trainer = Trainer::new(cfg)?;
    let steps = dataset.len() * trainer.cfg.epochs;
    let log = trainer.run_steps(dataset, steps)?;
    Ok((trainer, log))
}
