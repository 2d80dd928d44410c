//! Alternating optimization of discriminator, generator and retrieval branch.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, MiningState, FORMAT_VERSION};
use crate::config::{MiningMode, TrainConfig, Variant};
use crate::data::{paired_flip, prepare_pair, ImagePair};
use crate::error::{Error, Result};
use crate::losses::{cgan_loss_discriminator, cgan_loss_generator, l1_loss, retrieval_loss};
use crate::model::{Networks, STORE_NAMES};
use crate::nn::{Adam, Mode};
use crate::raster::RasterImage;

/// Salt separating the flip stream from the shuffle stream.
const FLIP_SALT: u64 = 0x5f1f_f11b;

/// One JSON-lines record. Terms that the variant does not train are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_d: Option<f64>,
    pub loss_g_adv: Option<f64>,
    pub loss_l1: Option<f64>,
    pub loss_ret: f64,
    pub triplets_kept: usize,
}

/// A prepared training pair in `[-1, 1]` before augmentation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub polar: RasterImage,
    pub street: RasterImage,
}

/// Polar-warps and normalizes every pair once, without augmentation.
pub fn prepare_all(cfg: &TrainConfig, pairs: &[ImagePair]) -> Result<Vec<Prepared>> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    pairs
        .iter()
        .map(|p| {
            let (polar, street) = prepare_pair(p, &cfg.geometry, cfg.data.out_of_bounds, false, &mut unused)?;
            Ok(Prepared {
                id: p.id.clone(),
                polar,
                street,
            })
        })
        .collect()
}

pub struct Batch {
    pub polar: Tensor,
    pub street: Tensor,
}

pub struct Trainer {
    cfg: TrainConfig,
    nets: Networks,
    opt_g: Adam,
    opt_d: Adam,
    opt_r: Adam,
    step: u64,
    mining: MiningState,
    data: Vec<Prepared>,
    /// Cached permutation for `(epoch, order)`.
    order: Option<(u64, Vec<usize>)>,
    out_dir: Option<PathBuf>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One optimizer per parameter store.
fn optimizers(cfg: &TrainConfig, nets: &Networks) -> Result<(Adam, Adam, Adam)> {
    let o = cfg.optimizer;
    Ok((
        Adam::new(nets.g_store.vars(), o)?,
        Adam::new(nets.d_store.vars(), o)?,
        Adam::new(nets.r_store.vars(), o)?,
    ))
}

impl Trainer {
    pub fn new(cfg: TrainConfig, pairs: &[ImagePair], device: &Device) -> Result<Self> {
        cfg.validate()?;
        let data = prepare_all(&cfg, pairs)?;
        Self::from_prepared(cfg, data, device)
    }

    pub fn from_prepared(cfg: TrainConfig, data: Vec<Prepared>, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if data.len() < cfg.batch_size {
            return Err(Error::Data(format!(
                "dataset has {} pairs, fewer than the batch size {}",
                data.len(),
                cfg.batch_size
            )));
        }
        let nets = Networks::new(&cfg, DType::F32, device)?;
        let (opt_g, opt_d, opt_r) = optimizers(&cfg, &nets)?;
        Ok(Self {
            cfg,
            nets,
            opt_g,
            opt_d,
            opt_r,
            step: 0,
            mining: MiningState::default(),
            data,
            order: None,
            out_dir: None,
        })
    }

    /// Rebuilds the training state stored in `ck`. `total_steps` may differ
    /// from the stored config; every other field is taken from the checkpoint.
    pub fn resume(ck: &Checkpoint, total_steps: Option<u64>, data: Vec<Prepared>, device: &Device) -> Result<Self> {
        let mut cfg = ck.meta.config.clone();
        if let Some(t) = total_steps {
            cfg.total_steps = t;
        }
        let mut t = Self::from_prepared(cfg, data, device)?;
        for (name, store) in t.nets.stores() {
            ck.restore_store(name, store)?;
        }
        let [sg, sd, sr] = ck.meta.optimizer_steps;
        let lookup = |prefix: &'static str| {
            move |name: &str| {
                let m = ck.get(&format!("{prefix}.m/{name}"))?.clone();
                let v = ck.get(&format!("{prefix}.v/{name}"))?.clone();
                Some((m, v))
            }
        };
        t.opt_g.restore(sg, lookup("opt_generator"))?;
        t.opt_d.restore(sd, lookup("opt_discriminator"))?;
        t.opt_r.restore(sr, lookup("opt_retrieval"))?;
        t.step = ck.meta.step;
        t.mining = ck.meta.mining.clone();
        Ok(t)
    }

    /// Directory receiving `metrics.jsonl`, checkpoints and failure dumps.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn mining(&self) -> &MiningState {
        &self.mining
    }

    pub fn data(&self) -> &[Prepared] {
        &self.data
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len() / self.cfg.batch_size
    }

    /// Pair indices making up batch number `step` (1-based). Each epoch is a
    /// fresh seeded permutation; the trailing partial batch is dropped.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch() as u64;
        let (epoch, pos) = ((step - 1) / spe, ((step - 1) % spe) as usize);
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(epoch);
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            order.shuffle(&mut rng);
            self.order = Some((epoch, order));
        }
        let b = self.cfg.batch_size;
        self.order.as_ref().unwrap().1[pos * b..(pos + 1) * b].to_vec()
    }

    /// Assembles batch number `step`, applying the step's flips and shifts.
    pub fn batch(&mut self, step: u64) -> Result<Batch> {
        let idx = self.batch_indices(step);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ FLIP_SALT);
        rng.set_stream(step);
        let mut polar = Vec::with_capacity(idx.len());
        let mut street = Vec::with_capacity(idx.len());
        for i in idx {
            let (mut p, mut s) = (self.data[i].polar.clone(), self.data[i].street.clone());
            if self.cfg.data.flip {
                paired_flip(&mut p, &mut s, &mut rng);
            }
            if self.cfg.data.shift {
                let m = rng.random_range(0..p.width());
                (p, s) = (p.roll_horizontal(m), s.roll_horizontal(m));
            }
            polar.push(p);
            street.push(s);
        }
        let dev = self.nets.device().clone();
        let stack = |v: &[RasterImage]| RasterImage::stack(&v.iter().collect::<Vec<_>>(), DType::F32, &dev);
        Ok(Batch {
            polar: stack(&polar)?,
            street: stack(&street)?,
        })
    }

    fn keep_fraction(&self) -> Option<f64> {
        self.mining.active.then_some(self.cfg.mining.keep_fraction)
    }

    fn check_finite(&self, stage: &str, values: &[(&str, f64)]) -> Result<()> {
        if values.iter().all(|(_, v)| v.is_finite()) {
            return Ok(());
        }
        let detail = values.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ");
        Err(self.abort(stage, detail)?)
    }

    /// Passes `r` through, turning a non-finite failure inside a loss into an
    /// aborted step with a state dump.
    fn guard<T>(&self, stage: &str, r: Result<T>) -> Result<T> {
        match r {
            Err(Error::NonFinite(detail)) => Err(self.abort(stage, detail)?),
            other => other,
        }
    }

    /// Writes the diagnostic dump, when there is an output directory, and
    /// returns the error describing the aborted step.
    fn abort(&self, stage: &str, detail: String) -> Result<Error> {
        let msg = format!("step {} {stage}: {detail}", self.step + 1);
        if let Some(dir) = &self.out_dir {
            let digests: Vec<(String, String)> = self
                .nets
                .stores()
                .iter()
                .map(|(n, s)| Ok((n.to_string(), s.digest()?)))
                .collect::<Result<_>>()?;
            let dump = serde_json::json!({
                "step": self.step + 1,
                "stage": stage,
                "detail": detail,
                "parameter_digests": digests,
                "mining": self.mining,
            });
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("nonfinite-step{}.json", self.step + 1));
            std::fs::write(&path, serde_json::to_vec_pretty(&dump)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Error::NonFinite(msg))
    }

    /// Sub-step 1: the discriminator learns to separate real from generated
    /// panoramas. The generator output is detached.
    pub fn update_discriminator(&mut self, batch: &Batch) -> Result<f64> {
        let (fake, _) = self.nets.generator.forward(&batch.polar, Mode::Eval)?;
        let fake = fake.detach();
        let cond = Tensor::cat(&[&batch.polar, &batch.polar], 0)?;
        let target = Tensor::cat(&[&batch.street, &fake], 0)?;
        let logits = self.nets.discriminator.score(&cond, &target, Mode::Train)?;
        let n = batch.polar.dim(0)?;
        let loss = self.guard("discriminator", cgan_loss_discriminator(&logits.narrow(0, 0, n)?, &logits.narrow(0, n, n)?))?;
        let value = scalar(&loss)?;
        self.check_finite("discriminator", &[("loss_d", value)])?;
        self.opt_d.step(&loss.backward()?)?;
        Ok(value)
    }

    /// Sub-step 2: the generator minimizes the weighted adversarial, L1 and
    /// ranking terms. Ranking gradients reach the encoder through the frozen
    /// satellite aggregation module; street descriptors are constants here.
    /// Returns `(adv, l1, ret)`; the first two are `None` for the
    /// retrieval-only variant.
    pub fn update_generator(&mut self, batch: &Batch) -> Result<(Option<f64>, Option<f64>, f64)> {
        let w = self.cfg.losses;
        let street_desc = self.nets.street_descriptors(&batch.street, Mode::Eval)?.detach();
        let keep = self.keep_fraction();
        let (total, adv, l1, ret) = match self.cfg.variant {
            Variant::Full => {
                let (fake, bottleneck) = self.nets.generator.forward(&batch.polar, Mode::Train)?;
                let logits = self.nets.discriminator.score(&batch.polar, &fake, Mode::Eval)?;
                let adv = self.guard("generator", cgan_loss_generator(&logits, self.cfg.adversarial))?;
                let l1 = l1_loss(&fake, &batch.street)?;
                let sat_desc = self.nets.sa_sat.forward(&bottleneck)?.descriptor;
                let (ret, _) = retrieval_loss(&street_desc, &sat_desc, w.alpha, keep)?;
                let total = ((adv.affine(w.lambda_cgan, 0.0)? + l1.affine(w.lambda_l1, 0.0)?)? + ret.affine(w.lambda_ret, 0.0)?)?;
                (total, Some(scalar(&adv)?), Some(scalar(&l1)?), scalar(&ret)?)
            }
            Variant::RetrievalOnly => {
                let sat_desc = self.nets.satellite_descriptors(&batch.polar, Mode::Train)?;
                let (ret, _) = retrieval_loss(&street_desc, &sat_desc, w.alpha, keep)?;
                (ret.affine(w.lambda_ret, 0.0)?, None, None, scalar(&ret)?)
            }
        };
        self.check_finite(
            "generator",
            &[
                ("loss_g_adv", adv.unwrap_or(0.0)),
                ("loss_l1", l1.unwrap_or(0.0)),
                ("loss_ret", ret),
            ],
        )?;
        self.opt_g.step(&total.backward()?)?;
        Ok((adv, l1, ret))
    }

    /// Sub-step 3: the street encoder and both aggregation modules minimize
    /// the ranking loss against frozen generator-encoder features.
    pub fn update_retrieval(&mut self, batch: &Batch) -> Result<(f64, usize)> {
        let bottleneck = self.nets.generator.encode(&batch.polar, Mode::Eval)?.bottleneck.detach();
        let sat_desc = self.nets.sa_sat.forward(&bottleneck)?.descriptor;
        let street_desc = self.nets.street_descriptors(&batch.street, Mode::Train)?;
        let (ret, kept) = retrieval_loss(&street_desc, &sat_desc, self.cfg.losses.alpha, self.keep_fraction())?;
        let value = scalar(&ret)?;
        self.check_finite("retrieval", &[("loss_ret", value)])?;
        let total = ret.affine(self.cfg.losses.lambda_ret, 0.0)?;
        self.opt_r.step(&total.backward()?)?;
        Ok((value, kept))
    }

    /// One full cycle of the three updates on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let loss_d = match self.cfg.variant {
            Variant::Full => Some(self.update_discriminator(batch)?),
            Variant::RetrievalOnly => None,
        };
        let (loss_g_adv, loss_l1, _) = self.update_generator(batch)?;
        let (loss_ret, triplets_kept) = self.update_retrieval(batch)?;
        self.step += 1;
        self.update_mining(loss_ret);
        Ok(StepMetrics {
            step: self.step,
            loss_d,
            loss_g_adv,
            loss_l1,
            loss_ret,
            triplets_kept,
        })
    }

    fn update_mining(&mut self, loss_ret: f64) {
        let m = &self.cfg.mining;
        if self.mining.active {
            return;
        }
        let activate = match m.mode {
            MiningMode::Off => false,
            MiningMode::AtStep => self.step >= m.start_step,
            MiningMode::Plateau => {
                let h = &mut self.mining.history;
                h.push(loss_ret);
                if h.len() > 2 * m.window {
                    h.remove(0);
                }
                if self.step >= m.start_step && h.len() == 2 * m.window {
                    let old = h[..m.window].iter().sum::<f64>() / m.window as f64;
                    let new = h[m.window..].iter().sum::<f64>() / m.window as f64;
                    old <= 0.0 || (old - new) / old < m.threshold
                } else {
                    false
                }
            }
        };
        if activate {
            self.mining.active = true;
            self.mining.activated_at = Some(self.step);
            self.mining.history.clear();
            log::info!("hard-negative mining active from step {}", self.step);
        }
    }

    /// Snapshot of parameters, optimizer moments and loop state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                config_hash: self.cfg.hash(),
                config: self.cfg.clone(),
                step: self.step,
                seed: self.cfg.seed,
                mining: self.mining.clone(),
                optimizer_steps: [self.opt_g.steps(), self.opt_d.steps(), self.opt_r.steps()],
            },
            tensors: Default::default(),
        };
        for (name, store) in self.nets.stores() {
            ck.capture_store(name, store);
        }
        for (name, opt) in STORE_NAMES.iter().zip([&self.opt_g, &self.opt_d, &self.opt_r]) {
            for (var, m, v) in opt.moments() {
                ck.tensors.insert(format!("opt_{name}.m/{var}"), m.clone());
                ck.tensors.insert(format!("opt_{name}.v/{var}"), v.clone());
            }
        }
        ck
    }

    /// Trains until `total_steps`, appending to `metrics.jsonl` and writing
    /// `step-XXXXXXXX.ckpt` every `checkpoint_every` steps and `final.ckpt`
    /// at the end when an output directory is set.
    pub fn run(&mut self) -> Result<Vec<StepMetrics>> {
        let mut log_file = match &self.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                truncate_metrics(&path, self.step)?;
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, f))
            }
            None => None,
        };
        let mut all = Vec::new();
        while self.step < self.cfg.total_steps {
            let batch = self.batch(self.step + 1)?;
            let m = self.train_step(&batch)?;
            if let Some((path, f)) = &mut log_file {
                let line = serde_json::to_string(&m)?;
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if m.step % 50 == 0 {
                log::info!("step {} loss_ret {:.5} kept {}", m.step, m.loss_ret, m.triplets_kept);
            }
            let every = self.cfg.checkpoint_every;
            if let (Some(dir), true) = (&self.out_dir, every > 0 && self.step % every == 0) {
                self.checkpoint().save(&dir.join(format!("step-{:08}.ckpt", self.step)))?;
            }
            all.push(m);
        }
        if let Some(dir) = &self.out_dir {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(all)
    }
}

/// Drops records past `step` so a resumed run does not duplicate them.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: StepMetrics = serde_json::from_str(line)?;
        if m.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Reads a metrics log written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
