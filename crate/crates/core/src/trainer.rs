//! Training loop, evaluation, checkpoints and the ablation harness.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::extractors::distortion_contrastive_loss;
use crate::io::{ArchiveTensor, TensorArchive};
use crate::metrics::{plcc, plcc_loss, rank_accuracy, srocc, RankAccuracy};
use crate::model::{ClipContext, Ksvqe, ModelConfig, Toggles};
use crate::qrs::SelectionTrace;
use crate::tensor::Matrix;
use crate::worksim::{Corpus, Split};
use crate::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveMode {
    /// Contrastive and quality losses summed every step.
    Joint,
    /// Distortion adapter first tuned alone on the contrastive loss for
    /// `pretrain_epochs`, then quality training without it.
    TwoStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over the run.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub quality_weight: f64,
    pub contrastive_weight: f64,
    pub temperature: f64,
    /// Fragments per clip entering the contrastive batch.
    pub contrastive_fragments: usize,
    pub contrastive_mode: ContrastiveMode,
    pub pretrain_epochs: usize,
    /// Draw new fragments every epoch; off reuses the epoch-0 draw.
    pub resample_fragments: bool,
    pub seed: u64,
    /// Seed of the fixed evaluation fragments.
    pub eval_seed: u64,
    pub logistic_plcc: bool,
    pub profile: Profile,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    /// Optimizer recipe of the full-size setup on the desk model.
    fn default() -> Self {
        Self {
            lr: 3e-5,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 10,
            quality_weight: 1.0,
            contrastive_weight: 0.1,
            temperature: 0.1,
            contrastive_fragments: 8,
            contrastive_mode: ContrastiveMode::Joint,
            pretrain_epochs: 0,
            resample_fragments: true,
            seed: 0,
            eval_seed: 1234,
            logistic_plcc: false,
            profile: Profile::Desk,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    /// Desk recipe: small randomly initialized backbone, so a larger
    /// learning rate than the fine-tuning default.
    pub fn desk() -> Self {
        Self { lr: 8e-3, lr_schedule: LrSchedule::Cosine, batch_size: 32, ..Self::default() }
    }

    pub fn paper() -> Self {
        Self { profile: Profile::Paper, model: ModelConfig::paper(), ..Self::default() }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size < 2 {
            return Err(invalid(format!("lr {} and batch size {} must be positive (batch ≥ 2)", self.lr, self.batch_size)));
        }
        if !(self.temperature > 0.0) || self.weight_decay < 0.0 || self.contrastive_weight < 0.0 {
            return Err(invalid("temperature must be positive, weights non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        self.model.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::config_hash(self).expect("config serializes")
    }
}

/// Adam with decoupled weight decay:
/// `p ← p − lr·(m̂ / (√v̂ + ε) + λ·p)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    moments: BTreeMap<ParamId, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, eps, weight_decay, t: 0, moments: BTreeMap::new() }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay)
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.params() {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let p = store.get_mut(*id);
            for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pi);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub n: usize,
    pub srocc: f64,
    pub plcc: f64,
    pub rank: Option<RankAccuracy>,
    pub predictions: BTreeMap<String, f64>,
    /// Pseudo-MOS of the same clips.
    pub targets: BTreeMap<String, f64>,
}

/// One JSON-lines record per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: String,
    pub steps: usize,
    pub train_loss: f64,
    pub plcc_loss: f64,
    pub contrastive_loss: Option<f64>,
    pub test_srocc: f64,
    pub test_plcc: f64,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub plcc_loss: f64,
    pub contrastive_loss: Option<f64>,
    pub grads: Gradients,
}

struct Sample {
    clip: usize,
    id: String,
    mos: f64,
    label: String,
    ctx: ClipContext,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Objective {
    Joint,
    ContrastiveOnly,
    QualityOnly,
}

/// Owns the model, its parameters and the optimizer for one run.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Ksvqe,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub steps: usize,
    pub epochs_done: usize,
    /// Where a diagnostic dump goes when the loss turns non-finite.
    pub diagnostic_dir: Option<PathBuf>,
    corpus: &'a Corpus,
    samples: Vec<Sample>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, corpus: &'a Corpus) -> Result<Self> {
        config.validate()?;
        corpus.manifest.validate()?;
        if corpus.clips.len() != corpus.manifest.clips.len() {
            return Err(invalid("corpus tensors and manifest rows differ in count"));
        }
        let mut store = ParamStore::new();
        let model = Ksvqe::new(&mut store, config.model.clone(), &mut seeded(derive_seed(config.seed, &[0])))?;
        let mut samples = Vec::new();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, (rec, clip)) in corpus.manifest.clips.iter().zip(&corpus.clips).enumerate() {
            samples.push(Sample {
                clip: i,
                id: rec.clip_id.clone(),
                mos: rec.pseudo_mos,
                label: rec.recipe.pattern_label.clone(),
                ctx: model.context(clip)?,
            });
            match rec.split {
                Split::Train => train.push(i),
                Split::Test => test.push(i),
            }
        }
        if train.len() < 2 || test.len() < 2 {
            return Err(invalid("both splits need at least two clips"));
        }
        let mut rows = Vec::new();
        for &i in &train {
            let inputs = model.sample_inputs(&corpus.clips[i], &mut seeded(derive_seed(config.seed, &[9, i as u64])))?;
            for r in 0..inputs.distortion.rows() {
                rows.push(inputs.distortion.row(r).to_vec());
            }
        }
        model.fit_distortion_norm(&mut store, &Matrix::from_rows(&rows));
        Ok(Self {
            optimizer: AdamW::from_config(&config),
            config,
            model,
            store,
            steps: 0,
            epochs_done: 0,
            diagnostic_dir: None,
            corpus,
            samples,
            train,
            test,
        })
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    fn objective(&self, epoch: usize) -> Objective {
        let dam = self.model.config.toggles.dam;
        match self.config.contrastive_mode {
            ContrastiveMode::Joint if dam && self.config.contrastive_weight > 0.0 => Objective::Joint,
            ContrastiveMode::TwoStage if dam && epoch < self.config.pretrain_epochs => Objective::ContrastiveOnly,
            _ => Objective::QualityOnly,
        }
    }

    /// Loss of one batch on a fresh tape. Returns `(total, plcc, contrastive)`.
    fn batch_loss(&self, g: &Graph, batch: &[usize], epoch: usize, step: usize, objective: Objective) -> Result<(Var, Var, Option<Var>)> {
        let cfg = &self.config;
        let frag_epoch = if cfg.resample_fragments { epoch } else { 0 };
        let mut scores = Vec::new();
        let mut feats = Vec::new();
        let mut labels: Vec<&str> = Vec::new();
        let mut mos = Vec::new();
        for &i in batch {
            let s = &self.samples[i];
            let video = &self.corpus.clips[s.clip];
            let inputs = self.model.sample_inputs(video, &mut seeded(derive_seed(cfg.seed, &[11, frag_epoch as u64, i as u64])))?;
            let mut rng = seeded(derive_seed(cfg.seed, &[12, step as u64, i as u64]));
            let out = self.model.forward(g, &self.store, &s.ctx, &inputs, &mut rng)?;
            scores.push(out.score);
            mos.push(s.mos);
            if objective != Objective::QualityOnly {
                if let Some(a) = out.adapted_distortion {
                    let rows = g.shape(a).0;
                    let mut idx: Vec<usize> = (0..rows).collect();
                    idx.shuffle(&mut rng);
                    idx.truncate(cfg.contrastive_fragments.min(rows));
                    idx.sort_unstable();
                    feats.push(g.gather_rows(a, &idx));
                    labels.extend(std::iter::repeat_n(s.label.as_str(), idx.len()));
                }
            }
        }
        let pred = g.concat_rows(&scores);
        let lq = plcc_loss(g, pred, &mos)?;
        let lc = if feats.is_empty() {
            None
        } else {
            match distortion_contrastive_loss(g, g.concat_rows(&feats), &labels, cfg.temperature) {
                Ok(l) => Some(l),
                Err(Error::UndefinedLoss(why)) => {
                    log::debug!("step {step}: contrastive term skipped ({why})");
                    None
                }
                Err(e) => return Err(e),
            }
        };
        let total = match (objective, lc) {
            (Objective::ContrastiveOnly, Some(c)) => c,
            (Objective::ContrastiveOnly, None) => g.scale(lq, 0.0),
            (Objective::Joint, Some(c)) => g.add(g.scale(lq, cfg.quality_weight), g.scale(c, cfg.contrastive_weight)),
            _ => g.scale(lq, cfg.quality_weight),
        };
        Ok((total, lq, lc))
    }

    /// Forward, backward and one optimizer update on `batch` (sample
    /// indices).
    pub fn step(&mut self, batch: &[usize], epoch: usize) -> Result<StepReport> {
        let objective = self.objective(epoch);
        let g = Graph::new();
        let (total, lq, lc) = self.batch_loss(&g, batch, epoch, self.steps, objective)?;
        let loss = g.value(total).item();
        let plcc_loss = g.value(lq).item();
        let contrastive_loss = lc.map(|c| g.value(c).item());
        if !loss.is_finite() {
            let detail = self.dump_diagnostics(batch, epoch, loss, plcc_loss, contrastive_loss);
            return Err(Error::NonFiniteLoss { step: self.steps, detail });
        }
        self.optimizer.lr = self.lr_at(self.steps);
        let mut grads = g.backward(total);
        if objective == Objective::ContrastiveOnly {
            let keep = self.model.distortion_adapter.params();
            grads = grads.restricted_to(&keep);
        }
        self.optimizer.step(&mut self.store, &grads);
        self.steps += 1;
        Ok(StepReport { loss, plcc_loss, contrastive_loss, grads })
    }

    /// Optimizer steps in a full run.
    pub fn total_steps(&self) -> usize {
        let per_epoch = self.train.chunks(self.config.batch_size).filter(|b| b.len() >= 2).count();
        let pre = if self.config.contrastive_mode == ContrastiveMode::TwoStage { self.config.pretrain_epochs } else { 0 };
        per_epoch * (self.config.epochs + pre)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.config.lr_schedule {
            LrSchedule::Constant => self.config.lr,
            LrSchedule::Cosine => {
                let frac = (step as f64 / self.total_steps().max(1) as f64).min(1.0);
                0.5 * self.config.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    fn dump_diagnostics(&self, batch: &[usize], epoch: usize, loss: f64, lq: f64, lc: Option<f64>) -> String {
        let params: Vec<serde_json::Value> = self
            .store
            .entries()
            .iter()
            .map(|e| {
                serde_json::json!({
                    "name": e.name,
                    "finite": e.value.all_finite(),
                    "max_abs": e.value.data().iter().fold(0.0f64, |m, v| m.max(v.abs())),
                })
            })
            .collect();
        let dump = serde_json::json!({
            "step": self.steps,
            "epoch": epoch,
            "loss": loss.to_string(),
            "plcc_loss": lq.to_string(),
            "contrastive_loss": lc.map(|v| v.to_string()),
            "clips": batch.iter().map(|&i| self.samples[i].id.clone()).collect::<Vec<_>>(),
            "params": params,
        });
        let mut detail = format!("loss {loss} at epoch {epoch}");
        if let Some(dir) = &self.diagnostic_dir {
            let path = dir.join("nonfinite_dump.json");
            if fs::create_dir_all(dir).and_then(|_| fs::write(&path, dump.to_string())).is_ok() {
                detail.push_str(&format!("; dump written to {}", path.display()));
            }
        }
        log::error!("{detail}");
        detail
    }

    /// One pass over the training split in a seeded order; trailing
    /// batches smaller than two clips are dropped.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epochs_done;
        let objective = self.objective(epoch);
        let mut order = self.train.clone();
        order.shuffle(&mut seeded(derive_seed(self.config.seed, &[10, epoch as u64])));
        let (mut sum, mut sum_q, mut sum_c, mut n_c, mut n) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(self.config.batch_size).filter(|b| b.len() >= 2) {
            let r = self.step(batch, epoch)?;
            sum += r.loss;
            sum_q += r.plcc_loss;
            if let Some(c) = r.contrastive_loss {
                sum_c += c;
                n_c += 1;
            }
            n += 1;
        }
        self.epochs_done += 1;
        let eval = self.evaluate(Split::Test)?;
        let log = EpochLog {
            epoch,
            stage: match objective {
                Objective::ContrastiveOnly => "contrastive",
                Objective::Joint => "joint",
                Objective::QualityOnly => "quality",
            }
            .into(),
            steps: self.steps,
            train_loss: sum / n.max(1) as f64,
            plcc_loss: sum_q / n.max(1) as f64,
            contrastive_loss: (n_c > 0).then(|| sum_c / n_c as f64),
            test_srocc: eval.srocc,
            test_plcc: eval.plcc,
        };
        log::info!(
            "epoch {} ({}) loss {:.4} test SROCC {:.4} PLCC {:.4}",
            log.epoch,
            log.stage,
            log.train_loss,
            log.test_srocc,
            log.test_plcc
        );
        Ok(log)
    }

    /// Runs the remaining epochs (two-stage pretraining included).
    pub fn fit(&mut self) -> Result<Vec<EpochLog>> {
        let total = self.config.epochs
            + if self.config.contrastive_mode == ContrastiveMode::TwoStage { self.config.pretrain_epochs } else { 0 };
        let mut logs = Vec::new();
        while self.epochs_done < total {
            logs.push(self.run_epoch()?);
        }
        Ok(logs)
    }

    /// Scores of the given samples with seed-fixed fragments.
    pub fn predict(&self, indices: &[usize]) -> Result<Vec<f64>> {
        indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                let mut rng = seeded(derive_seed(self.config.eval_seed, &[13, i as u64]));
                let video = &self.corpus.clips[s.clip];
                let inputs = self.model.sample_inputs(video, &mut rng)?;
                let g = Graph::new();
                let out = self.model.forward(&g, &self.store, &s.ctx, &inputs, &mut rng)?;
                let v = g.value(out.score).item();
                Ok(v)
            })
            .collect()
    }

    pub fn evaluate(&self, split: Split) -> Result<EvalReport> {
        let idx = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        let pred = self.predict(idx)?;
        let mos: Vec<f64> = idx.iter().map(|&i| self.samples[i].mos).collect();
        let ids: Vec<String> = idx.iter().map(|&i| self.samples[i].id.clone()).collect();
        report_from_predictions(split, &ids, &pred, &mos, &self.corpus.pairs, self.config.logistic_plcc)
    }

    /// Selection traces of the given samples under the evaluation seeds.
    pub fn selection_traces(&self, indices: &[usize]) -> Result<Vec<SelectionTrace>> {
        let mut out = Vec::new();
        for &i in indices {
            let s = &self.samples[i];
            let mut rng = seeded(derive_seed(self.config.eval_seed, &[13, i as u64]));
            let inputs = self.model.sample_inputs(&self.corpus.clips[s.clip], &mut rng)?;
            let g = Graph::new();
            let o = self.model.forward(&g, &self.store, &s.ctx, &inputs, &mut rng)?;
            if let (Some(imp), Some(sel)) = (o.importance, o.selection) {
                out.push(SelectionTrace::new(&s.id, &imp, &sel, self.model.config.target_side)?);
            }
        }
        Ok(out)
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, &self.store, self.steps)
    }

    /// Replaces the model parameters with those of a checkpoint built for
    /// the same model configuration.
    pub fn load_parameters(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let (model, store) = load_checkpoint(path)?;
        if model.config != self.model.config {
            return Err(invalid("checkpoint model configuration differs from the run configuration"));
        }
        self.store = store;
        Ok(())
    }
}

/// SROCC, PLCC and rank accuracy of a prediction set.
pub fn report_from_predictions(
    split: Split,
    ids: &[String],
    pred: &[f64],
    mos: &[f64],
    pairs: &[crate::metrics::RankPair],
    logistic: bool,
) -> Result<EvalReport> {
    let (s, p) = match (srocc(pred, mos), plcc(pred, mos, logistic)) {
        (Ok(s), Ok(p)) => (s, p),
        (Err(Error::UndefinedCorrelation(why)), _) | (_, Err(Error::UndefinedCorrelation(why))) => {
            log::warn!("correlation undefined ({why}); reporting 0");
            (0.0, 0.0)
        }
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    if ids.len() != pred.len() || pred.len() != mos.len() {
        return Err(invalid("ids, predictions and targets differ in length"));
    }
    let predictions: BTreeMap<String, f64> = ids.iter().cloned().zip(pred.iter().copied()).collect();
    let targets: BTreeMap<String, f64> = ids.iter().cloned().zip(mos.iter().copied()).collect();
    let lookup: HashMap<String, f64> = predictions.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let usable: Vec<_> = pairs.iter().filter(|p| lookup.contains_key(&p.clip_a) && lookup.contains_key(&p.clip_b)).cloned().collect();
    let rank = if usable.is_empty() { None } else { Some(rank_accuracy(&usable, &lookup)?) };
    Ok(EvalReport { split, n: pred.len(), srocc: s, plcc: p, rank, predictions, targets })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub final_eval: EvalReport,
    pub steps: usize,
    pub param_digest: String,
}

/// Trains from scratch and reports the last-iteration checkpoint on the
/// test split. With `out`, writes `log.jsonl`, `checkpoint.kvt` and
/// `eval.json` there.
pub fn train(config: &TrainConfig, corpus: &Corpus, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), corpus)?;
    t.diagnostic_dir = out.map(Path::to_path_buf);
    let logs = t.fit()?;
    let final_eval = t.evaluate(Split::Test)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_jsonl(dir.join("log.jsonl"), &logs)?;
        t.save_checkpoint(dir.join("checkpoint.kvt"))?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&final_eval)?)?;
    }
    Ok(TrainOutcome { logs, final_eval, steps: t.steps, param_digest: t.store.digest() })
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

const CHECKPOINT_KIND: &str = "ksvqe-checkpoint";

/// Every parameter by name, with the model configuration in the header.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Ksvqe, store: &ParamStore, steps: usize) -> Result<()> {
    let mut a = TensorArchive::default();
    a.metadata.insert("kind".into(), CHECKPOINT_KIND.into());
    a.metadata.insert("model_config".into(), serde_json::to_string(&model.config)?);
    a.metadata.insert("steps".into(), steps.to_string());
    for e in store.entries() {
        a.insert(e.name.clone(), ArchiveTensor::from_matrix(&e.value));
    }
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    a.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Ksvqe, ParamStore)> {
    let a = TensorArchive::load(path)?;
    if a.metadata.get("kind").map(String::as_str) != Some(CHECKPOINT_KIND) {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let config: ModelConfig = serde_json::from_str(
        a.metadata.get("model_config").ok_or_else(|| Error::Format("checkpoint lacks model_config".into()))?,
    )?;
    let mut store = ParamStore::new();
    let model = Ksvqe::new(&mut store, config, &mut seeded(0))?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let m = a.matrix(&name)?;
        if m.shape() != store.get(id).shape() {
            return Err(Error::Format(format!("parameter {name} has shape {:?}, expected {:?}", m.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = m;
    }
    Ok((model, store))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub label: String,
    pub srocc: f64,
    pub plcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, t: Toggles) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.toggles == t)
    }

    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { " " };
        let mut s = String::from("| QRS | CaM | DaM | SROCC | PLCC |\n|:---:|:---:|:---:|---:|---:|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.4} | {:.4} |\n",
                mark(r.toggles.qrs),
                mark(r.toggles.cam),
                mark(r.toggles.dam),
                r.srocc,
                r.plcc
            ));
        }
        s
    }
}

/// One run per requested combination, sharing seed and data order.
pub fn ablate(grid: &[Toggles], config: &TrainConfig, corpus: &Corpus) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(grid.len());
    for &toggles in grid {
        let mut c = config.clone();
        c.model.toggles = toggles;
        let out = train(&c, corpus, None)?;
        log::info!("ablation {}: SROCC {:.4} PLCC {:.4}", toggles.label(), out.final_eval.srocc, out.final_eval.plcc);
        rows.push(AblationRow { toggles, label: toggles.label(), srocc: out.final_eval.srocc, plcc: out.final_eval.plcc });
    }
    Ok(AblationReport { seed: config.seed, rows })
}
