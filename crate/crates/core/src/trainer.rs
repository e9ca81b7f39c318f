//! Training loop: CID warmup, then per-epoch prototype clustering and
//! (optionally recalibrated) CMPC training.
//!
//! One epoch visits every training instance exactly once in a seeded order.
//! Clustering and recalibration run at epoch boundaries from memory
//! snapshots and stay fixed for the whole next epoch.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::{build_prototypes, KMeansParams, PrototypeSet};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::losses::{cid_loss, cmpc_loss, LossConfig, LossOutput};
use crate::memory::MemoryBank;
use crate::nn::{AdamConfig, AdamState, LrSchedule, Matrix, MlpEncoder};
use crate::protocols::{EvalReport, Evaluator, Stratum};
use crate::recalibration::{loss_coefficients, RecalibrationParams, RecalibrationState};
use crate::rng::{derive_seed, substream};
use crate::synth::TrainingSet;

pub const CHECKPOINT_KIND: &str = "train-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Cid,
    Cmpc,
    CmpcRecal,
}

impl LossMode {
    pub fn uses_prototypes(self) -> bool {
        self != LossMode::Cid
    }
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cid" => Ok(Self::Cid),
            "cmpc" => Ok(Self::Cmpc),
            "cmpc-recal" => Ok(Self::CmpcRecal),
            o => Err(Error::Argument(format!("unknown loss `{o}` (cid, cmpc, cmpc-recal)"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cid => "cid",
            Self::Cmpc => "cmpc",
            Self::CmpcRecal => "cmpc-recal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossMode,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs trained with the CID loss before prototypes are used.
    pub warmup_epochs: usize,
    pub temperature: f64,
    pub initial_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub momentum: f64,
    pub k_list: Vec<usize>,
    pub recalibration: RecalibrationParams,
    pub adam: AdamConfig,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub kmeans: KMeansParams,
    /// Evaluate every this many epochs; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossMode::CmpcRecal,
            batch_size: 32,
            epochs: 50,
            warmup_epochs: 5,
            temperature: 0.03,
            initial_lr: 1e-4,
            peak_lr: 5e-3,
            final_lr: 1e-4,
            momentum: 0.5,
            k_list: vec![10, 20, 30],
            recalibration: RecalibrationParams::default(),
            adam: AdamConfig::default(),
            hidden_dims: vec![128],
            embed_dim: 32,
            kmeans: KMeansParams::default(),
            eval_every: 0,
            seed: 0,
        }
    }
}

/// Step counts derived from a config and the training-set size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPlan {
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl TrainConfig {
    pub fn validate(&self, num_instances: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.batch_size < 2 {
            return bad(format!("batch size {} < 2", self.batch_size));
        }
        if num_instances < 2 {
            return bad(format!("need at least 2 training instances, have {num_instances}"));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup epochs ({}) must be fewer than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.loss.uses_prototypes() && self.warmup_epochs == 0 {
            return bad("prototype losses need at least one warmup epoch to fill the memory".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.loss.uses_prototypes() {
            if self.k_list.is_empty() {
                return bad("empty cluster-count list".into());
            }
            if let Some(k) = self.k_list.iter().find(|&&k| k == 0 || k > num_instances) {
                return bad(format!("cluster count {k} outside 1..={num_instances}"));
            }
        }
        if !(self.recalibration.kappa > 0.0) || !self.recalibration.delta.is_finite() {
            return bad(format!("invalid recalibration parameters {:?}", self.recalibration));
        }
        if self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        self.schedule(num_instances).map(|_| ())
    }

    pub fn plan(&self, num_instances: usize) -> StepPlan {
        let steps_per_epoch = (num_instances / self.batch_size).max(1) as u64;
        StepPlan {
            steps_per_epoch,
            total_steps: steps_per_epoch * self.epochs as u64,
            warmup_steps: steps_per_epoch * self.warmup_epochs as u64,
        }
    }

    pub fn schedule(&self, num_instances: usize) -> Result<LrSchedule> {
        let p = self.plan(num_instances);
        LrSchedule::new(
            self.initial_lr,
            self.peak_lr,
            self.final_lr,
            p.warmup_steps,
            p.total_steps,
        )
    }

    fn encoder_dims(&self, input: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }
}

/// Periodic evaluation summary recorded on the last step of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub matching_vf: f64,
    pub matching_fv: f64,
    pub auc: f64,
    pub map_vf: f64,
    pub map_fv: f64,
}

impl EvalMetrics {
    pub fn from_report(r: &EvalReport) -> Self {
        let m = r.matching_for(Stratum::U);
        Self {
            matching_vf: m.map_or(f64::NAN, |c| c.v2f),
            matching_fv: m.map_or(f64::NAN, |c| c.f2v),
            auc: r.verification_for(Stratum::U).map_or(f64::NAN, |c| c.auc),
            map_vf: r.retrieval.as_ref().map_or(f64::NAN, |c| c.v2f),
            map_fv: r.retrieval.as_ref().map_or(f64::NAN, |c| c.f2v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cid_vf: f64,
    pub loss_cid_fv: f64,
    pub loss_proto_vf: f64,
    pub loss_proto_fv: f64,
    pub mean_weight: f64,
    pub eval: Option<EvalMetrics>,
}

const METRIC_COLS: usize = 14;

impl MetricsRow {
    fn to_values(self) -> [f64; METRIC_COLS] {
        let e = self.eval.unwrap_or(EvalMetrics {
            matching_vf: f64::NAN,
            matching_fv: f64::NAN,
            auc: f64::NAN,
            map_vf: f64::NAN,
            map_fv: f64::NAN,
        });
        [
            self.step as f64,
            self.epoch as f64,
            self.lr,
            self.loss_total,
            self.loss_cid_vf,
            self.loss_cid_fv,
            self.loss_proto_vf,
            self.loss_proto_fv,
            self.mean_weight,
            e.matching_vf,
            e.matching_fv,
            e.auc,
            e.map_vf,
            e.map_fv,
        ]
    }

    fn from_values(v: &[f64], has_eval: bool) -> Self {
        Self {
            step: v[0] as u64,
            epoch: v[1] as u64,
            lr: v[2],
            loss_total: v[3],
            loss_cid_vf: v[4],
            loss_cid_fv: v[5],
            loss_proto_vf: v[6],
            loss_proto_fv: v[7],
            mean_weight: v[8],
            eval: has_eval.then(|| EvalMetrics {
                matching_vf: v[9],
                matching_fv: v[10],
                auc: v[11],
                map_vf: v[12],
                map_fv: v[13],
            }),
        }
    }
}

/// Order-sensitive digest of the training features, stored in checkpoints so
/// a resume against different data is refused.
pub fn data_fingerprint(data: &TrainingSet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |x: u64| h = (h ^ x).wrapping_mul(0x0000_0100_0000_01B3);
    mix(data.len() as u64);
    mix(data.voice.cols() as u64);
    mix(data.face.cols() as u64);
    for x in data.voice.data().iter().chain(data.face.data()) {
        mix(x.to_bits());
    }
    h
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, "shuffle", epoch));
    order
}

/// Row range of batch `pos` when `n` rows are cut into `parts` near-equal chunks.
fn batch_range(n: usize, parts: usize, pos: usize) -> std::ops::Range<usize> {
    let (base, extra) = (n / parts, n % parts);
    let start = pos * base + pos.min(extra);
    start..start + base + usize::from(pos < extra)
}

fn first_non_finite(out: &LossOutput) -> Option<&'static str> {
    let b = &out.breakdown;
    [
        ("cid_vf", b.cid_vf),
        ("cid_fv", b.cid_fv),
        ("proto_vf", b.proto_vf),
        ("proto_fv", b.proto_fv),
        ("total", b.objective),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(n, _)| n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub voice: MlpEncoder,
    pub face: MlpEncoder,
    adam_voice: AdamState,
    adam_face: AdamState,
    pub memory: MemoryBank,
    pub prototypes: Option<(PrototypeSet, PrototypeSet)>,
    pub recalibration: Option<RecalibrationState>,
    step: u64,
    /// Visiting order of the current epoch.
    order: Vec<usize>,
    pub metrics: Vec<MetricsRow>,
    data_fingerprint: u64,
    clustering_passes: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig, data: &TrainingSet) -> Result<Self> {
        config.validate(data.len())?;
        let voice = MlpEncoder::new(
            &config.encoder_dims(data.voice.cols()),
            &mut substream(config.seed, "init.voice", 0),
        )?;
        let face = MlpEncoder::new(
            &config.encoder_dims(data.face.cols()),
            &mut substream(config.seed, "init.face", 0),
        )?;
        Ok(Self {
            adam_voice: AdamState::new(config.adam, &voice.parameter_sizes()),
            adam_face: AdamState::new(config.adam, &face.parameter_sizes()),
            memory: MemoryBank::new(data.len(), config.embed_dim, config.momentum)?,
            prototypes: None,
            recalibration: None,
            step: 0,
            order: epoch_order(config.seed, 0, data.len()),
            metrics: Vec::new(),
            data_fingerprint: data_fingerprint(data),
            clustering_passes: 0,
            voice,
            face,
            config,
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn plan(&self) -> StepPlan {
        self.config.plan(self.memory.len())
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.plan().total_steps
    }

    /// Number of epoch-boundary clustering passes run so far.
    pub fn clustering_passes(&self) -> u64 {
        self.clustering_passes
    }

    pub fn epoch_order(&self) -> &[usize] {
        &self.order
    }

    fn check_data(&self, data: &TrainingSet) -> Result<()> {
        if data_fingerprint(data) != self.data_fingerprint {
            return Err(Error::Load("checkpoint was trained on a different dataset".into()));
        }
        Ok(())
    }

    /// Train until the schedule ends or `stop_after` total steps are done.
    pub fn run(&mut self, data: &TrainingSet, evaluator: Option<&Evaluator>, stop_after: Option<u64>) -> Result<()> {
        self.check_data(data)?;
        let plan = self.plan();
        let schedule = self.config.schedule(data.len())?;
        let limit = stop_after.map_or(plan.total_steps, |s| s.min(plan.total_steps));
        while self.step < limit {
            let pos = (self.step % plan.steps_per_epoch) as usize;
            let range = batch_range(data.len(), plan.steps_per_epoch as usize, pos);
            let rows = self.order[range].to_vec();
            self.train_step(data, &rows, schedule.lr_at(self.step)?, plan)?;
            if pos + 1 == plan.steps_per_epoch as usize {
                self.end_epoch(self.step / plan.steps_per_epoch - 1, evaluator)?;
            }
        }
        Ok(())
    }

    fn train_step(&mut self, data: &TrainingSet, rows: &[usize], lr: f64, plan: StepPlan) -> Result<()> {
        let step = self.step;
        let epoch = step / plan.steps_per_epoch;
        let cv = self.voice.forward_cached(&data.voice.gather_rows(rows))?;
        let cf = self.face.forward_cached(&data.face.gather_rows(rows))?;
        let (v, f) = (cv.output(), cf.output());
        let tau = self.config.temperature;

        let warm = !self.config.loss.uses_prototypes() || step < plan.warmup_steps;
        let mut mean_weight = 1.0;
        let out = if warm {
            cid_loss(v, f, tau)?
        } else {
            let (pv, pf) = self.prototypes.as_ref().ok_or_else(|| Error::Training {
                step,
                detail: "no prototypes available after warmup".into(),
            })?;
            let coeffs = match (&self.recalibration, self.config.loss) {
                (Some(r), LossMode::CmpcRecal) => {
                    let w: Vec<f64> = rows.iter().map(|&i| r.weights[i]).collect();
                    mean_weight = w.iter().sum::<f64>() / w.len() as f64;
                    Some(loss_coefficients(&w)?)
                }
                (None, LossMode::CmpcRecal) => {
                    return Err(Error::Training {
                        step,
                        detail: "recalibration state missing".into(),
                    })
                }
                _ => None,
            };
            cmpc_loss(v, f, rows, pv, pf, &LossConfig::new(tau)?, coeffs.as_deref())?
        };
        if let Some(component) = first_non_finite(&out) {
            return Err(Error::Training {
                step,
                detail: format!("non-finite loss component {component}"),
            });
        }

        let gv = self.voice.backward_cached(&cv, &out.grad_v)?;
        let gf = self.face.backward_cached(&cf, &out.grad_f)?;
        let at_step = |e: Error| match e {
            Error::Training { detail, .. } => Error::Training { step, detail },
            e => e,
        };
        self.adam_voice
            .update("voice", self.voice.parameters_mut(), &gv.slices(), lr)
            .map_err(at_step)?;
        self.adam_face
            .update("face", self.face.parameters_mut(), &gf.slices(), lr)
            .map_err(at_step)?;
        self.memory.update(rows, cv.output(), cf.output())?;

        let b = &out.breakdown;
        self.metrics.push(MetricsRow {
            step,
            epoch,
            lr,
            loss_total: b.objective,
            loss_cid_vf: b.cid_vf,
            loss_cid_fv: b.cid_fv,
            loss_proto_vf: b.proto_vf,
            loss_proto_fv: b.proto_fv,
            mean_weight,
            eval: None,
        });
        self.step += 1;
        Ok(())
    }

    fn end_epoch(&mut self, epoch: u64, evaluator: Option<&Evaluator>) -> Result<()> {
        if self.config.loss.uses_prototypes() && epoch + 1 >= self.config.warmup_epochs as u64 {
            let before = (self.voice.checksum(), self.face.checksum());
            let (mv, mf) = self.memory.snapshot()?;
            let (pv, pf) = build_prototypes(
                &mv,
                &mf,
                &self.config.k_list,
                derive_seed(self.config.seed, "cluster", epoch),
                &self.config.kmeans,
            )?;
            if self.config.loss == LossMode::CmpcRecal {
                self.recalibration = Some(RecalibrationState::compute(
                    &mv,
                    &mf,
                    &pv,
                    &pf,
                    self.config.recalibration,
                )?);
            }
            self.prototypes = Some((pv, pf));
            self.clustering_passes += 1;
            if before != (self.voice.checksum(), self.face.checksum()) {
                return Err(Error::State("encoders changed during clustering".into()));
            }
        }
        let every = self.config.eval_every as u64;
        if let (Some(ev), true) = (evaluator, every > 0 && (epoch + 1).is_multiple_of(every)) {
            let report = ev.evaluate_encoders(&self.voice, &self.face)?;
            if let Some(row) = self.metrics.last_mut() {
                row.eval = Some(EvalMetrics::from_report(&report));
            }
        }
        self.order = epoch_order(self.config.seed, epoch + 1, self.memory.len());
        Ok(())
    }

    /// Metrics log as CSV; eval columns appear when periodic evaluation is on.
    pub fn metrics_csv(&self) -> String {
        let with_eval = self.config.eval_every > 0;
        let mut out = String::from(
            "step,epoch,lr,loss_total,loss_cid_vf,loss_cid_fv,loss_proto_vf,loss_proto_fv,mean_weight",
        );
        if with_eval {
            out.push_str(",eval_matching_vf,eval_matching_fv,eval_auc,eval_map_vf,eval_map_fv");
        }
        out.push('\n');
        for r in &self.metrics {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.lr,
                r.loss_total,
                r.loss_cid_vf,
                r.loss_cid_fv,
                r.loss_proto_vf,
                r.loss_proto_fv,
                r.mean_weight
            );
            if with_eval {
                match r.eval {
                    Some(e) => {
                        let _ = write!(
                            out,
                            ",{},{},{},{},{}",
                            e.matching_vf, e.matching_fv, e.auc, e.map_vf, e.map_fv
                        );
                    }
                    None => out.push_str(",,,,,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.put_text("config", &serde_json::to_string(&self.config)?);
        c.put_u64("step", vec![self.step]);
        c.put_u64("data.fingerprint", vec![self.data_fingerprint]);
        c.put_u64("clustering_passes", vec![self.clustering_passes]);
        c.put_u64("order", self.order.iter().map(|&i| i as u64).collect());
        self.voice.write_to(&mut c, "encoder.voice");
        self.face.write_to(&mut c, "encoder.face");
        self.adam_voice.write_to(&mut c, "adam.voice");
        self.adam_face.write_to(&mut c, "adam.face");
        self.memory.write_to(&mut c, "memory");
        if let Some((pv, pf)) = &self.prototypes {
            pv.write_to(&mut c, "prototypes.voice");
            pf.write_to(&mut c, "prototypes.face");
        }
        if let Some(r) = &self.recalibration {
            r.write_to(&mut c, "recal");
        }
        c.put_u64(
            "metrics.has_eval",
            self.metrics.iter().map(|r| r.eval.is_some() as u64).collect(),
        );
        c.put_f64(
            "metrics.values",
            self.metrics.iter().flat_map(|r| r.to_values()).collect(),
        );
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.require_kind(CHECKPOINT_KIND)?;
        let config: TrainConfig = serde_json::from_str(&c.text("config")?)
            .map_err(|e| Error::Load(format!("checkpoint config: {e}")))?;
        let memory = MemoryBank::read_from(c, "memory")?;
        config
            .validate(memory.len())
            .map_err(|e| Error::Load(format!("checkpoint config: {e}")))?;
        let prototypes = if c.has("prototypes.voice.r") {
            Some((
                PrototypeSet::read_from(c, "prototypes.voice")?,
                PrototypeSet::read_from(c, "prototypes.face")?,
            ))
        } else {
            None
        };
        let recalibration = if c.has("recal.stats") {
            Some(RecalibrationState::read_from(c, "recal")?)
        } else {
            None
        };
        let has_eval = c.u64s("metrics.has_eval")?;
        let values = c.f64s("metrics.values")?;
        if values.len() != has_eval.len() * METRIC_COLS {
            return Err(Error::Load("metrics table has the wrong size".into()));
        }
        let metrics = values
            .chunks(METRIC_COLS)
            .zip(has_eval)
            .map(|(v, &e)| MetricsRow::from_values(v, e != 0))
            .collect();
        let order: Vec<usize> = c.u64s("order")?.iter().map(|&i| i as usize).collect();
        if order.len() != memory.len() {
            return Err(Error::Load("epoch order does not cover the memory bank".into()));
        }
        let voice = MlpEncoder::read_from(c, "encoder.voice")?;
        let face = MlpEncoder::read_from(c, "encoder.face")?;
        if voice.output_dim() != config.embed_dim || face.output_dim() != config.embed_dim {
            return Err(Error::Load("encoder output width disagrees with config".into()));
        }
        Ok(Self {
            adam_voice: AdamState::read_from(c, "adam.voice")?,
            adam_face: AdamState::read_from(c, "adam.face")?,
            memory,
            prototypes,
            recalibration,
            step: c.u64_scalar("step")?,
            order,
            metrics,
            data_fingerprint: c.u64_scalar("data.fingerprint")?,
            clustering_passes: c.u64_scalar("clustering_passes")?,
            voice,
            face,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write_file(path)
    }

    /// Load a checkpoint; nothing is returned unless the whole file parses.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read_file(path)?)
    }

    /// Encode a feature table with both encoders.
    pub fn embed(&self, voice: &Matrix, face: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.voice.forward(voice)?, self.face.forward(face)?))
    }
}

/// Train from scratch to the end of the schedule.
pub fn train(config: TrainConfig, data: &TrainingSet, evaluator: Option<&Evaluator>) -> Result<TrainState> {
    let mut state = TrainState::new(config, data)?;
    state.run(data, evaluator, None)?;
    Ok(state)
}
