//! Training driver: run configuration, the step loop, evaluation and
//! checkpoint resume.
//!
//! Every random choice (initial weights, data order, dropout) is a pure
//! function of the seed and the step index, so a run resumed from a
//! checkpoint continues exactly as the uninterrupted run would have.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{DataConfig, DataSource};
use crate::error::{Error, Result};
use crate::memplan::{Arena, ArenaStats, Capacity};
use crate::model::{Batch, ModelConfig, StepOptions, Transformer};
use crate::trainer::{optimizer_step, Algorithm, OptimConfig, Workspace};

fn d_beta1() -> f32 {
    0.9
}
fn d_beta2() -> f32 {
    0.999
}
fn d_eps() -> f32 {
    1e-8
}
fn d_one() -> f32 {
    1.0
}
fn d_log_every() -> u64 {
    100
}
fn d_eval_batches() -> usize {
    8
}
fn d_skip_budget() -> u64 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    #[serde(default = "d_beta1")]
    pub beta1: f32,
    #[serde(default = "d_beta2")]
    pub beta2: f32,
    #[serde(default = "d_eps")]
    pub eps_opt: f32,
    /// Label smoothing.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub p_drop: f64,
    #[serde(default)]
    pub seed: u64,
    pub batch_tokens: usize,
    pub steps: u64,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default = "d_one")]
    pub loss_scale: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default)]
    pub momentum: f32,
    /// Linear learning-rate ramp over the first steps; 0 disables it.
    #[serde(default)]
    pub warmup_steps: u64,
    /// Decays linearly from the peak after warm-up to this fraction of
    /// `lr` at `steps`; 1 keeps it constant.
    #[serde(default = "d_one")]
    pub final_lr_fraction: f32,
    #[serde(default = "d_log_every")]
    pub log_every: u64,
    /// 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "d_eval_batches")]
    pub eval_batches: usize,
    /// 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub checkpoint_path: Option<String>,
    /// Skipped (non-finite) steps tolerated before the run fails.
    #[serde(default = "d_skip_budget")]
    pub skip_budget: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim().validate()?;
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} outside [0, 1]",
                t.alpha
            )));
        }
        if !(0.0..1.0).contains(&t.p_drop) {
            return Err(Error::InvalidConfig(format!(
                "p_drop {} outside [0, 1)",
                t.p_drop
            )));
        }
        if !(0.0..=1.0).contains(&t.final_lr_fraction) {
            return Err(Error::InvalidConfig(format!(
                "final_lr_fraction {} outside [0, 1]",
                t.final_lr_fraction
            )));
        }
        if t.batch_tokens < self.model.max_len {
            return Err(Error::InvalidConfig(format!(
                "batch_tokens {} < max_len {}",
                t.batch_tokens, self.model.max_len
            )));
        }
        if t.checkpoint_every > 0 && t.checkpoint_path.is_none() {
            return Err(Error::InvalidConfig(
                "checkpoint_every needs checkpoint_path".into(),
            ));
        }
        if self.data.pad_id >= self.model.vocab || self.data.bos_id >= self.model.vocab {
            return Err(Error::InvalidConfig(
                "pad_id and bos_id must be < vocab".into(),
            ));
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        let t = &self.train;
        OptimConfig {
            algorithm: t.algorithm,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps_opt,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            loss_scale: t.loss_scale,
        }
    }

    /// Learning rate for 1-based update `t`.
    pub fn lr_at(&self, t: u64) -> f32 {
        let (w, n, lr) = (self.train.warmup_steps, self.train.steps, self.train.lr);
        if w > 0 && t < w {
            return lr * t as f32 / w as f32;
        }
        let f = self.train.final_lr_fraction;
        if f == 1.0 || n <= w {
            return lr;
        }
        let progress = (t.min(n) - w) as f32 / (n - w) as f32;
        lr * (1.0 - (1.0 - f) * progress)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum Record {
    Config {
        config: RunConfig,
        params: usize,
        arena_capacity: usize,
        eval_arena_capacity: usize,
        naive_capacity: usize,
        resumed_from: Option<u64>,
    },
    Train {
        step: u64,
        /// Mean per-token loss over the steps since the last record.
        loss: f64,
        tokens: usize,
        accuracy: f64,
        lr: f32,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        tokens_per_sec: Option<f64>,
        arena_high_water: usize,
        arena_capacity: usize,
        skipped: u64,
    },
    Eval {
        step: u64,
        loss: f64,
        tokens: usize,
        accuracy: f64,
    },
    Checkpoint {
        step: u64,
        path: String,
    },
}

/// Outcome of a single iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Per-token loss of the batch.
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub tokens: usize,
    pub accuracy: f64,
}

pub struct Session {
    cfg: RunConfig,
    model: Transformer,
    ws: Workspace,
    data: DataSource,
    eval: Vec<Batch>,
    capacity: Capacity,
    eval_capacity: Capacity,
    arena: Arena<f32>,
    eval_arena: Arena<f32>,
    skipped: u64,
}

impl Session {
    /// Fresh parameters drawn from `train.seed`.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Transformer::new(cfg.model.clone())?;
        let ws = Workspace::from_params(&model.init_params::<f32>(cfg.train.seed))?;
        Self::assemble(cfg, model, ws)
    }

    /// Continues from a checkpoint written by a run with the same config.
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let model = Transformer::new(cfg.model.clone())?;
        let ws = ckpt.to_workspace()?;
        let expect = model.layout();
        let same = ws.links().len() == expect.count()
            && ws
                .links()
                .iter()
                .zip(expect.specs())
                .all(|(l, s)| l.name == s.name && l.shape == s.shape);
        if !same {
            return Err(Error::Checkpoint(
                "tensor layout does not match the model config".into(),
            ));
        }
        if cfg.train.algorithm == Algorithm::Adam && ws.step > 0 && ws.m.is_empty() {
            return Err(Error::Checkpoint("Adam resume needs stored moments".into()));
        }
        Self::assemble(cfg, model, ws)
    }

    fn assemble(cfg: RunConfig, model: Transformer, ws: Workspace) -> Result<Self> {
        let data = DataSource::new(
            &cfg.data,
            cfg.model.vocab,
            cfg.model.max_len,
            cfg.train.batch_tokens,
            cfg.train.seed,
        )?;
        let stats = data.stats();
        let mut eval = data.eval_batches()?;
        eval.truncate(cfg.train.eval_batches);
        let capacity = model.estimate_capacity::<f32>(&stats, true)?;
        let eval_capacity = model.estimate_capacity::<f32>(&stats, false)?;
        let arena = capacity.arena()?;
        let eval_arena = eval_capacity.arena()?;
        Ok(Self {
            cfg,
            model,
            ws,
            data,
            eval,
            capacity,
            eval_capacity,
            arena,
            eval_arena,
            skipped: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    /// Iterations completed, skipped ones included.
    pub fn step(&self) -> u64 {
        self.ws.step
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn capacity(&self) -> &Capacity {
        &self.capacity
    }

    pub fn eval_capacity(&self) -> &Capacity {
        &self.eval_capacity
    }

    pub fn arena_stats(&self) -> ArenaStats {
        self.arena.stats()
    }

    pub fn eval_arena_stats(&self) -> ArenaStats {
        self.eval_arena.stats()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_workspace(&self.ws)
    }

    fn step_options(&self, step: u64, loss_scale: f64, p_drop: f64) -> StepOptions {
        StepOptions {
            p_drop,
            alpha: self.cfg.train.alpha,
            pad_id: self.cfg.data.pad_id,
            seed: self.cfg.train.seed,
            step,
            loss_scale,
        }
    }

    /// One iteration: gradients of the loss-scaled mean token loss, then
    /// one optimizer pass. A non-finite gradient skips the update; the
    /// step counter still advances so data and dropout stay aligned.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.ws.step;
        let batch = self.data.batch_at(step)?;
        let tokens = batch.target_tokens().max(1);
        let opts = self.step_options(
            step,
            self.cfg.train.loss_scale as f64 / tokens as f64,
            self.cfg.train.p_drop,
        );
        self.ws.zero_grads();
        let (params, mut grads) = self.ws.split();
        let r = self
            .model
            .forward_backward(&params, &batch, &opts, &mut self.arena, &mut grads)?;
        let mut optim = self.cfg.optim();
        optim.lr = self.cfg.lr_at(step + 1);
        let outcome = if r.loss.is_finite() {
            optimizer_step(&mut self.ws, &optim)
        } else {
            Err(Error::NonFiniteGradient { count: 0 })
        };
        let skipped = match outcome {
            Ok(()) => false,
            Err(Error::NonFiniteGradient { count }) => {
                self.ws.step += 1;
                self.skipped += 1;
                if self.skipped > self.cfg.train.skip_budget {
                    return Err(Error::NonFiniteGradient { count });
                }
                true
            }
            Err(e) => return Err(e),
        };
        Ok(StepReport {
            loss: r.loss / tokens as f64,
            tokens: r.tokens,
            correct: r.correct,
            skipped,
        })
    }

    /// Loss and next-token accuracy on the held-out batches, dropout off.
    pub fn evaluate(&mut self) -> Result<EvalReport> {
        let (mut loss, mut tokens, mut correct) = (0.0, 0usize, 0usize);
        let opts = self.step_options(0, 1.0, 0.0);
        for b in &self.eval {
            let r = self
                .model
                .forward_loss(&self.ws, b, &opts, &mut self.eval_arena)?;
            loss += r.loss;
            tokens += r.tokens;
            correct += r.correct;
        }
        let n = tokens.max(1) as f64;
        Ok(EvalReport {
            loss: loss / n,
            tokens,
            accuracy: correct as f64 / n,
        })
    }

    pub fn config_record(&self, resumed_from: Option<u64>) -> Record {
        Record::Config {
            config: self.cfg.clone(),
            params: self.ws.len(),
            arena_capacity: self.capacity.bound(),
            eval_arena_capacity: self.eval_capacity.bound(),
            naive_capacity: self.capacity.naive(),
            resumed_from,
        }
    }

    /// Trains until `until` iterations have run, writing one JSON record
    /// per line to `log`. Timing fields are omitted when `timing` is off so
    /// logs of equal runs compare byte for byte.
    pub fn run(
        &mut self,
        until: u64,
        log: &mut dyn Write,
        timing: bool,
    ) -> Result<Option<EvalReport>> {
        let t = self.cfg.train.clone();
        let emit = |log: &mut dyn Write, r: &Record| -> Result<()> {
            writeln!(
                log,
                "{}",
                serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?
            )?;
            Ok(())
        };
        let (mut loss, mut tokens, mut correct) = (0.0, 0usize, 0usize);
        let mut clock = Instant::now();
        let mut last_eval = None;
        while self.ws.step < until {
            let r = self.train_step()?;
            let step = self.ws.step;
            if !r.skipped {
                loss += r.loss * r.tokens as f64;
                tokens += r.tokens;
                correct += r.correct;
            }
            if step.is_multiple_of(t.log_every.max(1)) || step == until {
                let secs = clock.elapsed().as_secs_f64();
                let stats = self.arena.stats();
                emit(
                    log,
                    &Record::Train {
                        step,
                        loss: if tokens > 0 {
                            loss / tokens as f64
                        } else {
                            f64::NAN
                        },
                        tokens,
                        accuracy: if tokens > 0 {
                            correct as f64 / tokens as f64
                        } else {
                            0.0
                        },
                        lr: self.cfg.lr_at(step),
                        tokens_per_sec: timing.then(|| tokens as f64 / secs.max(1e-9)),
                        arena_high_water: stats.touched_high_water,
                        arena_capacity: stats.capacity,
                        skipped: self.skipped,
                    },
                )?;
                (loss, tokens, correct) = (0.0, 0, 0);
                clock = Instant::now();
            }
            if (t.eval_every > 0 && step.is_multiple_of(t.eval_every)) || step == until {
                let e = self.evaluate()?;
                emit(
                    log,
                    &Record::Eval {
                        step,
                        loss: e.loss,
                        tokens: e.tokens,
                        accuracy: e.accuracy,
                    },
                )?;
                last_eval = Some(e);
            }
            if t.checkpoint_every > 0 && (step.is_multiple_of(t.checkpoint_every) || step == until)
            {
                let path = t.checkpoint_path.clone().unwrap_or_default();
                self.checkpoint().save(&path)?;
                emit(log, &Record::Checkpoint { step, path })?;
            }
        }
        Ok(last_eval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Task;

    fn tiny() -> RunConfig {
        let mut model = ModelConfig::tiny(1, 1, 8, 10, 6);
        model.d_ff = 16;
        RunConfig {
            model,
            train: serde_json::from_str(r#"{"lr": 0.003, "batch_tokens": 24, "steps": 6, "p_drop": 0.1, "alpha": 0.1, "seed": 5, "log_every": 2, "eval_batches": 2, "loss_scale": 64}"#).unwrap(),
            data: DataConfig { pool_size: 64, ..DataConfig::synthetic(Task::Copy) },
        }
    }

    fn log_of(s: &mut Session, until: u64) -> String {
        let mut out = Vec::new();
        s.run(until, &mut out, false).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.train.batch_tokens = 5;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = tiny();
        c.train.alpha = 1.5;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.train.loss_scale = 3.0;
        assert!(c.validate().is_err());
        assert!(RunConfig::from_json("{").is_err());
    }

    #[test]
    fn warmup_ramp() {
        let mut c = tiny();
        c.train.warmup_steps = 4;
        assert_eq!(c.lr_at(1), 0.003 / 4.0);
        assert_eq!(c.lr_at(4), 0.003);
        assert_eq!(c.lr_at(100), 0.003);
        c.train.steps = 14;
        c.train.final_lr_fraction = 0.0;
        assert_eq!(c.lr_at(4), 0.003);
        assert!((c.lr_at(9) - 0.0015).abs() < 1e-9);
        assert_eq!(c.lr_at(14), 0.0);
        assert_eq!(c.lr_at(20), 0.0);
    }

    #[test]
    fn runs_are_reproducible_and_every_line_parses() {
        let a = log_of(&mut Session::new(tiny()).unwrap(), 6);
        let b = log_of(&mut Session::new(tiny()).unwrap(), 6);
        assert_eq!(a, b);
        let recs: Vec<Record> = a
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(
            recs.iter()
                .filter(|r| matches!(r, Record::Train { .. }))
                .count(),
            3
        );
        assert!(matches!(recs.last(), Some(Record::Eval { step: 6, .. })));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut full = Session::new(tiny()).unwrap();
        let full_log = log_of(&mut full, 6);
        let mut first = Session::new(tiny()).unwrap();
        log_of(&mut first, 4);
        let mut bytes = Vec::new();
        first.checkpoint().write_to(&mut bytes).unwrap();
        let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let mut second = Session::resume(tiny(), &ck).unwrap();
        let tail = log_of(&mut second, 6);
        assert_eq!(second.workspace().params16, full.workspace().params16);
        // The arena high-water mark is per session, so it is left out.
        let strip = |log: &str| -> Vec<Record> {
            log.lines()
                .map(|l| match serde_json::from_str(l).unwrap() {
                    Record::Train {
                        arena_high_water: _,
                        step,
                        loss,
                        tokens,
                        accuracy,
                        lr,
                        tokens_per_sec,
                        arena_capacity,
                        skipped,
                    } => Record::Train {
                        arena_high_water: 0,
                        step,
                        loss,
                        tokens,
                        accuracy,
                        lr,
                        tokens_per_sec,
                        arena_capacity,
                        skipped,
                    },
                    r => r,
                })
                .collect()
        };
        let (full, tail) = (strip(&full_log), strip(&tail));
        assert_eq!(full[full.len() - tail.len()..], tail[..]);
    }

    #[test]
    fn arena_is_never_regrown() {
        let mut s = Session::new(tiny()).unwrap();
        log_of(&mut s, 6);
        let st = s.arena_stats();
        assert_eq!(st.reallocations, 0);
        assert!(st.touched_high_water <= s.capacity().bound());
        assert_eq!(s.eval_arena_stats().reallocations, 0);
    }

    #[test]
    fn exhausted_skip_budget_fails() {
        let mut c = tiny();
        c.train.skip_budget = 1;
        let mut s = Session::new(c).unwrap();
        // Poison one weight so every gradient turns non-finite.
        s.ws.params16[0] = crate::numerics::Half::from_f32(f32::INFINITY);
        assert!(s.train_step().unwrap().skipped);
        assert_eq!(s.step(), 1);
        assert!(matches!(
            s.train_step(),
            Err(Error::NonFiniteGradient { .. })
        ));
    }
}
