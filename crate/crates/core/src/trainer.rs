//! AdamW training loop, checkpoints and the per-step log.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::corpus::{LanguageSuite, ParallelExample};
use crate::error::{Error, Result};
use crate::model::{LoraConfig, ModelConfig, ModelParams};
use crate::objective::{batch_loss, LossBreakdown};
use crate::prompt::{pick_strategy, render, render_copy, PromptRendering, PromptStrategy, StrategyMode};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Vanilla,
    Xconst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Consistency weight; ignored in vanilla mode.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::strategy_mode")]
    pub strategy_mode: StrategyMode,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    /// Defaults to 3e-4 for full training and 1e-3 with LoRA.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::betas")]
    pub betas: (f64, f64),
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: Option<f64>,
    /// Linear warmup length in steps; 0 disables warmup.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Stop after this many optimizer steps in total (counting resumed ones).
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use crate::prompt::{PromptStrategy, StrategyMode};

    pub fn alpha() -> f64 {
        0.1
    }
    pub fn strategy_mode() -> StrategyMode {
        StrategyMode::Fixed(PromptStrategy::TDec)
    }
    pub fn weight_decay() -> f64 {
        0.01
    }
    pub fn betas() -> (f64, f64) {
        (0.9, 0.999)
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn epochs() -> usize {
        10
    }
    pub fn grad_clip() -> Option<f64> {
        Some(1.0)
    }
}

pub const DEFAULT_LR_FULL: f64 = 3e-4;
pub const DEFAULT_LR_LORA: f64 = 1e-3;

impl TrainConfig {
    pub fn new(mode: TrainMode, seed: u64) -> Self {
        Self {
            mode,
            alpha: defaults::alpha(),
            strategy_mode: defaults::strategy_mode(),
            lora: None,
            lr: None,
            weight_decay: defaults::weight_decay(),
            betas: defaults::betas(),
            adam_eps: defaults::adam_eps(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            grad_clip: defaults::grad_clip(),
            warmup_steps: 0,
            max_steps: None,
            seed,
        }
    }

    /// The consistency weight actually applied.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            TrainMode::Vanilla => 0.0,
            TrainMode::Xconst => self.alpha,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(if self.lora.is_some() { DEFAULT_LR_LORA } else { DEFAULT_LR_FULL })
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.effective_lr(),
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let lr = self.effective_lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {lr}"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if let Some(l) = self.lora {
            if l.rank == 0 {
                return bad("LoRA rank must be at least 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments, index-aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .entries()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(e, (m, v))| m.shape() == e.tensor.shape() && v.shape() == e.tensor.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("optimizer state does not match the parameter layout".into()))
        }
    }
}

/// One decoupled-weight-decay Adam update of every trainable entry:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`, with decay only where `decay` is set.
pub fn adamw_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    state.check(store)?;
    if grads.len() != store.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (e, g) in store.entries().iter().zip(grads) {
        if g.shape() != e.tensor.shape() {
            return Err(Error::Contract(format!(
                "gradient for `{}` has shape {:?}, parameter has {:?}",
                e.name,
                g.shape(),
                e.tensor.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, e) in store.entries_mut().iter_mut().enumerate() {
        if !e.trainable {
            continue;
        }
        let wd = if e.decay { hyper.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((theta, &g), m), v) in e.tensor.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + wd * *theta);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Example indices for one epoch: a shuffle keyed by `(seed, epoch)`, cut into
/// batches of `batch_size` with the short remainder kept last.
pub fn make_batches(num_examples: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if num_examples == 0 {
        return Err(Error::NoData("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..num_examples).collect();
    order.shuffle(&mut seeding::stream(seed, seeding::DOMAIN_SHUFFLE, epoch as u64));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub alpha: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub wall_ms: u64,
    pub config: TrainConfig,
}

pub const LOG_HEADER: &str = "step,ce,kl,total,alpha,grad_norm,wall_ms";

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{LOG_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.10},{:.10},{:.10},{},{:.10},{}",
                r.step, r.ce, r.kl, r.total, r.alpha, r.grad_norm, r.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn ce_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ce).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: AdamState,
    pub log: TrainLog,
}

struct Rendered {
    direct: Vec<PromptRendering>,
    copy: Option<Vec<PromptRendering>>,
}

fn render_all(dataset: &[ParallelExample], suite: &LanguageSuite, config: &TrainConfig) -> Result<Rendered> {
    let strategies: Vec<PromptStrategy> =
        (0..dataset.len()).map(|i| pick_strategy(config.strategy_mode, config.seed, i)).collect();
    let direct = dataset
        .iter()
        .zip(&strategies)
        .map(|(e, &s)| render(s, suite, e.src_lang, e.tgt_lang, &e.src_tokens, Some(&e.tgt_tokens)))
        .collect::<Result<Vec<_>>>()?;
    let copy = if config.effective_alpha() > 0.0 {
        Some(
            dataset
                .iter()
                .zip(&strategies)
                .map(|(e, &s)| render_copy(s, suite, e.tgt_lang, &e.tgt_tokens))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(Rendered { direct, copy })
}

/// Trains from scratch: attaches adapters if requested and starts a fresh
/// optimizer state.
pub fn train(
    params: ModelParams,
    dataset: &[ParallelExample],
    suite: &LanguageSuite,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut params = params;
    if let Some(lora) = config.lora {
        if params.lora().is_none() {
            params.attach_lora(lora, config.seed)?;
        }
    }
    let state = AdamState::new(params.store());
    train_from(params, state, dataset, suite, config)
}

/// Continues training from `state`. Batches already consumed by `state.step`
/// are skipped, so a resumed run follows the same trajectory as an unbroken one.
pub fn train_from(
    mut params: ModelParams,
    mut state: AdamState,
    dataset: &[ParallelExample],
    suite: &LanguageSuite,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::NoData("training set is empty".into()));
    }
    if config.lora.is_some() != params.lora().is_some() {
        return Err(Error::State("LoRA setting differs between config and model".into()));
    }
    if suite.vocab_size() != params.config().vocab_size {
        return Err(Error::InvalidConfig(format!(
            "suite vocab {} differs from model vocab {}",
            suite.vocab_size(),
            params.config().vocab_size
        )));
    }
    state.check(params.store())?;
    let rendered = render_all(dataset, suite, config)?;
    let alpha = config.effective_alpha();
    let hyper = config.adam();
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut step = 0usize;
    let resume_at = state.step as usize;

    'epochs: for epoch in 0..config.epochs {
        for batch in make_batches(dataset.len(), config.batch_size, config.seed, epoch)? {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            step += 1;
            if step <= resume_at {
                continue;
            }
            let t0 = Instant::now();
            let lr = if config.warmup_steps > 0 {
                hyper.lr * (step as f64 / config.warmup_steps as f64).min(1.0)
            } else {
                hyper.lr
            };
            let nan = |b: &[usize]| Error::NonFiniteLoss { step, lr, batch: b.to_vec() };
            let direct: Vec<&PromptRendering> = batch.iter().map(|&i| &rendered.direct[i]).collect();
            let copies: Option<Vec<&PromptRendering>> =
                rendered.copy.as_ref().map(|c| batch.iter().map(|&i| &c[i]).collect());

            let mut g = Graph::new();
            let vars = params.store().bind(&mut g)?;
            let loss = match batch_loss(&mut g, &vars, &params, &direct, copies.as_deref(), alpha) {
                Err(Error::NonFinite(_)) => return Err(nan(&batch)),
                other => other?,
            };
            if !loss.breakdown.total.is_finite() {
                return Err(nan(&batch));
            }
            let grads = match g.backward(loss.total) {
                Err(Error::NonFinite(_)) => return Err(nan(&batch)),
                other => other?,
            };
            let mut grads = params.store().collect_grads(&grads, &vars);
            let grad_norm = match config.grad_clip {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => global_norm(&grads),
            };
            if !grad_norm.is_finite() {
                return Err(nan(&batch));
            }
            adamw_step(params.store_mut(), &grads, &mut state, &AdamHyper { lr, ..hyper })?;
            let LossBreakdown { ce, kl, total, .. } = loss.breakdown;
            log::debug!("step {step} epoch {epoch} ce {ce:.5} kl {kl:.5} |g| {grad_norm:.4}");
            rows.push(LogRow { step, ce, kl, total, alpha, grad_norm, wall_ms: t0.elapsed().as_millis() as u64 });
        }
    }
    let wall_ms = start.elapsed().as_millis() as u64;
    Ok(TrainOutcome { params, state, log: TrainLog { rows, wall_ms, config: config.clone() } })
}

const MAGIC: &[u8; 8] = b"XCONSTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    lora: Option<LoraConfig>,
    train: Option<TrainConfig>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub state: Option<AdamState>,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    /// Rejects checkpoints built for a different vocabulary.
    pub fn expect_vocab(&self, vocab_size: usize) -> Result<()> {
        let v = self.params.config().vocab_size;
        if v != vocab_size {
            return Err(Error::InvalidConfig(format!("checkpoint vocab {v} differs from expected {vocab_size}")));
        }
        Ok(())
    }
}

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_floats(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    state: Option<&AdamState>,
    train: Option<&TrainConfig>,
) -> Result<()> {
    if let Some(s) = state {
        s.check(params.store())?;
    }
    let meta = CheckpointMeta { model: params.config().clone(), lora: params.lora(), train: train.cloned() };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u64(&mut buf, json.len() as u64);
    buf.extend_from_slice(&json);
    let entries = params.store().entries();
    put_u64(&mut buf, entries.len() as u64);
    for e in entries {
        put_u32(&mut buf, e.name.len() as u32);
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.trainable as u8);
        buf.push(e.decay as u8);
        put_u32(&mut buf, e.tensor.ndim() as u32);
        for &d in e.tensor.shape() {
            put_u64(&mut buf, d as u64);
        }
        put_floats(&mut buf, e.tensor.data());
    }
    match state {
        None => buf.push(0),
        Some(s) => {
            buf.push(1);
            put_u64(&mut buf, s.step);
            for (m, v) in s.m.iter().zip(&s.v) {
                put_floats(&mut buf, m.data());
                put_floats(&mut buf, v.data());
            }
        }
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name =
        path.file_name().ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        Ok(self.take(bytes)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("invalid flag byte {b}"))),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let json_len = r.len()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let n = r.len()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let trainable = r.flag()?;
        let decay = r.flag()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let data = r.floats(numel)?;
        let i = store.push(name, Tensor::new(shape, data)?, decay);
        store.entries_mut()[i].trainable = trainable;
    }
    let state = if r.flag()? {
        let step = r.u64()?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for e in store.entries() {
            let shape = e.tensor.shape().to_vec();
            m.push(Tensor::new(shape.clone(), r.floats(e.tensor.numel())?)?);
            v.push(Tensor::new(shape, r.floats(e.tensor.numel())?)?);
        }
        Some(AdamState { step, m, v })
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let params = ModelParams::from_store(meta.model, meta.lora, store)?;
    Ok(Checkpoint { params, state, train: meta.train })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_parallel_dataset, sample_concept_corpus};
    use crate::prompt::PromptStrategy;

    fn store_with(values: &[f64], decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap(), decay);
        s
    }

    fn hyper(lr: f64, wd: f64) -> AdamHyper {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn adamw_first_step_from_zero() {
        let mut s = store_with(&[0.0], true);
        let mut st = AdamState::new(&s);
        adamw_step(&mut s, &[Tensor::full(&[1], 1.0)], &mut st, &hyper(1e-3, 0.0)).unwrap();
        let delta = s.tensor(0).data()[0];
        assert!((delta - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-18);
        assert!((delta - -9.99999990e-4).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_grad_and_decay() {
        let mut s = store_with(&[0.5, -2.0], false);
        let mut st = AdamState::new(&s);
        adamw_step(&mut s, &[Tensor::zeros(&[2])], &mut st, &hyper(1e-2, 0.1)).unwrap();
        assert_eq!(s.tensor(0).data(), &[0.5, -2.0]);

        let mut s = store_with(&[0.5, -2.0], true);
        let mut st = AdamState::new(&s);
        adamw_step(&mut s, &[Tensor::zeros(&[2])], &mut st, &hyper(1e-2, 0.1)).unwrap();
        let shrink = 1.0 - 1e-2 * 0.1;
        assert!((s.tensor(0).data()[0] - 0.5 * shrink).abs() < 1e-15);
        assert!((s.tensor(0).data()[1] + 2.0 * shrink).abs() < 1e-15);

        let mut st = AdamState::new(&s);
        assert!(matches!(
            adamw_step(&mut s, &[Tensor::zeros(&[3])], &mut st, &hyper(1e-2, 0.1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::full(&[3], 2.0), Tensor::full(&[2], -1.0)];
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - 14f64.sqrt()).abs() < 1e-12);
        assert!(global_norm(&g) <= 1.0 + 1e-9);
        let mut small = vec![Tensor::full(&[2], 0.1)];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1, 0.1]);
    }

    #[test]
    fn batches_partition_and_repeat() {
        let b = make_batches(10, 4, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, make_batches(10, 4, 3, 0).unwrap());
        assert_ne!(b, make_batches(10, 4, 3, 1).unwrap());
        assert!(matches!(make_batches(0, 4, 3, 0), Err(Error::NoData(_))));
    }

    fn toy_task(n: usize) -> (LanguageSuite, Vec<ParallelExample>, ModelParams) {
        let suite = LanguageSuite::build(3, 10, 0, 2).unwrap();
        let corpus = sample_concept_corpus(&suite, n, (2, 4), 1, 5).unwrap();
        let data = make_parallel_dataset(&corpus, &suite, &suite.center_directions(), false, 6).unwrap();
        let cfg = ModelConfig {
            vocab_size: suite.vocab_size(),
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_seq_len: 32,
        };
        (suite, data, ModelParams::init(&cfg, 1).unwrap())
    }

    fn quick(mode: TrainMode, alpha: f64) -> TrainConfig {
        TrainConfig {
            alpha,
            lr: Some(3e-3),
            batch_size: 8,
            epochs: 2,
            strategy_mode: StrategyMode::Fixed(PromptStrategy::TDec),
            ..TrainConfig::new(mode, 9)
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (suite, data, init) = toy_task(40);
        let cfg = TrainConfig { epochs: 6, ..quick(TrainMode::Vanilla, 0.0) };
        let out = train(init, &data, &suite, &cfg).unwrap();
        let ce = out.log.ce_curve();
        assert_eq!(ce.len(), 6 * data.len().div_ceil(8));
        let first: f64 = ce[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = ce[ce.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn vanilla_equals_xconst_at_alpha_zero() {
        let (suite, data, init) = toy_task(20);
        let a = train(init.clone(), &data, &suite, &quick(TrainMode::Vanilla, 0.3)).unwrap();
        let b = train(init, &data, &suite, &quick(TrainMode::Xconst, 0.0)).unwrap();
        assert_eq!(a.log.ce_curve(), b.log.ce_curve());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn xconst_reports_kl() {
        let (suite, data, init) = toy_task(12);
        let out = train(init, &data, &suite, &quick(TrainMode::Xconst, 0.25)).unwrap();
        for r in &out.log.rows {
            assert!(r.kl >= -1e-9);
            assert!((r.total - r.ce - 0.25 * r.kl).abs() < 1e-12);
        }
        assert!(out.log.rows.iter().any(|r| r.kl > 0.0));
    }

    #[test]
    fn different_seeds_differ_at_first_step() {
        let (suite, data, init) = toy_task(20);
        let a = train(init.clone(), &data, &suite, &quick(TrainMode::Vanilla, 0.0)).unwrap();
        let b = train(init, &data, &suite, &TrainConfig { seed: 10, ..quick(TrainMode::Vanilla, 0.0) }).unwrap();
        assert_ne!(a.log.rows[0].ce, b.log.rows[0].ce);
    }

    #[test]
    fn lora_training_leaves_base_untouched() {
        let (suite, data, init) = toy_task(16);
        let cfg = TrainConfig { lora: Some(LoraConfig::new(2)), ..quick(TrainMode::Xconst, 0.1) };
        let out = train(init.clone(), &data, &suite, &cfg).unwrap();
        for e in init.store().entries() {
            assert_eq!(out.params.store().get(&e.name).unwrap(), &e.tensor, "{}", e.name);
        }
        let b = out.params.store().get("layers.0.ff.lora_b").unwrap();
        assert!(b.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let (suite, data, mut init) = toy_task(8);
        let i = init.store().index_of("tok_emb").unwrap();
        init.store_mut().entries_mut()[i].tensor.data_mut().iter_mut().for_each(|v| *v = 1e200);
        let err = train(init, &data, &suite, &quick(TrainMode::Vanilla, 0.0)).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, batch, .. } => {
                assert_eq!(step, 1);
                assert!(!batch.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let (suite, data, init) = toy_task(8);
        let cfg = TrainConfig { lora: Some(LoraConfig::new(2)), ..quick(TrainMode::Xconst, 0.1) };
        let out = train(init, &data, &suite, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &out.params, Some(&out.state), Some(&cfg)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params, out.params);
        assert_eq!(ck.state.as_ref(), Some(&out.state));
        assert_eq!(ck.train.as_ref(), Some(&cfg));
        ck.expect_vocab(suite.vocab_size()).unwrap();
        assert!(matches!(ck.expect_vocab(suite.vocab_size() + 1), Err(Error::InvalidConfig(_))));

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        let mut bumped = bytes.clone();
        bumped[8] = 99;
        fs::write(&path, &bumped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn resumed_run_matches_unbroken_run() {
        let (suite, data, init) = toy_task(20);
        let full_cfg = TrainConfig { max_steps: Some(6), ..quick(TrainMode::Xconst, 0.1) };
        let full = train(init.clone(), &data, &suite, &full_cfg).unwrap();

        let half = train(init, &data, &suite, &TrainConfig { max_steps: Some(3), ..full_cfg.clone() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        save_checkpoint(&path, &half.params, Some(&half.state), Some(&full_cfg)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let rest = train_from(ck.params, ck.state.unwrap(), &data, &suite, &full_cfg).unwrap();

        assert_eq!(rest.log.rows[0].step, 4);
        let tail: Vec<f64> = full.log.rows[3..].iter().map(|r| r.total).collect();
        assert_eq!(rest.log.rows.iter().map(|r| r.total).collect::<Vec<_>>(), tail);
        assert_eq!(rest.params, full.params);
    }

    #[test]
    fn log_csv_layout() {
        let (suite, data, init) = toy_task(8);
        let out = train(init, &data, &suite, &TrainConfig { epochs: 1, ..quick(TrainMode::Vanilla, 0.0) }).unwrap();
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), out.log.rows.len() + 1);
        assert!(lines[1].starts_with("1,"));
    }
}
