//! End-to-end experiment driver behind the command-line tool.
//!
//! Every artifact is a pure function of an [`ExperimentConfig`]: data is
//! regenerated from the config rather than read back, and each output
//! directory carries the fully resolved config it was produced from.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    alignment_score, collect_representations, pca_project, write_alignment_summary, write_coordinates, Alignment,
    DEFAULT_MULTIWAY_SENTENCES,
};
use crate::corpus::{
    filter_pairs, make_parallel_dataset, sample_distinct, write_dataset, ConceptSentence, LanguageSuite,
    ParallelExample, MIN_RESERVED,
};
use crate::decode::{write_translations, DecodeConfig, DecodeMethod, DEFAULT_BEAM_WIDTH};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DirectionKind, EvalDirections, EvalReport, ModelTranslator};
use crate::model::{ModelConfig, ModelParams};
use crate::prompt::{render, PromptStrategy, StrategyMode};
use crate::seeding;
use crate::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainMode, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub num_languages: usize,
    pub concept_vocab_size: usize,
    #[serde(default)]
    pub center: usize,
    #[serde(default = "default_reserved")]
    pub reserved_count: usize,
}

fn default_reserved() -> usize {
    MIN_RESERVED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SupervisedSpec {
    /// Every direction into and out of the center language.
    CenterCentric,
    /// Center-centric directions plus the listed extra pairs.
    CenterPlus(Vec<(usize, usize)>),
    Explicit(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub train_sentences: usize,
    pub test_sentences: usize,
    #[serde(default = "default_multiway")]
    pub multiway_sentences: usize,
    pub len_min: usize,
    pub len_max: usize,
    #[serde(default = "default_order")]
    pub markov_order: usize,
    #[serde(default = "default_true")]
    pub reorder: bool,
    #[serde(default = "default_supervised")]
    pub supervised: SupervisedSpec,
    #[serde(default = "default_true")]
    pub dedup: bool,
    #[serde(default = "default_true")]
    pub langid_filter: bool,
}

fn default_multiway() -> usize {
    DEFAULT_MULTIWAY_SENTENCES
}
fn default_order() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_supervised() -> SupervisedSpec {
    SupervisedSpec::CenterCentric
}

/// Model shape; the vocabulary size comes from the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "n_heads")]
    pub n_heads: usize,
    #[serde(default = "n_layers")]
    pub n_layers: usize,
    #[serde(default = "d_ff")]
    pub d_ff: usize,
    #[serde(default = "max_seq_len")]
    pub max_seq_len: usize,
}

fn d_model() -> usize {
    ModelConfig::new(0).d_model
}
fn n_heads() -> usize {
    ModelConfig::new(0).n_heads
}
fn n_layers() -> usize {
    ModelConfig::new(0).n_layers
}
fn d_ff() -> usize {
    ModelConfig::new(0).d_ff
}
fn max_seq_len() -> usize {
    ModelConfig::new(0).max_seq_len
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { d_model: d_model(), n_heads: n_heads(), n_layers: n_layers(), d_ff: d_ff(), max_seq_len: max_seq_len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSpec {
    #[serde(default = "default_method")]
    pub method: DecodeMethod,
    /// Defaults to `2 * len_max + 4`.
    #[serde(default)]
    pub max_new_tokens: Option<usize>,
    #[serde(default)]
    pub length_penalty: f64,
}

fn default_method() -> DecodeMethod {
    DecodeMethod::Beam { width: DEFAULT_BEAM_WIDTH }
}

impl Default for DecodeSpec {
    fn default() -> Self {
        Self { method: default_method(), max_new_tokens: None, length_penalty: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Prompt used at test time; defaults to the fixed training strategy.
    #[serde(default)]
    pub strategy: Option<PromptStrategy>,
    #[serde(default = "default_true")]
    pub pivot: bool,
    /// Fixed target language of the representation study; defaults to the
    /// highest-numbered non-center language.
    #[serde(default)]
    pub analysis_tgt_lang: Option<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { strategy: None, pivot: true, analysis_tgt_lang: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Defaults to the configured training strategy.
    #[serde(default)]
    pub strategies: Vec<PromptStrategy>,
    #[serde(default = "default_lora_axis")]
    pub lora: Vec<bool>,
    /// Defaults to the top-level seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.25]
}
fn default_lora_axis() -> Vec<bool> {
    vec![false]
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { alphas: default_alphas(), strategies: Vec::new(), lora: default_lora_axis(), seeds: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub suite: SuiteSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
}

/// Sub-seed indices under the experiment seed.
mod stream {
    pub const SUITE: u64 = 0;
    pub const TRAIN_TEXT: u64 = 1;
    pub const TEST_TEXT: u64 = 2;
    pub const MULTIWAY_TEXT: u64 = 3;
    pub const PAIRS: u64 = 4;
    pub const INIT: u64 = 5;
}

fn sub_seed(seed: u64, index: u64) -> u64 {
    seeding::key(seed, seeding::DOMAIN_EXPERIMENT, index)
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Copy with the seed replaced everywhere it is used.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    pub fn build_suite(&self) -> Result<LanguageSuite> {
        let s = &self.suite;
        LanguageSuite::build_with_reserved(
            s.num_languages,
            s.concept_vocab_size,
            s.center,
            sub_seed(self.seed, stream::SUITE),
            s.reserved_count,
        )
    }

    pub fn supervised(&self, suite: &LanguageSuite) -> Result<Vec<(usize, usize)>> {
        let mut dirs = match &self.data.supervised {
            SupervisedSpec::CenterCentric => suite.center_directions(),
            SupervisedSpec::CenterPlus(extra) => {
                let mut d = suite.center_directions();
                d.extend(extra.iter().copied().filter(|e| !d.contains(e)).collect::<Vec<_>>());
                d
            }
            SupervisedSpec::Explicit(d) => d.clone(),
        };
        for &(s, t) in &dirs {
            suite.check_lang(s)?;
            suite.check_lang(t)?;
            if s == t {
                return Err(Error::InvalidConfig(format!("supervised direction {s}→{t} is a copy direction")));
            }
        }
        let mut seen = HashSet::new();
        dirs.retain(|d| seen.insert(*d));
        if dirs.is_empty() {
            return Err(Error::InvalidConfig("no supervised directions".into()));
        }
        Ok(dirs)
    }

    pub fn model_config(&self, suite: &LanguageSuite) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: suite.vocab_size(),
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            method: self.decode.method,
            max_new_tokens: self.decode.max_new_tokens.unwrap_or(2 * self.data.len_max + 4),
            length_penalty: self.decode.length_penalty,
        }
    }

    pub fn eval_strategy(&self) -> Result<PromptStrategy> {
        match (self.eval.strategy, self.train.strategy_mode) {
            (Some(s), _) => Ok(s),
            (None, StrategyMode::Fixed(s)) => Ok(s),
            (None, StrategyMode::Diversified) => {
                Err(Error::InvalidConfig("eval.strategy is required when training is diversified".into()))
            }
        }
    }

    pub fn analysis_tgt_lang(&self) -> usize {
        self.eval.analysis_tgt_lang.unwrap_or_else(|| {
            let last = self.suite.num_languages - 1;
            if self.suite.center == last {
                last.saturating_sub(1)
            } else {
                last
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let suite = self.build_suite()?;
        self.supervised(&suite)?;
        let d = &self.data;
        if d.len_min == 0 || d.len_min > d.len_max {
            return Err(Error::InvalidConfig(format!("bad sentence length range {}..={}", d.len_min, d.len_max)));
        }
        if d.train_sentences == 0 || d.test_sentences == 0 {
            return Err(Error::InvalidConfig("train and test splits need at least one sentence".into()));
        }
        self.model_config(&suite).validate()?;
        self.train_config().validate()?;
        self.decode_config().validate()?;
        self.eval_strategy()?;
        suite.check_lang(self.analysis_tgt_lang())?;
        if self.sweep.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::InvalidConfig("sweep alphas must be finite and non-negative".into()));
        }
        // The longest rendered training prompt must fit the model context.
        let longest = PromptStrategy::ALL
            .iter()
            .map(|&s| {
                let toks = vec![suite.encode(0, 0); d.len_max];
                render(s, &suite, 0, 1, &toks, Some(&toks)).map(|r| r.token_ids.len())
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        if longest > self.model.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "prompts reach {longest} tokens but max_seq_len is {}",
                self.model.max_seq_len
            )));
        }
        Ok(())
    }
}

/// All data of one experiment, regenerated from its config.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub suite: LanguageSuite,
    pub train: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
    pub multiway: Vec<ConceptSentence>,
    pub supervised: Vec<(usize, usize)>,
    pub zero_shot: Vec<(usize, usize)>,
}

/// Samples train, test and multi-way splits that share no concept sentence.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    cfg.validate()?;
    let suite = cfg.build_suite()?;
    let d = &cfg.data;
    let len = (d.len_min, d.len_max);
    let mut used = HashSet::new();
    let mut split = |n: usize, idx: u64| -> Result<Vec<ConceptSentence>> {
        let s = sample_distinct(&suite, n, len, d.markov_order, sub_seed(cfg.seed, idx), &used)?;
        used.extend(s.iter().cloned());
        Ok(s)
    };
    let train_text = split(d.train_sentences, stream::TRAIN_TEXT)?;
    let test_text = split(d.test_sentences, stream::TEST_TEXT)?;
    let multiway = split(d.multiway_sentences.max(1), stream::MULTIWAY_TEXT)?;

    let supervised = cfg.supervised(&suite)?;
    let zero_shot = suite.complement(&supervised);
    let pairs_seed = sub_seed(cfg.seed, stream::PAIRS);
    let train = make_parallel_dataset(&train_text, &suite, &supervised, d.reorder, pairs_seed)?;
    let train = filter_pairs(&suite, train, usize::MAX, d.dedup, d.langid_filter);
    if train.is_empty() {
        return Err(Error::NoData("filtering removed every training pair".into()));
    }
    let test = make_parallel_dataset(&test_text, &suite, &suite.all_directions(), d.reorder, pairs_seed)?;
    Ok(ExperimentData { suite, train, test, multiway, supervised, zero_shot })
}

pub fn init_model(cfg: &ExperimentConfig, suite: &LanguageSuite) -> Result<ModelParams> {
    ModelParams::init(&cfg.model_config(suite), sub_seed(cfg.seed, stream::INIT))
}

pub fn train_model(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<TrainOutcome> {
    let params = init_model(cfg, &data.suite)?;
    train(params, &data.train, &data.suite, &cfg.train_config())
}

pub fn evaluate_model(cfg: &ExperimentConfig, data: &ExperimentData, params: &ModelParams) -> Result<EvalReport> {
    let translator =
        ModelTranslator { params, suite: &data.suite, strategy: cfg.eval_strategy()?, decode: cfg.decode_config() };
    let dirs = EvalDirections {
        supervised: data.supervised.clone(),
        zero_shot: data.zero_shot.clone(),
        pivot: cfg.eval.pivot,
    };
    evaluate(&translator, &data.suite, &data.test, &dirs)
}

#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub reps: crate::analysis::RepresentationSet,
    pub projection: crate::analysis::Projection,
    pub alignment: Alignment,
}

pub fn analyze_model(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    params: &ModelParams,
    label: &str,
) -> Result<AnalysisResult> {
    let reps = collect_representations(
        params,
        &data.suite,
        &data.multiway,
        cfg.eval_strategy()?,
        cfg.analysis_tgt_lang(),
        cfg.data.reorder,
        label,
    )?;
    let projection = pca_project(&reps.flatten(), 2)?;
    let alignment = alignment_score(&reps)?;
    Ok(AnalysisResult { reps, projection, alignment })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Writes `suite.json`, `train.tsv`, `test.tsv` and `multiway.txt`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentData> {
    let data = prepare_data(cfg)?;
    echo_config(cfg, out)?;
    fs::write(out.join("suite.json"), data.suite.to_json()?)?;
    write_dataset(create(&out.join("train.tsv"))?, &data.train)?;
    write_dataset(create(&out.join("test.tsv"))?, &data.test)?;
    let lines: Vec<String> =
        data.multiway.iter().map(|c| c.concepts.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")).collect();
    fs::write(out.join("multiway.txt"), lines.join("\n") + "\n")?;
    log::info!(
        "{} training pairs, {} test pairs, {} multi-way sentences",
        data.train.len(),
        data.test.len(),
        data.multiway.len()
    );
    Ok(data)
}

/// Trains and writes `model.ckpt` and `train_log.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    let data = prepare_data(cfg)?;
    echo_config(cfg, out)?;
    let outcome = train_model(cfg, &data)?;
    let tc = cfg.train_config();
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.params, Some(&outcome.state), Some(&tc))?;
    outcome.log.write_csv(create(&out.join("train_log.csv"))?)?;
    log::info!("trained {} steps in {} ms", outcome.log.rows.len(), outcome.log.wall_ms);
    Ok(outcome)
}

fn load_params(checkpoint: &Path, suite: &LanguageSuite) -> Result<ModelParams> {
    let ck = load_checkpoint(checkpoint)?;
    ck.expect_vocab(suite.vocab_size())?;
    Ok(ck.params)
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    report.write_csv(create(&out.join("eval.csv"))?)?;
    fs::write(out.join("eval.md"), report.to_markdown())?;
    let rows: Vec<_> = report.translations.iter().map(|t| (t.src, t.tgt, t.hypothesis.clone())).collect();
    write_translations(create(&out.join("translations.tsv"))?, &rows)?;
    Ok(())
}

/// Writes `eval.csv`, `eval.md` and `translations.tsv`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let data = prepare_data(cfg)?;
    let params = load_params(checkpoint, &data.suite)?;
    echo_config(cfg, out)?;
    let report = evaluate_model(cfg, &data, &params)?;
    write_report(&report, out)?;
    Ok(report)
}

/// Writes `coords.csv` and `alignment.csv`.
pub fn cmd_analyze(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<AnalysisResult> {
    let data = prepare_data(cfg)?;
    let params = load_params(checkpoint, &data.suite)?;
    echo_config(cfg, out)?;
    // The run directory names the checkpoint; absolute paths would break reproducibility.
    let label = checkpoint
        .parent()
        .and_then(Path::file_name)
        .or_else(|| checkpoint.file_name())
        .map_or_else(|| checkpoint.display().to_string(), |n| n.to_string_lossy().into_owned());
    let res = analyze_model(cfg, &data, &params, &label)?;
    write_coordinates(create(&out.join("coords.csv"))?, &res.reps, &res.projection)?;
    write_alignment_summary(create(&out.join("alignment.csv"))?, &[(label, res.reps.strategy, res.alignment.score)])?;
    Ok(res)
}

/// One point of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub strategy: PromptStrategy,
    pub alpha: f64,
    pub lora: bool,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_a{}_{}_s{}", self.strategy.name(), self.alpha, if self.lora { "lora" } else { "full" }, self.seed)
    }

    /// The base config specialized to this cell. `alpha == 0` trains vanilla.
    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.with_seed(self.seed);
        c.train.mode = if self.alpha == 0.0 { TrainMode::Vanilla } else { TrainMode::Xconst };
        c.train.alpha = self.alpha;
        c.train.strategy_mode = StrategyMode::Fixed(self.strategy);
        c.eval.strategy = Some(self.strategy);
        // A cell is a one-point sweep, so its hash ignores the rest of the grid.
        c.sweep = SweepSpec {
            alphas: vec![self.alpha],
            strategies: vec![self.strategy],
            lora: vec![self.lora],
            seeds: vec![self.seed],
        };
        c.train.lora = match (self.lora, base.train.lora) {
            (false, _) => None,
            (true, Some(l)) => Some(l),
            (true, None) => Some(crate::model::LoraConfig::new(16)),
        };
        c
    }
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let s = &cfg.sweep;
    let strategies = if s.strategies.is_empty() { vec![cfg.eval_strategy()?] } else { s.strategies.clone() };
    let seeds = if s.seeds.is_empty() { vec![cfg.seed] } else { s.seeds.clone() };
    if s.alphas.is_empty() || s.lora.is_empty() {
        return Err(Error::InvalidConfig("sweep axes must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for &strategy in &strategies {
        for &alpha in &s.alphas {
            for &lora in &s.lora {
                for &seed in &seeds {
                    cells.push(Cell { strategy, alpha, lora, seed });
                }
            }
        }
    }
    Ok(cells)
}

const DONE_MARKER: &str = "DONE";

/// Trains and evaluates one cell into `dir` unless a marker with the same
/// config hash is already there.
pub fn run_cell(cfg: &ExperimentConfig, dir: &Path) -> Result<EvalReport> {
    let hash = cfg.hash()?;
    let marker = dir.join(DONE_MARKER);
    if fs::read_to_string(&marker).is_ok_and(|h| h.trim() == hash) {
        if let Ok(f) = fs::File::open(dir.join("eval.csv")) {
            log::info!("{} is up to date", dir.display());
            return EvalReport::read_csv(BufReader::new(f));
        }
    }
    let _ = fs::remove_file(&marker);
    let outcome = cmd_train(cfg, dir)?;
    let data = prepare_data(cfg)?;
    let report = evaluate_model(cfg, &data, &outcome.params)?;
    write_report(&report, dir)?;
    fs::write(&marker, hash)?;
    // Re-read so fresh and cached cells aggregate identical numbers.
    EvalReport::read_csv(BufReader::new(fs::File::open(dir.join("eval.csv"))?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub strategy: PromptStrategy,
    pub alpha: f64,
    pub lora: bool,
    pub split: DirectionKind,
    pub bleu: f64,
    pub off_target: f64,
    pub exact_match: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<(String, String)>,
}

pub const SWEEP_HEADER: &str = "strategy,alpha,lora,split,bleu,off_target,exact_match,n_seeds";

/// Runs every cell (on `parallel` worker threads), then writes `sweep.csv`
/// averaging each (strategy, alpha, lora, split) over seeds. Failed cells are
/// recorded and skipped.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, parallel: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let cells = sweep_cells(cfg)?;
    echo_config(cfg, out)?;
    let results: Mutex<Vec<Option<Result<EvalReport>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(i) else { break };
        let dir = out.join("cells").join(cell.name());
        log::info!("cell {}/{}: {}", i + 1, cells.len(), cell.name());
        let r = run_cell(&cell.config(cfg), &dir);
        if let Err(e) = &r {
            log::warn!("cell {} failed: {e}", cell.name());
        }
        results.lock().expect("results lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..parallel.max(1) {
            s.spawn(work);
        }
    });
    let results = results.into_inner().expect("results lock");

    let mut outcome = SweepOutcome::default();
    // (strategy index, alpha index, lora, split) -> per-seed (bleu, off_target, exact_match)
    type Groups = BTreeMap<(usize, usize, bool, DirectionKind), Vec<(f64, f64, f64)>>;
    let mut groups = Groups::new();
    for (idx, (cell, r)) in cells.iter().zip(results).enumerate() {
        match r.expect("every cell ran") {
            Err(e) => outcome.failures.push((cell.name(), e.to_string())),
            Ok(report) => {
                let si = PromptStrategy::ALL.iter().position(|&s| s == cell.strategy).expect("known strategy");
                let ai = cfg.sweep.alphas.iter().position(|&a| a == cell.alpha).unwrap_or(idx);
                for a in &report.aggregates {
                    groups.entry((si, ai, cell.lora, a.kind)).or_default().push((a.bleu, a.off_target, a.exact_match));
                }
            }
        }
    }
    for ((si, ai, lora, split), v) in groups {
        let n = v.len() as f64;
        outcome.rows.push(SweepRow {
            strategy: PromptStrategy::ALL[si],
            alpha: cfg.sweep.alphas[ai],
            lora,
            split,
            bleu: v.iter().map(|x| x.0).sum::<f64>() / n,
            off_target: v.iter().map(|x| x.1).sum::<f64>() / n,
            exact_match: v.iter().map(|x| x.2).sum::<f64>() / n,
            n_seeds: v.len(),
        });
    }
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in &outcome.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            r.strategy.name(),
            r.alpha,
            r.lora,
            r.split.name(),
            r.bleu,
            r.off_target,
            r.exact_match,
            r.n_seeds
        );
    }
    fs::write(out.join("sweep.csv"), csv)?;
    let done: Vec<PathBuf> = cells
        .iter()
        .filter(|c| !outcome.failures.iter().any(|(n, _)| *n == c.name()))
        .map(|c| out.join("cells").join(c.name()))
        .collect();
    fs::write(out.join("report.md"), cmd_report(&done).0)?;
    if !outcome.failures.is_empty() {
        let lines: Vec<String> = outcome.failures.iter().map(|(c, e)| format!("{c}\t{e}")).collect();
        fs::write(out.join("failures.tsv"), lines.join("\n") + "\n")?;
    }
    Ok(outcome)
}

/// An evaluated run found on disk.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub report: EvalReport,
}

/// Reads `config.json` and `eval.csv` from a run directory.
pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let config = ExperimentConfig::load(&dir.join("config.json"))?;
    let f = fs::File::open(dir.join("eval.csv"))
        .map_err(|e| Error::Data(format!("{}: missing eval.csv ({e})", dir.display())))?;
    let report = EvalReport::read_csv(BufReader::new(f))?;
    Ok(RunSummary { dir: dir.to_path_buf(), config, report })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct RowKey {
    strategy: String,
    lora: bool,
}

fn fmt_cell(v: Option<f64>, base: Option<f64>, decimals: usize) -> String {
    match (v, base) {
        (None, _) => String::new(),
        (Some(v), None) => format!("{v:.decimals$}"),
        (Some(v), Some(b)) => format!("{v:.decimals$} ({:+.decimals$})", v - b),
    }
}

/// Markdown comparison of vanilla and consistency-regularized runs: one row
/// per (strategy, parameters, method) averaged over seeds, with differences
/// against the matching vanilla row in parentheses.
pub fn render_report(runs: &[RunSummary]) -> String {
    type Acc = BTreeMap<DirectionKind, Vec<(f64, f64)>>;
    let mut table: BTreeMap<RowKey, BTreeMap<String, Acc>> = BTreeMap::new();
    for run in runs {
        let strategy = run.config.eval_strategy().map(|s| s.name().to_string()).unwrap_or_else(|_| "?".into());
        let key = RowKey { strategy, lora: run.config.train.lora.is_some() };
        let tc = &run.config.train;
        let method = match tc.mode {
            TrainMode::Xconst if tc.alpha > 0.0 => format!("xconst α={}", tc.alpha),
            _ => "vanilla".to_string(),
        };
        let acc = table.entry(key).or_default().entry(method).or_default();
        for a in &run.report.aggregates {
            acc.entry(a.kind).or_default().push((a.bleu, a.off_target));
        }
    }
    let mean = |acc: &Acc, k: DirectionKind, off: bool| {
        acc.get(&k)
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().map(|x| if off { x.1 } else { x.0 }).sum::<f64>() / v.len() as f64)
    };
    let mut s = String::from(
        "| Strategy | Params | Method | Supervised BLEU | Zero-Shot BLEU | Zero-Shot Off-Target | Pivot BLEU |\n\
         |---|---|---|---:|---:|---:|---:|\n",
    );
    for (key, methods) in &table {
        let vanilla = methods.get("vanilla");
        for (method, acc) in methods {
            let base = |k, off| if method == "vanilla" { None } else { vanilla.and_then(|v| mean(v, k, off)) };
            let cells = [
                fmt_cell(mean(acc, DirectionKind::Supervised, false), base(DirectionKind::Supervised, false), 2),
                fmt_cell(mean(acc, DirectionKind::ZeroShot, false), base(DirectionKind::ZeroShot, false), 2),
                fmt_cell(mean(acc, DirectionKind::ZeroShot, true), base(DirectionKind::ZeroShot, true), 3),
                fmt_cell(mean(acc, DirectionKind::Pivot, false), base(DirectionKind::Pivot, false), 2),
            ];
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                key.strategy,
                if key.lora { "lora" } else { "full" },
                method,
                cells.join(" | ")
            );
        }
    }
    s
}

/// Loads every run directory, skipping unreadable ones. Returns the report
/// and the directories that were skipped.
pub fn cmd_report(dirs: &[PathBuf]) -> (String, Vec<(PathBuf, Error)>) {
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for d in dirs {
        match load_run(d) {
            Ok(r) => runs.push(r),
            Err(e) => {
                log::warn!("skipping {}: {e}", d.display());
                skipped.push((d.clone(), e));
            }
        }
    }
    (render_report(&runs), skipped)
}
