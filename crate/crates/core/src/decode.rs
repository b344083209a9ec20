//! Greedy and beam-search decoding, direct and pivot translation.
//!
//! Decoders are generic over [`StepScorer`], which yields next-token
//! log-probabilities for a growing sequence. PAD and BOS are never generated.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::corpus::{LanguageSuite, TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Decoder, ModelParams};
use crate::prompt::{render, PromptStrategy};

pub const DEFAULT_BEAM_WIDTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeMethod {
    Greedy,
    Beam { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    pub max_new_tokens: usize,
    /// Length-normalization exponent: hypotheses are ranked by `score / len^λ`.
    #[serde(default)]
    pub length_penalty: f64,
}

impl DecodeConfig {
    /// Beam-5 with a budget of `2 * max_sentence_len + 4` tokens.
    pub fn for_max_len(max_sentence_len: usize) -> Self {
        Self {
            method: DecodeMethod::Beam { width: DEFAULT_BEAM_WIDTH },
            max_new_tokens: 2 * max_sentence_len + 4,
            length_penalty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        if let DecodeMethod::Beam { width: 0 } = self.method {
            return Err(Error::InvalidConfig("beam width must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::InvalidConfig("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

/// Source of next-token log-probabilities.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Consumes the prefix; returns the state and the log-probabilities of the
    /// first generated token.
    fn begin(&self, prefix: &[TokenId]) -> Result<(Self::State, Vec<f64>)>;

    /// Appends `token`; returns the log-probabilities of the following token.
    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f64>>;

    /// Maximum number of tokens that may follow a prefix of `prefix_len`.
    fn room(&self, prefix_len: usize) -> Result<usize>;
}

/// A transformer exposed as a [`StepScorer`] over its incremental decoder.
#[derive(Debug, Clone, Copy)]
pub struct ModelScorer<'a>(pub &'a ModelParams);

fn log_probs(mut logits: Vec<f64>) -> Vec<f64> {
    kernels::log_softmax_in_place(&mut logits);
    logits
}

impl<'a> StepScorer for ModelScorer<'a> {
    type State = Decoder<'a>;

    fn vocab_size(&self) -> usize {
        self.0.config().vocab_size
    }

    fn begin(&self, prefix: &[TokenId]) -> Result<(Decoder<'a>, Vec<f64>)> {
        if prefix.is_empty() {
            return Err(Error::EmptyInput("decoding prefix is empty".into()));
        }
        self.room(prefix.len())?;
        let mut dec = Decoder::new(self.0);
        let mut logits = Vec::new();
        for &t in prefix {
            logits = dec.push(t)?;
        }
        Ok((dec, log_probs(logits)))
    }

    fn advance(&self, state: &mut Decoder<'a>, token: TokenId) -> Result<Vec<f64>> {
        Ok(log_probs(state.push(token)?))
    }

    fn room(&self, prefix_len: usize) -> Result<usize> {
        let max = self.0.config().max_seq_len;
        if prefix_len >= max {
            return Err(Error::SeqLen { len: prefix_len + 1, max });
        }
        Ok(max - prefix_len)
    }
}

fn generable(token: TokenId) -> bool {
    token != PAD && token != BOS
}

fn check_finite(lp: &[f64]) -> Result<()> {
    if lp.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("decode"));
    }
    Ok(())
}

/// Argmax decoding; ties go to the lowest token id. Returns the generated
/// tokens without the closing EOS.
pub fn greedy_decode<S: StepScorer>(scorer: &S, prefix: &[TokenId], max_new_tokens: usize) -> Result<Vec<TokenId>> {
    let budget = max_new_tokens.min(scorer.room(prefix.len())?);
    let (mut state, mut lp) = scorer.begin(prefix)?;
    let mut out = Vec::new();
    for step in 0..budget {
        check_finite(&lp)?;
        let mut best = None::<(TokenId, f64)>;
        for (t, &v) in lp.iter().enumerate() {
            if generable(t) && best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        let (tok, _) = best.ok_or_else(|| Error::Contract("vocabulary has no generable token".into()))?;
        if tok == EOS {
            break;
        }
        out.push(tok);
        if step + 1 < budget {
            lp = scorer.advance(&mut state, tok)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hyp {
    /// Generated tokens, including the closing EOS once finished.
    tokens: Vec<TokenId>,
    score: f64,
}

/// Descending score, then lexicographically smaller sequence first.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

fn normalized(h: &Hyp, lambda: f64) -> f64 {
    if lambda == 0.0 {
        h.score
    } else {
        h.score / (h.tokens.len().max(1) as f64).powf(lambda)
    }
}

/// Beam search over summed log-probabilities.
///
/// Each step keeps the best `width - finished` expansions; expansions ending
/// in EOS retire. The search stops once `width` hypotheses have finished or
/// the budget runs out, and hypotheses still live at that point compete with
/// the finished ones. The winner maximizes `score / len^λ` (`len` counts the
/// EOS), ties going to the lexicographically smaller sequence.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    prefix: &[TokenId],
    width: usize,
    max_new_tokens: usize,
    length_penalty: f64,
) -> Result<Vec<TokenId>> {
    if width == 0 {
        return Err(Error::InvalidConfig("beam width must be at least 1".into()));
    }
    let budget = max_new_tokens.min(scorer.room(prefix.len())?);
    let (state, lp) = scorer.begin(prefix)?;
    let mut live: Vec<(Hyp, S::State, Vec<f64>)> = vec![(Hyp { tokens: Vec::new(), score: 0.0 }, state, lp)];
    let mut finished: Vec<Hyp> = Vec::new();

    for step in 0..budget {
        let slots = width - finished.len();
        let mut cands: Vec<(Hyp, usize)> = Vec::new();
        for (parent, (hyp, _, lp)) in live.iter().enumerate() {
            check_finite(lp)?;
            for (t, &v) in lp.iter().enumerate() {
                if !generable(t) || v == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(t);
                cands.push((Hyp { tokens, score: hyp.score + v }, parent));
            }
        }
        cands.sort_by(|a, b| rank(&a.0, &b.0));
        cands.truncate(slots);

        let last_step = step + 1 == budget;
        let mut next = Vec::new();
        for (hyp, parent) in cands {
            if hyp.tokens.last() == Some(&EOS) {
                finished.push(hyp);
            } else if last_step {
                next.push((hyp, live[parent].1.clone(), Vec::new()));
            } else {
                let mut state = live[parent].1.clone();
                let lp = scorer.advance(&mut state, *hyp.tokens.last().expect("non-empty"))?;
                next.push((hyp, state, lp));
            }
        }
        live = next;
        if finished.len() >= width || live.is_empty() {
            break;
        }
    }

    let pool = finished.into_iter().chain(live.into_iter().map(|(h, _, _)| h));
    let best = pool
        .min_by(|a, b| {
            normalized(b, length_penalty)
                .partial_cmp(&normalized(a, length_penalty))
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))?;
    let mut tokens = best.tokens;
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok(tokens)
}

pub fn decode<S: StepScorer>(scorer: &S, prefix: &[TokenId], cfg: &DecodeConfig) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    match cfg.method {
        DecodeMethod::Greedy => greedy_decode(scorer, prefix, cfg.max_new_tokens),
        DecodeMethod::Beam { width } => beam_search(scorer, prefix, width, cfg.max_new_tokens, cfg.length_penalty),
    }
}

/// Renders the target-omitted prompt for `src_lang -> tgt_lang` and decodes.
#[allow(clippy::too_many_arguments)]
pub fn translate(
    params: &ModelParams,
    suite: &LanguageSuite,
    strategy: PromptStrategy,
    src_lang: usize,
    tgt_lang: usize,
    src_tokens: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    let prefix = render(strategy, suite, src_lang, tgt_lang, src_tokens, None)?;
    decode(&ModelScorer(params), &prefix.token_ids, cfg)
}

/// Translates through the center language. Directions that already touch the
/// center are translated directly.
#[allow(clippy::too_many_arguments)]
pub fn pivot_translate(
    params: &ModelParams,
    suite: &LanguageSuite,
    strategy: PromptStrategy,
    src_lang: usize,
    tgt_lang: usize,
    src_tokens: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    let hop = |s: usize, t: usize, toks: &[TokenId]| translate(params, suite, strategy, s, t, toks, cfg);
    pivot_with(suite.center, src_lang, tgt_lang, src_tokens, hop)
}

/// Pivot composition over an arbitrary single-hop translator.
pub fn pivot_with<F>(
    center: usize,
    src_lang: usize,
    tgt_lang: usize,
    src_tokens: &[TokenId],
    hop: F,
) -> Result<Vec<TokenId>>
where
    F: Fn(usize, usize, &[TokenId]) -> Result<Vec<TokenId>>,
{
    if src_lang == center || tgt_lang == center {
        return hop(src_lang, tgt_lang, src_tokens);
    }
    let mid = hop(src_lang, center, src_tokens)?;
    if mid.is_empty() {
        return Err(Error::EmptyPivot);
    }
    hop(center, tgt_lang, &mid)
}

/// One line per hypothesis: `src_lang<TAB>tgt_lang<TAB>space-separated ids`.
pub fn write_translations<W: Write>(mut w: W, rows: &[(usize, usize, Vec<TokenId>)]) -> Result<()> {
    for (s, t, hyp) in rows {
        let toks: Vec<String> = hyp.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{s}\t{t}\t{}", toks.join(" "))?;
    }
    Ok(())
}
