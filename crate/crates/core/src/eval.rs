//! Translation scoring and direction-level reports.
//!
//! BLEU here is computed over token ids: the synthetic languages have no
//! surface text, so there is nothing to tokenize.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{identify_language, LangId, LanguageSuite, ParallelExample, TokenId};
use crate::decode::{pivot_with, translate, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::prompt::PromptStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Adds one to matched and total counts for orders n ≥ 2.
    AddOne,
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in `[0, 100]` with one reference per hypothesis.
///
/// Orders for which the hypotheses contain no n-gram at all are left out of
/// the geometric mean; with no smoothing any order with zero matches gives 0.
pub fn corpus_bleu(
    hypotheses: &[Vec<TokenId>],
    references: &[Vec<TokenId>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!("{} hypotheses but {} references", hypotheses.len(), references.len())));
    }
    if hypotheses.is_empty() {
        return Err(Error::Contract("BLEU needs at least one hypothesis".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidConfig("BLEU max order must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let (m, t) = (matched[n - 1] as f64, total[n - 1] as f64);
        if total[n - 1] == 0 {
            continue;
        }
        let p = match smoothing {
            Smoothing::AddOne if n >= 2 => (m + 1.0) / (t + 1.0),
            _ => m / t,
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
        orders += 1;
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Fraction of hypotheses not identified as `tgt_langs[i]`; empty and mixed
/// outputs count as wrong.
pub fn off_target_ratio(hypotheses: &[Vec<TokenId>], tgt_langs: &[usize], suite: &LanguageSuite) -> Result<f64> {
    if hypotheses.len() != tgt_langs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses but {} target languages",
            hypotheses.len(),
            tgt_langs.len()
        )));
    }
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let wrong =
        hypotheses.iter().zip(tgt_langs).filter(|(h, &t)| identify_language(suite, h) != LangId::Lang(t)).count();
    Ok(wrong as f64 / hypotheses.len() as f64)
}

pub fn exact_match(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!("{} hypotheses but {} references", hypotheses.len(), references.len())));
    }
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let hits = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / hypotheses.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    Supervised,
    ZeroShot,
    Pivot,
}

impl DirectionKind {
    pub const ALL: [DirectionKind; 3] = [DirectionKind::Supervised, DirectionKind::ZeroShot, DirectionKind::Pivot];

    pub fn name(self) -> &'static str {
        match self {
            DirectionKind::Supervised => "supervised",
            DirectionKind::ZeroShot => "zeroshot",
            DirectionKind::Pivot => "pivot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::CorruptInput(format!("unknown direction kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionRow {
    pub kind: DirectionKind,
    pub src: usize,
    pub tgt: usize,
    pub bleu: f64,
    pub off_target: f64,
    pub exact_match: f64,
    pub n_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub kind: DirectionKind,
    pub bleu: f64,
    pub off_target: f64,
    pub exact_match: f64,
    pub n_directions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub kind: DirectionKind,
    pub src: usize,
    pub tgt: usize,
    pub hypothesis: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<DirectionRow>,
    /// Unweighted means over the rows of each kind present.
    pub aggregates: Vec<Aggregate>,
    pub translations: Vec<Translation>,
}

pub const REPORT_HEADER: &str = "kind,src,tgt,bleu,off_target,exact_match,n_sentences,aggregate";

fn aggregate(rows: &[DirectionRow]) -> Vec<Aggregate> {
    DirectionKind::ALL
        .into_iter()
        .filter_map(|kind| {
            let sel: Vec<&DirectionRow> = rows.iter().filter(|r| r.kind == kind).collect();
            if sel.is_empty() {
                return None;
            }
            let n = sel.len() as f64;
            Some(Aggregate {
                kind,
                bleu: sel.iter().map(|r| r.bleu).sum::<f64>() / n,
                off_target: sel.iter().map(|r| r.off_target).sum::<f64>() / n,
                exact_match: sel.iter().map(|r| r.exact_match).sum::<f64>() / n,
                n_directions: sel.len(),
            })
        })
        .collect()
}

impl EvalReport {
    pub fn from_rows(rows: Vec<DirectionRow>) -> Self {
        let aggregates = aggregate(&rows);
        Self { rows, aggregates, translations: Vec::new() }
    }

    pub fn aggregate(&self, kind: DirectionKind) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.kind == kind)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{:.6},{},false",
                r.kind.name(),
                r.src,
                r.tgt,
                r.bleu,
                r.off_target,
                r.exact_match,
                r.n_sentences
            )?;
        }
        for a in &self.aggregates {
            writeln!(
                w,
                "{},,,{:.6},{:.6},{:.6},{},true",
                a.kind.name(),
                a.bleu,
                a.off_target,
                a.exact_match,
                a.n_directions
            )?;
        }
        Ok(())
    }

    /// Reads the direction rows of a report CSV and recomputes aggregates.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != REPORT_HEADER {
            return Err(Error::CorruptInput(format!("unexpected report header `{header}`")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::CorruptInput(format!("report line {}: `{line}`", i + 2));
            if f.len() != 8 {
                return Err(bad());
            }
            match f[7] {
                "true" => continue,
                "false" => {}
                _ => return Err(bad()),
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            rows.push(DirectionRow {
                kind: DirectionKind::parse(f[0])?,
                src: int(f[1])?,
                tgt: int(f[2])?,
                bleu: num(f[3])?,
                off_target: num(f[4])?,
                exact_match: num(f[5])?,
                n_sentences: int(f[6])?,
            });
        }
        Ok(Self::from_rows(rows))
    }

    /// Per-direction markdown table.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| kind | direction | BLEU | off-target | exact |\n|---|---|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {}→{} | {:.2} | {:.3} | {:.3} |",
                r.kind.name(),
                r.src,
                r.tgt,
                r.bleu,
                r.off_target,
                r.exact_match
            );
        }
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "| {} | mean of {} | {:.2} | {:.3} | {:.3} |",
                a.kind.name(),
                a.n_directions,
                a.bleu,
                a.off_target,
                a.exact_match
            );
        }
        s
    }
}

/// Anything that maps a source sentence to a hypothesis in another language.
pub trait Translator {
    fn translate(&self, src_lang: usize, tgt_lang: usize, src_tokens: &[TokenId]) -> Result<Vec<TokenId>>;
}

pub struct ModelTranslator<'a> {
    pub params: &'a ModelParams,
    pub suite: &'a LanguageSuite,
    pub strategy: PromptStrategy,
    pub decode: DecodeConfig,
}

impl Translator for ModelTranslator<'_> {
    fn translate(&self, src_lang: usize, tgt_lang: usize, src_tokens: &[TokenId]) -> Result<Vec<TokenId>> {
        translate(self.params, self.suite, self.strategy, src_lang, tgt_lang, src_tokens, &self.decode)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalDirections {
    pub supervised: Vec<(usize, usize)>,
    pub zero_shot: Vec<(usize, usize)>,
    /// Also score zero-shot directions through the center language.
    pub pivot: bool,
}

fn score_rows(
    suite: &LanguageSuite,
    kind: DirectionKind,
    (src, tgt): (usize, usize),
    hyps: Vec<Vec<TokenId>>,
    refs: &[Vec<TokenId>],
    out: &mut EvalReport,
) -> Result<()> {
    out.rows.push(DirectionRow {
        kind,
        src,
        tgt,
        bleu: corpus_bleu(&hyps, refs, 4, Smoothing::AddOne)?,
        off_target: off_target_ratio(&hyps, &vec![tgt; hyps.len()], suite)?,
        exact_match: exact_match(&hyps, refs)?,
        n_sentences: hyps.len(),
    });
    out.translations.extend(hyps.into_iter().map(|hypothesis| Translation { kind, src, tgt, hypothesis }));
    Ok(())
}

/// Translates every test pair of every configured direction and scores it.
/// Pivot failures (an empty intermediate or an over-long second prompt) are
/// scored as empty hypotheses.
pub fn evaluate<T: Translator>(
    translator: &T,
    suite: &LanguageSuite,
    testset: &[ParallelExample],
    directions: &EvalDirections,
) -> Result<EvalReport> {
    let mut by_dir: HashMap<(usize, usize), Vec<&ParallelExample>> = HashMap::new();
    for e in testset {
        by_dir.entry((e.src_lang, e.tgt_lang)).or_default().push(e);
    }
    let pairs = |d: (usize, usize)| {
        by_dir
            .get(&d)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Data(format!("no test pairs for direction {}→{}", d.0, d.1)))
    };
    let mut report = EvalReport::default();
    let plan = directions
        .supervised
        .iter()
        .map(|&d| (DirectionKind::Supervised, d))
        .chain(directions.zero_shot.iter().map(|&d| (DirectionKind::ZeroShot, d)))
        .chain(directions.zero_shot.iter().filter(|_| directions.pivot).map(|&d| (DirectionKind::Pivot, d)));
    for (kind, d) in plan {
        let examples = pairs(d)?;
        let refs: Vec<Vec<TokenId>> = examples.iter().map(|e| e.tgt_tokens.clone()).collect();
        let mut hyps = Vec::with_capacity(examples.len());
        for e in examples {
            let hyp = match kind {
                DirectionKind::Pivot => {
                    let hop = |s: usize, t: usize, x: &[TokenId]| translator.translate(s, t, x);
                    match pivot_with(suite.center, d.0, d.1, &e.src_tokens, hop) {
                        Err(Error::EmptyPivot) | Err(Error::SeqLen { .. }) => Vec::new(),
                        other => other?,
                    }
                }
                _ => translator.translate(d.0, d.1, &e.src_tokens)?,
            };
            hyps.push(hyp);
        }
        score_rows(suite, kind, d, hyps, &refs, &mut report)?;
    }
    report.aggregates = aggregate(&report.rows);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{inverse_render, make_parallel_dataset, render_sentence, sample_concept_corpus};

    #[test]
    fn bleu_perfect_and_hand_cases() {
        let h = vec![vec![10, 11, 12, 13, 14], vec![20, 21]];
        assert_eq!(corpus_bleu(&h, &h, 4, Smoothing::None).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&h, &h, 4, Smoothing::AddOne).unwrap(), 100.0);
        // hyp [a, a] vs ref [a, b]: unigram 1/2, bigram 0/1.
        let bleu = corpus_bleu(&[vec![7, 7]], &[vec![7, 8]], 4, Smoothing::None).unwrap();
        assert_eq!(bleu, 0.0);
        let uni = corpus_bleu(&[vec![7, 7]], &[vec![7, 8]], 1, Smoothing::None).unwrap();
        assert!((uni - 50.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // Hypothesis is a 3-token prefix of a 6-token reference: all precisions 1.
        let bleu = corpus_bleu(&[vec![1, 2, 3]], &[vec![1, 2, 3, 4, 5, 6]], 2, Smoothing::None).unwrap();
        assert!((bleu - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-10);
    }

    #[test]
    fn bleu_errors() {
        assert!(matches!(corpus_bleu(&[], &[], 4, Smoothing::None), Err(Error::Contract(_))));
        assert!(matches!(corpus_bleu(&[vec![1]], &[], 4, Smoothing::None), Err(Error::Contract(_))));
        assert_eq!(corpus_bleu(&[vec![]], &[vec![1]], 4, Smoothing::AddOne).unwrap(), 0.0);
    }

    #[test]
    fn bleu_drops_when_a_token_is_corrupted() {
        let refs = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 10, 11]];
        let mut hyps = refs.clone();
        hyps[0][2] = 99;
        let b = corpus_bleu(&hyps, &refs, 4, Smoothing::AddOne).unwrap();
        assert!(b < 100.0 && b > 0.0);
    }

    #[test]
    fn off_target_and_exact_match() {
        let suite = LanguageSuite::build(3, 5, 0, 1).unwrap();
        let en = |c: &[usize], l: usize| c.iter().map(|&x| suite.encode(l, x)).collect::<Vec<_>>();
        let hyps = vec![en(&[1, 2], 1), en(&[1, 2], 2), en(&[3], 1), vec![]];
        let r = off_target_ratio(&hyps, &[1, 1, 1, 1], &suite).unwrap();
        assert_eq!(r, 0.5);
        let refs = vec![en(&[1, 2], 1), en(&[1, 2], 1), en(&[4], 1), vec![]];
        assert_eq!(exact_match(&hyps, &refs).unwrap(), 0.5);
        assert_eq!(exact_match(&refs, &refs).unwrap(), 1.0);
        assert_eq!(off_target_ratio(&refs[..3], &[1, 1, 1], &suite).unwrap(), 0.0);
    }

    /// Reads the concepts back from the source and renders them in the target.
    struct Gold<'a>(&'a LanguageSuite);

    impl Translator for Gold<'_> {
        fn translate(&self, src: usize, tgt: usize, x: &[TokenId]) -> Result<Vec<TokenId>> {
            let c = inverse_render(self.0, x, src, false)?;
            render_sentence(self.0, &c, tgt, false)
        }
    }

    #[test]
    fn gold_translator_scores_perfectly() {
        let suite = LanguageSuite::build(5, 12, 0, 3).unwrap();
        let corpus = sample_concept_corpus(&suite, 6, (4, 7), 1, 2).unwrap();
        let sup = suite.center_directions();
        let zs = suite.complement(&sup);
        assert_eq!((sup.len(), zs.len()), (8, 12));
        let test = make_parallel_dataset(&corpus, &suite, &suite.all_directions(), false, 1).unwrap();
        let dirs = EvalDirections { supervised: sup, zero_shot: zs, pivot: true };
        let report = evaluate(&Gold(&suite), &suite, &test, &dirs).unwrap();
        assert_eq!(report.rows.len(), 8 + 12 + 12);
        for r in &report.rows {
            assert_eq!((r.bleu, r.off_target, r.exact_match, r.n_sentences), (100.0, 0.0, 1.0, 6));
        }
        for a in &report.aggregates {
            let rows: Vec<_> = report.rows.iter().filter(|r| r.kind == a.kind).collect();
            assert_eq!(a.n_directions, rows.len());
            assert_eq!(a.bleu, rows.iter().map(|r| r.bleu).sum::<f64>() / rows.len() as f64);
        }

        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let back = EvalReport::read_csv(csv.as_slice()).unwrap();
        assert_eq!(back.rows, report.rows);
        assert_eq!(back.aggregates, report.aggregates);
    }

    #[test]
    fn missing_direction_is_named() {
        let suite = LanguageSuite::build(3, 5, 0, 1).unwrap();
        let dirs = EvalDirections { supervised: vec![(1, 2)], zero_shot: vec![], pivot: false };
        let err = evaluate(&Gold(&suite), &suite, &[], &dirs).unwrap_err();
        assert!(matches!(err, Error::Data(m) if m.contains("1→2")));
    }
}
