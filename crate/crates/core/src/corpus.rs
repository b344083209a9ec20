//! Synthetic multilingual world.
//!
//! Every language is a cipher over one shared concept vocabulary: concept `c`
//! in language `l` is the surface token `offset(l) + c`, and each language owns
//! a disjoint token range. This makes parallelism, language identity and
//! off-target output exactly decidable.
//!
//! Vocabulary layout:
//!
//! ```text
//! [0, R)                 reserved: PAD BOS EOS NEWLINE COLON TRANSLATE THIS FROM INTO
//! [R, R+K)               one language tag per language
//! [R+K+l*Vc, R+K+(l+1)*Vc)  surface range of language l
//! ```

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const NEWLINE: TokenId = 3;
pub const COLON: TokenId = 4;
pub const TRANSLATE: TokenId = 5;
pub const THIS: TokenId = 6;
pub const FROM: TokenId = 7;
pub const INTO: TokenId = 8;

/// Number of named special tokens; the minimum reserved block.
pub const MIN_RESERVED: usize = 9;

/// Strict-majority share of content tokens needed to assign a language.
pub const LANGID_THRESHOLD: f64 = 0.8;

const DIRICHLET_CONCENTRATION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSuite {
    pub num_languages: usize,
    pub concept_vocab_size: usize,
    pub reserved_count: usize,
    pub center: usize,
    pub offsets: Vec<usize>,
    pub seed: u64,
}

impl LanguageSuite {
    pub fn build(num_languages: usize, concept_vocab_size: usize, center: usize, seed: u64) -> Result<Self> {
        Self::build_with_reserved(num_languages, concept_vocab_size, center, seed, MIN_RESERVED)
    }

    /// Like [`LanguageSuite::build`] but with a larger reserved block; the
    /// extra ids are unused and exist only to shift the layout.
    pub fn build_with_reserved(
        num_languages: usize,
        concept_vocab_size: usize,
        center: usize,
        seed: u64,
        reserved_count: usize,
    ) -> Result<Self> {
        if num_languages < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 languages, got {num_languages}")));
        }
        if concept_vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "concept vocabulary must have at least 2 entries, got {concept_vocab_size}"
            )));
        }
        if center >= num_languages {
            return Err(Error::InvalidConfig(format!(
                "center language {center} out of range for {num_languages} languages"
            )));
        }
        if reserved_count < MIN_RESERVED {
            return Err(Error::InvalidConfig(format!(
                "reserved block must hold at least {MIN_RESERVED} tokens, got {reserved_count}"
            )));
        }
        let offsets = (0..num_languages).map(|l| reserved_count + num_languages + l * concept_vocab_size).collect();
        Ok(Self { num_languages, concept_vocab_size, reserved_count, center, offsets, seed })
    }

    pub fn vocab_size(&self) -> usize {
        self.reserved_count + self.num_languages + self.num_languages * self.concept_vocab_size
    }

    pub fn tag(&self, lang: usize) -> TokenId {
        self.reserved_count + lang
    }

    pub fn lang_tag_ids(&self) -> Vec<TokenId> {
        (0..self.num_languages).map(|l| self.tag(l)).collect()
    }

    pub fn encode(&self, lang: usize, concept: usize) -> TokenId {
        self.offsets[lang] + concept
    }

    /// Maps a surface token back to `(language, concept)`; `None` for reserved
    /// and tag ids.
    pub fn decode(&self, token: TokenId) -> Option<(usize, usize)> {
        let first = self.reserved_count + self.num_languages;
        if token < first || token >= self.vocab_size() {
            return None;
        }
        let rel = token - first;
        Some((rel / self.concept_vocab_size, rel % self.concept_vocab_size))
    }

    pub fn is_tag(&self, token: TokenId) -> bool {
        token >= self.reserved_count && token < self.reserved_count + self.num_languages
    }

    pub fn check_lang(&self, lang: usize) -> Result<()> {
        if lang >= self.num_languages {
            return Err(Error::InvalidConfig(format!(
                "language {lang} out of range for {} languages",
                self.num_languages
            )));
        }
        Ok(())
    }

    /// Re-validates a deserialized suite against the layout formula.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::build_with_reserved(
            self.num_languages,
            self.concept_vocab_size,
            self.center,
            self.seed,
            self.reserved_count,
        )?;
        if rebuilt.offsets != self.offsets {
            return Err(Error::CorruptInput("suite offsets do not match the layout formula".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let suite: Self = serde_json::from_str(s)?;
        suite.validate()?;
        Ok(suite)
    }

    /// All `(l, center)` and `(center, l)` directions.
    pub fn center_directions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in (0..self.num_languages).filter(|&l| l != self.center) {
            out.push((l, self.center));
            out.push((self.center, l));
        }
        out
    }

    /// Every ordered pair of distinct languages.
    pub fn all_directions(&self) -> Vec<(usize, usize)> {
        let k = self.num_languages;
        (0..k).flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b))).collect()
    }

    /// Directions of [`LanguageSuite::all_directions`] not present in `supervised`.
    pub fn complement(&self, supervised: &[(usize, usize)]) -> Vec<(usize, usize)> {
        self.all_directions().into_iter().filter(|d| !supervised.contains(d)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptSentence {
    pub concepts: Vec<usize>,
}

impl ConceptSentence {
    pub fn new(concepts: Vec<usize>) -> Self {
        Self { concepts }
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub src_lang: usize,
    pub tgt_lang: usize,
    pub src_tokens: Vec<TokenId>,
    pub tgt_tokens: Vec<TokenId>,
    pub concept: ConceptSentence,
}

/// First-order Markov source over concepts. The transition matrix belongs to
/// the world (seeded by the suite seed) so that every split draws from the
/// same distribution.
#[derive(Debug, Clone)]
pub struct ConceptChain {
    order: usize,
    transition: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
}

impl ConceptChain {
    pub fn new(suite: &LanguageSuite, order: usize) -> Result<Self> {
        let vc = suite.concept_vocab_size;
        let transition = match order {
            0 => vec![vec![1.0 / vc as f64; vc]; vc],
            1 => {
                let gamma = Gamma::new(DIRICHLET_CONCENTRATION, 1.0).expect("valid gamma parameters");
                (0..vc)
                    .map(|row| {
                        let mut rng = seeding::stream(suite.seed, seeding::DOMAIN_CHAIN, row as u64);
                        let draws: Vec<f64> = (0..vc).map(|_| gamma.sample(&mut rng)).collect();
                        let total: f64 = draws.iter().sum();
                        if total > 0.0 {
                            draws.iter().map(|d| d / total).collect()
                        } else {
                            vec![1.0 / vc as f64; vc]
                        }
                    })
                    .collect()
            }
            other => return Err(Error::InvalidConfig(format!("unsupported Markov order {other} (expected 0 or 1)"))),
        };
        let cumulative = transition
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(Self { order, transition, cumulative })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    fn next(&self, prev: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let row = &self.cumulative[prev];
        row.iter().position(|&c| u < c).unwrap_or(row.len() - 1)
    }

    /// Draws sentence `index` of the stream keyed by `seed`.
    pub fn sample_sentence(&self, seed: u64, index: u64, len_range: (usize, usize)) -> ConceptSentence {
        let mut rng = seeding::stream(seed, seeding::DOMAIN_SENTENCE, index);
        let len = rng.random_range(len_range.0..=len_range.1);
        let vc = self.transition.len();
        let mut concepts = Vec::with_capacity(len);
        concepts.push(rng.random_range(0..vc));
        while concepts.len() < len {
            let prev = *concepts.last().unwrap();
            concepts.push(self.next(prev, &mut rng));
        }
        ConceptSentence { concepts }
    }
}

fn check_len_range(len_range: (usize, usize)) -> Result<()> {
    if len_range.0 < 1 || len_range.0 > len_range.1 {
        return Err(Error::InvalidConfig(format!(
            "length range [{}, {}] must satisfy 1 <= min <= max",
            len_range.0, len_range.1
        )));
    }
    Ok(())
}

pub fn sample_concept_corpus(
    suite: &LanguageSuite,
    n: usize,
    len_range: (usize, usize),
    order: usize,
    seed: u64,
) -> Result<Vec<ConceptSentence>> {
    if n == 0 {
        return Err(Error::InvalidConfig("corpus size must be at least 1".into()));
    }
    check_len_range(len_range)?;
    let chain = ConceptChain::new(suite, order)?;
    Ok((0..n as u64).map(|i| chain.sample_sentence(seed, i, len_range)).collect())
}

/// Samples `n` distinct sentences (by concept sequence), skipping any in
/// `exclude`. Used to build splits that are disjoint by concept sentence.
pub fn sample_distinct(
    suite: &LanguageSuite,
    n: usize,
    len_range: (usize, usize),
    order: usize,
    seed: u64,
    exclude: &HashSet<ConceptSentence>,
) -> Result<Vec<ConceptSentence>> {
    check_len_range(len_range)?;
    let chain = ConceptChain::new(suite, order)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let budget = (n as u64).saturating_mul(100).max(10_000);
    let mut index = 0u64;
    while out.len() < n {
        if index >= budget {
            return Err(Error::Data(format!(
                "could only draw {} distinct sentences of the {n} requested; enlarge the concept vocabulary or length range",
                out.len()
            )));
        }
        let s = chain.sample_sentence(seed, index, len_range);
        index += 1;
        if !exclude.contains(&s) && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

fn reorders(lang: usize, reorder: bool) -> bool {
    reorder && lang % 2 == 1
}

fn swap_adjacent<T>(items: &mut [T]) {
    for pair in items.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
}

/// Renders a concept sentence into a language. With `reorder`, odd languages
/// swap each adjacent pair `(2i, 2i+1)`, an involution.
pub fn render_sentence(
    suite: &LanguageSuite,
    concept: &ConceptSentence,
    lang: usize,
    reorder: bool,
) -> Result<Vec<TokenId>> {
    suite.check_lang(lang)?;
    let mut out = Vec::with_capacity(concept.len());
    for &c in &concept.concepts {
        if c >= suite.concept_vocab_size {
            return Err(Error::CorruptInput(format!(
                "concept id {c} out of range for vocabulary of {}",
                suite.concept_vocab_size
            )));
        }
        out.push(suite.encode(lang, c));
    }
    if reorders(lang, reorder) {
        swap_adjacent(&mut out);
    }
    Ok(out)
}

/// Inverse of [`render_sentence`]. Fails if any token lies outside `lang`'s range.
pub fn inverse_render(
    suite: &LanguageSuite,
    tokens: &[TokenId],
    lang: usize,
    reorder: bool,
) -> Result<ConceptSentence> {
    suite.check_lang(lang)?;
    let mut concepts = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match suite.decode(t) {
            Some((l, c)) if l == lang => concepts.push(c),
            _ => return Err(Error::CorruptInput(format!("token {t} is not in the surface range of language {lang}"))),
        }
    }
    if reorders(lang, reorder) {
        swap_adjacent(&mut concepts);
    }
    Ok(ConceptSentence { concepts })
}

/// One example per (sentence, direction), shuffled deterministically by `seed`.
pub fn make_parallel_dataset(
    corpus: &[ConceptSentence],
    suite: &LanguageSuite,
    directions: &[(usize, usize)],
    reorder: bool,
    seed: u64,
) -> Result<Vec<ParallelExample>> {
    for &(s, t) in directions {
        suite.check_lang(s)?;
        suite.check_lang(t)?;
        if s == t {
            return Err(Error::InvalidConfig(format!("direction ({s}, {t}) has identical source and target")));
        }
    }
    let mut out = Vec::with_capacity(corpus.len() * directions.len());
    for concept in corpus {
        for &(s, t) in directions {
            out.push(ParallelExample {
                src_lang: s,
                tgt_lang: t,
                src_tokens: render_sentence(suite, concept, s, reorder)?,
                tgt_tokens: render_sentence(suite, concept, t, reorder)?,
                concept: concept.clone(),
            });
        }
    }
    let mut rng = seeding::stream(seed, seeding::DOMAIN_SHUFFLE, 0);
    rand::seq::SliceRandom::shuffle(out.as_mut_slice(), &mut rng);
    Ok(out)
}

/// Drops over-long sources, exact duplicates and (optionally) pairs that fail
/// language identification on either side. Order of survivors is preserved.
pub fn filter_pairs(
    suite: &LanguageSuite,
    pairs: Vec<ParallelExample>,
    max_src_len: usize,
    dedup: bool,
    langid_check: bool,
) -> Vec<ParallelExample> {
    let mut seen: HashSet<(Vec<TokenId>, Vec<TokenId>)> = HashSet::new();
    pairs
        .into_iter()
        .filter(|p| p.src_tokens.len() <= max_src_len)
        .filter(|p| {
            !langid_check
                || (identify_language(suite, &p.src_tokens) == LangId::Lang(p.src_lang)
                    && identify_language(suite, &p.tgt_tokens) == LangId::Lang(p.tgt_lang))
        })
        .filter(|p| !dedup || seen.insert((p.src_tokens.clone(), p.tgt_tokens.clone())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LangId {
    Lang(usize),
    OffTarget,
    Empty,
}

/// Majority-rule language identification over content tokens.
pub fn identify_language(suite: &LanguageSuite, tokens: &[TokenId]) -> LangId {
    let mut counts = vec![0usize; suite.num_languages];
    let mut content = 0usize;
    for &t in tokens {
        if let Some((l, _)) = suite.decode(t) {
            counts[l] += 1;
            content += 1;
        }
    }
    if content == 0 {
        return LangId::Empty;
    }
    counts.iter().position(|&c| c as f64 > LANGID_THRESHOLD * content as f64).map_or(LangId::OffTarget, LangId::Lang)
}

fn join_tokens(tokens: &[TokenId]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_tokens(field: &str) -> Result<Vec<TokenId>> {
    field
        .split_whitespace()
        .map(|t| t.parse::<TokenId>().map_err(|e| Error::CorruptInput(format!("bad token `{t}`: {e}"))))
        .collect()
}

/// Writes `src_lang<TAB>tgt_lang<TAB>src tokens<TAB>tgt tokens` records.
pub fn write_dataset<W: Write>(mut w: W, examples: &[ParallelExample]) -> Result<()> {
    for ex in examples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            ex.src_lang,
            ex.tgt_lang,
            join_tokens(&ex.src_tokens),
            join_tokens(&ex.tgt_tokens)
        )?;
    }
    Ok(())
}

/// Reads records written by [`write_dataset`]; the concept sentence is
/// recovered from the target side and checked against the source side.
pub fn read_dataset<R: BufRead>(r: R, suite: &LanguageSuite, reorder: bool) -> Result<Vec<ParallelExample>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::CorruptInput(format!("line {}: expected 4 tab-separated fields", lineno + 1)));
        }
        let parse_lang = |f: &str| {
            f.parse::<usize>().map_err(|e| Error::CorruptInput(format!("line {}: bad language `{f}`: {e}", lineno + 1)))
        };
        let src_lang = parse_lang(fields[0])?;
        let tgt_lang = parse_lang(fields[1])?;
        let src_tokens = parse_tokens(fields[2])?;
        let tgt_tokens = parse_tokens(fields[3])?;
        let concept = inverse_render(suite, &tgt_tokens, tgt_lang, reorder)?;
        if inverse_render(suite, &src_tokens, src_lang, reorder)? != concept {
            return Err(Error::CorruptInput(format!("line {}: source and target are not parallel", lineno + 1)));
        }
        out.push(ParallelExample { src_lang, tgt_lang, src_tokens, tgt_tokens, concept });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite(k: usize, vc: usize) -> LanguageSuite {
        LanguageSuite::build(k, vc, 0, 7).unwrap()
    }

    #[test]
    fn vocab_size_formula() {
        let s = suite(2, 4);
        assert_eq!(s.reserved_count, 9);
        assert_eq!(s.vocab_size(), 19);
    }

    #[test]
    fn encode_with_larger_reserved_block() {
        let s = LanguageSuite::build_with_reserved(4, 64, 0, 1, 16).unwrap();
        assert_eq!(s.encode(2, 5), 153);
    }

    #[test]
    fn encode_decode_round_trip() {
        let s = suite(3, 8);
        for l in 0..3 {
            for c in 0..8 {
                assert_eq!(s.decode(s.encode(l, c)), Some((l, c)));
            }
        }
        for t in 0..(s.reserved_count + 3) {
            assert_eq!(s.decode(t), None);
        }
    }

    #[test]
    fn build_rejects_bad_config() {
        assert!(matches!(LanguageSuite::build(1, 4, 0, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(LanguageSuite::build(2, 1, 0, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(LanguageSuite::build(2, 4, 2, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn suite_json_round_trip() {
        let s = suite(4, 16);
        let back = LanguageSuite::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        let mut bad = s.clone();
        bad.offsets[1] += 1;
        assert!(LanguageSuite::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    }

    #[test]
    fn corpus_is_deterministic() {
        let s = suite(3, 12);
        let a = sample_concept_corpus(&s, 50, (2, 7), 1, 99).unwrap();
        let b = sample_concept_corpus(&s, 50, (2, 7), 1, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|c| (2..=7).contains(&c.len())));
    }

    #[test]
    fn unit_length_range() {
        let s = suite(2, 5);
        let c = sample_concept_corpus(&s, 100, (1, 1), 1, 3).unwrap();
        assert!(c.iter().all(|x| x.len() == 1));
    }

    #[test]
    fn bad_length_range() {
        let s = suite(2, 5);
        assert!(matches!(sample_concept_corpus(&s, 10, (4, 3), 1, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(sample_concept_corpus(&s, 10, (0, 3), 1, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn bigram_frequencies_match_transition_matrix() {
        let s = suite(2, 8);
        let chain = ConceptChain::new(&s, 1).unwrap();
        let corpus = sample_concept_corpus(&s, 50_000, (4, 12), 1, 5).unwrap();
        let vc = 8;
        let mut counts = vec![vec![0usize; vc]; vc];
        for sent in &corpus {
            for w in sent.concepts.windows(2) {
                counts[w[0]][w[1]] += 1;
            }
        }
        for (row, expected) in counts.iter().zip(chain.transition()) {
            let total: usize = row.iter().sum();
            assert!(total > 1000, "row visited too rarely: {total}");
            let l1: f64 = row.iter().zip(expected).map(|(&c, &p)| (c as f64 / total as f64 - p).abs()).sum();
            assert!(l1 < 0.05, "row L1 distance {l1}");
        }
    }

    #[test]
    fn render_plain_and_reordered() {
        let mut s = suite(2, 40);
        // Force a layout where language 1 starts at 30 for the literal example.
        s.offsets = vec![0, 30];
        let c = ConceptSentence::new(vec![0, 1, 2]);
        assert_eq!(render_sentence(&s, &c, 1, false).unwrap(), vec![30, 31, 32]);

        let s = suite(3, 10);
        let c = ConceptSentence::new(vec![0, 1, 2, 3]);
        let out = render_sentence(&s, &c, 1, true).unwrap();
        let order: Vec<usize> = out.iter().map(|&t| s.decode(t).unwrap().1).collect();
        assert_eq!(order, vec![1, 0, 3, 2]);
        // Even languages keep their order.
        let out = render_sentence(&s, &c, 2, true).unwrap();
        let order: Vec<usize> = out.iter().map(|&t| s.decode(t).unwrap().1).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn render_rejects_out_of_range_concept() {
        let s = suite(2, 4);
        assert!(matches!(render_sentence(&s, &ConceptSentence::new(vec![4]), 0, false), Err(Error::CorruptInput(_))));
    }

    #[test]
    fn render_inverse_round_trip() {
        let s = suite(4, 20);
        let corpus = sample_concept_corpus(&s, 100, (1, 9), 1, 11).unwrap();
        for c in &corpus {
            for l in 0..4 {
                for reorder in [false, true] {
                    let toks = render_sentence(&s, c, l, reorder).unwrap();
                    assert_eq!(&inverse_render(&s, &toks, l, reorder).unwrap(), c);
                    assert_eq!(identify_language(&s, &toks), LangId::Lang(l));
                }
            }
        }
    }

    #[test]
    fn direction_counts() {
        let s = LanguageSuite::build(5, 8, 0, 0).unwrap();
        let sup = s.center_directions();
        assert_eq!(sup.len(), 8);
        assert_eq!(s.complement(&sup).len(), 12);
        let mut extended = sup.clone();
        extended.extend([(1, 2), (2, 1)]);
        assert_eq!(extended.len(), 10);
        assert_eq!(s.complement(&extended).len(), 10);
    }

    #[test]
    fn parallel_dataset_contract() {
        let s = suite(3, 10);
        let corpus = sample_concept_corpus(&s, 20, (2, 6), 1, 1).unwrap();
        let dirs = s.center_directions();
        let ds = make_parallel_dataset(&corpus, &s, &dirs, true, 4).unwrap();
        assert_eq!(ds.len(), 20 * dirs.len());
        for ex in &ds {
            assert_eq!(ex.src_tokens, render_sentence(&s, &ex.concept, ex.src_lang, true).unwrap());
            assert_eq!(ex.tgt_tokens, render_sentence(&s, &ex.concept, ex.tgt_lang, true).unwrap());
        }
        assert_eq!(ds, make_parallel_dataset(&corpus, &s, &dirs, true, 4).unwrap());
        assert!(matches!(make_parallel_dataset(&corpus, &s, &[(1, 1)], false, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn filters() {
        let s = suite(3, 20);
        let c = ConceptSentence::new(vec![1, 2, 3]);
        let ex = ParallelExample {
            src_lang: 1,
            tgt_lang: 0,
            src_tokens: render_sentence(&s, &c, 1, false).unwrap(),
            tgt_tokens: render_sentence(&s, &c, 0, false).unwrap(),
            concept: c.clone(),
        };
        assert_eq!(filter_pairs(&s, vec![ex.clone(), ex.clone()], 100, true, false).len(), 1);
        assert_eq!(filter_pairs(&s, vec![ex.clone(), ex.clone()], 100, false, false).len(), 2);

        let long_c = ConceptSentence::new(vec![0; 13]);
        let long = ParallelExample {
            src_tokens: render_sentence(&s, &long_c, 1, false).unwrap(),
            tgt_tokens: render_sentence(&s, &long_c, 0, false).unwrap(),
            concept: long_c,
            ..ex.clone()
        };
        assert!(filter_pairs(&s, vec![long], 12, false, false).is_empty());

        // One substituted token out of three: 2/3 <= 80% majority.
        let mut noisy = ex.clone();
        noisy.src_tokens[0] = s.encode(2, 1);
        assert!(filter_pairs(&s, vec![noisy.clone()], 100, false, true).is_empty());
        assert_eq!(filter_pairs(&s, vec![noisy], 100, false, false).len(), 1);
    }

    #[test]
    fn language_identification() {
        let s = suite(4, 30);
        let toks: Vec<_> = (0..10).map(|c| s.encode(3, c)).collect();
        assert_eq!(identify_language(&s, &toks), LangId::Lang(3));
        let mixed: Vec<_> = (0..5).map(|c| s.encode(1, c)).chain((0..5).map(|c| s.encode(2, c))).collect();
        assert_eq!(identify_language(&s, &mixed), LangId::OffTarget);
        assert_eq!(identify_language(&s, &[BOS, EOS, s.tag(2)]), LangId::Empty);
        assert_eq!(identify_language(&s, &[]), LangId::Empty);
        // Exactly 80% is not a strict majority.
        let four_one: Vec<_> = (0..4).map(|c| s.encode(0, c)).chain([s.encode(1, 0)]).collect();
        assert_eq!(identify_language(&s, &four_one), LangId::OffTarget);
        // Reserved tokens do not dilute the share.
        assert_eq!(identify_language(&s, &[BOS, s.encode(2, 4), NEWLINE, EOS]), LangId::Lang(2));
    }

    #[test]
    fn dataset_tsv_round_trip() {
        let s = suite(3, 10);
        let corpus = sample_concept_corpus(&s, 5, (2, 5), 1, 1).unwrap();
        let ds = make_parallel_dataset(&corpus, &s, &s.all_directions(), true, 0).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        let line = first.lines().next().unwrap();
        assert_eq!(line.split('\t').count(), 4);
        let back = read_dataset(buf.as_slice(), &s, true).unwrap();
        assert_eq!(back, ds);
    }
}
