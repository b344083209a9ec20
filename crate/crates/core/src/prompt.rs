//! Prompt strategies and their token-level rendering.
//!
//! Each strategy is a template of segments. Template words such as
//! "Translate this from ... into ..." are single reserved tokens; the
//! newline and colon are reserved tokens too. A rendering is always
//! `BOS + template + EOS`, where the template's final segment is the target
//! sentence slot.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LanguageSuite, TokenId, BOS, COLON, EOS, FROM, INTO, NEWLINE, THIS, TRANSLATE};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PromptStrategy {
    TEnc,
    TDec,
    SEncTEnc,
    SEncTDec,
    GptMt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Token(TokenId),
    SrcTag,
    TgtTag,
    Src,
    Tgt,
}

use Segment::{Src, SrcTag, Tgt, TgtTag, Token};

const T_ENC: &[Segment] = &[TgtTag, Token(COLON), Src, Token(NEWLINE), Tgt];
const T_DEC: &[Segment] = &[Src, Token(NEWLINE), TgtTag, Token(COLON), Tgt];
const S_ENC_T_ENC: &[Segment] = &[SrcTag, TgtTag, Token(COLON), Src, Token(NEWLINE), Tgt];
const S_ENC_T_DEC: &[Segment] = &[SrcTag, Token(COLON), Src, Token(NEWLINE), TgtTag, Token(COLON), Tgt];
const GPT_MT: &[Segment] = &[
    Token(TRANSLATE),
    Token(THIS),
    Token(FROM),
    SrcTag,
    Token(INTO),
    TgtTag,
    Token(COLON),
    Token(NEWLINE),
    SrcTag,
    Token(COLON),
    Src,
    Token(NEWLINE),
    TgtTag,
    Token(COLON),
    Tgt,
];

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 5] = [
        PromptStrategy::TEnc,
        PromptStrategy::TDec,
        PromptStrategy::SEncTEnc,
        PromptStrategy::SEncTDec,
        PromptStrategy::GptMt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptStrategy::TEnc => "t-enc",
            PromptStrategy::TDec => "t-dec",
            PromptStrategy::SEncTEnc => "s-enc-t-enc",
            PromptStrategy::SEncTDec => "s-enc-t-dec",
            PromptStrategy::GptMt => "gpt-mt",
        }
    }

    pub fn template(self) -> &'static [Segment] {
        match self {
            PromptStrategy::TEnc => T_ENC,
            PromptStrategy::TDec => T_DEC,
            PromptStrategy::SEncTEnc => S_ENC_T_ENC,
            PromptStrategy::SEncTDec => S_ENC_T_DEC,
            PromptStrategy::GptMt => GPT_MT,
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        PromptStrategy::ALL
            .into_iter()
            .find(|p| p.name() == lower)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown prompt strategy `{s}`")))
    }
}

impl TryFrom<String> for PromptStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PromptStrategy> for String {
    fn from(p: PromptStrategy) -> String {
        p.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderMeta {
    pub strategy: PromptStrategy,
    pub src_lang: usize,
    pub tgt_lang: usize,
}

/// A rendered prompt. `loss_mask[i] == 1` marks token `i` as a training label,
/// i.e. the prediction made at position `i - 1` is scored against it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRendering {
    pub token_ids: Vec<TokenId>,
    pub loss_mask: Vec<u8>,
    pub target_start: usize,
    pub meta: RenderMeta,
}

impl PromptRendering {
    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().map(|&m| m as usize).sum()
    }

    /// Label positions in increasing order.
    pub fn label_positions(&self) -> Vec<usize> {
        self.loss_mask.iter().enumerate().filter(|(_, &m)| m == 1).map(|(i, _)| i).collect()
    }
}

/// Renders `strategy` for one pair. With `tgt_tokens == None` the rendering is
/// the inference prefix: it stops exactly where the target would begin.
pub fn render(
    strategy: PromptStrategy,
    suite: &LanguageSuite,
    src_lang: usize,
    tgt_lang: usize,
    src_tokens: &[TokenId],
    tgt_tokens: Option<&[TokenId]>,
) -> Result<PromptRendering> {
    suite.check_lang(src_lang)?;
    suite.check_lang(tgt_lang)?;
    if src_tokens.is_empty() {
        return Err(Error::EmptyInput("source sentence has no tokens".into()));
    }
    let mut token_ids = vec![BOS];
    let mut target_start = 0;
    for seg in strategy.template() {
        match *seg {
            Token(t) => token_ids.push(t),
            SrcTag => token_ids.push(suite.tag(src_lang)),
            TgtTag => token_ids.push(suite.tag(tgt_lang)),
            Src => token_ids.extend_from_slice(src_tokens),
            Tgt => {
                target_start = token_ids.len();
                if let Some(tgt) = tgt_tokens {
                    token_ids.extend_from_slice(tgt);
                    token_ids.push(EOS);
                }
            }
        }
    }
    let mut loss_mask = vec![0u8; token_ids.len()];
    if tgt_tokens.is_some() {
        loss_mask[target_start..].iter_mut().for_each(|m| *m = 1);
    }
    Ok(PromptRendering { token_ids, loss_mask, target_start, meta: RenderMeta { strategy, src_lang, tgt_lang } })
}

/// The copied pair `(y, y)`: both language slots carry the target language
/// and both sentence slots carry the target sentence.
pub fn render_copy(
    strategy: PromptStrategy,
    suite: &LanguageSuite,
    tgt_lang: usize,
    tgt_tokens: &[TokenId],
) -> Result<PromptRendering> {
    render(strategy, suite, tgt_lang, tgt_lang, tgt_tokens, Some(tgt_tokens))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    Fixed(PromptStrategy),
    Diversified,
}

/// Strategy for training example `example_index`; diversified mode draws
/// uniformly from a stream keyed by `(seed, example_index)`.
pub fn pick_strategy(mode: StrategyMode, seed: u64, example_index: usize) -> PromptStrategy {
    match mode {
        StrategyMode::Fixed(p) => p,
        StrategyMode::Diversified => {
            let mut rng = seeding::stream(seed, seeding::DOMAIN_STRATEGY, example_index as u64);
            PromptStrategy::ALL[rng.random_range(0..PromptStrategy::ALL.len())]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (LanguageSuite, Vec<TokenId>, Vec<TokenId>) {
        let suite = LanguageSuite::build(3, 10, 0, 0).unwrap();
        let src = vec![suite.encode(1, 0), suite.encode(1, 1)];
        let tgt = vec![suite.encode(2, 0), suite.encode(2, 1)];
        (suite, src, tgt)
    }

    #[test]
    fn t_enc_layout() {
        let (s, src, tgt) = setup();
        let r = render(PromptStrategy::TEnc, &s, 1, 2, &src, Some(&tgt)).unwrap();
        assert_eq!(r.token_ids, vec![BOS, s.tag(2), COLON, src[0], src[1], NEWLINE, tgt[0], tgt[1], EOS]);
        assert_eq!(r.target_start, 6);
        assert_eq!(r.loss_mask, vec![0, 0, 0, 0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn t_dec_layout() {
        let (s, src, tgt) = setup();
        let r = render(PromptStrategy::TDec, &s, 1, 2, &src, Some(&tgt)).unwrap();
        assert_eq!(r.token_ids, vec![BOS, src[0], src[1], NEWLINE, s.tag(2), COLON, tgt[0], tgt[1], EOS]);
    }

    #[test]
    fn s_enc_t_enc_layout() {
        let (s, src, tgt) = setup();
        let r = render(PromptStrategy::SEncTEnc, &s, 1, 2, &src, Some(&tgt)).unwrap();
        assert_eq!(r.token_ids, vec![BOS, s.tag(1), s.tag(2), COLON, src[0], src[1], NEWLINE, tgt[0], tgt[1], EOS]);
    }

    #[test]
    fn s_enc_t_dec_layout() {
        let (s, src, tgt) = setup();
        let r = render(PromptStrategy::SEncTDec, &s, 1, 2, &src, Some(&tgt)).unwrap();
        assert_eq!(
            r.token_ids,
            vec![BOS, s.tag(1), COLON, src[0], src[1], NEWLINE, s.tag(2), COLON, tgt[0], tgt[1], EOS]
        );
    }

    #[test]
    fn gpt_mt_layout() {
        let (s, src, tgt) = setup();
        let r = render(PromptStrategy::GptMt, &s, 1, 2, &src, Some(&tgt)).unwrap();
        assert_eq!(
            r.token_ids,
            vec![
                BOS,
                TRANSLATE,
                THIS,
                FROM,
                s.tag(1),
                INTO,
                s.tag(2),
                COLON,
                NEWLINE,
                s.tag(1),
                COLON,
                src[0],
                src[1],
                NEWLINE,
                s.tag(2),
                COLON,
                tgt[0],
                tgt[1],
                EOS
            ]
        );
    }

    #[test]
    fn inference_prefix_stops_at_target() {
        let (s, src, tgt) = setup();
        for p in PromptStrategy::ALL {
            let full = render(p, &s, 1, 2, &src, Some(&tgt)).unwrap();
            let prefix = render(p, &s, 1, 2, &src, None).unwrap();
            assert_eq!(prefix.token_ids, full.token_ids[..full.target_start]);
            assert_eq!(prefix.target_count(), 0);
            assert_eq!(prefix.target_start, prefix.token_ids.len());
        }
    }

    #[test]
    fn copy_rendering() {
        let (s, _, tgt) = setup();
        let r = render_copy(PromptStrategy::TEnc, &s, 2, &tgt).unwrap();
        assert_eq!(r.token_ids, vec![BOS, s.tag(2), COLON, tgt[0], tgt[1], NEWLINE, tgt[0], tgt[1], EOS]);
        let g = render_copy(PromptStrategy::GptMt, &s, 2, &tgt).unwrap();
        assert_eq!(g.token_ids[4], s.tag(2));
        assert_eq!(g.token_ids[6], s.tag(2));
        assert_eq!(g.meta.src_lang, 2);
    }

    #[test]
    fn masked_counts_match_between_direct_and_copy() {
        let (s, src, tgt) = setup();
        for p in PromptStrategy::ALL {
            let d = render(p, &s, 1, 2, &src, Some(&tgt)).unwrap();
            let c = render_copy(p, &s, 2, &tgt).unwrap();
            assert_eq!(d.target_count(), tgt.len() + 1);
            assert_eq!(c.target_count(), d.target_count());
            assert!(d.loss_mask[..d.target_start].iter().all(|&m| m == 0));
        }
    }

    #[test]
    fn empty_source_rejected() {
        let (s, _, tgt) = setup();
        assert!(matches!(render(PromptStrategy::TDec, &s, 1, 2, &[], Some(&tgt)), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn strategy_names_parse_case_insensitively() {
        for p in PromptStrategy::ALL {
            assert_eq!(p.name().parse::<PromptStrategy>().unwrap(), p);
            assert_eq!(p.name().to_uppercase().parse::<PromptStrategy>().unwrap(), p);
        }
        assert!(matches!("t-mid".parse::<PromptStrategy>(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn pick_strategy_modes() {
        for i in 0..50 {
            assert_eq!(pick_strategy(StrategyMode::Fixed(PromptStrategy::TDec), 3, i), PromptStrategy::TDec);
            assert_eq!(pick_strategy(StrategyMode::Diversified, 3, i), pick_strategy(StrategyMode::Diversified, 3, i));
        }
        let mut counts = [0usize; 5];
        for i in 0..5000 {
            let p = pick_strategy(StrategyMode::Diversified, 17, i);
            counts[PromptStrategy::ALL.iter().position(|&q| q == p).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 5000.0;
            assert!((f - 0.2).abs() <= 0.02, "frequency {f}");
        }
    }
}
