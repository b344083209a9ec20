//! Sentence representations across languages, 2-D projection and an
//! alignment score.
//!
//! A representation is the final hidden state at the last token of a
//! target-omitted prompt. Rendering one concept sentence in every source
//! language with a fixed target yields one group of vectors; a model that
//! maps all languages to a shared space yields tight groups.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::corpus::{render_sentence, ConceptSentence, LanguageSuite};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::prompt::{render, PromptStrategy};

pub const DEFAULT_MULTIWAY_SENTENCES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    /// `groups[s][lang]` is the vector for sentence `s` rendered in `lang`.
    pub groups: Vec<Vec<Vec<f64>>>,
    pub strategy: PromptStrategy,
    pub tgt_lang: usize,
    pub checkpoint: String,
}

impl RepresentationSet {
    pub fn num_languages(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }

    /// All vectors, group-major.
    pub fn flatten(&self) -> Vec<Vec<f64>> {
        self.groups.iter().flatten().cloned().collect()
    }
}

pub fn collect_representations(
    params: &ModelParams,
    suite: &LanguageSuite,
    multiway: &[ConceptSentence],
    strategy: PromptStrategy,
    tgt_lang: usize,
    reorder: bool,
    checkpoint: &str,
) -> Result<RepresentationSet> {
    suite.check_lang(tgt_lang)?;
    if multiway.is_empty() {
        return Err(Error::NoData("multi-way set is empty".into()));
    }
    let mut groups = Vec::with_capacity(multiway.len());
    for concept in multiway {
        let mut group = Vec::with_capacity(suite.num_languages);
        for lang in 0..suite.num_languages {
            let src = render_sentence(suite, concept, lang, reorder)?;
            let prefix = render(strategy, suite, lang, tgt_lang, &src, None)?;
            let v = params.extract_representation(&prefix.token_ids)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("representation"));
            }
            group.push(v);
        }
        groups.push(group);
    }
    Ok(RepresentationSet { groups, strategy, tgt_lang, checkpoint: checkpoint.to_string() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One row of `out_dims` coordinates per input vector.
    pub coords: Vec<Vec<f64>>,
    /// Unit-norm principal axes, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Share of total variance along each axis.
    pub explained: Vec<f64>,
    /// Total variance is zero; coordinates are all zero.
    pub degenerate: bool,
}

/// Projects mean-centered vectors onto the top `out_dims` eigenvectors of
/// their covariance. Each axis is signed so its largest-magnitude entry is
/// positive.
pub fn pca_project(vectors: &[Vec<f64>], out_dims: usize) -> Result<Projection> {
    let n = vectors.len();
    if n < out_dims + 1 {
        return Err(Error::Data(format!("PCA to {out_dims} dims needs at least {} vectors, got {n}", out_dims + 1)));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("PCA input vectors differ in length".into()));
    }
    if out_dims == 0 || out_dims > d {
        return Err(Error::InvalidConfig(format!("cannot project {d}-dim vectors to {out_dims} dims")));
    }
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;
    let total: f64 = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let degenerate = total <= 0.0;
    let mut components = Vec::with_capacity(out_dims);
    let mut explained = Vec::with_capacity(out_dims);
    for &k in order.iter().take(out_dims) {
        let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        explained.push(if degenerate { 0.0 } else { eig.eigenvalues[k].max(0.0) / total });
        components.push(c);
    }
    let coords =
        (0..n).map(|i| components.iter().map(|c| x.row(i).iter().zip(c).map(|(a, b)| a * b).sum()).collect()).collect();
    Ok(Projection { coords, components, explained, degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// Mean cosine distance in `[0, 2]`.
    pub score: f64,
    /// Pairs that involved a zero vector (scored as distance 1).
    pub zero_norm_pairs: usize,
}

/// Mean over groups and unordered language pairs of `1 - cos(u, v)`.
pub fn alignment_score(reps: &RepresentationSet) -> Result<Alignment> {
    if reps.num_languages() < 2 {
        return Err(Error::Data("alignment needs at least two languages per group".into()));
    }
    let (mut sum, mut count, mut zero) = (0.0, 0usize, 0usize);
    for group in &reps.groups {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (u, v) = (&group[i], &group[j]);
                let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nu == 0.0 || nv == 0.0 {
                    zero += 1;
                    sum += 1.0;
                } else {
                    let cos = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv);
                    sum += 1.0 - cos.clamp(-1.0, 1.0);
                }
                count += 1;
            }
        }
    }
    Ok(Alignment { score: sum / count as f64, zero_norm_pairs: zero })
}

/// `group_id,lang,x,y` for a 2-D projection of `reps.flatten()`.
pub fn write_coordinates<W: Write>(mut w: W, reps: &RepresentationSet, proj: &Projection) -> Result<()> {
    let k = reps.num_languages();
    if proj.coords.len() != reps.groups.len() * k || proj.components.len() != 2 {
        return Err(Error::Contract("projection does not match the representation set".into()));
    }
    writeln!(w, "group_id,lang,x,y")?;
    for (i, c) in proj.coords.iter().enumerate() {
        writeln!(w, "{},{},{:.8},{:.8}", i / k, i % k, c[0], c[1])?;
    }
    Ok(())
}

pub const ALIGNMENT_HEADER: &str = "checkpoint,strategy,alignment_score";

pub fn write_alignment_summary<W: Write>(mut w: W, rows: &[(String, PromptStrategy, f64)]) -> Result<()> {
    writeln!(w, "{ALIGNMENT_HEADER}")?;
    for (ck, s, score) in rows {
        writeln!(w, "{ck},{},{score:.8}", s.name())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::sample_concept_corpus;
    use crate::model::ModelConfig;

    fn set(groups: Vec<Vec<Vec<f64>>>) -> RepresentationSet {
        RepresentationSet { groups, strategy: PromptStrategy::TDec, tgt_lang: 0, checkpoint: "c".into() }
    }

    #[test]
    fn alignment_bounds() {
        let same = set(vec![vec![vec![1.0, 2.0]; 3]; 2]);
        assert!(alignment_score(&same).unwrap().score.abs() < 1e-15);
        let orth = set(vec![vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]]);
        assert!((alignment_score(&orth).unwrap().score - 1.0).abs() < 1e-15);
        let anti = set(vec![vec![vec![1.0, -1.0], vec![-2.0, 2.0]]]);
        assert!((alignment_score(&anti).unwrap().score - 2.0).abs() < 1e-15);
        let zero = set(vec![vec![vec![0.0, 0.0], vec![1.0, 1.0]]]);
        assert_eq!(alignment_score(&zero).unwrap(), Alignment { score: 1.0, zero_norm_pairs: 1 });
        assert!(alignment_score(&set(vec![vec![vec![1.0]]])).is_err());
    }

    #[test]
    fn pca_of_collinear_points() {
        let dir = [1.0, -2.0, 0.5, 3.0, 0.0];
        let pts: Vec<Vec<f64>> = (0..7).map(|t| dir.iter().map(|d| d * t as f64 + 1.0).collect()).collect();
        let p = pca_project(&pts, 2).unwrap();
        assert!(p.explained[0] >= 1.0 - 1e-9);
        assert!(p.explained[0] >= p.explained[1]);
        assert!(p.explained.iter().sum::<f64>() <= 1.0 + 1e-9);
        let norm: f64 = p.components[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // The largest-magnitude entry (3.0) must come out positive.
        assert!(p.components[0][3] > 0.0);
    }

    #[test]
    fn pca_of_identical_points_is_degenerate() {
        let p = pca_project(&vec![vec![2.0, 3.0]; 4], 2).unwrap();
        assert!(p.degenerate);
        assert!(p.coords.iter().flatten().all(|&c| c == 0.0));
        assert!(matches!(pca_project(&[vec![1.0, 2.0]], 1), Err(Error::Data(_))));
    }

    #[test]
    fn pca_three_points_by_hand() {
        // Points (0,0), (2,0), (1,3): mean (1,1); covariance
        // [[2/3, 0], [0, 2]], so axis 1 is +y (var 2) and axis 2 is +x (var 2/3).
        let p = pca_project(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]], 2).unwrap();
        let expect = [[-1.0, -1.0], [-1.0, 1.0], [2.0, 0.0]];
        for (c, e) in p.coords.iter().zip(expect) {
            assert!((c[0] - e[0]).abs() < 1e-8 && (c[1] - e[1]).abs() < 1e-8, "{c:?} vs {e:?}");
        }
        assert!((p.explained[0] - 0.75).abs() < 1e-12);
        assert!((p.explained[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn representations_have_expected_shape() {
        let suite = LanguageSuite::build(3, 6, 0, 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: suite.vocab_size(),
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_seq_len: 32,
        };
        let m = ModelParams::init(&cfg, 1).unwrap();
        let multi = sample_concept_corpus(&suite, 4, (2, 4), 1, 3).unwrap();
        let reps = collect_representations(&m, &suite, &multi, PromptStrategy::GptMt, 2, true, "ck").unwrap();
        assert_eq!(reps.groups.len(), 4);
        assert!(reps.groups.iter().all(|g| g.len() == 3 && g.iter().all(|v| v.len() == 8)));
        let again = collect_representations(&m, &suite, &multi, PromptStrategy::GptMt, 2, true, "ck").unwrap();
        assert_eq!(reps, again);
        let proj = pca_project(&reps.flatten(), 2).unwrap();
        let mut buf = Vec::new();
        write_coordinates(&mut buf, &reps, &proj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 12);
        assert!(text.lines().nth(4).unwrap().starts_with("1,0,"));
        assert!(matches!(
            collect_representations(&m, &suite, &[], PromptStrategy::GptMt, 2, true, "ck"),
            Err(Error::NoData(_))
        ));
    }
}
