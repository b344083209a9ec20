//! Decoder-only transformer.
//!
//! Pre-norm blocks, learned absolute positions, GELU feed-forward, output head
//! tied to the token embedding. Optional LoRA adapters sit on each
//! feed-forward down-projection: `W2 h + s * B (A h)` (written here in row
//! form as `h W2 + s (h A) B`).
//!
//! Two forward paths exist: [`ModelParams::hidden`] records on an autodiff
//! [`Graph`] for training; [`Decoder`] is a plain incremental forward with a
//! key/value cache used for decoding and representation extraction.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::autodiff::{Graph, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::seeding;

pub const INIT_STD: f64 = 0.02;

/// Additive attention mask value for hidden keys.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
}

mod defaults {
    pub fn d_model() -> usize {
        64
    }
    pub fn n_heads() -> usize {
        2
    }
    pub fn n_layers() -> usize {
        2
    }
    pub fn d_ff() -> usize {
        256
    }
    pub fn max_seq_len() -> usize {
        96
    }
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: defaults::d_model(),
            n_heads: defaults::n_heads(),
            n_layers: defaults::n_layers(),
            d_ff: defaults::d_ff(),
            max_seq_len: defaults::max_seq_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter count of the base model (no adapters).
    pub fn num_params(&self) -> usize {
        let (v, d, f, t, l) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len, self.n_layers);
        v * d + t * d + l * (4 * d * d + 2 * d * f + 4 * d) + 2 * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scaling numerator; the adapter output is multiplied by `alpha / rank`.
    pub alpha: f64,
}

impl LoraConfig {
    pub fn new(rank: usize) -> Self {
        Self { rank, alpha: rank as f64 }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSet {
    Full,
    Lora,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    w1: usize,
    w2: usize,
    lora: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerSlots>,
    lnf_gain: usize,
    lnf_bias: usize,
}

impl Layout {
    fn resolve(store: &ParamStore, n_layers: usize) -> Result<Self> {
        let idx =
            |name: &str| store.index_of(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")));
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let lora = match (store.index_of(&p("ff.lora_a")), store.index_of(&p("ff.lora_b"))) {
                (Some(a), Some(b)) => Some((a, b)),
                (None, None) => None,
                _ => return Err(Error::Checkpoint(format!("layer {l} has only one LoRA factor"))),
            };
            layers.push(LayerSlots {
                ln1_gain: idx(&p("ln1.gain"))?,
                ln1_bias: idx(&p("ln1.bias"))?,
                wq: idx(&p("attn.wq"))?,
                wk: idx(&p("attn.wk"))?,
                wv: idx(&p("attn.wv"))?,
                wo: idx(&p("attn.wo"))?,
                ln2_gain: idx(&p("ln2.gain"))?,
                ln2_bias: idx(&p("ln2.bias"))?,
                w1: idx(&p("ff.w1"))?,
                w2: idx(&p("ff.w2"))?,
                lora,
            });
        }
        Ok(Self {
            tok_emb: idx("tok_emb")?,
            pos_emb: idx("pos_emb")?,
            layers,
            lnf_gain: idx("final_ln.gain")?,
            lnf_bias: idx("final_ln.bias")?,
        })
    }
}

/// Right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<TokenId>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn from_sequences<S: AsRef<[TokenId]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput("batch has no sequences".into()));
        }
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::EmptyInput("batch sequences are all empty".into()));
        }
        let mut ids = vec![PAD; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * len..b * len + s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Ok(Self { ids, batch: seqs.len(), len })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

/// Transformer weights plus optional LoRA adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    lora: Option<LoraConfig>,
    store: ParamStore,
    layout: Layout,
}

fn normal_tensor(shape: &[usize], std: f64, seed: u64, index: u64) -> Tensor {
    let mut rng = seeding::stream(seed, seeding::DOMAIN_INIT, index);
    let dist = Normal::new(0.0, std).expect("valid normal std");
    Tensor::from_fn(shape, |_| dist.sample(&mut rng))
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let out_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut store = ParamStore::new();
        let mut k = 0u64;
        let mut normal = |shape: &[usize], std: f64| {
            k += 1;
            normal_tensor(shape, std, seed, k)
        };
        store.push("tok_emb", normal(&[config.vocab_size, d], INIT_STD), true);
        store.push("pos_emb", normal(&[config.max_seq_len, d], INIT_STD), true);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            store.push(p("ln1.gain"), Tensor::full(&[d], 1.0), false);
            store.push(p("ln1.bias"), Tensor::zeros(&[d]), false);
            store.push(p("attn.wq"), normal(&[d, d], INIT_STD), true);
            store.push(p("attn.wk"), normal(&[d, d], INIT_STD), true);
            store.push(p("attn.wv"), normal(&[d, d], INIT_STD), true);
            store.push(p("attn.wo"), normal(&[d, d], out_std), true);
            store.push(p("ln2.gain"), Tensor::full(&[d], 1.0), false);
            store.push(p("ln2.bias"), Tensor::zeros(&[d]), false);
            store.push(p("ff.w1"), normal(&[d, f], INIT_STD), true);
            store.push(p("ff.w2"), normal(&[f, d], out_std), true);
        }
        store.push("final_ln.gain", Tensor::full(&[d], 1.0), false);
        store.push("final_ln.bias", Tensor::zeros(&[d]), false);
        let layout = Layout::resolve(&store, config.n_layers)?;
        Ok(Self { config: config.clone(), lora: None, store, layout })
    }

    /// Rebuilds a model from a parameter store (e.g. read from a checkpoint).
    pub fn from_store(config: ModelConfig, lora: Option<LoraConfig>, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&store, config.n_layers)?;
        if layout.layers.iter().any(|l| l.lora.is_some() != lora.is_some()) {
            return Err(Error::Checkpoint("adapter tensors disagree with the LoRA configuration".into()));
        }
        let expect = |i: usize, shape: &[usize]| -> Result<()> {
            let got = store.tensor(i).shape();
            if got != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {got:?}, expected {shape:?}",
                    store.entries()[i].name
                )));
            }
            Ok(())
        };
        let (d, f) = (config.d_model, config.d_ff);
        expect(layout.tok_emb, &[config.vocab_size, d])?;
        expect(layout.pos_emb, &[config.max_seq_len, d])?;
        for l in &layout.layers {
            for i in [l.wq, l.wk, l.wv, l.wo] {
                expect(i, &[d, d])?;
            }
            expect(l.w1, &[d, f])?;
            expect(l.w2, &[f, d])?;
            if let (Some((a, b)), Some(cfg)) = (l.lora, lora) {
                expect(a, &[f, cfg.rank])?;
                expect(b, &[cfg.rank, d])?;
            }
        }
        Ok(Self { config, lora, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora(&self) -> Option<LoraConfig> {
        self.lora
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn trainable_set(&self) -> TrainableSet {
        if self.lora.is_some() {
            TrainableSet::Lora
        } else {
            TrainableSet::Full
        }
    }

    /// Adds zero-initialized-B adapters to every down-projection and freezes
    /// all base weights.
    pub fn attach_lora(&mut self, lora: LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::State("LoRA adapters are already attached".into()));
        }
        if lora.rank == 0 {
            return Err(Error::InvalidConfig("LoRA rank must be at least 1".into()));
        }
        for e in self.store.entries_mut() {
            e.trainable = false;
        }
        let (d, f, r) = (self.config.d_model, self.config.d_ff, lora.rank);
        for l in 0..self.config.n_layers {
            let mut rng = seeding::stream(seed, seeding::DOMAIN_LORA, l as u64);
            let dist = Normal::new(0.0, 1.0 / (f as f64).sqrt()).expect("valid normal std");
            let a = Tensor::from_fn(&[f, r], |_| dist.sample(&mut rng));
            self.store.push(format!("layers.{l}.ff.lora_a"), a, true);
            self.store.push(format!("layers.{l}.ff.lora_b"), Tensor::zeros(&[r, d]), true);
        }
        self.layout = Layout::resolve(&self.store, self.config.n_layers)?;
        self.lora = Some(lora);
        Ok(())
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocab { id: bad, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.len > self.config.max_seq_len {
            return Err(Error::SeqLen { len: batch.len, max: self.config.max_seq_len });
        }
        self.check_ids(&batch.ids)
    }

    /// Final-norm hidden states `[batch * len, d_model]` recorded on `g`.
    /// `vars` must come from `self.store().bind(g)`.
    pub fn hidden(&self, g: &mut Graph, vars: &[Var], batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, t, d, h) = (batch.batch, batch.len, cfg.d_model, cfg.n_heads);
        let dh = cfg.head_dim();
        let n = batch.rows();
        let lay = &self.layout;

        let tok = g.gather_rows(vars[lay.tok_emb], &batch.ids)?;
        let positions: Vec<usize> = (0..n).map(|r| r % t).collect();
        let pos = g.gather_rows(vars[lay.pos_emb], &positions)?;
        let mut x = g.add(tok, pos)?;

        // Causal mask with padded keys hidden, shared by all heads.
        let mut mask = vec![0.0; b * h * t * t];
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * t * t;
                for i in 0..t {
                    for j in 0..t {
                        if j > i || batch.ids[bi * t + j] == PAD {
                            mask[base + i * t + j] = MASKED;
                        }
                    }
                }
            }
        }
        let mask = g.constant(Tensor::new(vec![b * h, t, t], mask)?)?;
        let attn_scale = 1.0 / (dh as f64).sqrt();

        for layer in &lay.layers {
            let hn = self.norm_affine(g, vars, x, layer.ln1_gain, layer.ln1_bias, n)?;
            let split = |g: &mut Graph, w: usize| -> Result<Var> {
                let y = g.matmul(hn, vars[w])?;
                let y = g.reshape(y, &[b, t, h, dh])?;
                let y = g.permute(y, &[0, 2, 1, 3])?;
                g.reshape(y, &[b * h, t, dh])
            };
            let q = split(g, layer.wq)?;
            let k = split(g, layer.wk)?;
            let v = split(g, layer.wv)?;
            let kt = g.transpose(k)?;
            let scores = g.batch_matmul(q, kt)?;
            let scores = g.scale(scores, attn_scale)?;
            let scores = g.add(scores, mask)?;
            let probs = g.softmax(scores, 2)?;
            let ctx = g.batch_matmul(probs, v)?;
            let ctx = g.reshape(ctx, &[b, h, t, dh])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[n, d])?;
            let attn_out = g.matmul(ctx, vars[layer.wo])?;
            x = g.add(x, attn_out)?;

            let hn = self.norm_affine(g, vars, x, layer.ln2_gain, layer.ln2_bias, n)?;
            let up = g.matmul(hn, vars[layer.w1])?;
            let act = g.gelu(up)?;
            let mut down = g.matmul(act, vars[layer.w2])?;
            if let (Some((a, bb)), Some(lora)) = (layer.lora, self.lora) {
                let low = g.matmul(act, vars[a])?;
                let delta = g.matmul(low, vars[bb])?;
                let delta = g.scale(delta, lora.scaling())?;
                down = g.add(down, delta)?;
            }
            x = g.add(x, down)?;
        }
        self.norm_affine(g, vars, x, lay.lnf_gain, lay.lnf_bias, n)
    }

    fn norm_affine(&self, g: &mut Graph, vars: &[Var], x: Var, gain: usize, bias: usize, rows: usize) -> Result<Var> {
        let xn = g.layer_norm(x, LAYER_NORM_EPS)?;
        let ge = g.expand_leading(vars[gain], rows)?;
        let be = g.expand_leading(vars[bias], rows)?;
        let scaled = g.mul(xn, ge)?;
        g.add(scaled, be)
    }

    /// Tied output head applied to hidden rows `[n, d_model]`, giving `[n, vocab]`.
    pub fn head(&self, g: &mut Graph, vars: &[Var], hidden_rows: Var) -> Result<Var> {
        let et = g.transpose(vars[self.layout.tok_emb])?;
        g.matmul(hidden_rows, et)
    }

    /// Logits `[batch, len, vocab]` for a batch of token sequences.
    pub fn forward(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g)?;
        let hidden = self.hidden(&mut g, &vars, batch)?;
        let logits = self.head(&mut g, &vars, hidden)?;
        let t = g.value(logits).clone();
        Ok(t.reshaped(vec![batch.batch, batch.len, self.config.vocab_size]))
    }

    /// Final-layer, final-norm hidden state at the last non-PAD position.
    pub fn extract_representation(&self, token_ids: &[TokenId]) -> Result<Vec<f64>> {
        let last = token_ids
            .iter()
            .rposition(|&t| t != PAD)
            .ok_or_else(|| Error::EmptyInput("no non-PAD tokens to represent".into()))?;
        let mut dec = Decoder::new(self);
        let mut hidden = Vec::new();
        for &t in &token_ids[..=last] {
            hidden = dec.push_hidden(t)?;
        }
        Ok(hidden)
    }
}

/// Incremental forward pass with a key/value cache, one token at a time.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    params: &'a ModelParams,
    /// Per layer, cached keys and values `[pos, d_model]`.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    key_visible: Vec<bool>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let l = params.config.n_layers;
        Self { params, keys: vec![Vec::new(); l], values: vec![Vec::new(); l], key_visible: Vec::new(), len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    /// Feeds one token; returns logits for the next position.
    pub fn push(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let hidden = self.push_hidden(token)?;
        let cfg = &self.params.config;
        let emb = self.params.store.tensor(self.params.layout.tok_emb).data();
        let mut logits = vec![0.0; cfg.vocab_size];
        kernels::matmul_nt(1, cfg.d_model, cfg.vocab_size, &hidden, emb, &mut logits);
        Ok(logits)
    }

    /// Feeds one token; returns its final-norm hidden state.
    pub fn push_hidden(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let p = self.params;
        let cfg = &p.config;
        if self.len >= cfg.max_seq_len {
            return Err(Error::SeqLen { len: self.len + 1, max: cfg.max_seq_len });
        }
        p.check_ids(&[token])?;
        let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        let w = |i: usize| p.store.tensor(i).data();
        let pos = self.len;
        self.key_visible.push(token != PAD);

        let mut x: Vec<f64> = w(p.layout.tok_emb)[token * d..(token + 1) * d]
            .iter()
            .zip(&w(p.layout.pos_emb)[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let mut hn = vec![0.0; d];
        let (mut q, mut k, mut v) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut ctx = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut up = vec![0.0; f];
        let scale = 1.0 / (dh as f64).sqrt();

        for (li, layer) in p.layout.layers.iter().enumerate() {
            norm_affine_vec(&x, w(layer.ln1_gain), w(layer.ln1_bias), &mut hn);
            kernels::matmul(1, d, d, &hn, w(layer.wq), &mut q);
            kernels::matmul(1, d, d, &hn, w(layer.wk), &mut k);
            kernels::matmul(1, d, d, &hn, w(layer.wv), &mut v);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let (keys, values) = (&self.keys[li], &self.values[li]);
            let mut scores = vec![0.0; pos + 1];
            for hi in 0..h {
                let qh = &q[hi * dh..(hi + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[j * d + hi * dh..j * d + (hi + 1) * dh];
                    let dot = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                    // Same arithmetic as the batched path: score * scale + mask.
                    *s = if self.key_visible[j] { dot } else { dot + MASKED };
                }
                kernels::softmax_in_place(&mut scores);
                let out = &mut ctx[hi * dh..(hi + 1) * dh];
                out.iter_mut().for_each(|o| *o = 0.0);
                for (j, &pj) in scores.iter().enumerate() {
                    let vh = &values[j * d + hi * dh..j * d + (hi + 1) * dh];
                    out.iter_mut().zip(vh).for_each(|(o, vv)| *o += pj * vv);
                }
            }
            kernels::matmul(1, d, d, &ctx, w(layer.wo), &mut tmp);
            x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);

            norm_affine_vec(&x, w(layer.ln2_gain), w(layer.ln2_bias), &mut hn);
            kernels::matmul(1, d, f, &hn, w(layer.w1), &mut up);
            up.iter_mut().for_each(|u| *u = kernels::gelu(*u));
            kernels::matmul(1, f, d, &up, w(layer.w2), &mut tmp);
            if let (Some((a, b)), Some(lora)) = (layer.lora, p.lora) {
                let r = lora.rank;
                let mut low = vec![0.0; r];
                kernels::matmul(1, f, r, &up, w(a), &mut low);
                let mut delta = vec![0.0; d];
                kernels::matmul(1, r, d, &low, w(b), &mut delta);
                let s = lora.scaling();
                tmp.iter_mut().zip(&delta).for_each(|(t, dd)| *t += dd * s);
            }
            x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        }
        let mut out = vec![0.0; d];
        norm_affine_vec(&x, w(p.layout.lnf_gain), w(p.layout.lnf_bias), &mut out);
        self.len += 1;
        Ok(out)
    }
}

fn norm_affine_vec(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let mut inv = [0.0];
    kernels::layer_norm_rows(x, x.len(), LAYER_NORM_EPS, out, &mut inv);
    for ((o, g), b) in out.iter_mut().zip(gain).zip(bias) {
        *o = *o * g + b;
    }
}
