//! Embedding lookups and a pre-LN transformer with pluggable attention masks.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{build_attention_masks, Permutation};
use crate::numeric::{truncated_normal, ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::TokenId;

/// How an n-gram view is pooled into one vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// First-token (CLS) hidden.
    #[default]
    Cls,
    /// Average of the word hiddens.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the vocabulary at build time.
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub init_std: f64,
    pub layer_norm_eps: f64,
    pub dropout: f64,
    /// Share the MLM target lookup with the input token embeddings.
    pub tie_target_embeddings: bool,
    pub ngram_pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Full-scale reference (BERT_Base): 12 layers, d=768, 12 heads.
        Self {
            vocab_size: 0,
            d_model: 128,
            layers: 4,
            heads: 4,
            ffn_dim: 512,
            max_positions: 128,
            init_std: 0.02,
            layer_norm_eps: 1e-6,
            dropout: 0.0,
            tie_target_embeddings: true,
            ngram_pooling: Pooling::Cls,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.max_positions < 2 {
            return Err(Error::config("max_positions must be ≥ 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Which side of a view pair a lookup table encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LookupRole {
    /// `g_ω`: the context side.
    Context,
    /// `g_ψ`: the target side.
    Target,
}

/// Embedding table `V × d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LookupEncoder {
    pub table: ParamId,
    pub role: LookupRole,
}

impl LookupEncoder {
    pub fn lookup(&self, tape: &mut Tape<'_>, ids: &[TokenId]) -> Result<Var> {
        let v = tape.params().get(self.table).rows();
        check_ids(ids, v)?;
        let table = tape.param(self.table);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(tape.rows(table, &idx))
    }

    /// Row-gather without a tape.
    pub fn encode(&self, params: &ParamStore, ids: &[TokenId]) -> Result<Tensor> {
        let table = params.get(self.table);
        check_ids(ids, table.rows())?;
        let rows: Vec<Vec<f64>> = ids
            .iter()
            .map(|&i| table.row_slice(i as usize).to_vec())
            .collect();
        Tensor::from_rows(&rows)
    }
}

fn check_ids(ids: &[TokenId], v: usize) -> Result<()> {
    match ids.iter().find(|&&i| i as usize >= v) {
        Some(bad) => Err(Error::contract(format!("token id {bad} out of range {v}"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Attention visibility for [`TransformerEncoder::forward`].
#[derive(Clone, Copy, Debug)]
pub enum AttnMask<'a> {
    /// Every non-PAD position sees every non-PAD position.
    All { padding: Option<&'a [bool]> },
    /// Explicit row-major `T × T` visibility.
    Custom(&'a [bool]),
}

impl AttnMask<'_> {
    pub const ALL: AttnMask<'static> = AttnMask::All { padding: None };

    fn materialize(&self, t: usize) -> Result<Vec<bool>> {
        match *self {
            AttnMask::All { padding: None } => Ok(vec![true; t * t]),
            AttnMask::All {
                padding: Some(pad),
            } => {
                if pad.len() != t {
                    return Err(Error::contract("padding mask length mismatch"));
                }
                Ok((0..t * t).map(|k| !pad[k % t]).collect())
            }
            AttnMask::Custom(m) => {
                if m.len() != t * t {
                    return Err(Error::contract(format!(
                        "attention mask has {} entries, expected {}",
                        m.len(),
                        t * t
                    )));
                }
                Ok(m.to_vec())
            }
        }
    }
}

/// Plain-value result of an encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `T × d`.
    pub hiddens: Tensor,
    /// First-token hidden.
    pub global: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerEncoder {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    heads: usize,
    d: usize,
    eps: f64,
    dropout: f64,
    pooling: Pooling,
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal weights with the configured std; zero biases; unit gains.
    Normal,
    /// All weights and biases zero; unit gains.
    Zeros,
}

impl TransformerEncoder {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamStore,
        config: &ModelConfig,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = match init {
            Init::Normal => config.init_std,
            Init::Zeros => 0.0,
        };
        let mut weight = |params: &mut ParamStore, name: String, shape: &[usize]| {
            params.register(name, truncated_normal(shape, std, rng))
        };
        let tok_emb = weight(params, "tok_emb".into(), &[config.vocab_size, d])?;
        let pos_emb = weight(params, "pos_emb".into(), &[config.max_positions, d])?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layer{l}");
            let ones = |params: &mut ParamStore, n: &str| {
                params.register(format!("{p}.{n}"), Tensor::full(&[1, d], 1.0))
            };
            let zeros = |params: &mut ParamStore, n: &str, w: usize| {
                params.register(format!("{p}.{n}"), Tensor::zeros(&[1, w]))
            };
            let ln1_g = ones(params, "ln1.g")?;
            let ln1_b = zeros(params, "ln1.b", d)?;
            let wq = weight(params, format!("{p}.attn.wq"), &[d, d])?;
            let bq = zeros(params, "attn.bq", d)?;
            let wk = weight(params, format!("{p}.attn.wk"), &[d, d])?;
            let bk = zeros(params, "attn.bk", d)?;
            let wv = weight(params, format!("{p}.attn.wv"), &[d, d])?;
            let bv = zeros(params, "attn.bv", d)?;
            let wo = weight(params, format!("{p}.attn.wo"), &[d, d])?;
            let bo = zeros(params, "attn.bo", d)?;
            let ln2_g = ones(params, "ln2.g")?;
            let ln2_b = zeros(params, "ln2.b", d)?;
            let w1 = weight(params, format!("{p}.ffn.w1"), &[d, config.ffn_dim])?;
            let b1 = zeros(params, "ffn.b1", config.ffn_dim)?;
            let w2 = weight(params, format!("{p}.ffn.w2"), &[config.ffn_dim, d])?;
            let b2 = zeros(params, "ffn.b2", d)?;
            layers.push(LayerParams {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_g = params.register("lnf.g", Tensor::full(&[1, d], 1.0))?;
        let lnf_b = params.register("lnf.b", Tensor::zeros(&[1, d]))?;
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            heads: config.heads,
            d,
            eps: config.layer_norm_eps,
            dropout: config.dropout,
            pooling: config.ngram_pooling,
        })
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.tok_emb
    }

    pub fn width(&self) -> usize {
        self.d
    }

    fn check_input(&self, params: &ParamStore, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::contract("empty input sequence"));
        }
        let max_t = params.get(self.pos_emb).rows();
        if ids.len() > max_t {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max positions {max_t}",
                ids.len()
            )));
        }
        check_ids(ids, params.get(self.tok_emb).rows())
    }

    fn embed(&self, tape: &mut Tape<'_>, ids: &[TokenId]) -> Var {
        let tok = tape.param(self.tok_emb);
        let pos = tape.param(self.pos_emb);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let t = tape.rows(tok, &idx);
        let p = tape.rows(pos, &positions);
        tape.add(t, p)
    }

    /// Multi-head attention of `queries` (`m × d`) over `keys` (`n × d`).
    fn attention(
        &self,
        tape: &mut Tape<'_>,
        layer: &LayerParams,
        queries: Var,
        keys: Var,
        visible: &[bool],
    ) -> Var {
        let wq = tape.param(layer.wq);
        let bq = tape.param(layer.bq);
        let wk = tape.param(layer.wk);
        let bk = tape.param(layer.bk);
        let wv = tape.param(layer.wv);
        let bv = tape.param(layer.bv);
        let wo = tape.param(layer.wo);
        let bo = tape.param(layer.bo);

        let q = tape.matmul(queries, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(keys, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(keys, wv);
        let v = tape.add_row(v, bv);

        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.cols(q, h * dh, dh);
            let kh = tape.cols(k, h * dh, dh);
            let vh = tape.cols(v, h * dh, dh);
            let s = tape.matmul_bt(qh, kh);
            let s = tape.scale(s, scale);
            let p = tape.masked_softmax(s, visible);
            outs.push(tape.matmul(p, vh));
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        let o = tape.matmul(o, wo);
        tape.add_row(o, bo)
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, layer: &LayerParams, x: Var) -> Var {
        let w1 = tape.param(layer.w1);
        let b1 = tape.param(layer.b1);
        let w2 = tape.param(layer.w2);
        let b2 = tape.param(layer.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2);
        tape.add_row(h, b2)
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, g: ParamId, b: ParamId) -> Var {
        let g = tape.param(g);
        let b = tape.param(b);
        tape.layer_norm(x, g, b, self.eps)
    }

    /// One residual block applied to `stream`, attending over `context`
    /// (which is `stream` itself for ordinary self-attention).
    fn block(
        &self,
        tape: &mut Tape<'_>,
        layer: &LayerParams,
        stream: Var,
        context_normed: Var,
        visible: &[bool],
        same: bool,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Var {
        let q_in = if same {
            context_normed
        } else {
            self.norm(tape, stream, layer.ln1_g, layer.ln1_b)
        };
        let a = self.attention(tape, layer, q_in, context_normed, visible);
        let a = self.maybe_dropout(tape, a, rng);
        let x = tape.add(stream, a);
        let h = self.norm(tape, x, layer.ln2_g, layer.ln2_b);
        let f = self.feed_forward(tape, layer, h);
        let f = self.maybe_dropout(tape, f, rng);
        tape.add(x, f)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Var {
        match rng {
            Some(r) if self.dropout > 0.0 => tape.dropout(x, self.dropout, r),
            _ => x,
        }
    }

    /// Hidden states (`T × d`) of `ids` under `mask`.
    ///
    /// `dropout_rng` enables dropout when the configured rate is positive.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        ids: &[TokenId],
        mask: AttnMask<'_>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_input(tape.params(), ids)?;
        let visible = mask.materialize(ids.len())?;
        let mut x = self.embed(tape, ids);
        for layer in &self.layers {
            let h = self.norm(tape, x, layer.ln1_g, layer.ln1_b);
            x = self.block(tape, layer, x, h, &visible, true, &mut dropout_rng);
        }
        Ok(self.norm(tape, x, self.lnf_g, self.lnf_b))
    }

    /// Two-stream pass under `perm`; returns query-stream hiddens (`S × d`)
    /// at the target positions, in order.
    ///
    /// The query stream starts from position embeddings alone, so no token
    /// at or after a target in the order can reach its output.
    pub fn two_stream(
        &self,
        tape: &mut Tape<'_>,
        ids: &[TokenId],
        perm: &Permutation,
    ) -> Result<Var> {
        self.check_input(tape.params(), ids)?;
        if perm.len() != ids.len() {
            return Err(Error::contract(format!(
                "permutation over {} positions for a sequence of {}",
                perm.len(),
                ids.len()
            )));
        }
        let masks = build_attention_masks(perm);
        let targets = perm.target_positions().to_vec();
        let t = ids.len();
        let query_visible: Vec<bool> = targets
            .iter()
            .flat_map(|&p| masks.query_row(p).iter().copied())
            .collect();
        debug_assert_eq!(query_visible.len(), targets.len() * t);

        let mut content = self.embed(tape, ids);
        let pos = tape.param(self.pos_emb);
        let mut query = tape.rows(pos, &targets);
        let mut none: Option<&mut dyn RngCore> = None;
        for layer in &self.layers {
            let h = self.norm(tape, content, layer.ln1_g, layer.ln1_b);
            let next_query = self.block(tape, layer, query, h, &query_visible, false, &mut none);
            content = self.block(tape, layer, content, h, &masks.content, true, &mut none);
            query = next_query;
        }
        Ok(self.norm(tape, query, self.lnf_g, self.lnf_b))
    }

    /// `1 × d` representation of `[CLS, w_i, …, w_j]` encoded on its own.
    pub fn encode_ngram(&self, tape: &mut Tape<'_>, ngram: &[TokenId]) -> Result<Var> {
        if ngram.is_empty() {
            return Err(Error::contract("empty n-gram"));
        }
        let mut ids = Vec::with_capacity(ngram.len() + 1);
        ids.push(crate::text::Vocabulary::CLS);
        ids.extend_from_slice(ngram);
        let h = self.forward(tape, &ids, AttnMask::ALL, None)?;
        Ok(match self.pooling {
            Pooling::Cls => tape.rows(h, &[0]),
            Pooling::Mean => {
                let words: Vec<usize> = (1..ids.len()).collect();
                let w = tape.rows(h, &words);
                tape.mean_rows(w)
            }
        })
    }

    /// Forward pass returning plain values.
    pub fn encode(
        &self,
        params: &ParamStore,
        ids: &[TokenId],
        mask: AttnMask<'_>,
    ) -> Result<EncoderOutput> {
        let mut tape = Tape::new(params);
        let h = self.forward(&mut tape, ids, mask, None)?;
        let hiddens = tape.value(h).clone();
        let global = hiddens.row_slice(0).to_vec();
        Ok(EncoderOutput { hiddens, global })
    }
}

/// Extra vectors used by the next-sentence objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NspHeads {
    /// Discriminator `d_φ`: weight `1 × d` and bias `1 × 1`.
    pub disc_w: ParamId,
    pub disc_b: ParamId,
    /// `ψ` of the ranking (global NCE) variant, `1 × d`.
    pub rank_psi: ParamId,
}

/// Every trainable parameter of the contextual model.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub transformer: TransformerEncoder,
    /// `g_ψ` for word targets.
    pub target: LookupEncoder,
    pub nsp: NspHeads,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, init: Init, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let transformer = TransformerEncoder::register(&mut params, &config, init, rng)?;
        let std = match init {
            Init::Normal => config.init_std,
            Init::Zeros => 0.0,
        };
        let d = config.d_model;
        let table = if config.tie_target_embeddings {
            transformer.token_embeddings()
        } else {
            params.register("psi_emb", truncated_normal(&[config.vocab_size, d], std, rng))?
        };
        let nsp = NspHeads {
            disc_w: params.register("nsp.disc_w", truncated_normal(&[1, d], std, rng))?,
            disc_b: params.register("nsp.disc_b", Tensor::zeros(&[1, 1]))?,
            rank_psi: params.register("nsp.rank_psi", truncated_normal(&[1, d], std, rng))?,
        };
        Ok(Self {
            config,
            params,
            transformer,
            target: LookupEncoder {
                table,
                role: LookupRole::Target,
            },
            nsp,
        })
    }

    pub fn width(&self) -> usize {
        self.config.d_model
    }

    /// Plain-value forward of one sequence.
    pub fn encode(&self, ids: &[TokenId], mask: AttnMask<'_>) -> Result<EncoderOutput> {
        self.transformer.encode(&self.params, ids, mask)
    }

    /// Plain-value two-stream pass.
    pub fn two_stream_encode(&self, ids: &[TokenId], perm: &Permutation) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let q = self.transformer.two_stream(&mut tape, ids, perm)?;
        Ok(tape.value(q).clone())
    }

    pub fn encode_ngram(&self, ngram: &[TokenId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let v = self.transformer.encode_ngram(&mut tape, ngram)?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// Two independent lookup tables for Skip-gram.
#[derive(Clone, Debug)]
pub struct SkipGramModel {
    pub params: ParamStore,
    pub context: LookupEncoder,
    pub target: LookupEncoder,
}

impl SkipGramModel {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, d: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let omega = params.register("omega", truncated_normal(&[vocab_size, d], std, rng))?;
        let psi = params.register("psi", truncated_normal(&[vocab_size, d], std, rng))?;
        Ok(Self {
            params,
            context: LookupEncoder {
                table: omega,
                role: LookupRole::Context,
            },
            target: LookupEncoder {
                table: psi,
                role: LookupRole::Target,
            },
        })
    }
}
