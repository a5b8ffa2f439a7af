//! Frozen encoder, trainable projector, focal pooling and a small
//! LoRA-adapted decoder with a classification head on a `[CLS]` row and a
//! language-model head on the description rows.
//!
//! Per sample the decoder sees the rows
//! `[V_proj (N); meta tokens (M); CLS; BOS, w_1, …, w_{L−1}]`.
//! Patch rows carry no position embedding. Prefix rows (patches, metadata,
//! CLS) attend to the whole prefix; description rows attend to the patches,
//! the metadata and earlier description rows, but not to CLS. The class
//! logits therefore never depend on the description.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::pooling::{focal_pool, PoolVars, INIT_STD};
use crate::rng;
use crate::synth::{self, MetaVocab, SampleRecord, BOS, END, META_LEN};
use crate::tape::{Graph, Var};

const NORM_EPS: f64 = 1e-6;
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    /// Frozen encoder and decoder, LoRA on the query and value projections.
    Lora,
    /// Every weight trainable, no adapters.
    Full,
}

impl TuneMode {
    pub fn name(self) -> &'static str {
        match self {
            TuneMode::Lora => "lora",
            TuneMode::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_enc: usize,
    pub d_llm: usize,
    pub d_k: usize,
    pub n_patches: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub desc_len: usize,
    pub classes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub tune: TuneMode,
    /// Adds the pooled descriptor to the CLS input row.
    pub fuse_pool: bool,
    /// Seed of the stand-in pretrained weights (encoder, embeddings, blocks).
    pub pretrained_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 16,
            d_enc: 16,
            d_llm: 32,
            d_k: 32,
            n_patches: 8,
            layers: 2,
            vocab_size: 64,
            desc_len: 12,
            classes: 8,
            lora_rank: 4,
            lora_alpha: 16.0,
            tune: TuneMode::Lora,
            fuse_pool: true,
            pretrained_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_v", self.d_v),
            ("d_enc", self.d_enc),
            ("d_llm", self.d_llm),
            ("d_k", self.d_k),
            ("n_patches", self.n_patches),
            ("layers", self.layers),
            ("vocab_size", self.vocab_size),
            ("desc_len", self.desc_len),
            ("classes", self.classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.tune == TuneMode::Lora {
            if self.lora_rank == 0 {
                return Err(Error::param("r", "LoRA rank must be positive"));
            }
            if !self.lora_alpha.is_finite() {
                return Err(Error::param("lora_alpha", "must be finite"));
            }
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// Rows per sample in the decoder with `text` description rows.
    pub fn seq_len(&self, text: usize) -> usize {
        self.n_patches + META_LEN + 1 + text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array,
    pub trainable: bool,
}

/// Named weights in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Array, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index(name).map(|i| &self.entries[i].value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Binds every entry onto `g`: trainable entries as differentiable
    /// leaves, the rest as constants.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.param(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect()
    }

    /// Like [`bind`](Self::bind) but with every entry constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| g.constant(e.value.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LoraIdx {
    a: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    w2: usize,
    lora_q: Option<LoraIdx>,
    lora_v: Option<LoraIdx>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: usize,
    proj_w: usize,
    proj_b: usize,
    pool: [usize; 4],
    tok: usize,
    meta: usize,
    pos_meta: usize,
    pos_desc: usize,
    cls: usize,
    blocks: Vec<BlockIdx>,
    head_w: usize,
    head_b: usize,
    lm_w: usize,
    lm_b: usize,
}

/// A sample converted to model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub patches: Array,
    pub meta_ids: Vec<usize>,
    pub desc: Vec<usize>,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// `B × C`.
    pub logits: Var,
    /// `B × d`.
    pub v_global: Var,
    /// `B × d`, mean embedding of the ground-truth description tokens.
    pub t_global: Var,
    /// `B·L × V` when description rows were supplied.
    pub token_logits: Option<Var>,
    /// `B × N`.
    pub alphas: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCount {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub trainable: usize,
    pub base: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
    pub ratio: f64,
    pub adapters: Vec<AdapterCount>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// `d_in × d_out` matrix with orthonormal rows or columns, whichever is
/// shorter, via Gram–Schmidt on Gaussian vectors.
pub fn orthogonal(r: &mut rng::Rng, d_in: usize, d_out: usize) -> Array {
    let (long, short) = (d_in.max(d_out), d_in.min(d_out));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng::normal(r)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut out = Array::zeros(&[d_in, d_out]);
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            if d_in >= d_out {
                out.set(i, j, x);
            } else {
                out.set(j, i, x);
            }
        }
    }
    out
}

/// `x·base + (α/r)·(x Aᵀ) Bᵀ` with `A: r × d_in`, `B: d_out × r`.
pub fn lora_forward(g: &mut Graph, x: Var, base: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    if g.value(a).shape()[0] == 0 {
        return Err(Error::param("r", "LoRA rank must be positive"));
    }
    let y = g.matmul(x, base)?;
    let low = g.matmul_nt(x, a)?;
    let up = g.matmul_nt(low, b)?;
    let up = g.scale(up, scale);
    g.add(y, up)
}

fn bias_add(g: &mut Graph, x: Var, bias: Var) -> Result<Var> {
    let rows = g.value(x).shape()[0];
    let ones = g.constant(Array::ones(&[rows, 1]));
    let b = g.matmul(ones, bias)?;
    g.add(x, b)
}

/// Additive attention mask for one sample with `text` description rows.
fn attention_mask(cfg: &ModelConfig, text: usize) -> Array {
    let ctx = cfg.n_patches + META_LEN;
    let prefix = ctx + 1;
    let s = prefix + text;
    let mut m = Array::full(&[s, s], MASKED);
    for r in 0..s {
        for c in 0..s {
            let open = if r < prefix {
                c < prefix
            } else {
                c < ctx || (c >= prefix && c <= r)
            };
            if open {
                m.set(r, c, 0.0);
            }
        }
    }
    m
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_llm;
        let meta_vocab = MetaVocab::default().len();
        let full = c.tune == TuneMode::Full;
        let mut pre = rng::stream(c.pretrained_seed, 100);
        let mut init = rng::stream(seed, 2);
        let mut lora_rng = rng::stream(seed, 4);
        let mut p = ParamStore::default();
        let std = |n: usize| 1.0 / libm::sqrt(n as f64);

        let enc = p.push("encoder.w", orthogonal(&mut pre, c.d_v, c.d_enc), full);
        let proj_w = p.push("proj.w", rng::gaussian(&mut init, &[c.d_enc, d], std(c.d_enc)), true);
        let proj_b = p.push("proj.b", Array::zeros(&[1, d]), true);
        let pool = [
            p.push("pool.q", rng::gaussian(&mut init, &[1, d], INIT_STD), true),
            p.push("pool.w_q", rng::gaussian(&mut init, &[d, c.d_k], INIT_STD), true),
            p.push("pool.w_k", rng::gaussian(&mut init, &[d, c.d_k], INIT_STD), true),
            p.push("pool.w_v", rng::gaussian(&mut init, &[d, d], INIT_STD), true),
        ];
        let tok = p.push("embed.tok", rng::gaussian(&mut pre, &[c.vocab_size, d], 1.0), full);
        let meta = p.push("embed.meta", rng::gaussian(&mut pre, &[meta_vocab, d], 1.0), full);
        let pos_meta = p.push("pos.meta", rng::gaussian(&mut pre, &[META_LEN, d], 0.3), full);
        let pos_desc = p.push("pos.desc", rng::gaussian(&mut pre, &[c.desc_len, d], 0.3), full);
        let cls = p.push("cls", rng::gaussian(&mut init, &[1, d], 1.0), true);
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let mut w = |name: &str, rows: usize, cols: usize| {
                p.push(
                    format!("block{l}.{name}"),
                    rng::gaussian(&mut pre, &[rows, cols], std(rows)),
                    full,
                )
            };
            let (wq, wk, wv, wo) = (w("w_q", d, d), w("w_k", d, d), w("w_v", d, d), w("w_o", d, d));
            let (w1, w2) = (w("w_1", d, 2 * d), w("w_2", 2 * d, d));
            let (lora_q, lora_v) = if full {
                (None, None)
            } else {
                let mut adapter = |name: &str| LoraIdx {
                    a: p.push(
                        format!("block{l}.{name}.a"),
                        rng::gaussian(&mut lora_rng, &[c.lora_rank, d], std(d)),
                        true,
                    ),
                    b: p.push(format!("block{l}.{name}.b"), Array::zeros(&[d, c.lora_rank]), true),
                };
                (Some(adapter("lora_q")), Some(adapter("lora_v")))
            };
            blocks.push(BlockIdx {
                wq,
                wk,
                wv,
                wo,
                w1,
                w2,
                lora_q,
                lora_v,
            });
        }
        let head_w = p.push("head.cls.w", rng::gaussian(&mut init, &[d, c.classes], std(d)), true);
        let head_b = p.push("head.cls.b", Array::zeros(&[1, c.classes]), true);
        let lm_w = p.push("head.lm.w", rng::gaussian(&mut init, &[d, c.vocab_size], std(d)), true);
        let lm_b = p.push("head.lm.b", Array::zeros(&[1, c.vocab_size]), true);
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                enc,
                proj_w,
                proj_b,
                pool,
                tok,
                meta,
                pos_meta,
                pos_desc,
                cls,
                blocks,
                head_w,
                head_b,
                lm_w,
                lm_b,
            },
        })
    }

    /// Rebuilds a model around stored weights, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} weight arrays, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (a, b) in fresh.params.entries().iter().zip(params.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.trainable != b.trainable {
                return Err(Error::Config(format!("weight {} does not match the model layout", b.name)));
            }
        }
        Ok(Self {
            params,
            ..fresh
        })
    }

    pub fn encoder(&self) -> &Array {
        &self.params.entries()[self.layout.enc].value
    }

    pub fn encode(&self, record: &SampleRecord, vocab: &MetaVocab) -> Result<EncodedSample> {
        let c = &self.config;
        if record.patch_features.shape() != [c.n_patches, c.d_v] {
            return Err(Error::Config(format!(
                "record {} has patch shape {:?}, model expects [{}, {}]",
                record.id,
                record.patch_features.shape(),
                c.n_patches,
                c.d_v
            )));
        }
        if record.description_tokens.len() != c.desc_len {
            return Err(Error::Config(format!(
                "record {} has {} description tokens, model expects {}",
                record.id,
                record.description_tokens.len(),
                c.desc_len
            )));
        }
        if let Some(&t) = record.description_tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Config(format!("record {} has token {t} outside the vocabulary", record.id)));
        }
        if record.class_id >= c.classes {
            return Err(Error::Config(format!("record {} has class {}", record.id, record.class_id)));
        }
        let (_, meta_ids) = synth::serialize_metadata(&record.meta, vocab)?;
        Ok(EncodedSample {
            patches: record.patch_features.clone(),
            meta_ids,
            desc: record.description_tokens.clone(),
            class_id: record.class_id,
        })
    }

    /// Runs the model on a batch. `text` holds the description input rows of
    /// each sample (all of equal length, at most `desc_len`); `None` skips the
    /// language-model path.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &[&EncodedSample],
        text: Option<&[Vec<usize>]>,
    ) -> Result<ModelOutput> {
        let c = &self.config;
        let l = &self.layout;
        let b = batch.len();
        if b == 0 {
            return Err(Error::Empty("forward batch"));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Contract("bound weights do not match the model".to_string()));
        }
        let text_len = match text {
            None => 0,
            Some(t) => {
                if t.len() != b {
                    return Err(Error::shape("forward text", &[b], &[t.len()]));
                }
                let n = t[0].len();
                if n == 0 || n > c.desc_len || t.iter().any(|x| x.len() != n) {
                    return Err(Error::Config(format!(
                        "description inputs must share a length in 1..={}",
                        c.desc_len
                    )));
                }
                n
            }
        };
        let n = c.n_patches;
        let s = c.seq_len(text_len);

        let mut patch_data = Vec::with_capacity(b * n * c.d_v);
        for x in batch {
            if x.patches.shape() != [n, c.d_v] {
                return Err(Error::Config(format!("patch shape {:?} does not match the model", x.patches.shape())));
            }
            patch_data.extend_from_slice(x.patches.data());
        }
        let patches = g.constant(Array::new(&[b * n, c.d_v], patch_data)?);
        let enc = g.matmul(patches, vars[l.enc])?;
        let vp = g.matmul(enc, vars[l.proj_w])?;
        let vp = bias_add(g, vp, vars[l.proj_b])?;

        let pool = PoolVars {
            q_focal: vars[l.pool[0]],
            w_q: vars[l.pool[1]],
            w_k: vars[l.pool[2]],
            w_v: vars[l.pool[3]],
        };
        let mut v_rows = Vec::with_capacity(b);
        let mut a_rows = Vec::with_capacity(b);
        let mut vp_rows = Vec::with_capacity(b);
        for i in 0..b {
            let pi = g.slice_rows(vp, i * n, (i + 1) * n)?;
            let out = focal_pool(g, pi, &pool)?;
            vp_rows.push(pi);
            v_rows.push(out.v_global);
            a_rows.push(out.alphas);
        }
        let v_global = g.concat_rows(&v_rows)?;
        let alphas = g.concat_rows(&a_rows)?;

        let meta_ids: Vec<usize> = batch.iter().flat_map(|x| x.meta_ids.iter().copied()).collect();
        let meta = g.gather_rows(vars[l.meta], &meta_ids)?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..META_LEN).collect();
        let pos = g.gather_rows(vars[l.pos_meta], &pos_ids)?;
        let meta = g.add(meta, pos)?;

        let desc_rows = match text {
            None => None,
            Some(t) => {
                let ids: Vec<usize> = t.iter().flatten().copied().collect();
                let e = g.gather_rows(vars[l.tok], &ids)?;
                let pids: Vec<usize> = (0..b).flat_map(|_| 0..text_len).collect();
                let p = g.gather_rows(vars[l.pos_desc], &pids)?;
                Some(g.add(e, p)?)
            }
        };

        let mut parts = Vec::with_capacity(4 * b);
        for i in 0..b {
            parts.push(vp_rows[i]);
            parts.push(g.slice_rows(meta, i * META_LEN, (i + 1) * META_LEN)?);
            parts.push(if c.fuse_pool {
                g.add(vars[l.cls], v_rows[i])?
            } else {
                vars[l.cls]
            });
            if let Some(dr) = desc_rows {
                parts.push(g.slice_rows(dr, i * text_len, (i + 1) * text_len)?);
            }
        }
        let mut h = g.concat_rows(&parts)?;

        let mask = g.constant(attention_mask(c, text_len));
        let inv_sqrt_d = 1.0 / libm::sqrt(c.d_llm as f64);
        for blk in &l.blocks {
            let x = g.rms_norm_rows(h, NORM_EPS);
            let q = match blk.lora_q {
                Some(a) => lora_forward(g, x, vars[blk.wq], vars[a.a], vars[a.b], c.lora_scale())?,
                None => g.matmul(x, vars[blk.wq])?,
            };
            let k = g.matmul(x, vars[blk.wk])?;
            let v = match blk.lora_v {
                Some(a) => lora_forward(g, x, vars[blk.wv], vars[a.a], vars[a.b], c.lora_scale())?,
                None => g.matmul(x, vars[blk.wv])?,
            };
            let mut heads = Vec::with_capacity(b);
            for i in 0..b {
                let qi = g.slice_rows(q, i * s, (i + 1) * s)?;
                let ki = g.slice_rows(k, i * s, (i + 1) * s)?;
                let vi = g.slice_rows(v, i * s, (i + 1) * s)?;
                let att = g.matmul_nt(qi, ki)?;
                let att = g.scale(att, inv_sqrt_d);
                let att = g.add(att, mask)?;
                let att = g.softmax_rows(att);
                heads.push(g.matmul(att, vi)?);
            }
            let o = g.concat_rows(&heads)?;
            let o = g.matmul(o, vars[blk.wo])?;
            h = g.add(h, o)?;
            let x = g.rms_norm_rows(h, NORM_EPS);
            let f = g.matmul(x, vars[blk.w1])?;
            let f = g.silu(f);
            let f = g.matmul(f, vars[blk.w2])?;
            h = g.add(h, f)?;
        }
        let h = g.rms_norm_rows(h, NORM_EPS);

        let cls_rows: Vec<usize> = (0..b).map(|i| i * s + n + META_LEN).collect();
        let hc = g.gather_rows(h, &cls_rows)?;
        let logits = g.matmul(hc, vars[l.head_w])?;
        let logits = bias_add(g, logits, vars[l.head_b])?;

        let token_logits = if text_len > 0 {
            let rows: Vec<usize> = (0..b)
                .flat_map(|i| (0..text_len).map(move |t| i * s + n + META_LEN + 1 + t))
                .collect();
            let ht = g.gather_rows(h, &rows)?;
            let tl = g.matmul(ht, vars[l.lm_w])?;
            Some(bias_add(g, tl, vars[l.lm_b])?)
        } else {
            None
        };

        let desc_ids: Vec<usize> = batch.iter().flat_map(|x| x.desc.iter().copied()).collect();
        let te = g.gather_rows(vars[l.tok], &desc_ids)?;
        let t_len = batch[0].desc.len();
        if batch.iter().any(|x| x.desc.len() != t_len) {
            return Err(Error::Config("description lengths differ within a batch".to_string()));
        }
        let mut avg = Array::zeros(&[b, b * t_len]);
        for i in 0..b {
            for t in 0..t_len {
                avg.set(i, i * t_len + t, 1.0 / t_len as f64);
            }
        }
        let avg = g.constant(avg);
        let t_global = g.matmul(avg, te)?;

        Ok(ModelOutput {
            logits,
            v_global,
            t_global,
            token_logits,
            alphas,
        })
    }

    /// Class probabilities for `samples`, evaluated in chunks.
    pub fn predict_probs(&self, samples: &[&EncodedSample], chunk: usize) -> Result<Array> {
        if samples.is_empty() {
            return Err(Error::Empty("predict_probs"));
        }
        let mut data = Vec::with_capacity(samples.len() * self.config.classes);
        for part in samples.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let vars = self.params.bind_frozen(&mut g);
            let out = self.forward(&mut g, &vars, part, None)?;
            let p = crate::tape::softmax_rows(g.value(out.logits));
            data.extend_from_slice(p.data());
        }
        Array::new(&[samples.len(), self.config.classes], data)
    }

    /// Greedy decoding for each sample, conditioned on its patches and
    /// metadata. Stops at the end token or after `max_len` tokens; the end
    /// token is not included.
    pub fn generate(&self, samples: &[&EncodedSample], max_len: usize) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::param("max_len", "must be at least 1"));
        }
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let max_len = max_len.min(self.config.desc_len);
        let b = samples.len();
        let mut inputs: Vec<Vec<usize>> = vec![vec![BOS]; b];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for step in 0..max_len {
            let mut g = Graph::new();
            let vars = self.params.bind_frozen(&mut g);
            let res = self.forward(&mut g, &vars, samples, Some(&inputs))?;
            let tl = g.value(res.token_logits.expect("text rows supplied"));
            let len = step + 1;
            for i in 0..b {
                let row = tl.row(i * len + step);
                let next = crate::pooling::argmax(row);
                if !done[i] {
                    if next == END {
                        done[i] = true;
                    } else {
                        out[i].push(next);
                    }
                }
                inputs[i].push(next);
            }
            if done.iter().all(|&x| x) {
                break;
            }
        }
        Ok(out)
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut trainable = 0;
        let mut frozen = 0;
        for e in self.params.entries() {
            if e.trainable {
                trainable += e.value.len();
            } else {
                frozen += e.value.len();
            }
        }
        let mut adapters = Vec::new();
        for (i, blk) in self.layout.blocks.iter().enumerate() {
            for (name, idx, base) in [("w_q", blk.lora_q, blk.wq), ("w_v", blk.lora_v, blk.wv)] {
                if let Some(a) = idx {
                    let e = self.params.entries();
                    let base = &e[base].value;
                    adapters.push(AdapterCount {
                        name: format!("block{i}.{name}"),
                        d_in: base.shape()[0],
                        d_out: base.shape()[1],
                        rank: self.config.lora_rank,
                        trainable: e[a.a].value.len() + e[a.b].value.len(),
                        base: base.len(),
                    });
                }
            }
        }
        ParamCount {
            trainable,
            frozen,
            ratio: trainable as f64 / (trainable + frozen) as f64,
            adapters,
        }
    }
}

/// Teacher-forced decoder inputs `[BOS, w_1, …, w_{T−1}]`.
pub fn teacher_inputs(batch: &[&EncodedSample]) -> Vec<Vec<usize>> {
    batch
        .iter()
        .map(|x| {
            let mut v = Vec::with_capacity(x.desc.len());
            v.push(BOS);
            v.extend_from_slice(&x.desc[..x.desc.len() - 1]);
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DataConfig};

    fn tiny_cfg(tune: TuneMode) -> ModelConfig {
        ModelConfig {
            d_llm: 8,
            d_k: 8,
            d_enc: 6,
            d_v: 5,
            n_patches: 4,
            layers: 1,
            vocab_size: 32,
            desc_len: 6,
            classes: 3,
            lora_rank: 2,
            tune,
            ..ModelConfig::default()
        }
    }

    fn tiny_data() -> crate::synth::Dataset {
        generate_dataset(&DataConfig {
            classes: 3,
            n_total: 30,
            n_patches: 4,
            d_v: 5,
            vocab_size: 32,
            desc_len: 6,
            eval_per_class: 2,
            ..DataConfig::default()
        })
        .unwrap()
    }

    fn encoded(m: &Model, ds: &crate::synth::Dataset, k: usize) -> Vec<EncodedSample> {
        let v = MetaVocab::default();
        ds.records.iter().take(k).map(|r| m.encode(r, &v).unwrap()).collect()
    }

    fn logits(m: &Model, batch: &[&EncodedSample], text: Option<&[Vec<usize>]>) -> (Array, Array, Option<Array>) {
        let mut g = Graph::new();
        let vars = m.params.bind_frozen(&mut g);
        let out = m.forward(&mut g, &vars, batch, text).unwrap();
        (
            g.value(out.logits).clone(),
            g.value(out.v_global).clone(),
            out.token_logits.map(|t| g.value(t).clone()),
        )
    }

    #[test]
    fn orthogonal_encoder() {
        let w = orthogonal(&mut rng::stream(1, 0), 16, 16);
        let wtw = w.matmul_tn(&w).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((wtw.get(i, j) - e).abs() < 1e-12);
            }
        }
        let tall = orthogonal(&mut rng::stream(1, 0), 8, 3);
        let g = tall.matmul_tn(&tall).unwrap();
        assert!((g.get(1, 1) - 1.0).abs() < 1e-12 && g.get(0, 2).abs() < 1e-12);
        let wide = orthogonal(&mut rng::stream(1, 0), 3, 8);
        let g = wide.matmul_nt(&wide).unwrap();
        assert!((g.get(2, 2) - 1.0).abs() < 1e-12 && g.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn lora_zero_b_is_base() {
        let mut r = rng::stream(3, 0);
        let mut g = Graph::new();
        let x = g.constant(rng::gaussian(&mut r, &[5, 8], 1.0));
        let base = g.constant(rng::gaussian(&mut r, &[8, 6], 1.0));
        let a = g.constant(rng::gaussian(&mut r, &[2, 8], 1.0));
        let b = g.constant(Array::zeros(&[6, 2]));
        let y = lora_forward(&mut g, x, base, a, b, 8.0).unwrap();
        let y0 = g.matmul(x, base).unwrap();
        for (p, q) in g.value(y).data().iter().zip(g.value(y0).data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn lora_full_rank_identity_update() {
        let d = 4;
        let mut r = rng::stream(4, 0);
        let xv = rng::gaussian(&mut r, &[3, d], 1.0);
        let basev = rng::gaussian(&mut r, &[d, d], 1.0);
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let base = g.constant(basev.clone());
        let a = g.constant(Array::identity(d));
        let b = g.constant(Array::identity(d));
        let scale = 16.0 / d as f64;
        let y = lora_forward(&mut g, x, base, a, b, scale).unwrap();
        let expect = xv.matmul(&basev).unwrap();
        for i in 0..3 {
            for j in 0..d {
                let want = expect.get(i, j) + scale * xv.get(i, j);
                assert!((g.value(y).get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lora_matches_scalar_oracle() {
        let mut r = rng::stream(5, 0);
        let (n, din, dout, rank) = (2, 3, 4, 2);
        let xv = rng::gaussian(&mut r, &[n, din], 1.0);
        let wv = rng::gaussian(&mut r, &[din, dout], 1.0);
        let av = rng::gaussian(&mut r, &[rank, din], 1.0);
        let bv = rng::gaussian(&mut r, &[dout, rank], 1.0);
        let mut g = Graph::new();
        let (x, w, a, b) = (
            g.constant(xv.clone()),
            g.constant(wv.clone()),
            g.constant(av.clone()),
            g.constant(bv.clone()),
        );
        let y = lora_forward(&mut g, x, w, a, b, 0.75).unwrap();
        for i in 0..n {
            for o in 0..dout {
                let mut want = 0.0;
                for k in 0..din {
                    let mut delta = 0.0;
                    for q in 0..rank {
                        delta += bv.get(o, q) * av.get(q, k);
                    }
                    want += xv.get(i, k) * (wv.get(k, o) + 0.75 * delta);
                }
                assert!((g.value(y).get(i, o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_inputs_give_head_bias() {
        let mut m = Model::new(tiny_cfg(TuneMode::Lora), 1).unwrap();
        let bias = Array::row_vector(&[0.3, -1.2, 2.5]).unwrap();
        for e in m.params.entries_mut() {
            if e.name == "head.cls.b" {
                e.value = bias.clone();
            } else if e.name != "head.cls.w" && e.name != "head.lm.w" {
                e.value = Array::zeros(e.value.shape());
            }
        }
        let ds = tiny_data();
        let mut x = encoded(&m, &ds, 1).remove(0);
        x.patches = Array::zeros(x.patches.shape());
        let (z, _, _) = logits(&m, &[&x], None);
        assert_eq!(z.data(), bias.data());
    }

    #[test]
    fn patch_order_does_not_matter() {
        let m = Model::new(tiny_cfg(TuneMode::Lora), 2).unwrap();
        let ds = tiny_data();
        let x = encoded(&m, &ds, 1).remove(0);
        let mut y = x.clone();
        let rows: Vec<Vec<f64>> = (0..4).rev().map(|i| x.patches.row(i).to_vec()).collect();
        y.patches = Array::from_rows(&rows).unwrap();
        let (zx, vx, _) = logits(&m, &[&x], None);
        let (zy, vy, _) = logits(&m, &[&y], None);
        for (a, b) in zx.data().iter().zip(zy.data()).chain(vx.data().iter().zip(vy.data())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_batch_independent() {
        let m = Model::new(tiny_cfg(TuneMode::Lora), 3).unwrap();
        let ds = tiny_data();
        let xs = encoded(&m, &ds, 3);
        let refs: Vec<&EncodedSample> = xs.iter().collect();
        let text = teacher_inputs(&refs);
        let (z1, _, t1) = logits(&m, &refs, Some(&text));
        let (z2, _, t2) = logits(&m, &refs, Some(&text));
        assert_eq!(z1, z2);
        assert_eq!(t1, t2);
        let (z_single, _, _) = logits(&m, &refs[1..2], None);
        for (a, b) in z_single.data().iter().zip(z1.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn class_logits_ignore_description() {
        let m = Model::new(tiny_cfg(TuneMode::Lora), 4).unwrap();
        let ds = tiny_data();
        let xs = encoded(&m, &ds, 2);
        let refs: Vec<&EncodedSample> = xs.iter().collect();
        let (z0, _, _) = logits(&m, &refs, None);
        let (z1, _, _) = logits(&m, &refs, Some(&teacher_inputs(&refs)));
        for (a, b) in z0.data().iter().zip(z1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let m = Model::new(tiny_cfg(TuneMode::Lora), 5).unwrap();
        let ds = tiny_data();
        let xs = encoded(&m, &ds, 2);
        let refs: Vec<&EncodedSample> = xs.iter().collect();
        let text = teacher_inputs(&refs);
        let (_, _, base) = logits(&m, &refs, Some(&text));
        let base = base.unwrap();
        let len = text[0].len();
        for t in 0..len {
            let mut alt = text.clone();
            for row in alt.iter_mut() {
                for (j, tok) in row.iter_mut().enumerate().skip(t + 1) {
                    *tok = (*tok + 7 + j) % 32;
                }
            }
            let (_, _, other) = logits(&m, &refs, Some(&alt));
            let other = other.unwrap();
            for i in 0..2 {
                for q in 0..=t {
                    let r = i * len + q;
                    for (a, b) in base.row(r).iter().zip(other.row(r)) {
                        assert!((a - b).abs() < 1e-12, "pos {q} changed by a token after {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_init_adapters_match_base_model() {
        for seed in 0..5 {
            let lora = Model::new(tiny_cfg(TuneMode::Lora), seed).unwrap();
            let base = Model::new(tiny_cfg(TuneMode::Full), seed).unwrap();
            let ds = tiny_data();
            let xs = encoded(&lora, &ds, 4);
            let refs: Vec<&EncodedSample> = xs.iter().collect();
            let (a, _, _) = logits(&lora, &refs, None);
            let (b, _, _) = logits(&base, &refs, None);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn generation_loss_reaches_projector() {
        let m = Model::new(tiny_cfg(TuneMode::Lora), 6).unwrap();
        let ds = tiny_data();
        let xs = encoded(&m, &ds, 3);
        let refs: Vec<&EncodedSample> = xs.iter().collect();
        let mut g = Graph::new();
        let vars = m.params.bind(&mut g);
        let text = teacher_inputs(&refs);
        let out = m.forward(&mut g, &vars, &refs, Some(&text)).unwrap();
        let targets: Vec<usize> = refs.iter().flat_map(|x| x.desc.iter().copied()).collect();
        let mask = vec![true; targets.len()];
        let loss = crate::losses::gen_loss(&mut g, out.token_logits.unwrap(), &targets, &mask).unwrap();
        let pw = m.params.index("proj.w").unwrap();
        let grad = g.backward(loss, &[vars[pw]]).unwrap().remove(0);
        assert!(grad.max_abs() > 1e-8);
    }

    #[test]
    fn end_token_peak_gives_empty_rationale() {
        let mut m = Model::new(tiny_cfg(TuneMode::Lora), 7).unwrap();
        let v = m.config.vocab_size;
        for e in m.params.entries_mut() {
            if e.name == "head.lm.w" {
                e.value = Array::zeros(e.value.shape());
            }
            if e.name == "head.lm.b" {
                let mut b = vec![0.0; v];
                b[END] = 10.0;
                e.value = Array::row_vector(&b).unwrap();
            }
        }
        let ds = tiny_data();
        let xs = encoded(&m, &ds, 3);
        let refs: Vec<&EncodedSample> = xs.iter().collect();
        assert_eq!(m.generate(&refs, 5).unwrap(), vec![Vec::<usize>::new(); 3]);
    }

    #[test]
    fn generation_is_deterministic() {
        let m = Model::new(tiny_cfg(TuneMode::Lora), 8).unwrap();
        let ds = tiny_data();
        let xs = encoded(&m, &ds, 3);
        let refs: Vec<&EncodedSample> = xs.iter().collect();
        let a = m.generate(&refs, 6).unwrap();
        assert_eq!(a, m.generate(&refs, 6).unwrap());
        assert!(a.iter().all(|s| s.len() <= 6));
        // Batched decoding equals one-at-a-time decoding.
        for (i, x) in refs.iter().enumerate() {
            assert_eq!(m.generate(&[*x], 6).unwrap()[0], a[i]);
        }
        assert!(m.generate(&refs, 0).is_err());
    }

    #[test]
    fn parameter_accounting() {
        let cfg = ModelConfig::default();
        let m = Model::new(cfg.clone(), 0).unwrap();
        let count = m.count_parameters();
        assert_eq!(count.adapters.len(), 2 * cfg.layers);
        for a in &count.adapters {
            assert_eq!(a.trainable, cfg.lora_rank * (a.d_in + a.d_out));
        }
        let full = Model::new(ModelConfig { tune: TuneMode::Full, ..cfg }, 0).unwrap().count_parameters();
        assert!(count.ratio < full.ratio);
        assert_eq!(full.ratio, 1.0);
        let enc = m.params.index("encoder.w").unwrap();
        assert!(!m.params.entries()[enc].trainable);
        // An 8 × 8 matrix with a rank-2 adapter.
        let small = Model::new(
            ModelConfig {
                d_llm: 8,
                lora_rank: 2,
                ..tiny_cfg(TuneMode::Lora)
            },
            0,
        )
        .unwrap()
        .count_parameters();
        assert_eq!(small.adapters[0].trainable, 32);
        assert_eq!(small.adapters[0].base, 64);
    }

    #[test]
    fn rejects_mismatched_records() {
        let m = Model::new(ModelConfig::default(), 0).unwrap();
        let ds = tiny_data();
        let err = m.encode(&ds.records[0], &MetaVocab::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(Model::new(
            ModelConfig {
                lora_rank: 0,
                ..ModelConfig::default()
            },
            0
        )
        .is_err());
    }
}
