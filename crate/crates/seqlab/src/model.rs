//! Tiny pre-norm encoder-decoder transformer with tied embeddings.
//!
//! Two forward paths share the same kernels: a taped path for training
//! (teacher forcing, differentiable) and a raw path for decoding
//! (incremental, with per-layer key/value caches). Sharing the kernels
//! keeps the two paths numerically aligned far inside the 1e-10
//! cache-consistency budget.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::kernels as k;
use crate::numerics::{Mode, Tape, Tensor, TensorId};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;
const CKPT_MAGIC: &[u8] = b"seqlab-checkpoint\n";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: trains in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            max_len: 32,
            dropout: 0.1,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ff,
            self.max_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "model dimensions must all be at least 1: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Named map from parameter path to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    map: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn insert(&mut self, path: &str, tensor: Tensor) -> Result<()> {
        if self.map.insert(path.to_string(), tensor).is_some() {
            return Err(Error::Contract(format!("duplicate parameter path {path}")));
        }
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.map.get(path).ok_or_else(|| Error::Contract(format!("unknown parameter path {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter path {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn n_params(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}

/// Expected parameter paths and shapes for a config, in creation order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let f = cfg.d_ff;
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| specs.push((name, shape));
    if cfg.tie_embeddings {
        push("embed.weight".into(), vec![v, d]);
    } else {
        push("enc_embed.weight".into(), vec![v, d]);
        push("dec_embed.weight".into(), vec![v, d]);
        push("out_proj.weight".into(), vec![v, d]);
    }
    let attn = |prefix: String, specs: &mut Vec<(String, Vec<usize>)>| {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{prefix}.{w}"), vec![d, d]));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("{prefix}.{b}"), vec![d]));
        }
    };
    let norm = |prefix: String, specs: &mut Vec<(String, Vec<usize>)>| {
        specs.push((format!("{prefix}.gamma"), vec![d]));
        specs.push((format!("{prefix}.beta"), vec![d]));
    };
    let ffn = |prefix: String, specs: &mut Vec<(String, Vec<usize>)>| {
        specs.push((format!("{prefix}.w1"), vec![d, f]));
        specs.push((format!("{prefix}.b1"), vec![f]));
        specs.push((format!("{prefix}.w2"), vec![f, d]));
        specs.push((format!("{prefix}.b2"), vec![d]));
    };
    for l in 0..cfg.n_enc_layers {
        norm(format!("enc.{l}.ln1"), &mut specs);
        attn(format!("enc.{l}.attn"), &mut specs);
        norm(format!("enc.{l}.ln2"), &mut specs);
        ffn(format!("enc.{l}.ff"), &mut specs);
    }
    norm("enc.ln_f".into(), &mut specs);
    for l in 0..cfg.n_dec_layers {
        norm(format!("dec.{l}.ln1"), &mut specs);
        attn(format!("dec.{l}.attn"), &mut specs);
        norm(format!("dec.{l}.ln2"), &mut specs);
        attn(format!("dec.{l}.cross"), &mut specs);
        norm(format!("dec.{l}.ln3"), &mut specs);
        ffn(format!("dec.{l}.ff"), &mut specs);
    }
    norm("dec.ln_f".into(), &mut specs);
    specs
}

/// Sinusoidal positional encoding table, `[n_pos, d]` row-major.
pub fn sinusoidal_pe(n_pos: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n_pos * d];
    for pos in 0..n_pos {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// The transformer: configuration plus parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// Fresh model with seeded initialization: Xavier-uniform weight
    /// matrices, unit/zero norms, zero biases, Gaussian embeddings.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for (path, shape) in param_specs(&cfg) {
            let n: usize = shape.iter().product();
            let last = path.rsplit('.').next().unwrap_or("");
            let data: Vec<f64> = if last == "gamma" {
                vec![1.0; n]
            } else if last == "beta" || last.starts_with('b') {
                vec![0.0; n]
            } else if path.ends_with("embed.weight") || path == "out_proj.weight" {
                (0..n).map(|_| gauss(&mut rng) * 0.1).collect()
            } else {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random::<f64>() * 2.0 * a - a).collect()
            };
            map.insert(path, Tensor::from_vec(&shape, data)?);
        }
        Ok(Model { cfg, params: Parameters { map } })
    }

    fn check_tokens(&self, what: &str, toks: &[u32]) -> Result<()> {
        if toks.is_empty() {
            return Err(Error::Validation(format!("{what} sequence is empty")));
        }
        if toks.len() > self.cfg.max_len {
            return Err(Error::Validation(format!(
                "{what} sequence length {} exceeds max_len {}",
                toks.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = toks.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Validation(format!(
                "{what} token id {bad} out of range for vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Raw (non-differentiable) encoder pass; output is `[|x|, d_model]`.
    pub fn encode(&self, x: &[u32]) -> Result<Tensor> {
        self.check_tokens("source", x)?;
        let d = self.cfg.d_model;
        let t = x.len();
        let scale = (d as f64).sqrt();
        let pe = sinusoidal_pe(t, d);
        let emb = self.embed_table("enc")?;
        let mut h = vec![0.0; t * d];
        for (i, &tok) in x.iter().enumerate() {
            let row = &emb.data[tok as usize * d..(tok as usize + 1) * d];
            for j in 0..d {
                h[i * d + j] = row[j] * scale + pe[i * d + j];
            }
        }
        for l in 0..self.cfg.n_enc_layers {
            let normed = self.ln_raw(&h, t, &format!("enc.{l}.ln1"))?;
            let att = self.attn_raw(&format!("enc.{l}.attn"), &normed, t, &normed, t, false)?;
            add_assign(&mut h, &att);
            let normed = self.ln_raw(&h, t, &format!("enc.{l}.ln2"))?;
            let ff = self.ffn_raw(&format!("enc.{l}.ff"), &normed, t)?;
            add_assign(&mut h, &ff);
        }
        let out = self.ln_raw(&h, t, "enc.ln_f")?;
        Tensor::from_vec(&[t, d], out)
    }

    /// Fresh incremental-decoding state over an encoder memory.
    pub fn start_decoder(&self, memory: &Tensor) -> Result<DecoderState> {
        if memory.ndim() != 2 || memory.shape[1] != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "encoder memory shape {:?} does not match d_model {}",
                memory.shape, self.cfg.d_model
            )));
        }
        let s = memory.shape[0];
        let nh = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let mut cross_k = Vec::with_capacity(self.cfg.n_dec_layers);
        let mut cross_v = Vec::with_capacity(self.cfg.n_dec_layers);
        for l in 0..self.cfg.n_dec_layers {
            let prefix = format!("dec.{l}.cross");
            let kv =
                self.linear_raw(&memory.data, s, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
            let vv =
                self.linear_raw(&memory.data, s, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
            cross_k.push(split_heads(&kv, s, nh, dh));
            cross_v.push(split_heads(&vv, s, nh, dh));
        }
        Ok(DecoderState {
            tokens: Vec::new(),
            src_len: s,
            self_k: vec![Vec::new(); self.cfg.n_dec_layers],
            self_v: vec![Vec::new(); self.cfg.n_dec_layers],
            cross_k,
            cross_v,
        })
    }

    /// Feeds one decoder-input token; returns next-token logits `[V]`.
    pub fn decode_step(&self, state: &mut DecoderState, token: u32) -> Result<Vec<f64>> {
        if state.tokens.len() >= self.cfg.max_len {
            return Err(Error::Validation(format!(
                "decoder length {} would exceed max_len {}",
                state.tokens.len() + 1,
                self.cfg.max_len
            )));
        }
        if token as usize >= self.cfg.vocab_size {
            return Err(Error::Validation(format!(
                "decoder token id {token} out of range for vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let pos = state.tokens.len();
        let scale = (d as f64).sqrt();
        let pe = sinusoidal_pe(pos + 1, d);
        let emb = self.embed_table("dec")?;
        let mut h = vec![0.0; d];
        let row = &emb.data[token as usize * d..(token as usize + 1) * d];
        for j in 0..d {
            h[j] = row[j] * scale + pe[pos * d + j];
        }
        state.tokens.push(token);
        let t = pos + 1;
        for l in 0..self.cfg.n_dec_layers {
            let normed = self.ln_raw(&h, 1, &format!("dec.{l}.ln1"))?;
            let prefix = format!("dec.{l}.attn");
            let q =
                self.linear_raw(&normed, 1, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
            let kt =
                self.linear_raw(&normed, 1, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
            let vt =
                self.linear_raw(&normed, 1, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
            state.self_k[l].extend_from_slice(&kt);
            state.self_v[l].extend_from_slice(&vt);
            let k_heads = split_heads(&state.self_k[l], t, nh, dh);
            let v_heads = split_heads(&state.self_v[l], t, nh, dh);
            let ctx = attend_one_row(&q, &k_heads, &v_heads, t, nh, dh);
            let att = self.linear_raw(&ctx, 1, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
            add_assign(&mut h, &att);

            let normed = self.ln_raw(&h, 1, &format!("dec.{l}.ln2"))?;
            let prefix = format!("dec.{l}.cross");
            let q =
                self.linear_raw(&normed, 1, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
            let ctx =
                attend_one_row(&q, &state.cross_k[l], &state.cross_v[l], state.src_len, nh, dh);
            let att = self.linear_raw(&ctx, 1, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
            add_assign(&mut h, &att);

            let normed = self.ln_raw(&h, 1, &format!("dec.{l}.ln3"))?;
            let ff = self.ffn_raw(&format!("dec.{l}.ff"), &normed, 1)?;
            add_assign(&mut h, &ff);
        }
        let out = self.ln_raw(&h, 1, "dec.ln_f")?;
        let proj = self.out_table()?;
        let v = self.cfg.vocab_size;
        let mut logits = vec![0.0; v];
        k::mm_nt_acc(&mut logits, &out, &proj.data, 1, d, v);
        Ok(logits)
    }

    /// Teacher-forced logits in eval mode; row i scores P(y_i | x, y_<i).
    pub fn forward_teacher_forcing(&self, x: &[u32], y: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new(Mode::Eval);
        let taped = self.register(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let memory = self.encode_taped(&mut tape, &taped, x, &mut rng)?;
        let logits = self.decoder_logits_taped(&mut tape, &taped, memory, y, &mut rng)?;
        Ok(tape.value(logits).clone())
    }

    /// Registers every parameter on a tape as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> TapedParams {
        let mut ids = BTreeMap::new();
        for (path, t) in self.params.iter() {
            ids.insert(path.clone(), tape.var(t.clone()));
        }
        TapedParams { ids }
    }

    /// Taped encoder pass; output id holds `[|x|, d_model]`.
    pub fn encode_taped(
        &self,
        tape: &mut Tape,
        tp: &TapedParams,
        x: &[u32],
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        self.check_tokens("source", x)?;
        let emb_path = if self.cfg.tie_embeddings { "embed.weight" } else { "enc_embed.weight" };
        let mut h = self.embed_taped(tape, tp.id(emb_path)?, x, rng)?;
        for l in 0..self.cfg.n_enc_layers {
            let normed = self.ln_taped(tape, tp, h, &format!("enc.{l}.ln1"))?;
            let att = self.attn_taped(tape, tp, &format!("enc.{l}.attn"), normed, normed, false)?;
            let att = tape.dropout(att, self.cfg.dropout, rng)?;
            h = tape.add(h, att)?;
            let normed = self.ln_taped(tape, tp, h, &format!("enc.{l}.ln2"))?;
            let ff = self.ffn_taped(tape, tp, &format!("enc.{l}.ff"), normed)?;
            let ff = tape.dropout(ff, self.cfg.dropout, rng)?;
            h = tape.add(h, ff)?;
        }
        self.ln_taped(tape, tp, h, "enc.ln_f")
    }

    /// Taped teacher-forced decoder; output id holds logits `[|y|, V]`.
    pub fn decoder_logits_taped(
        &self,
        tape: &mut Tape,
        tp: &TapedParams,
        memory: TensorId,
        y: &[u32],
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        self.check_tokens("target", y)?;
        let mut dec_in = Vec::with_capacity(y.len());
        dec_in.push(crate::BOS_ID);
        dec_in.extend_from_slice(&y[..y.len() - 1]);
        let emb_path = if self.cfg.tie_embeddings { "embed.weight" } else { "dec_embed.weight" };
        let mut h = self.embed_taped(tape, tp.id(emb_path)?, &dec_in, rng)?;
        for l in 0..self.cfg.n_dec_layers {
            let normed = self.ln_taped(tape, tp, h, &format!("dec.{l}.ln1"))?;
            let att = self.attn_taped(tape, tp, &format!("dec.{l}.attn"), normed, normed, true)?;
            let att = tape.dropout(att, self.cfg.dropout, rng)?;
            h = tape.add(h, att)?;
            let normed = self.ln_taped(tape, tp, h, &format!("dec.{l}.ln2"))?;
            let att =
                self.attn_taped(tape, tp, &format!("dec.{l}.cross"), normed, memory, false)?;
            let att = tape.dropout(att, self.cfg.dropout, rng)?;
            h = tape.add(h, att)?;
            let normed = self.ln_taped(tape, tp, h, &format!("dec.{l}.ln3"))?;
            let ff = self.ffn_taped(tape, tp, &format!("dec.{l}.ff"), normed)?;
            let ff = tape.dropout(ff, self.cfg.dropout, rng)?;
            h = tape.add(h, ff)?;
        }
        let out = self.ln_taped(tape, tp, h, "dec.ln_f")?;
        let proj_path = if self.cfg.tie_embeddings { "embed.weight" } else { "out_proj.weight" };
        tape.matmul_nt(out, tp.id(proj_path)?)
    }

    fn embed_taped(
        &self,
        tape: &mut Tape,
        table: TensorId,
        toks: &[u32],
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        let d = self.cfg.d_model;
        let e = tape.embedding(table, toks)?;
        let scaled = tape.scale(e, (d as f64).sqrt());
        let pe = Tensor::from_vec(&[toks.len(), d], sinusoidal_pe(toks.len(), d))?;
        let pe = tape.constant(pe);
        let summed = tape.add(scaled, pe)?;
        tape.dropout(summed, self.cfg.dropout, rng)
    }

    fn ln_taped(
        &self,
        tape: &mut Tape,
        tp: &TapedParams,
        x: TensorId,
        prefix: &str,
    ) -> Result<TensorId> {
        tape.layer_norm(
            x,
            tp.id(&format!("{prefix}.gamma"))?,
            tp.id(&format!("{prefix}.beta"))?,
            LN_EPS,
        )
    }

    fn linear_taped(
        &self,
        tape: &mut Tape,
        tp: &TapedParams,
        x: TensorId,
        w: &str,
        b: &str,
    ) -> Result<TensorId> {
        let y = tape.matmul(x, tp.id(w)?)?;
        tape.add_row(y, tp.id(b)?)
    }

    fn attn_taped(
        &self,
        tape: &mut Tape,
        tp: &TapedParams,
        prefix: &str,
        q_src: TensorId,
        kv_src: TensorId,
        causal: bool,
    ) -> Result<TensorId> {
        let nh = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let t = tape.shape(q_src)[0];
        let s = tape.shape(kv_src)[0];
        let q =
            self.linear_taped(tape, tp, q_src, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let kk =
            self.linear_taped(tape, tp, kv_src, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v =
            self.linear_taped(tape, tp, kv_src, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let q = tape.reshape(q, &[t, nh, dh])?;
        let q = tape.permute3(q, [1, 0, 2])?;
        let kk = tape.reshape(kk, &[s, nh, dh])?;
        let kk = tape.permute3(kk, [1, 0, 2])?;
        let v = tape.reshape(v, &[s, nh, dh])?;
        let v = tape.permute3(v, [1, 0, 2])?;
        let scores = tape.bmm_nt(q, kk)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = if causal {
            if t != s {
                return Err(Error::Shape(format!(
                    "causal attention needs square scores, got {t}x{s}"
                )));
            }
            let mut m = vec![0.0; nh * t * s];
            for h in 0..nh {
                for i in 0..t {
                    for j in (i + 1)..s {
                        m[(h * t + i) * s + j] = MASK_NEG;
                    }
                }
            }
            let mask = tape.constant(Tensor::from_vec(&[nh, t, s], m)?);
            tape.add(scores, mask)?
        } else {
            scores
        };
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.permute3(ctx, [1, 0, 2])?;
        let ctx = tape.reshape(ctx, &[t, nh * dh])?;
        self.linear_taped(tape, tp, ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn_taped(
        &self,
        tape: &mut Tape,
        tp: &TapedParams,
        prefix: &str,
        x: TensorId,
    ) -> Result<TensorId> {
        let h = self.linear_taped(tape, tp, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = tape.gelu(h);
        self.linear_taped(tape, tp, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn embed_table(&self, side: &str) -> Result<&Tensor> {
        if self.cfg.tie_embeddings {
            self.params.get("embed.weight")
        } else {
            self.params.get(&format!("{side}_embed.weight"))
        }
    }

    fn out_table(&self) -> Result<&Tensor> {
        if self.cfg.tie_embeddings {
            self.params.get("embed.weight")
        } else {
            self.params.get("out_proj.weight")
        }
    }

    fn ln_raw(&self, x: &[f64], rows: usize, prefix: &str) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        let gv = &self.params.get(&format!("{prefix}.gamma"))?.data;
        let bv = &self.params.get(&format!("{prefix}.beta"))?.data;
        let mut out = x.to_vec();
        for l in 0..rows {
            k::layer_norm_lane(&mut out[l * d..(l + 1) * d], LN_EPS);
        }
        for l in 0..rows {
            for i in 0..d {
                out[l * d + i] = out[l * d + i] * gv[i] + bv[i];
            }
        }
        Ok(out)
    }

    fn linear_raw(&self, x: &[f64], rows: usize, w: &str, b: &str) -> Result<Vec<f64>> {
        let wt = self.params.get(w)?;
        let bt = self.params.get(b)?;
        let (din, dout) = (wt.shape[0], wt.shape[1]);
        let mut y = k::mm_nn(x, &wt.data, rows, din, dout);
        for (i, v) in y.iter_mut().enumerate() {
            *v += bt.data[i % dout];
        }
        Ok(y)
    }

    fn ffn_raw(&self, prefix: &str, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let mut h = self.linear_raw(x, rows, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        for v in h.iter_mut() {
            *v = k::gelu(*v);
        }
        self.linear_raw(&h, rows, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Full multi-head attention over `t` query rows and `s` key rows.
    fn attn_raw(
        &self,
        prefix: &str,
        q_src: &[f64],
        t: usize,
        kv_src: &[f64],
        s: usize,
        causal: bool,
    ) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let q = self.linear_raw(q_src, t, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let kk = self.linear_raw(kv_src, s, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear_raw(kv_src, s, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let qh = split_heads(&q, t, nh, dh);
        let kh = split_heads(&kk, s, nh, dh);
        let vh = split_heads(&v, s, nh, dh);
        let inv = 1.0 / (dh as f64).sqrt();
        let mut ctx_heads = vec![0.0; nh * t * dh];
        for h in 0..nh {
            let mut scores = vec![0.0; t * s];
            k::mm_nt_acc(
                &mut scores,
                &qh[h * t * dh..(h + 1) * t * dh],
                &kh[h * s * dh..(h + 1) * s * dh],
                t,
                dh,
                s,
            );
            for v in scores.iter_mut() {
                *v *= inv;
            }
            if causal {
                for i in 0..t {
                    for j in (i + 1)..s {
                        scores[i * s + j] += MASK_NEG;
                    }
                }
            }
            for i in 0..t {
                k::softmax_lane(&mut scores[i * s..(i + 1) * s]);
            }
            k::mm_nn_acc(
                &mut ctx_heads[h * t * dh..(h + 1) * t * dh],
                &scores,
                &vh[h * s * dh..(h + 1) * s * dh],
                t,
                s,
                dh,
            );
        }
        let mut ctx = vec![0.0; t * d];
        for h in 0..nh {
            for i in 0..t {
                for j in 0..dh {
                    ctx[i * d + h * dh + j] = ctx_heads[(h * t + i) * dh + j];
                }
            }
        }
        self.linear_raw(&ctx, t, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// Writes the checkpoint: magic, version, config, parameter tensors.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.cfg)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.map.len() as u64).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u64).to_le_bytes())?;
            for &dim in &t.shape {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Model::save`]. Bit-exact.
    pub fn load(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = vec![0u8; CKPT_MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format(format!(
                "not a checkpoint file: bad magic in {}",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = read_u64(&mut r)? as usize;
        let mut cfg_buf = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_buf)?;
        let cfg: ModelConfig = serde_json::from_slice(&cfg_buf)
            .map_err(|e| Error::Format(format!("checkpoint config unreadable: {e}")))?;
        cfg.validate()?;
        let n_params = read_u64(&mut r)? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..n_params {
            let name_len = read_u64(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::Format(format!("checkpoint parameter name: {e}")))?;
            let ndim = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            map.insert(name, Tensor::from_vec(&shape, data)?);
        }
        let expected = param_specs(&cfg);
        if expected.len() != map.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, config implies {}",
                map.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match map.get(name) {
                Some(t) if &t.shape == shape => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "checkpoint parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape
                    )))
                }
                None => {
                    return Err(Error::Format(format!("checkpoint is missing parameter {name}")))
                }
            }
        }
        Ok(Model { cfg, params: Parameters { map } })
    }
}

/// Parameter leaf ids on a specific tape.
pub struct TapedParams {
    ids: BTreeMap<String, TensorId>,
}

impl TapedParams {
    pub fn id(&self, path: &str) -> Result<TensorId> {
        self.ids
            .get(path)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {path} not registered on tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

/// Incremental decoding state: consumed tokens plus per-layer caches.
#[derive(Debug, Clone)]
pub struct DecoderState {
    tokens: Vec<u32>,
    src_len: usize,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
}

impl DecoderState {
    /// Decoder-input tokens consumed so far (starting with BOS).
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `[T, d]` rows into `[H, T, dh]` head-major layout.
fn split_heads(x: &[f64], t: usize, nh: usize, dh: usize) -> Vec<f64> {
    let d = nh * dh;
    let mut out = vec![0.0; t * d];
    for h in 0..nh {
        for i in 0..t {
            for j in 0..dh {
                out[(h * t + i) * dh + j] = x[i * d + h * dh + j];
            }
        }
    }
    out
}

/// Attention for a single query row against `s` cached key/value rows
/// already in head-major `[H, s, dh]` layout.
fn attend_one_row(
    q: &[f64],
    k_heads: &[f64],
    v_heads: &[f64],
    s: usize,
    nh: usize,
    dh: usize,
) -> Vec<f64> {
    let inv = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; nh * dh];
    for h in 0..nh {
        let mut scores = vec![0.0; s];
        k::mm_nt_acc(
            &mut scores,
            &q[h * dh..(h + 1) * dh],
            &k_heads[h * s * dh..(h + 1) * s * dh],
            1,
            dh,
            s,
        );
        for v in scores.iter_mut() {
            *v *= inv;
        }
        k::softmax_lane(&mut scores);
        k::mm_nn_acc(
            &mut ctx[h * dh..(h + 1) * dh],
            &scores,
            &v_heads[h * s * dh..(h + 1) * s * dh],
            1,
            s,
            dh,
        );
    }
    ctx
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
