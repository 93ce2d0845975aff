//! Patch encoder, MLP projector and byte-level causal decoder.

use std::sync::Arc;

use finegrain_autodiff::{Checkpoint, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::config::VlmConfig;
use super::ops::{pixel_shuffle_index, resize_pad, tile_assembly_index, tile_image, Padded};
use super::tokenizer::{assemble_prompt, detokenize, TokenSequence, IMG};
use crate::error::{Error, Result};
use crate::geometry::{resample_plan, FeatureGrid, Image};

/// Additive attention mask for future positions; `exp` of it underflows to 0.
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Encoder,
    Projector,
    Decoder,
}

impl Partition {
    pub fn of(name: &str) -> Option<Partition> {
        match name.split('.').next()? {
            "encoder" => Some(Partition::Encoder),
            "projector" => Some(Partition::Projector),
            "decoder" => Some(Partition::Decoder),
            _ => None,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Partition::Encoder => "encoder.",
            Partition::Projector => "projector.",
            Partition::Decoder => "decoder.",
        }
    }
}

/// LayerNorm gains/shifts and biases, which carry no weight decay.
pub fn is_norm_or_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// Parameter lookup that registers each parameter on the tape at most once.
pub struct Bound<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
}

impl Bound<'_> {
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.tape.param_var(name) {
            return Ok(v);
        }
        let param = self
            .store
            .get(name)
            .ok_or_else(|| finegrain_autodiff::Error::UnknownParameter(name.to_string()))?;
        Ok(self.tape.param(param)?)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = self.tape.matmul(x, w)?;
        let bias = format!("{prefix}.bias");
        if self.store.get(&bias).is_some() {
            let b = self.p(&bias)?;
            return Ok(self.tape.add(y, b)?);
        }
        Ok(y)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    fn attention(&mut self, x: Var, prefix: &str, n_heads: usize, mask: Option<Var>) -> Result<Var> {
        let q = self.linear(x, &format!("{prefix}.q"))?;
        let k = self.linear(x, &format!("{prefix}.k"))?;
        let v = self.linear(x, &format!("{prefix}.v"))?;
        let d = self.tape.shape(q)[1];
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let t = &mut *self.tape;
            let qh = t.slice(q, 1, h * dh, dh)?;
            let kh = t.slice(k, 1, h * dh, dh)?;
            let vh = t.slice(v, 1, h * dh, dh)?;
            let kt = t.transpose(kh)?;
            let s = t.matmul(qh, kt)?;
            let mut s = t.scale(s, scale)?;
            if let Some(m) = mask {
                s = t.add(s, m)?;
            }
            let a = t.softmax(s)?;
            heads.push(t.matmul(a, vh)?);
        }
        let o = self.tape.concat(&heads, 1)?;
        self.linear(o, &format!("{prefix}.o"))
    }

    /// Pre-norm transformer block.
    fn block(&mut self, x: Var, prefix: &str, n_heads: usize, mask: Option<Var>) -> Result<Var> {
        let h = self.layer_norm(x, &format!("{prefix}.ln1"))?;
        let a = self.attention(h, &format!("{prefix}.attn"), n_heads, mask)?;
        let x = self.tape.add(x, a)?;
        let h = self.layer_norm(x, &format!("{prefix}.ln2"))?;
        let h = self.linear(h, &format!("{prefix}.mlp.fc1"))?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(h, &format!("{prefix}.mlp.fc2"))?;
        Ok(self.tape.add(x, h)?)
    }
}

/// Flattens `img_px × img_px × 3` into one row per patch, raster patch order,
/// `(y, x, channel)` order within a patch.
pub fn patchify(image: &Image, patch_px: usize) -> Result<Tensor> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if h % patch_px != 0 || w % patch_px != 0 {
        return Err(Error::NotDivisible {
            dim: "image side",
            value: h.max(w),
            by: patch_px,
        });
    }
    let (gh, gw) = (h / patch_px, w / patch_px);
    let row = patch_px * patch_px * c;
    let mut data = Vec::with_capacity(gh * gw * row);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch_px {
                for x in 0..patch_px {
                    data.extend_from_slice(image.pixel(py * patch_px + y, px * patch_px + x));
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, row], data)?)
}

fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| if i % t > i / t { MASKED } else { 0.0 })
}

/// Encoder output for one view on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[G², d_model]`, raster order.
    pub grid: Var,
}

/// Everything the decoder and the distillation branch need from an image.
#[derive(Clone, Debug)]
pub struct VisualInput {
    /// Student grid of the global (padded) view, `[G², d_model]`.
    pub grid: Var,
    /// Projected visual tokens, `[N_vis, d_model]`.
    pub tokens: Var,
    /// The padded canvas the global view was encoded from.
    pub padded: Padded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vlm {
    pub cfg: VlmConfig,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        Ok(self.store.insert(name, t)?)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Result<()> {
        Ok(self.store.insert(name, Tensor::full(shape, v))?)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
        self.normal(format!("{prefix}.weight"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
        if bias {
            self.constant(format!("{prefix}.bias"), &[fan_out], 0.0)?;
        }
        Ok(())
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.constant(format!("{prefix}.gamma"), &[d], 1.0)?;
        self.constant(format!("{prefix}.beta"), &[d], 0.0)
    }

    fn block(&mut self, prefix: &str, d: usize, ffn: usize) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln1"), d)?;
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.attn.{proj}"), d, d, false)?;
        }
        self.layer_norm(&format!("{prefix}.ln2"), d)?;
        self.linear(&format!("{prefix}.mlp.fc1"), d, ffn, true)?;
        self.linear(&format!("{prefix}.mlp.fc2"), ffn, d, true)
    }
}

impl Vlm {
    /// Random initialization: linear weights `N(0, 1/fan_in)`, unit token
    /// embeddings, `N(0, 0.25)` positional tables (separate row and column
    /// tables in the encoder), zero biases, unit gains.
    pub fn init(cfg: VlmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, g, ffn) = (cfg.d_model, cfg.grid(), cfg.ffn_mult * cfg.d_model);
        let r2 = cfg.pixel_shuffle_r * cfg.pixel_shuffle_r;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        };
        init.linear("encoder.patch", cfg.patch_px * cfg.patch_px * 3, d, true)?;
        init.normal("encoder.pos_row".into(), &[g, d], 0.5)?;
        init.normal("encoder.pos_col".into(), &[g, d], 0.5)?;
        for i in 0..cfg.enc_layers {
            init.block(&format!("encoder.block{i}"), d, ffn)?;
        }
        init.layer_norm("encoder.ln_f", d)?;
        init.linear("projector.fc1", d * r2, ffn, true)?;
        init.linear("projector.fc2", ffn, d, true)?;
        init.normal("decoder.tok_emb".into(), &[cfg.vocab, d], 1.0)?;
        init.normal("decoder.pos".into(), &[cfg.max_seq, d], 0.5)?;
        for i in 0..cfg.dec_layers {
            init.block(&format!("decoder.block{i}"), d, ffn)?;
        }
        init.layer_norm("decoder.ln_f", d)?;
        init.linear("decoder.head", d, cfg.vocab, true)?;
        Ok(Self { cfg, params: init.store })
    }

    pub fn bind<'a>(&'a self, tape: &'a mut Tape) -> Bound<'a> {
        Bound {
            tape,
            store: &self.params,
        }
    }

    /// Marks exactly the listed partitions trainable.
    pub fn set_trainable(&mut self, parts: &[Partition]) {
        self.params
            .set_trainable(|n| Partition::of(n).is_some_and(|p| parts.contains(&p)));
    }

    /// Encoder parameters only (names keep their `encoder.` prefix).
    pub fn encoder_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.name.starts_with("encoder.")) {
            out.insert(p.name.clone(), p.tensor.clone()).expect("names unique");
        }
        out
    }

    /// Runs the encoder from `store` (student or teacher) on an `img_px` view.
    pub fn encode_with(cfg: &VlmConfig, store: &ParamStore, tape: &mut Tape, image: &Image) -> Result<Encoded> {
        if image.height() != cfg.img_px || image.width() != cfg.img_px || image.channels() != 3 {
            return Err(Error::Tensor(finegrain_autodiff::Error::ShapeMismatch {
                op: "encode",
                detail: format!(
                    "expected {0}x{0}x3 image, got {1:?}",
                    cfg.img_px, image
                ),
            }));
        }
        let mut b = Bound { tape, store };
        let patches = b.tape.constant(patchify(image, cfg.patch_px)?)?;
        let x = b.linear(patches, "encoder.patch")?;
        // Patch (y, x) gets row embedding y plus column embedding x.
        let g = cfg.grid();
        let rows: Vec<usize> = (0..g * g).map(|i| i / g).collect();
        let cols: Vec<usize> = (0..g * g).map(|i| i % g).collect();
        let (row_table, col_table) = (b.p("encoder.pos_row")?, b.p("encoder.pos_col")?);
        let row_pos = b.tape.gather_rows(row_table, &rows)?;
        let col_pos = b.tape.gather_rows(col_table, &cols)?;
        let pos = b.tape.add(row_pos, col_pos)?;
        let mut x = b.tape.add(x, pos)?;
        for i in 0..cfg.enc_layers {
            x = b.block(x, &format!("encoder.block{i}"), cfg.n_heads, None)?;
        }
        let grid = b.layer_norm(x, "encoder.ln_f")?;
        Ok(Encoded { grid })
    }

    pub fn encode(&self, tape: &mut Tape, image: &Image) -> Result<Encoded> {
        Self::encode_with(&self.cfg, &self.params, tape, image)
    }

    /// Encodes an image outside any training tape and returns its grid.
    pub fn encode_grid_with(cfg: &VlmConfig, store: &ParamStore, image: &Image) -> Result<FeatureGrid> {
        let mut tape = Tape::new();
        let e = Self::encode_with(cfg, store, &mut tape, image)?;
        FeatureGrid::from_tensor(cfg.grid(), cfg.grid(), tape.value(e.grid))
    }

    /// Pixel shuffle of an `h × w` grid on the tape; identity for `r = 1`.
    pub fn shuffle(&self, tape: &mut Tape, grid: Var, h: usize, w: usize) -> Result<Var> {
        let r = self.cfg.pixel_shuffle_r;
        if r == 1 {
            return Ok(grid);
        }
        let c = tape.shape(grid)[1];
        let idx = pixel_shuffle_index(h, w, c, r)?;
        Ok(tape.gather(grid, Arc::new(idx), &[(h / r) * (w / r), c * r * r])?)
    }

    /// Two-layer GELU MLP applied per token.
    pub fn project(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let mut b = self.bind(tape);
        let h = b.linear(tokens, "projector.fc1")?;
        let h = b.tape.gelu(h)?;
        b.linear(h, "projector.fc2")
    }

    fn fit_view(&self, view: &Image) -> Result<Image> {
        let px = self.cfg.img_px;
        if view.height() == px && view.width() == px {
            return Ok(view.clone());
        }
        let plan = resample_plan(view.height(), view.width(), [0.0, 0.0, view.width() as f64, view.height() as f64], px, px)?;
        view.resample(&plan, px, px)
    }

    /// Image → padded canvas → encoder grid → (shuffle) → projector tokens.
    /// With tiling on, local tile tokens (reassembled in raster order)
    /// precede the global view's tokens.
    pub fn visual(&self, tape: &mut Tape, image: &Image) -> Result<VisualInput> {
        let g = self.cfg.grid();
        let padded = resize_pad(image, self.cfg.img_px)?;
        let global = self.encode(tape, &padded.canvas)?.grid;
        let global_tokens = self.shuffle(tape, global, g, g)?;
        let pre = if self.cfg.tile_px == 0 {
            global_tokens
        } else {
            let tiling = tile_image(image, self.cfg.tile_px)?;
            let mut grids = Vec::with_capacity(tiling.tiles.len());
            for tile in &tiling.tiles {
                grids.push(self.encode(tape, &self.fit_view(tile)?)?.grid);
            }
            let stacked = tape.concat(&grids, 0)?;
            let d = self.cfg.d_model;
            let (h, w) = (tiling.rows * g, tiling.cols * g);
            let idx = tile_assembly_index(tiling.rows, tiling.cols, g, d);
            let big = tape.gather(stacked, Arc::new(idx), &[h * w, d])?;
            let local = self.shuffle(tape, big, h, w)?;
            tape.concat(&[local, global_tokens], 0)?
        };
        let tokens = self.project(tape, pre)?;
        Ok(VisualInput {
            grid: global,
            tokens,
            padded,
        })
    }

    /// Embeds `ids`, substituting visual rows at IMG positions in order.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize], visual: Var) -> Result<Var> {
        let n_vis = tape.shape(visual)[0];
        let n_img = ids.iter().filter(|&&t| t == IMG).count();
        if n_img != n_vis {
            return Err(Error::config(format!("{n_img} IMG positions but {n_vis} visual tokens")));
        }
        let mut b = self.bind(tape);
        let emb = b.p("decoder.tok_emb")?;
        let mut parts = Vec::new();
        let (mut i, mut vis_at) = (0, 0);
        while i < ids.len() {
            let is_img = ids[i] == IMG;
            let j = ids[i..].iter().position(|&t| (t == IMG) != is_img).map_or(ids.len(), |k| i + k);
            if is_img {
                parts.push(b.tape.slice(visual, 0, vis_at, j - i)?);
                vis_at += j - i;
            } else {
                parts.push(b.tape.gather_rows(emb, &ids[i..j])?);
            }
            i = j;
        }
        let x = b.tape.concat(&parts, 0)?;
        let pos = b.p("decoder.pos")?;
        let pos = b.tape.slice(pos, 0, 0, ids.len())?;
        Ok(b.tape.add(x, pos)?)
    }

    /// Causal decoder over an embedded sequence; returns final hidden states.
    pub fn decode_hidden(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let t = tape.shape(x)[0];
        if t > self.cfg.max_seq {
            return Err(Error::TooLong {
                what: "sequence length",
                got: t,
                limit: self.cfg.max_seq,
            });
        }
        let mask = tape.constant(causal_mask(t))?;
        let mut b = self.bind(tape);
        let mut h = x;
        for i in 0..self.cfg.dec_layers {
            h = b.block(h, &format!("decoder.block{i}"), self.cfg.n_heads, Some(mask))?;
        }
        b.layer_norm(h, "decoder.ln_f")
    }

    /// Next-token logits for the given hidden-state rows.
    pub fn logits(&self, tape: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows)?;
        self.bind(tape).linear(h, "decoder.head")
    }

    /// Mean cross-entropy over masked positions, each predicted from the
    /// hidden state one step earlier.
    pub fn decode_loss(&self, tape: &mut Tape, hidden: Var, seq: &TokenSequence) -> Result<Var> {
        let (rows, targets): (Vec<usize>, Vec<usize>) = (1..seq.len())
            .filter(|&t| seq.loss_mask[t])
            .map(|t| (t - 1, seq.ids[t]))
            .unzip();
        if rows.is_empty() {
            return Err(finegrain_autodiff::Error::EmptyMask.into());
        }
        let logits = self.logits(tape, hidden, &rows)?;
        let all = vec![true; rows.len()];
        Ok(tape.masked_cross_entropy(logits, &targets, &all)?)
    }

    /// Caption loss of one (image, question, answer) triple on `tape`.
    pub fn caption_loss(&self, tape: &mut Tape, visual: &VisualInput, question: &str, answer: &str) -> Result<Var> {
        let n_vis = tape.shape(visual.tokens)[0];
        let seq = assemble_prompt(n_vis, question, Some(answer), self.cfg.max_seq)?;
        let x = self.embed(tape, &seq.ids, visual.tokens)?;
        let h = self.decode_hidden(tape, x)?;
        self.decode_loss(tape, h, &seq)
    }

    /// Greedy decoding with precomputed visual tokens `[N_vis, d]`.
    ///
    /// Stops at EOS, at any other special id, or after `max_new` tokens.
    pub fn generate_from_tokens(&self, visual: &Tensor, question: &str, max_new: usize) -> Result<String> {
        let n_vis = visual.shape()[0];
        let seq = assemble_prompt(n_vis, question, None, self.cfg.max_seq)?;
        let mut ids = seq.ids;
        if ids.len() + max_new > self.cfg.max_seq {
            return Err(Error::TooLong {
                what: "prompt plus max_new",
                got: ids.len() + max_new,
                limit: self.cfg.max_seq,
            });
        }
        let mut out = Vec::new();
        for _ in 0..max_new {
            let mut tape = Tape::new();
            let v = tape.constant(visual.clone())?;
            let x = self.embed(&mut tape, &ids, v)?;
            let h = self.decode_hidden(&mut tape, x)?;
            let l = self.logits(&mut tape, h, &[ids.len() - 1])?;
            let next = argmax(tape.value(l).data());
            if next >= 256 {
                break;
            }
            ids.push(next);
            out.push(next);
        }
        Ok(detokenize(&out))
    }

    pub fn visual_tokens(&self, image: &Image) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.visual(&mut tape, image)?;
        Ok(tape.value(v.tokens).clone())
    }

    pub fn generate(&self, image: &Image, question: &str, max_new: usize) -> Result<String> {
        self.generate_from_tokens(&self.visual_tokens(image)?, question, max_new)
    }

    /// Checkpoint holding every parameter and the config under `meta.vlm`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(json!({ "vlm": self.cfg }));
        for p in self.params.iter() {
            ckpt.tensors.push((p.name.clone(), p.tensor.clone()));
        }
        ckpt
    }

    /// Rebuilds a model from a checkpoint, ignoring non-model tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: VlmConfig = serde_json::from_value(ckpt.meta["vlm"].clone())
            .map_err(|e| Error::config(format!("checkpoint model config: {e}")))?;
        let mut model = Self::init(cfg, 0)?;
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in names {
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks {name}")))?;
            model.params.set(&name, t.clone())?;
        }
        Ok(model)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
