//! Frozen transformer-style feature extractor and the shared classifier head.
//!
//! The backbone tokenizes a flat input into patch embeddings, prepends a
//! class token plus fixed sinusoidal position encodings (tokens only, never
//! prompt rows), and runs a stack of frozen pre-norm attention blocks. The
//! same block stack serves both the promptless query path and the
//! prompt-prepended classification path.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, VarId};

/// Embedding width of the frozen backbone.
pub const EMBED_DIM: usize = 32;
/// Number of input patches / token rows.
pub const TOKEN_ROWS: usize = 8;
pub const N_BLOCKS: usize = 2;
pub const N_HEADS: usize = 4;
pub const FF_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub token_rows: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ff_width: usize,
}

impl BackboneConfig {
    pub fn for_input_dim(input_dim: usize) -> Self {
        BackboneConfig {
            input_dim,
            embed_dim: EMBED_DIM,
            token_rows: TOKEN_ROWS,
            n_blocks: N_BLOCKS,
            n_heads: N_HEADS,
            ff_width: FF_WIDTH,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.input_dim / self.token_rows
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.input_dim % self.token_rows != 0 {
            return Err(Error::Config(format!(
                "input dimension {} must be a positive multiple of {} token rows",
                self.input_dim, self.token_rows
            )));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// One pre-norm attention block's frozen parameters.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff_w1: Tensor,
    pub ff_w2: Tensor,
}

struct BlockVars {
    wq: VarId,
    wk: VarId,
    wv: VarId,
    wo: VarId,
    ln1_gamma: VarId,
    ln1_beta: VarId,
    ln2_gamma: VarId,
    ln2_beta: VarId,
    ff_w1: VarId,
    ff_w2: VarId,
}

/// Per-tape handles for the frozen block parameters. Register once per tape
/// and reuse across every forward built on it.
pub struct BackboneVars {
    blocks: Vec<BlockVars>,
}

#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    seed: u64,
    patch_proj: Tensor,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<BlockParams>,
}

impl FrozenBackbone {
    /// Deterministic seeded construction; every parameter stays frozen.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let mut draw = |rows: usize, cols: usize| -> Tensor {
            let values: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Tensor::matrix(rows, cols, values).expect("consistent shape")
        };

        let patch_proj = draw(config.patch_dim(), d);
        let cls = draw(1, d);
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                ln1_gamma: Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
                ln1_beta: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
                ln2_beta: Tensor::zeros(vec![d]),
                ff_w1: draw(d, config.ff_width),
                ff_w2: draw(config.ff_width, d),
            })
            .collect();

        Ok(FrozenBackbone {
            config,
            seed,
            patch_proj,
            cls,
            pos: sinusoidal_positions(1 + config.token_rows, d),
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn patch_proj(&self) -> &Tensor {
        &self.patch_proj
    }

    /// Reshape a flat input into patch rows and project each one.
    /// No bias, so this is a pure linear map.
    pub fn tokenize(&self, x: &[f64]) -> Result<Tensor> {
        let rows = self.config.token_rows;
        let pd = self.config.patch_dim();
        let d = self.config.embed_dim;
        if x.len() != rows * pd {
            return Err(Error::ShapeMismatch {
                op: "tokenize",
                lhs: vec![x.len()],
                rhs: vec![rows * pd],
            });
        }
        let proj = self.patch_proj.values();
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for p in 0..pd {
                let xv = x[r * pd + p];
                if xv == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out[r * d + j] += xv * proj[p * d + j];
                }
            }
        }
        Tensor::matrix(rows, d, out)
    }

    /// `[cls; tokens] + positions` — the prompt-free part of every input
    /// sequence. Entirely constant, so it never lives on a tape.
    pub fn input_base(&self, x: &[f64]) -> Result<Tensor> {
        let tokens = self.tokenize(x)?;
        let d = self.config.embed_dim;
        let rows = 1 + self.config.token_rows;
        let mut out = Vec::with_capacity(rows * d);
        out.extend_from_slice(self.cls.values());
        out.extend_from_slice(tokens.values());
        for (v, p) in out.iter_mut().zip(self.pos.values()) {
            *v += p;
        }
        Tensor::matrix(rows, d, out)
    }

    /// Register the frozen block parameters on a tape.
    pub fn register_vars(&self, tape: &mut Tape) -> BackboneVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                wq: tape.constant(&b.wq),
                wk: tape.constant(&b.wk),
                wv: tape.constant(&b.wv),
                wo: tape.constant(&b.wo),
                ln1_gamma: tape.constant(&b.ln1_gamma),
                ln1_beta: tape.constant(&b.ln1_beta),
                ln2_gamma: tape.constant(&b.ln2_gamma),
                ln2_beta: tape.constant(&b.ln2_beta),
                ff_w1: tape.constant(&b.ff_w1),
                ff_w2: tape.constant(&b.ff_w2),
            })
            .collect();
        BackboneVars { blocks }
    }

    fn forward_block(&self, tape: &mut Tape, vars: &BlockVars, x: VarId) -> Result<VarId> {
        let d = self.config.embed_dim;
        let heads = self.config.n_heads;
        let dh = d / heads;

        let ln1 = tape.layer_norm_rows(x, vars.ln1_gamma, vars.ln1_beta)?;
        let q = tape.matmul(ln1, vars.wq)?;
        let k = tape.matmul(ln1, vars.wk)?;
        let v = tape.matmul(ln1, vars.wv)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scaled);
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        let proj = tape.matmul(merged, vars.wo)?;
        let x = tape.add(x, proj)?;

        let ln2 = tape.layer_norm_rows(x, vars.ln2_gamma, vars.ln2_beta)?;
        let f1 = tape.matmul(ln2, vars.ff_w1)?;
        let act = tape.gelu(f1);
        let f2 = tape.matmul(act, vars.ff_w2)?;
        tape.add(x, f2)
    }

    /// Run all frozen blocks over an (S × D) sequence node.
    pub fn forward_seq(&self, tape: &mut Tape, vars: &BackboneVars, seq: VarId) -> Result<VarId> {
        let mut x = seq;
        for block in &vars.blocks {
            x = self.forward_block(tape, block, x)?;
        }
        Ok(x)
    }

    /// Promptless forward: the frozen class-token embedding used for prompt
    /// matching. Never contributes gradients.
    pub fn extract_query(&self, x: &[f64]) -> Result<Vec<f64>> {
        let base = self.input_base(x)?;
        let mut tape = Tape::new();
        let vars = self.register_vars(&mut tape);
        let seq = tape.constant(&base);
        let out = self.forward_seq(&mut tape, &vars, seq)?;
        let cls = tape.slice_rows(out, 0, 1)?;
        Ok(tape.values(cls).to_vec())
    }

    /// Queries for a whole dataset, one row per sample in dataset order.
    pub fn extract_features_batch(&self, samples: &[Vec<f64>]) -> Result<Tensor> {
        if samples.is_empty() {
            return Err(Error::EmptyInput {
                op: "extract_features_batch",
            });
        }
        let d = self.config.embed_dim;
        let mut out = Vec::with_capacity(samples.len() * d);
        for s in samples {
            out.extend_from_slice(&self.extract_query(s)?);
        }
        Tensor::matrix(samples.len(), d, out)
    }

    /// Prompt-prepended classification forward on an existing tape. The
    /// prompt node may require grad; everything else here is frozen.
    pub fn forward_with_prompt(
        &self,
        tape: &mut Tape,
        vars: &BackboneVars,
        x: &[f64],
        prompt: VarId,
        head: &HeadVars,
    ) -> Result<VarId> {
        let d = self.config.embed_dim;
        let pshape = tape.shape(prompt).to_vec();
        if pshape.len() != 2 || pshape[1] != d {
            return Err(Error::ShapeMismatch {
                op: "forward_with_prompt",
                lhs: pshape,
                rhs: vec![0, d],
            });
        }
        let base = self.input_base(x)?;
        let base_id = tape.constant(&base);
        let seq = tape.concat_rows(&[base_id, prompt])?;
        let out = self.forward_seq(tape, vars, seq)?;
        let cls = tape.slice_rows(out, 0, 1)?;
        let scores = tape.matmul(cls, head.weight)?;
        tape.add(scores, head.bias)
    }

    /// FNV-1a over every frozen parameter bit, in construction order.
    pub fn checksum(&self) -> u64 {
        checksum_tensors(self.param_tensors().iter().map(|(_, t)| *t))
    }

    /// Named parameters in a stable order, for checkpointing.
    pub fn param_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("backbone.patch_proj".into(), &self.patch_proj),
            ("backbone.cls".into(), &self.cls),
            ("backbone.pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.block{i}.wq"), &b.wq));
            out.push((format!("backbone.block{i}.wk"), &b.wk));
            out.push((format!("backbone.block{i}.wv"), &b.wv));
            out.push((format!("backbone.block{i}.wo"), &b.wo));
            out.push((format!("backbone.block{i}.ln1_gamma"), &b.ln1_gamma));
            out.push((format!("backbone.block{i}.ln1_beta"), &b.ln1_beta));
            out.push((format!("backbone.block{i}.ln2_gamma"), &b.ln2_gamma));
            out.push((format!("backbone.block{i}.ln2_beta"), &b.ln2_beta));
            out.push((format!("backbone.block{i}.ff_w1"), &b.ff_w1));
            out.push((format!("backbone.block{i}.ff_w2"), &b.ff_w2));
        }
        out
    }

    /// Rebuild from checkpointed tensors. Order must match `param_tensors`.
    pub(crate) fn from_parts(
        config: BackboneConfig,
        seed: u64,
        mut tensors: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = 3 + config.n_blocks * 10;
        if tensors.len() != expected {
            return Err(Error::CheckpointShape {
                detail: format!(
                    "backbone expects {expected} tensors, found {}",
                    tensors.len()
                ),
            });
        }
        let mut take = |_: &str| tensors.remove(0);
        let patch_proj = take("patch_proj");
        let cls = take("cls");
        let pos = take("pos");
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                wq: take("wq"),
                wk: take("wk"),
                wv: take("wv"),
                wo: take("wo"),
                ln1_gamma: take("ln1_gamma"),
                ln1_beta: take("ln1_beta"),
                ln2_gamma: take("ln2_gamma"),
                ln2_beta: take("ln2_beta"),
                ff_w1: take("ff_w1"),
                ff_w2: take("ff_w2"),
            })
            .collect();
        Ok(FrozenBackbone {
            config,
            seed,
            patch_proj,
            cls,
            pos,
            blocks,
        })
    }
}

/// Shared classification head, the only trainable dense layer. A single
/// instance persists across the whole domain stream.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Tape handles for the head parameters.
pub struct HeadVars {
    pub weight: VarId,
    pub bias: VarId,
}

impl ClassifierHead {
    pub fn new(embed_dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (embed_dim as f64).sqrt()).expect("valid std");
        let weight = Tensor::matrix(
            embed_dim,
            n_classes,
            (0..embed_dim * n_classes)
                .map(|_| normal.sample(&mut rng))
                .collect(),
        )
        .expect("shape")
        .with_requires_grad(true);
        let bias = Tensor::zeros(vec![1, n_classes]).with_requires_grad(true);
        ClassifierHead { weight, bias }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.numel()
    }

    /// Register as trainable leaves.
    pub fn watch(&mut self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            weight: tape.watch(&mut self.weight),
            bias: tape.watch(&mut self.bias),
        }
    }

    /// Register as frozen constants (evaluation path).
    pub fn constants(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            weight: tape.constant(&self.weight),
            bias: tape.constant(&self.bias),
        }
    }
}

fn sinusoidal_positions(rows: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; rows * d];
    for p in 0..rows {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[p * d + 2 * i] = (p as f64 * freq).sin();
            out[p * d + 2 * i + 1] = (p as f64 * freq).cos();
        }
    }
    Tensor::matrix(rows, d, out).expect("shape")
}

/// FNV-1a over the exact bit patterns of the given tensors.
pub fn checksum_tensors<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for t in tensors {
        for v in t.values() {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    }
    hash
}
