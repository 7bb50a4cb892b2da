//! Pre-norm transformer encoder pooled through a prepended CLS position.
//!
//! There is deliberately no final layer norm: with zero layers the sentence
//! vector is exactly cls + pos[0], which keeps the architecture's base case
//! inspectable and testable.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

struct Block {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

pub struct SentenceEncoder {
    /// Present only when the front-end width differs from d_model.
    projection: Option<(ParamId, ParamId)>,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    d_model: usize,
    heads: usize,
    t_max: usize,
    eps: f64,
    use_positions: bool,
}

impl SentenceEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        side: &str,
        input_dim: usize,
        d_model: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        t_max: usize,
        eps: f64,
        use_positions: bool,
        rng: &mut R,
    ) -> Result<SentenceEncoder> {
        if d_model == 0 || heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} must be a positive multiple of heads {heads}"
            )));
        }
        if ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if t_max < 2 {
            return Err(Error::Config(format!(
                "t_max {t_max} leaves no room for cls plus content"
            )));
        }

        let projection = if input_dim != d_model {
            let w = store.add(
                &format!("{side}.proj.weight"),
                super::xavier_init(rng, input_dim, d_model),
            )?;
            let b = store.add(&format!("{side}.proj.bias"), Tensor::zeros(&[d_model]))?;
            Some((w, b))
        } else {
            None
        };
        let cls = store.add(
            &format!("{side}.cls"),
            super::embed_init(rng, 1, d_model),
        )?;
        let pos = store.add(
            &format!("{side}.pos"),
            super::embed_init(rng, t_max, d_model),
        )?;

        let mut blocks = Vec::with_capacity(layers);
        for b in 0..layers {
            let p = |suffix: &str| format!("{side}.block{b}.{suffix}");
            blocks.push(Block {
                ln1_gamma: store.add(&p("ln1.gamma"), ones(d_model))?,
                ln1_beta: store.add(&p("ln1.beta"), Tensor::zeros(&[d_model]))?,
                wq: store.add(&p("attn.wq"), super::xavier_init(rng, d_model, d_model))?,
                bq: store.add(&p("attn.bq"), Tensor::zeros(&[d_model]))?,
                wk: store.add(&p("attn.wk"), super::xavier_init(rng, d_model, d_model))?,
                bk: store.add(&p("attn.bk"), Tensor::zeros(&[d_model]))?,
                wv: store.add(&p("attn.wv"), super::xavier_init(rng, d_model, d_model))?,
                bv: store.add(&p("attn.bv"), Tensor::zeros(&[d_model]))?,
                wo: store.add(&p("attn.wo"), super::xavier_init(rng, d_model, d_model))?,
                bo: store.add(&p("attn.bo"), Tensor::zeros(&[d_model]))?,
                ln2_gamma: store.add(&p("ln2.gamma"), ones(d_model))?,
                ln2_beta: store.add(&p("ln2.beta"), Tensor::zeros(&[d_model]))?,
                ffn_w1: store.add(&p("ffn.w1"), super::xavier_init(rng, d_model, ffn_dim))?,
                ffn_b1: store.add(&p("ffn.b1"), Tensor::zeros(&[ffn_dim]))?,
                ffn_w2: store.add(&p("ffn.w2"), super::xavier_init(rng, ffn_dim, d_model))?,
                ffn_b2: store.add(&p("ffn.b2"), Tensor::zeros(&[d_model]))?,
            });
        }

        Ok(SentenceEncoder {
            projection,
            cls,
            pos,
            blocks,
            d_model,
            heads,
            t_max,
            eps,
            use_positions,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Sentence vector [d_model] for front-end rows [T, input_dim].
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rows: Var,
        utterance: &str,
    ) -> Result<Var> {
        let mut rows = rows;
        if let Some((w, b)) = self.projection {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            rows = tape.matmul(rows, wv)?;
            rows = tape.add_row_vec(rows, bv)?;
        }

        let t = tape.value(rows).rows() + 1;
        if t > self.t_max {
            return Err(Error::SequenceTooLong {
                utterance: utterance.to_string(),
                got: t,
                max: self.t_max,
            });
        }

        let cls = tape.param(store, self.cls);
        let mut x = tape.concat_rows(&[cls, rows])?;
        if self.use_positions {
            let pos_table = tape.param(store, self.pos);
            let idx: Vec<usize> = (0..t).collect();
            let pos_rows = tape.gather_rows(pos_table, &idx)?;
            x = tape.add(x, pos_rows)?;
        }

        for block in &self.blocks {
            x = self.block_forward(tape, store, block, x)?;
        }
        tape.take_row(x, 0)
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &Block,
        x: Var,
    ) -> Result<Var> {
        let affine = |tape: &mut Tape, v: Var, gamma: ParamId, beta: ParamId| -> Result<Var> {
            let g = tape.param(store, gamma);
            let b = tape.param(store, beta);
            let v = tape.mul_row_vec(v, g)?;
            tape.add_row_vec(v, b)
        };
        let linear = |tape: &mut Tape, v: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let v = tape.matmul(v, wv)?;
            tape.add_row_vec(v, bv)
        };

        let a = tape.layer_norm_rows(x, self.eps)?;
        let a = affine(tape, a, block.ln1_gamma, block.ln1_beta)?;
        let q = linear(tape, a, block.wq, block.bq)?;
        let k = linear(tape, a, block.wk, block.bk)?;
        let v = linear(tape, a, block.wv, block.bv)?;

        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let att = tape.softmax_rows(scores)?;
            ctx.push(tape.matmul(att, vh)?);
        }
        let ctx = tape.concat_cols(&ctx)?;
        let attn_out = linear(tape, ctx, block.wo, block.bo)?;
        let x1 = tape.add(x, attn_out)?;

        let b = tape.layer_norm_rows(x1, self.eps)?;
        let b = affine(tape, b, block.ln2_gamma, block.ln2_beta)?;
        let f = linear(tape, b, block.ffn_w1, block.ffn_b1)?;
        let f = tape.gelu(f);
        let f = linear(tape, f, block.ffn_w2, block.ffn_b2)?;
        tape.add(x1, f)
    }

    /// Names of the value/output projection and FFN output parameters of one
    /// block, for targeted ablation in tests.
    pub fn block_output_params(&self, b: usize) -> [ParamId; 6] {
        let blk = &self.blocks[b];
        [blk.wv, blk.bv, blk.wo, blk.bo, blk.ffn_w2, blk.ffn_b2]
    }

    pub fn cls_and_pos(&self) -> (ParamId, ParamId) {
        (self.cls, self.pos)
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::vector(vec![1.0; n])
}
