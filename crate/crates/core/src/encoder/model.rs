use super::{block_prefix, EncoderConfig, EMBEDDING_NORM, EMBEDDING_TABLES, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{Bindings, ParamTree, Real, Tape, Var};

/// BERT convention.
pub const LAYER_NORM_EPS: f64 = 1e-12;

struct BlockVars {
    query_w: Var,
    query_b: Var,
    key_w: Var,
    key_b: Var,
    value_w: Var,
    value_b: Var,
    attn_out_w: Var,
    attn_out_b: Var,
    attn_ln_w: Var,
    attn_ln_b: Var,
    inter_w: Var,
    inter_b: Var,
    out_w: Var,
    out_b: Var,
    out_ln_w: Var,
    out_ln_b: Var,
}

/// Encoder parameters resolved to tape handles.
pub struct EncoderVars {
    config: EncoderConfig,
    word: Var,
    position: Var,
    token_type: Var,
    emb_ln_w: Var,
    emb_ln_b: Var,
    blocks: Vec<BlockVars>,
}

impl EncoderVars {
    pub fn from_bindings(bindings: &Bindings, config: &EncoderConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let p = block_prefix(i);
            let g = |part: &str| bindings.get(&format!("{p}{part}"));
            blocks.push(BlockVars {
                query_w: g("attention.self.query.weight")?,
                query_b: g("attention.self.query.bias")?,
                key_w: g("attention.self.key.weight")?,
                key_b: g("attention.self.key.bias")?,
                value_w: g("attention.self.value.weight")?,
                value_b: g("attention.self.value.bias")?,
                attn_out_w: g("attention.output.dense.weight")?,
                attn_out_b: g("attention.output.dense.bias")?,
                attn_ln_w: g("attention.output.LayerNorm.weight")?,
                attn_ln_b: g("attention.output.LayerNorm.bias")?,
                inter_w: g("intermediate.dense.weight")?,
                inter_b: g("intermediate.dense.bias")?,
                out_w: g("output.dense.weight")?,
                out_b: g("output.dense.bias")?,
                out_ln_w: g("output.LayerNorm.weight")?,
                out_ln_b: g("output.LayerNorm.bias")?,
            });
        }
        Ok(Self {
            config: *config,
            word: bindings.get(EMBEDDING_TABLES[0])?,
            position: bindings.get(EMBEDDING_TABLES[1])?,
            token_type: bindings.get(EMBEDDING_TABLES[2])?,
            emb_ln_w: bindings.get(EMBEDDING_NORM[0])?,
            emb_ln_b: bindings.get(EMBEDDING_NORM[1])?,
            blocks,
        })
    }

    /// Binds `params` onto `tape` (entries passing `trainable` as
    /// parameters) and resolves the encoder handles.
    pub fn bind<R: Real>(
        tape: &mut Tape<R>,
        params: &ParamTree<R>,
        config: &EncoderConfig,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<(Self, Bindings)> {
        let bindings = tape.bind(params, trainable);
        let vars = Self::from_bindings(&bindings, config)?;
        Ok((vars, bindings))
    }

    /// Records the forward pass for one token sequence and returns the
    /// pooled, unit-norm embedding. Positions holding [`PAD_ID`] are
    /// excluded from attention keys and from pooling.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, tokens: &[u32]) -> Result<Var> {
        let cfg = &self.config;
        validate_tokens(tokens, cfg)?;
        let keep: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        if !keep.iter().any(|&k| k) {
            return Err(Error::EmptyInput);
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let types = vec![0usize; tokens.len()];

        let w = tape.gather(self.word, &ids)?;
        let p = tape.gather(self.position, &positions)?;
        let t = tape.gather(self.token_type, &types)?;
        let summed = tape.add_n(&[w, p, t])?;
        let mut h = tape.layer_norm(summed, self.emb_ln_w, self.emb_ln_b, LAYER_NORM_EPS)?;

        let d = cfg.head_dim();
        let scale = R::of(1.0 / (d as f64).sqrt());
        for b in &self.blocks {
            let q = tape.linear(h, b.query_w, Some(b.query_b))?;
            let k = tape.linear(h, b.key_w, Some(b.key_b))?;
            let v = tape.linear(h, b.value_w, Some(b.value_b))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.col_slice(q, head * d, d)?;
                let kh = tape.col_slice(k, head * d, d)?;
                let vh = tape.col_slice(v, head * d, d)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale)?;
                let probs = tape.softmax_masked(scores, Some(&keep))?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let attn = tape.linear(ctx, b.attn_out_w, Some(b.attn_out_b))?;
            let res = tape.add(attn, h)?;
            let h1 = tape.layer_norm(res, b.attn_ln_w, b.attn_ln_b, LAYER_NORM_EPS)?;
            let inter = tape.linear(h1, b.inter_w, Some(b.inter_b))?;
            let inter = tape.gelu(inter)?;
            let out = tape.linear(inter, b.out_w, Some(b.out_b))?;
            let res = tape.add(out, h1)?;
            h = tape.layer_norm(res, b.out_ln_w, b.out_ln_b, LAYER_NORM_EPS)?;
        }
        let pooled = tape.masked_mean_rows(h, &keep)?;
        Ok(tape.l2_normalize(pooled)?)
    }
}

fn validate_tokens(tokens: &[u32], cfg: &EncoderConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    if tokens.len() > cfg.max_positions {
        return Err(Error::TooLong {
            len: tokens.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Unit-norm embedding of one token sequence, without gradient tracking.
pub fn encode<R: Real>(params: &ParamTree<R>, tokens: &[u32], config: &EncoderConfig) -> Result<Vec<R>> {
    let mut tape = Tape::new();
    let (vars, _) = EncoderVars::bind(&mut tape, params, config, |_| false)?;
    let out = vars.forward(&mut tape, tokens)?;
    Ok(tape.value(out).data().to_vec())
}

/// [`encode`] over several sequences sharing one binding.
pub fn encode_batch<R: Real>(
    params: &ParamTree<R>,
    sequences: &[&[u32]],
    config: &EncoderConfig,
) -> Result<Vec<Vec<R>>> {
    let mut base = Tape::new();
    let bindings = base.bind(params, |_| false);
    let vars = EncoderVars::from_bindings(&bindings, config)?;
    let mark = base.len();
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let v = vars.forward(&mut base, seq)?;
        out.push(base.value(v).data().to_vec());
        base.truncate(mark);
    }
    Ok(out)
}
