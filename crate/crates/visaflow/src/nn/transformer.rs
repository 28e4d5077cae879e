//! Pre-LN transformer blocks over the layer primitives.

use ndarray::Array2;
use rand::Rng;

use super::{
    attention_bwd, attention_fwd, gelu_bwd, gelu_fwd, layernorm_fwd, linear_fwd, AttnCache,
    AttnParams, Init, LayerNormCache, ParamId, ParamSet, Real,
};

pub struct TransformerBlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    attn: AttnParams,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Stack of pre-LN blocks with a final layer norm:
/// x += attn(ln1(x)); x += mlp(ln2(x)); y = lnf(x).
pub struct TransformerCore {
    pub d_model: usize,
    pub n_heads: usize,
    blocks: Vec<TransformerBlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

pub struct BlockCache<T> {
    x: Array2<T>,
    ln1: LayerNormCache<T>,
    attn: AttnCache<T>,
    a: Array2<T>,
    ln2: LayerNormCache<T>,
    ln2_out: Array2<T>,
    h_pre: Array2<T>,
    h_act: Array2<T>,
}

pub struct TransformerCoreCache<T> {
    blocks: Vec<BlockCache<T>>,
    lnf: LayerNormCache<T>,
}

impl<T: Real> TransformerCoreCache<T> {
    /// Index of the first block whose output went non-finite, for diagnostics.
    pub fn first_nonfinite_block(&self) -> Option<usize> {
        self.blocks.iter().position(|b| b.a.iter().any(|v| !v.is_finite()))
    }
}

impl TransformerCore {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        d_model: usize,
        depth: usize,
        n_heads: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must divide by heads");
        let hidden = 4 * d_model;
        let mut blocks = Vec::with_capacity(depth);
        for l in 0..depth {
            let p = |s: &str| format!("{prefix}.block{l}.{s}");
            blocks.push(TransformerBlockIds {
                ln1_g: ps.add(&p("ln1.g"), (1, d_model), Init::Ones, rng),
                ln1_b: ps.add(&p("ln1.b"), (1, d_model), Init::Zeros, rng),
                attn: AttnParams {
                    wq: ps.add(&p("attn.wq"), (d_model, d_model), Init::Normal(init_std), rng),
                    bq: ps.add(&p("attn.bq"), (1, d_model), Init::Zeros, rng),
                    wk: ps.add(&p("attn.wk"), (d_model, d_model), Init::Normal(init_std), rng),
                    bk: ps.add(&p("attn.bk"), (1, d_model), Init::Zeros, rng),
                    wv: ps.add(&p("attn.wv"), (d_model, d_model), Init::Normal(init_std), rng),
                    bv: ps.add(&p("attn.bv"), (1, d_model), Init::Zeros, rng),
                    wo: ps.add(&p("attn.wo"), (d_model, d_model), Init::Normal(init_std), rng),
                    bo: ps.add(&p("attn.bo"), (1, d_model), Init::Zeros, rng),
                },
                ln2_g: ps.add(&p("ln2.g"), (1, d_model), Init::Ones, rng),
                ln2_b: ps.add(&p("ln2.b"), (1, d_model), Init::Zeros, rng),
                w1: ps.add(&p("mlp.w1"), (d_model, hidden), Init::Normal(init_std), rng),
                b1: ps.add(&p("mlp.b1"), (1, hidden), Init::Zeros, rng),
                w2: ps.add(&p("mlp.w2"), (hidden, d_model), Init::Normal(init_std), rng),
                b2: ps.add(&p("mlp.b2"), (1, d_model), Init::Zeros, rng),
            });
        }
        TransformerCore {
            d_model,
            n_heads,
            blocks,
            lnf_g: ps.add(&format!("{prefix}.lnf.g"), (1, d_model), Init::Ones, rng),
            lnf_b: ps.add(&format!("{prefix}.lnf.b"), (1, d_model), Init::Zeros, rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: Array2<T>,
        mask: Option<&Array2<bool>>,
    ) -> (Array2<T>, TransformerCoreCache<T>) {
        let mut cur = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (ln1_out, ln1) = layernorm_fwd(&cur, ps.v(blk.ln1_g), ps.v(blk.ln1_b));
            let (attn_out, attn) = attention_fwd(ps, &blk.attn, &ln1_out, self.n_heads, mask);
            let a = &cur + &attn_out;
            let (ln2_out, ln2) = layernorm_fwd(&a, ps.v(blk.ln2_g), ps.v(blk.ln2_b));
            let h_pre = linear_fwd(&ln2_out, ps.v(blk.w1), ps.v(blk.b1));
            let h_act = gelu_fwd(&h_pre);
            let mlp_out = linear_fwd(&h_act, ps.v(blk.w2), ps.v(blk.b2));
            let next = &a + &mlp_out;
            caches.push(BlockCache { x: cur, ln1, attn, a, ln2, ln2_out, h_pre, h_act });
            cur = next;
        }
        let (y, lnf) = layernorm_fwd(&cur, ps.v(self.lnf_g), ps.v(self.lnf_b));
        (y, TransformerCoreCache { blocks: caches, lnf })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamSet<T>,
        cache: &TransformerCoreCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let mut ps = ps.split_mut();
        let mut d = ps.layernorm_bwd(&cache.lnf, self.lnf_g, self.lnf_b, dy);
        for (blk, c) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            // MLP branch: d/d(a) = d + mlp_bwd(d).
            let dh_act = ps.linear_bwd(&c.h_act, blk.w2, blk.b2, &d);
            let dh_pre = gelu_bwd(&c.h_pre, &dh_act);
            let dln2_out = ps.linear_bwd(&c.ln2_out, blk.w1, blk.b1, &dh_pre);
            let da_mlp = ps.layernorm_bwd(&c.ln2, blk.ln2_g, blk.ln2_b, &dln2_out);
            let da = &d + &da_mlp;

            // Attention branch: d/d(x) = da + attn_bwd(da).
            let dln1_out = attention_bwd(&mut ps, &blk.attn, &c.attn, self.n_heads, &da);
            let dx_attn = ps.layernorm_bwd(&c.ln1, blk.ln1_g, blk.ln1_b, &dln1_out);
            d = &da + &dx_attn;
            let _ = &c.x;
        }
        d
    }
}
