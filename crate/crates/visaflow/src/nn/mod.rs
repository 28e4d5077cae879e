//! Minimal tensor/backprop substrate: named parameters, dense layers,
//! layer norm, GELU, masked multi-head attention, and Adam.
//!
//! No ML framework: forward passes cache what their hand-written backward
//! passes need, every operation is single-threaded and deterministic, and
//! the whole stack is generic over f32 (training) / f64 (gradient checks).

mod adam;
mod transformer;

pub use adam::Adam;
pub use transformer::{TransformerBlockIds, TransformerCore, TransformerCoreCache};

use ndarray::{Array2, LinalgScalar};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::rng::Normal;

/// Scalar type the network runs in.
pub trait Real: num_traits::Float + LinalgScalar + std::fmt::Debug + Send + Sync + 'static {
    fn from64(v: f64) -> Self;
    fn to64(self) -> f64;
}

impl Real for f32 {
    fn from64(v: f64) -> Self {
        v as f32
    }
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from64(v: f64) -> Self {
        v
    }
    fn to64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Flat named-parameter store. Values and grads live in parallel vectors so
/// layer code can read values and accumulate grads simultaneously.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub values: Vec<Array2<T>>,
    pub grads: Vec<Array2<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn add<R: Rng>(&mut self, name: &str, shape: (usize, usize), init: Init, rng: &mut R) -> ParamId {
        let v = match init {
            Init::Zeros => Array2::from_elem(shape, T::zero()),
            Init::Ones => Array2::from_elem(shape, T::one()),
            Init::Normal(std) => {
                let mut n = Normal::new();
                Array2::from_shape_fn(shape, |_| T::from64(n.sample(rng) * std))
            }
        };
        self.names.push(name.to_string());
        self.grads.push(Array2::from_elem(shape, T::zero()));
        self.values.push(v);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn v(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        let s = T::from64(s);
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * s);
        }
    }

    /// Total scalar count: a pure function of the architecture config.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Digest over names, shapes, and value bits; detects any drift.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to64().to_le_bytes());
            }
        }
        crate::rng::hex(&h.finalize())
    }

    pub fn grads_are_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Disjoint views over values (read) and grads (write) for backward passes.
    pub fn split_mut(&mut self) -> ParamsSplit<'_, T> {
        ParamsSplit { values: &self.values, grads: &mut self.grads }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Borrow-splitting view used during backward: parameter values stay
/// readable while gradients are accumulated in place.
pub struct ParamsSplit<'a, T> {
    pub values: &'a [Array2<T>],
    pub grads: &'a mut [Array2<T>],
}

fn pair_mut<T>(xs: &mut [Array2<T>], a: usize, b: usize) -> (&mut Array2<T>, &mut Array2<T>) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = xs.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = xs.split_at_mut(a);
        let (x, y) = (&mut hi[0], &mut lo[b]);
        (x, y)
    }
}

impl<'a, T: Real> ParamsSplit<'a, T> {
    pub fn v(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    /// Backward through y = x.w + b: accumulates dw/db, returns dx.
    pub fn linear_bwd(&mut self, x: &Array2<T>, w: ParamId, b: ParamId, dy: &Array2<T>) -> Array2<T> {
        let wv = &self.values[w.0];
        let (dw, db) = pair_mut(self.grads, w.0, b.0);
        linear_bwd(x, wv, dy, dw, db)
    }

    pub fn layernorm_bwd(
        &mut self,
        cache: &LayerNormCache<T>,
        gain: ParamId,
        bias: ParamId,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let gv = &self.values[gain.0];
        let (dg, db) = pair_mut(self.grads, gain.0, bias.0);
        layernorm_bwd(cache, gv, dy, dg, db)
    }
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

/// y = x . w + b, with x (n, in), w (in, out), b (1, out).
pub fn linear_fwd<T: Real>(x: &Array2<T>, w: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let mut y = x.dot(w);
    let bv = b.row(0);
    for mut row in y.rows_mut() {
        for (yi, bi) in row.iter_mut().zip(bv.iter()) {
            *yi = *yi + *bi;
        }
    }
    y
}

/// Accumulates dw/db, returns dx.
pub fn linear_bwd<T: Real>(
    x: &Array2<T>,
    w: &Array2<T>,
    dy: &Array2<T>,
    dw: &mut Array2<T>,
    db: &mut Array2<T>,
) -> Array2<T> {
    *dw = &*dw + &x.t().dot(dy);
    let mut dbv = db.row_mut(0);
    for row in dy.rows() {
        for (di, yi) in dbv.iter_mut().zip(row.iter()) {
            *di = *di + *yi;
        }
    }
    dy.dot(&w.t())
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

pub fn layernorm_fwd<T: Real>(x: &Array2<T>, gain: &Array2<T>, bias: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::from_elem((n, d), T::zero());
    let mut inv_std = Vec::with_capacity(n);
    let dn = T::from64(d as f64);
    let eps = T::from64(LN_EPS);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) / dn;
        let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            xhat[[i, j]] = (x[[i, j]] - mean) * is;
        }
    }
    let g = gain.row(0);
    let b = bias.row(0);
    let y = Array2::from_shape_fn((n, d), |(i, j)| xhat[[i, j]] * g[j] + b[j]);
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layernorm_bwd<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &Array2<T>,
    dy: &Array2<T>,
    dgain: &mut Array2<T>,
    dbias: &mut Array2<T>,
) -> Array2<T> {
    let (n, d) = dy.dim();
    let dn = T::from64(d as f64);
    let g = gain.row(0);
    let mut dx = Array2::from_elem((n, d), T::zero());
    {
        let mut dg = dgain.row_mut(0);
        let mut db = dbias.row_mut(0);
        for i in 0..n {
            for j in 0..d {
                dg[j] = dg[j] + dy[[i, j]] * cache.xhat[[i, j]];
                db[j] = db[j] + dy[[i, j]];
            }
        }
    }
    for i in 0..n {
        // dxhat = dy * gain; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) * inv_std
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            sum_dxhat = sum_dxhat + dxh;
            sum_dxhat_xhat = sum_dxhat_xhat + dxh * cache.xhat[[i, j]];
        }
        let m1 = sum_dxhat / dn;
        let m2 = sum_dxhat_xhat / dn;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = (dxh - m1 - cache.xhat[[i, j]] * m2) * cache.inv_std[i];
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

pub fn gelu_fwd<T: Real>(x: &Array2<T>) -> Array2<T> {
    let c = T::from64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from64(0.044715);
    let half = T::from64(0.5);
    x.mapv(|v| {
        let t = (c * (v + a * v * v * v)).tanh();
        half * v * (T::one() + t)
    })
}

pub fn gelu_bwd<T: Real>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let c = T::from64(0.7978845608028654);
    let a = T::from64(0.044715);
    let half = T::from64(0.5);
    let three = T::from64(3.0);
    let mut dx = x.clone();
    for (d, (&xv, &dyv)) in dx.iter_mut().zip(x.iter().zip(dy.iter())) {
        let inner = c * (xv + a * xv * xv * xv);
        let t = inner.tanh();
        let dtanh = (T::one() - t * t) * c * (T::one() + three * a * xv * xv);
        *d = dyv * (half * (T::one() + t) + half * xv * dtanh);
    }
    dx
}

// ---------------------------------------------------------------------------
// Masked multi-head self-attention
// ---------------------------------------------------------------------------

pub struct AttnCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    ctx: Array2<T>,
    /// Softmax probabilities, one (L, L) matrix per head.
    probs: Vec<Array2<T>>,
}

pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Masked softmax attention. `mask[i][j]` allows row i to attend to column j;
/// disallowed scores are -inf, so their probabilities are exactly zero and
/// truncating a sequence cannot perturb earlier rows even in the last bit.
pub fn attention_fwd<T: Real>(
    ps: &ParamSet<T>,
    ids: &AttnParams,
    x: &Array2<T>,
    n_heads: usize,
    mask: Option<&Array2<bool>>,
) -> (Array2<T>, AttnCache<T>) {
    let (l, d) = x.dim();
    debug_assert_eq!(d % n_heads, 0);
    let dh = d / n_heads;
    let scale = T::from64(1.0 / (dh as f64).sqrt());
    let q = linear_fwd(x, ps.v(ids.wq), ps.v(ids.bq));
    let k = linear_fwd(x, ps.v(ids.wk), ps.v(ids.bk));
    let v = linear_fwd(x, ps.v(ids.wv), ps.v(ids.bv));
    let mut ctx = Array2::from_elem((l, d), T::zero());
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * scale);
        if let Some(m) = mask {
            for i in 0..l {
                for j in 0..l {
                    if !m[[i, j]] {
                        scores[[i, j]] = T::neg_infinity();
                    }
                }
            }
        }
        // Row softmax with max subtraction; exp(-inf) == 0 exactly.
        for i in 0..l {
            let mut row = scores.row_mut(i);
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                sum = sum + *s;
            }
            for s in row.iter_mut() {
                *s = *s / sum;
            }
        }
        let ctx_h = scores.dot(&vh);
        ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
        probs.push(scores);
    }
    let y = linear_fwd(&ctx, ps.v(ids.wo), ps.v(ids.bo));
    (y, AttnCache { x: x.clone(), q, k, v, ctx, probs })
}

pub fn attention_bwd<T: Real>(
    ps: &mut ParamsSplit<'_, T>,
    ids: &AttnParams,
    cache: &AttnCache<T>,
    n_heads: usize,
    dy: &Array2<T>,
) -> Array2<T> {
    let (l, d) = cache.x.dim();
    let dh = d / n_heads;
    let scale = T::from64(1.0 / (dh as f64).sqrt());

    let dctx = ps.linear_bwd(&cache.ctx, ids.wo, ids.bo, dy);

    let mut dq = Array2::from_elem((l, d), T::zero());
    let mut dk = Array2::from_elem((l, d), T::zero());
    let mut dv = Array2::from_elem((l, d), T::zero());
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let probs = &cache.probs[h];
        let dctx_h = dctx.slice(ndarray::s![.., cols.clone()]);
        let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
        let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
        let kh = cache.k.slice(ndarray::s![.., cols.clone()]);

        let dprobs = dctx_h.dot(&vh.t());
        dv.slice_mut(ndarray::s![.., cols.clone()]).assign(&probs.t().dot(&dctx_h));

        // Softmax backward: ds = p * (dp - rowsum(dp * p)).
        let mut ds = Array2::from_elem((l, l), T::zero());
        for i in 0..l {
            let mut dot = T::zero();
            for j in 0..l {
                dot = dot + dprobs[[i, j]] * probs[[i, j]];
            }
            for j in 0..l {
                ds[[i, j]] = probs[[i, j]] * (dprobs[[i, j]] - dot);
            }
        }
        ds.mapv_inplace(|s| s * scale);
        dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&ds.dot(&kh));
        dk.slice_mut(ndarray::s![.., cols]).assign(&ds.t().dot(&qh));
    }

    let dx_q = ps.linear_bwd(&cache.x, ids.wq, ids.bq, &dq);
    let dx_k = ps.linear_bwd(&cache.x, ids.wk, ids.bk, &dk);
    let dx_v = ps.linear_bwd(&cache.x, ids.wv, ids.bv, &dv);
    &dx_q + &dx_k + &dx_v
}

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array2;

    fn randn(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = stream("test/nn", &[seed]);
        let mut n = Normal::new();
        Array2::from_shape_fn(shape, |_| n.sample(&mut rng))
    }

    /// Central-difference check of d(sum(w_out * f(x)))/dx.
    fn finite_diff_input<F>(x: &Array2<f64>, f: F) -> Array2<f64>
    where
        F: Fn(&Array2<f64>) -> f64,
    {
        let eps = 1e-6;
        let mut g = x.clone();
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let x = randn((5, 4), 0);
        let w = randn((4, 3), 1);
        let b = randn((1, 3), 2);
        let co = randn((5, 3), 3); // random cotangent
        let loss = |xx: &Array2<f64>| (&linear_fwd(xx, &w, &b) * &co).sum();
        let num = finite_diff_input(&x, loss);
        let mut dw = Array2::zeros((4, 3));
        let mut db = Array2::zeros((1, 3));
        let dx = linear_bwd(&x, &w, &co, &mut dw, &mut db);
        assert!(max_rel_err(&dx, &num) < 1e-7);
        // Weight grads against finite differences too.
        let lw = |ww: &Array2<f64>| (&linear_fwd(&x, ww, &b) * &co).sum();
        let numw = finite_diff_input(&w, lw);
        assert!(max_rel_err(&dw, &numw) < 1e-7);
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let x = randn((4, 6), 4);
        let g = randn((1, 6), 5);
        let b = randn((1, 6), 6);
        let co = randn((4, 6), 7);
        let loss = |xx: &Array2<f64>| (&layernorm_fwd(xx, &g, &b).0 * &co).sum();
        let num = finite_diff_input(&x, loss);
        let (_, cache) = layernorm_fwd(&x, &g, &b);
        let mut dg = Array2::zeros((1, 6));
        let mut db = Array2::zeros((1, 6));
        let dx = layernorm_bwd(&cache, &g, &co, &mut dg, &mut db);
        assert!(max_rel_err(&dx, &num) < 1e-6, "{}", max_rel_err(&dx, &num));
        let lg = |gg: &Array2<f64>| (&layernorm_fwd(&x, gg, &b).0 * &co).sum();
        let numg = finite_diff_input(&g, lg);
        assert!(max_rel_err(&dg, &numg) < 1e-6);
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let x = randn((3, 5), 8);
        let co = randn((3, 5), 9);
        let loss = |xx: &Array2<f64>| (&gelu_fwd(xx) * &co).sum();
        let num = finite_diff_input(&x, loss);
        let dx = gelu_bwd(&x, &co);
        assert!(max_rel_err(&dx, &num) < 1e-6);
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = stream("test/attn", &[0]);
        let d = 8;
        let ids = AttnParams {
            wq: ps.add("wq", (d, d), Init::Normal(0.3), &mut rng),
            bq: ps.add("bq", (1, d), Init::Normal(0.1), &mut rng),
            wk: ps.add("wk", (d, d), Init::Normal(0.3), &mut rng),
            bk: ps.add("bk", (1, d), Init::Normal(0.1), &mut rng),
            wv: ps.add("wv", (d, d), Init::Normal(0.3), &mut rng),
            bv: ps.add("bv", (1, d), Init::Normal(0.1), &mut rng),
            wo: ps.add("wo", (d, d), Init::Normal(0.3), &mut rng),
            bo: ps.add("bo", (1, d), Init::Normal(0.1), &mut rng),
        };
        let l = 6;
        let x = randn((l, d), 10);
        // Lower-triangular-ish mask with one isolated row.
        let mask = Array2::from_shape_fn((l, l), |(i, j)| if i == 3 { j == 3 } else { j <= i });
        let co = randn((l, d), 11);

        let loss = |xx: &Array2<f64>| {
            let (y, _) = attention_fwd(&ps, &ids, xx, 2, Some(&mask));
            (&y * &co).sum()
        };
        let num = finite_diff_input(&x, loss);
        let (_, cache) = attention_fwd(&ps, &ids, &x, 2, Some(&mask));
        let mut ps2 = ps.clone();
        let dx = attention_bwd(&mut ps2.split_mut(), &ids, &cache, 2, &co);
        assert!(max_rel_err(&dx, &num) < 1e-6, "{}", max_rel_err(&dx, &num));

        // Parameter grad for wq against finite differences.
        let eps = 1e-6;
        let mut num_wq = Array2::zeros((d, d));
        for idx in 0..d * d {
            let mut psp = ps.clone();
            let mut psm = ps.clone();
            psp.values[ids.wq.0].as_slice_mut().unwrap()[idx] += eps;
            psm.values[ids.wq.0].as_slice_mut().unwrap()[idx] -= eps;
            let (yp, _) = attention_fwd(&psp, &ids, &x, 2, Some(&mask));
            let (ym, _) = attention_fwd(&psm, &ids, &x, 2, Some(&mask));
            num_wq.as_slice_mut().unwrap()[idx] = ((&yp * &co).sum() - (&ym * &co).sum()) / (2.0 * eps);
        }
        assert!(max_rel_err(&ps2.grads[ids.wq.0], &num_wq) < 1e-6);
    }

    #[test]
    fn masked_rows_are_exactly_isolated() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = stream("test/attn-iso", &[0]);
        let d = 4;
        let ids = AttnParams {
            wq: ps.add("wq", (d, d), Init::Normal(0.5), &mut rng),
            bq: ps.add("bq", (1, d), Init::Zeros, &mut rng),
            wk: ps.add("wk", (d, d), Init::Normal(0.5), &mut rng),
            bk: ps.add("bk", (1, d), Init::Zeros, &mut rng),
            wv: ps.add("wv", (d, d), Init::Normal(0.5), &mut rng),
            bv: ps.add("bv", (1, d), Init::Zeros, &mut rng),
            wo: ps.add("wo", (d, d), Init::Normal(0.5), &mut rng),
            bo: ps.add("bo", (1, d), Init::Zeros, &mut rng),
        };
        let l = 5;
        let x = randn((l, d), 12);
        let mask = Array2::from_shape_fn((l, l), |(i, j)| j <= i);
        let (y, _) = attention_fwd(&ps, &ids, &x, 2, Some(&mask));
        // Perturb the last row; earlier rows must not move at all.
        let mut x2 = x.clone();
        x2[[l - 1, 0]] += 10.0;
        let (y2, _) = attention_fwd(&ps, &ids, &x2, 2, Some(&mask));
        for i in 0..l - 1 {
            for j in 0..d {
                assert_eq!(y[[i, j]], y2[[i, j]], "row {i} moved");
            }
        }
    }

    #[test]
    fn param_checksum_detects_change() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        let mut rng = stream("test/ck", &[0]);
        let id = ps.add("w", (3, 3), Init::Normal(0.1), &mut rng);
        let a = ps.checksum();
        assert_eq!(a, ps.checksum());
        ps.values[id.0][[0, 0]] += 1.0;
        assert_ne!(a, ps.checksum());
    }
}
