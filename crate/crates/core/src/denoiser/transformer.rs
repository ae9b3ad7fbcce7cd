//! A small pre-norm transformer encoder used as the trainable denoiser.
//!
//! Attention is fully bidirectional: every position attends to every other.
//! There is no time input; the mask pattern carries the noise level. The
//! backward pass is derived by hand and checked against finite differences.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_tokens, Denoiser, DenoiserOutput};
use crate::checkpoint::{Container, NamedTensor};
use crate::diffusion::MaskDiffusion;
use crate::error::{ensure, Error, Result};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub mask_id: TokenId,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Standard deviation of the random weight init.
    pub init_std: f64,
    pub seed: u64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab_size > 0, Config, "vocab_size must be positive");
        ensure!((self.mask_id as usize) < self.vocab_size, Config, "mask id out of range");
        ensure!(self.layers >= 1, Config, "need at least one layer");
        ensure!(
            self.heads >= 1 && self.d_model.is_multiple_of(self.heads),
            Config,
            "d_model {} not divisible by {} heads",
            self.d_model,
            self.heads
        );
        ensure!(self.d_ff >= 1 && self.max_len >= 1, Config, "empty feed-forward or context");
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2)
    };
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        macro_rules! push {
            ($($f:ident),*) => {$(
                out.push((
                    format!("{prefix}.{}", stringify!($f)),
                    self.$f.shape().to_vec(),
                    self.$f.as_slice().expect("standard layout"),
                ));
            )*};
        }
        layer_fields!(push);
    }

    fn for_each_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        macro_rules! visit {
            ($($field:ident),*) => {$(
                f(self.$field.as_slice_mut().expect("standard layout"));
            )*};
        }
        layer_fields!(visit);
    }
}

impl TransformerParams {
    pub fn zeros(config: &TransformerConfig) -> Self {
        let (v, d, f, l) = (config.vocab_size, config.d_model, config.d_ff, config.max_len);
        Self {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((l, d)),
            layers: (0..config.layers).map(|_| LayerParams::zeros(d, f)).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            head_w: Array2::zeros((d, v)),
            head_b: Array1::zeros(v),
        }
    }

    /// Gaussian init with `config.init_std` from `config.seed`; layer-norm
    /// gains start at one and the output head at zero, so a fresh model
    /// predicts uniform logits.
    pub fn init(config: &TransformerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Self::zeros(config);
        let std = config.init_std;
        let mut fill = |a: &mut [f64]| {
            for x in a {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = std * z;
            }
        };
        fill(p.tok_emb.as_slice_mut().unwrap());
        fill(p.pos_emb.as_slice_mut().unwrap());
        for layer in &mut p.layers {
            for w in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w1, &mut layer.w2] {
                fill(w.as_slice_mut().unwrap());
            }
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
        }
        p.lnf_g.fill(1.0);
        p
    }

    /// Named views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn entry<'a, D: ndarray::Dimension>(
            name: &str,
            a: &'a ndarray::Array<f64, D>,
        ) -> (String, Vec<usize>, &'a [f64]) {
            (name.to_string(), a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let mut out = vec![entry("tok_emb", &self.tok_emb), entry("pos_emb", &self.pos_emb)];
        for (i, layer) in self.layers.iter().enumerate() {
            layer.tensors(&format!("layers.{i}"), &mut out);
        }
        out.push(entry("lnf_g", &self.lnf_g));
        out.push(entry("lnf_b", &self.lnf_b));
        out.push(entry("head_w", &self.head_w));
        out.push(entry("head_b", &self.head_b));
        out
    }

    /// Visits every tensor mutably, in the same order as [`Self::tensors`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.tok_emb.as_slice_mut().unwrap());
        f(self.pos_emb.as_slice_mut().unwrap());
        for layer in &mut self.layers {
            layer.for_each_mut(&mut f);
        }
        f(self.lnf_g.as_slice_mut().unwrap());
        f(self.lnf_b.as_slice_mut().unwrap());
        f(self.head_w.as_slice_mut().unwrap());
        f(self.head_b.as_slice_mut().unwrap());
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, d)| d.iter().copied()).collect()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(flat.len() == self.num_params(), Contract, "flat parameter length mismatch");
        let mut offset = 0;
        self.for_each_mut(|t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(())
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &TransformerParams) {
        let other = other.flatten();
        let mut offset = 0;
        self.for_each_mut(|t| {
            let n = t.len();
            for (x, y) in t.iter_mut().zip(&other[offset..offset + n]) {
                *x += y;
            }
            offset += n;
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|t| t.iter_mut().for_each(|x| *x *= factor));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.tensors()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect()
    }

    /// Rebuilds parameters from named tensors; every name and shape must match
    /// `config`.
    pub fn from_named_tensors(config: &TransformerConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut params = Self::zeros(config);
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        ensure!(
            expected.len() == tensors.len(),
            Load,
            "checkpoint holds {} tensors, config expects {}",
            tensors.len(),
            expected.len()
        );
        for ((name, shape), t) in expected.iter().zip(tensors) {
            ensure!(
                *name == t.name && *shape == t.shape,
                Load,
                "tensor {} {:?} does not match expected {name} {shape:?}",
                t.name,
                t.shape
            );
        }
        let mut i = 0;
        params.for_each_mut(|dst| {
            dst.copy_from_slice(&tensors[i].data);
            i += 1;
        });
        Ok(params)
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        Zip::from(xhat.row_mut(i)).and(row).for_each(|o, &v| *o = (v - mean) * r);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dh)
            .and(xh)
            .for_each(|o, &a, &b| *o = r * (a - mean_dh - b * mean_dh_xh));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    c: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct ForwardCache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    z: Array2<f64>,
}

/// One training example for the gradient: clean tokens, corrupted tokens and
/// the time they were corrupted at.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub x0: Vec<TokenId>,
    pub xt: Vec<TokenId>,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    pub config: TransformerConfig,
    pub params: TransformerParams,
}

impl TinyTransformer {
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let params = TransformerParams::init(&config);
        Ok(Self { config, params })
    }

    pub fn with_params(config: TransformerConfig, params: TransformerParams) -> Result<Self> {
        config.validate()?;
        ensure!(
            params.num_params() == TransformerParams::zeros(&config).num_params(),
            Contract,
            "parameter shapes do not match config"
        );
        Ok(Self { config, params })
    }

    fn check_input(&self, tokens: &[TokenId]) -> Result<()> {
        ensure!(!tokens.is_empty(), Contract, "empty input sequence");
        ensure!(
            tokens.len() <= self.config.max_len,
            Contract,
            "sequence length {} exceeds max_len {}",
            tokens.len(),
            self.config.max_len
        );
        check_tokens(tokens, self.config.vocab_size)
    }

    fn forward_cached(&self, params: &TransformerParams, tokens: &[TokenId]) -> (Array2<f64>, ForwardCache) {
        let cfg = &self.config;
        let n = tokens.len();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut h = Array2::zeros((n, cfg.d_model));
        for (i, &tok) in tokens.iter().enumerate() {
            let mut row = h.row_mut(i);
            row += &params.tok_emb.row(tok as usize);
            row += &params.pos_emb.row(i);
        }

        let mut caches = Vec::with_capacity(cfg.layers);
        for lp in &params.layers {
            let (a, ln1) = layer_norm(&h, &lp.ln1_g, &lp.ln1_b);
            let q = linear(&a, &lp.wq, &lp.bq);
            let k = linear(&a, &lp.wk, &lp.bk);
            let v = linear(&a, &lp.wv, &lp.bv);
            let mut o = Array2::zeros((n, cfg.d_model));
            let mut attn = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut p);
                o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
                attn.push(p);
            }
            h = h + linear(&o, &lp.wo, &lp.bo);

            let (c, ln2) = layer_norm(&h, &lp.ln2_g, &lp.ln2_b);
            let u = linear(&c, &lp.w1, &lp.b1);
            let g = u.mapv(gelu);
            h = h + linear(&g, &lp.w2, &lp.b2);

            caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                attn,
                o,
                ln2,
                c,
                u,
                g,
            });
        }
        let (z, lnf) = layer_norm(&h, &params.lnf_g, &params.lnf_b);
        let logits = linear(&z, &params.head_w, &params.head_b);
        (
            logits,
            ForwardCache {
                tokens: tokens.to_vec(),
                layers: caches,
                lnf,
                z,
            },
        )
    }

    fn backward(&self, params: &TransformerParams, cache: &ForwardCache, dlogits: &Array2<f64>) -> TransformerParams {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = TransformerParams::zeros(cfg);

        grads.head_w += &cache.z.t().dot(dlogits);
        grads.head_b += &dlogits.sum_axis(Axis(0));
        let dz = dlogits.dot(&params.head_w.t());
        let mut dh_res = layer_norm_backward(&dz, &cache.lnf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

        for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
            let gl = &mut grads.layers[li];

            // Feed-forward block.
            gl.w2 += &lc.g.t().dot(&dh_res);
            gl.b2 += &dh_res.sum_axis(Axis(0));
            let mut du = dh_res.dot(&lp.w2.t());
            Zip::from(&mut du).and(&lc.u).for_each(|d, &x| *d *= gelu_grad(x));
            gl.w1 += &lc.c.t().dot(&du);
            gl.b1 += &du.sum_axis(Axis(0));
            let dc = du.dot(&lp.w1.t());
            dh_res += &layer_norm_backward(&dc, &lc.ln2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);

            // Attention block.
            gl.wo += &lc.o.t().dot(&dh_res);
            gl.bo += &dh_res.sum_axis(Axis(0));
            let d_o = dh_res.dot(&lp.wo.t());
            let mut dq = Array2::zeros(lc.q.dim());
            let mut dk = Array2::zeros(lc.k.dim());
            let mut dv = Array2::zeros(lc.v.dim());
            for hd in 0..cfg.heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let p = &lc.attn[hd];
                let doh = d_o.slice(cols);
                let dp = doh.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dscores = p * &(&dp - &row_dot) * scale;
                dq.slice_mut(cols).assign(&dscores.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&dscores.t().dot(&lc.q.slice(cols)));
            }
            let mut da = Array2::zeros(lc.a.dim());
            for (dproj, w, gw, gb) in [
                (&dq, &lp.wq, &mut gl.wq, &mut gl.bq),
                (&dk, &lp.wk, &mut gl.wk, &mut gl.bk),
                (&dv, &lp.wv, &mut gl.wv, &mut gl.bv),
            ] {
                *gw += &lc.a.t().dot(dproj);
                *gb += &dproj.sum_axis(Axis(0));
                da += &dproj.dot(&w.t());
            }
            dh_res += &layer_norm_backward(&da, &lc.ln1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        }

        for (i, &tok) in cache.tokens.iter().enumerate() {
            let row = dh_res.row(i);
            let mut te = grads.tok_emb.row_mut(tok as usize);
            te += &row;
            let mut pe = grads.pos_emb.row_mut(i);
            pe += &row;
        }
        grads
    }

    /// Raw logits, `len x vocab_size`.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Array2<f64>> {
        self.check_input(tokens)?;
        Ok(self.forward_cached(&self.params, tokens).0)
    }

    /// Mean time-weighted masked cross entropy over `batch` with respect to
    /// `params` (which may differ from `self.params`, e.g. for finite
    /// differences).
    pub fn batch_loss(&self, params: &TransformerParams, batch: &[TrainExample], diffusion: &MaskDiffusion) -> Result<f64> {
        ensure!(!batch.is_empty(), Contract, "empty batch");
        let mut total = 0.0;
        for ex in batch {
            self.check_example(ex)?;
            let logits = self.forward_cached(params, &ex.xt).0;
            let out = DenoiserOutput::from_logits(self.config.vocab_size, logits.into_raw_vec_and_offset().0)?;
            total += diffusion.loss(&ex.x0, &ex.xt, &out, ex.t)?.loss;
        }
        Ok(total / batch.len() as f64)
    }

    fn check_example(&self, ex: &TrainExample) -> Result<()> {
        self.check_input(&ex.xt)?;
        check_tokens(&ex.x0, self.config.vocab_size)?;
        ensure!(ex.x0.len() == ex.xt.len(), Contract, "x0/xt length mismatch");
        ensure!(ex.t > 0.0 && ex.t <= 1.0, Domain, "training time {} outside (0, 1]", ex.t);
        Ok(())
    }

    /// Mean loss over the batch and its gradient. Items are processed in
    /// parallel and reduced in input order, so the result does not depend on
    /// thread scheduling.
    pub fn loss_and_grad(&self, batch: &[TrainExample], diffusion: &MaskDiffusion) -> Result<(f64, TransformerParams)> {
        ensure!(!batch.is_empty(), Contract, "empty batch");
        for ex in batch {
            self.check_example(ex)?;
        }
        let scale = 1.0 / batch.len() as f64;
        let per_item: Vec<(f64, Option<TransformerParams>)> = batch
            .par_iter()
            .map(|ex| self.item_grad(ex, diffusion, scale))
            .collect();

        let mut loss = 0.0;
        let mut grads = TransformerParams::zeros(&self.config);
        for (l, g) in per_item {
            loss += l;
            if let Some(g) = g {
                grads.add_assign(&g);
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() || !grads.is_finite() {
            let masked: usize = batch
                .iter()
                .map(|e| e.xt.iter().filter(|&&t| t == diffusion.mask_id).count())
                .sum();
            let t_min = batch.iter().map(|e| e.t).fold(f64::INFINITY, f64::min);
            return Err(Error::Training(format!(
                "non-finite loss {loss} (batch {}, masked {masked}, min t {t_min})",
                batch.len()
            )));
        }
        Ok((loss, grads))
    }

    fn item_grad(&self, ex: &TrainExample, diffusion: &MaskDiffusion, scale: f64) -> (f64, Option<TransformerParams>) {
        let masked: Vec<usize> = ex
            .xt
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == diffusion.mask_id)
            .map(|(i, _)| i)
            .collect();
        if masked.is_empty() {
            return (0.0, None);
        }
        let (logits, cache) = self.forward_cached(&self.params, &ex.xt);
        let weight = 1.0 / ex.t;
        let mut dlogits = Array2::zeros(logits.dim());
        let mut loss = 0.0;
        for &i in &masked {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum.ln();
            let target = ex.x0[i] as usize;
            loss += weight * (log_norm - row[target]);
            let mut d = dlogits.row_mut(i);
            Zip::from(&mut d).and(&row).for_each(|g, &l| *g = (l - log_norm).exp() * weight * scale);
            d[target] -= weight * scale;
        }
        let grads = self.backward(&self.params, &cache, &dlogits);
        (loss, Some(grads))
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container {
            header: serde_json::json!({
                "kind": "model",
                "config": serde_json::to_value(&self.config)?,
            }),
            tensors: self.params.to_named_tensors(),
        })
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        ensure!(
            container.header.get("kind").and_then(|k| k.as_str()) == Some("model"),
            Load,
            "container is not a model checkpoint"
        );
        let config: TransformerConfig = serde_json::from_value(
            container
                .header
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Load("model checkpoint has no config".into()))?,
        )?;
        config.validate()?;
        let params = TransformerParams::from_named_tensors(&config, &container.tensors)?;
        Ok(Self { config, params })
    }
}

impl Denoiser for TinyTransformer {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn mask_id(&self) -> TokenId {
        self.config.mask_id
    }

    fn denoise(&self, x_t: &[TokenId]) -> Result<DenoiserOutput> {
        let logits = self.logits(x_t)?;
        DenoiserOutput::from_logits(self.config.vocab_size, logits.into_raw_vec_and_offset().0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(layers: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size: 7,
            mask_id: 6,
            layers,
            heads: 2,
            d_model: 8,
            d_ff: 12,
            max_len: 6,
            init_std: 0.3,
            seed: 11,
        }
    }

    fn randomize_head(model: &mut TinyTransformer, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.params.head_w.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        model.params.head_b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }

    #[test]
    fn fresh_model_predicts_uniform() {
        let model = TinyTransformer::new(tiny_config(2)).unwrap();
        let out = model.denoise(&[0, 1, 6, 3]).unwrap();
        for i in 0..4 {
            for p in out.probs(i) {
                assert!((p - 1.0 / 7.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deterministic_logits() {
        let a = TinyTransformer::new(tiny_config(2)).unwrap();
        let b = TinyTransformer::new(tiny_config(2)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.logits(&[1, 2, 6]).unwrap(), b.logits(&[1, 2, 6]).unwrap());
    }

    #[test]
    fn right_context_reaches_position_zero() {
        for layers in 1..=3 {
            let mut model = TinyTransformer::new(tiny_config(layers)).unwrap();
            randomize_head(&mut model, 5);
            let a = model.logits(&[6, 1, 2, 3]).unwrap();
            let b = model.logits(&[6, 1, 2, 4]).unwrap();
            let delta = (&a.row(0) - &b.row(0)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(delta > 1e-9, "layers {layers}: delta {delta}");
        }
    }

    #[test]
    fn oversize_and_bad_tokens_rejected() {
        let model = TinyTransformer::new(tiny_config(1)).unwrap();
        assert!(model.denoise(&[0; 7]).is_err());
        assert!(model.denoise(&[9]).is_err());
        assert!(model.denoise(&[]).is_err());
    }

    #[test]
    fn unmasked_batch_has_zero_gradient() {
        let mut model = TinyTransformer::new(tiny_config(1)).unwrap();
        randomize_head(&mut model, 1);
        let d = MaskDiffusion::new(6);
        let batch = vec![TrainExample {
            x0: vec![0, 1, 2],
            xt: vec![0, 1, 2],
            t: 0.4,
        }];
        let (loss, g) = model.loss_and_grad(&batch, &d).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn halving_t_doubles_gradient() {
        let mut model = TinyTransformer::new(tiny_config(1)).unwrap();
        randomize_head(&mut model, 2);
        let d = MaskDiffusion::new(6);
        let ex = TrainExample {
            x0: vec![0, 1, 2, 3],
            xt: vec![0, 6, 2, 6],
            t: 0.6,
        };
        let (l1, g1) = model.loss_and_grad(std::slice::from_ref(&ex), &d).unwrap();
        let (l2, g2) = model
            .loss_and_grad(&[TrainExample { t: 0.3, ..ex }], &d)
            .unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12 * l2.abs());
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((b - 2.0 * a).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut model = TinyTransformer::new(tiny_config(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let generic: Vec<f64> = (0..model.params.num_params())
            .map(|_| rng.random_range(-0.8..0.8))
            .collect();
        model.params.set_from_flat(&generic).unwrap();
        let d = MaskDiffusion::new(6);
        let batch = vec![
            TrainExample { x0: vec![0, 1, 2, 5], xt: vec![6, 1, 6, 6], t: 0.7 },
            TrainExample { x0: vec![3, 4, 5, 0, 2], xt: vec![3, 6, 5, 6, 2], t: 0.2 },
        ];
        let (_, grads) = model.loss_and_grad(&batch, &d).unwrap();
        let analytic = grads.flatten();
        let mut probe = model.params.clone();
        let h = 1e-5;
        for (i, &a) in analytic.iter().enumerate() {
            let mut p = generic.clone();
            p[i] += h;
            probe.set_from_flat(&p).unwrap();
            let up = model.batch_loss(&probe, &batch, &d).unwrap();
            p[i] -= 2.0 * h;
            probe.set_from_flat(&p).unwrap();
            let down = model.batch_loss(&probe, &batch, &d).unwrap();
            let numeric = (up - down) / (2.0 * h);
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                "parameter {i}: analytic {a}, numeric {numeric}"
            );
        }
        assert!(analytic.iter().filter(|g| g.abs() > 1e-8).count() > analytic.len() / 2);
    }

    #[test]
    fn loss_matches_batch_loss() {
        let mut model = TinyTransformer::new(tiny_config(2)).unwrap();
        randomize_head(&mut model, 3);
        let d = MaskDiffusion::new(6);
        let batch = vec![
            TrainExample { x0: vec![0, 1, 2], xt: vec![6, 1, 6], t: 0.7 },
            TrainExample { x0: vec![3, 4, 5, 0], xt: vec![3, 6, 5, 6], t: 0.2 },
        ];
        let (loss, _) = model.loss_and_grad(&batch, &d).unwrap();
        let direct = model.batch_loss(&model.params, &batch, &d).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_container_roundtrip() {
        let model = TinyTransformer::new(tiny_config(2)).unwrap();
        let bytes = model.to_container().unwrap().to_bytes().unwrap();
        let back = TinyTransformer::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.params, model.params);
    }
}
