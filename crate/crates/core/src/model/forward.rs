//! Forward and reverse passes of the span-mean encoder and its two heads.
//!
//! ```text
//! u      = [mean(E[seq]); mean(E[head]); mean(E[tail])]
//! f      = tanh(W2 tanh(W1 u + b1) + b2)
//! g_phi  = normalize(P_phi f + b_phi)
//! logits = W_lm f + b_lm
//! ```

use super::params::EncoderParams;
use crate::data::{Span, Templated, TokenId};
use crate::error::{Error, Result};
use crate::numerics::{axpy, normalize_backward, norm, Matrix};

/// Where each sequence position reads its input vector from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Token(TokenId),
    Prompt(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    sources: Vec<Source>,
    head: Span,
    tail: Span,
    u: Vec<f64>,
    a1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub f: Vec<f64>,
    pub cache: ForwardCache,
}

/// Full dual-branch forward pass for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub z_norm: f64,
    pub logits: Vec<f64>,
    pub cache: ForwardCache,
}

/// Gradients flowing into one forward pass from downstream losses.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub df: Option<Vec<f64>>,
    pub dg: Option<Vec<f64>>,
    pub dlogits: Option<Vec<f64>>,
}

impl Upstream {
    pub fn is_empty(&self) -> bool {
        self.df.is_none() && self.dg.is_none() && self.dlogits.is_none()
    }

    fn add(slot: &mut Option<Vec<f64>>, alpha: f64, v: &[f64]) {
        match slot {
            Some(acc) => axpy(acc, alpha, v),
            None => *slot = Some(v.iter().map(|x| alpha * x).collect()),
        }
    }

    pub fn add_df(&mut self, alpha: f64, v: &[f64]) {
        Self::add(&mut self.df, alpha, v);
    }

    pub fn add_dg(&mut self, alpha: f64, v: &[f64]) {
        Self::add(&mut self.dg, alpha, v);
    }

    pub fn add_dlogits(&mut self, alpha: f64, v: &[f64]) {
        Self::add(&mut self.dlogits, alpha, v);
    }
}

fn input_row<'a>(params: &'a EncoderParams, s: Source) -> &'a [f64] {
    match s {
        Source::Token(t) => params.emb.row(t as usize),
        Source::Prompt(k) => params.prompts.row(k),
    }
}

fn span_mean(params: &EncoderParams, sources: &[Source], span: std::ops::Range<usize>) -> Vec<f64> {
    let mut acc = vec![0.0; params.dims.embed];
    let n = span.len() as f64;
    for s in &sources[span] {
        axpy(&mut acc, 1.0, input_row(params, *s));
    }
    acc.iter_mut().for_each(|x| *x /= n);
    acc
}

/// Encode a templated input into `f_theta(x)`. When `use_prompts` is set,
/// the i-th scaffold position reads prompt vector `i mod n_p` instead of its
/// token embedding. `pooled` is validated but does not otherwise enter the
/// span-mean architecture.
pub fn encode(params: &EncoderParams, input: &Templated, use_prompts: bool) -> Result<Encoded> {
    let len = input.ids.len();
    if len == 0 {
        return Err(Error::shape("empty input sequence"));
    }
    for (name, s) in [("head", input.head), ("tail", input.tail)] {
        if s.is_empty() || s.end > len {
            return Err(Error::shape(format!("{name} span {s:?} does not fit a sequence of {len}")));
        }
    }
    if input.pooled >= len {
        return Err(Error::shape(format!("pooled position {} outside sequence of {len}", input.pooled)));
    }
    let vocab = params.emb.rows();
    let mut sources = Vec::with_capacity(len);
    for &id in &input.ids {
        if id as usize >= vocab {
            return Err(Error::shape(format!("token id {id} outside embedding table of {vocab}")));
        }
        sources.push(Source::Token(id));
    }
    if use_prompts {
        let n_p = params.prompts.rows();
        for (k, &pos) in input.scaffold.iter().enumerate() {
            sources[pos] = Source::Prompt(k % n_p);
        }
    }
    let mut u = span_mean(params, &sources, 0..len);
    u.extend(span_mean(params, &sources, input.head.positions()));
    u.extend(span_mean(params, &sources, input.tail.positions()));

    let mut a1 = params.w1.matvec(&u);
    for (a, b) in a1.iter_mut().zip(params.b1.as_slice()) {
        *a = (*a + b).tanh();
    }
    let mut f = params.w2.matvec(&a1);
    for (x, b) in f.iter_mut().zip(params.b2.as_slice()) {
        *x = (*x + b).tanh();
    }
    Ok(Encoded { f, cache: ForwardCache { sources, head: input.head, tail: input.tail, u, a1 } })
}

/// Classification-branch feature `normalize(P_phi f + b_phi)` and the
/// pre-normalization norm.
pub fn g_phi(params: &EncoderParams, f: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut z = params.p_phi.matvec(f);
    axpy(&mut z, 1.0, params.b_phi.as_slice());
    let n = norm(&z);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("classifier projection is the zero vector".into()));
    }
    z.iter_mut().for_each(|x| *x /= n);
    Ok((z, n))
}

/// LM-head logits `W_lm f + b_lm`.
pub fn lm_head(params: &EncoderParams, f: &[f64]) -> Vec<f64> {
    let mut l = params.w_lm.matvec(f);
    axpy(&mut l, 1.0, params.b_lm.as_slice());
    l
}

pub fn forward(params: &EncoderParams, input: &Templated, use_prompts: bool) -> Result<Forward> {
    let Encoded { f, cache } = encode(params, input, use_prompts)?;
    let (g, z_norm) = g_phi(params, &f)?;
    let logits = lm_head(params, &f);
    Ok(Forward { f, g, z_norm, logits, cache })
}

/// Accumulate parameter gradients of one forward pass into `grads`.
pub fn backward(params: &EncoderParams, fwd: &Forward, up: &Upstream, grads: &mut EncoderParams) {
    if up.is_empty() {
        return;
    }
    let mut df = up.df.clone().unwrap_or_else(|| vec![0.0; fwd.f.len()]);
    if let Some(dg) = &up.dg {
        let dz = normalize_backward(&fwd.g, fwd.z_norm, dg);
        grads.p_phi.add_outer(1.0, &dz, &fwd.f);
        axpy(grads.b_phi.as_mut_slice(), 1.0, &dz);
        axpy(&mut df, 1.0, &params.p_phi.matvec_t(&dz));
    }
    if let Some(dl) = &up.dlogits {
        grads.w_lm.add_outer(1.0, dl, &fwd.f);
        axpy(grads.b_lm.as_mut_slice(), 1.0, dl);
        axpy(&mut df, 1.0, &params.w_lm.matvec_t(dl));
    }
    encoder_backward(params, fwd, &fwd.cache, &df, grads);
}

fn encoder_backward(
    params: &EncoderParams,
    fwd: &Forward,
    cache: &ForwardCache,
    df: &[f64],
    grads: &mut EncoderParams,
) {
    let dpre2: Vec<f64> = df.iter().zip(&fwd.f).map(|(d, f)| d * (1.0 - f * f)).collect();
    grads.w2.add_outer(1.0, &dpre2, &cache.a1);
    axpy(grads.b2.as_mut_slice(), 1.0, &dpre2);
    let da1 = params.w2.matvec_t(&dpre2);
    let dpre1: Vec<f64> = da1.iter().zip(&cache.a1).map(|(d, a)| d * (1.0 - a * a)).collect();
    grads.w1.add_outer(1.0, &dpre1, &cache.u);
    axpy(grads.b1.as_mut_slice(), 1.0, &dpre1);
    let du = params.w1.matvec_t(&dpre1);

    let de = params.dims.embed;
    let len = cache.sources.len();
    let parts = [
        (0..len, &du[..de]),
        (cache.head.positions(), &du[de..2 * de]),
        (cache.tail.positions(), &du[2 * de..]),
    ];
    for (range, grad) in parts {
        let scale = 1.0 / range.len() as f64;
        for s in &cache.sources[range] {
            let row = match *s {
                Source::Token(t) => grads.emb.row_mut(t as usize),
                Source::Prompt(k) => grads.prompts.row_mut(k),
            };
            axpy(row, scale, grad);
        }
    }
}

/// Pull a gradient on the unit feature `g` back onto `f` (helper for losses
/// defined on normalized encoder features).
pub fn normalized(f: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(f);
    if n == 0.0 {
        return Err(Error::Degenerate("normalizing a zero feature".into()));
    }
    Ok((f.iter().map(|x| x / n).collect(), n))
}

/// Stack the classifier features of a batch row-wise.
pub fn stack_g(batch: &[Forward]) -> Result<Matrix> {
    Matrix::from_rows(&batch.iter().map(|f| f.g.clone()).collect::<Vec<_>>())
}

pub fn stack_logits(batch: &[Forward]) -> Result<Matrix> {
    Matrix::from_rows(&batch.iter().map(|f| f.logits.clone()).collect::<Vec<_>>())
}
