//! Classification heads over frozen embeddings.
//!
//! [`GLoRIParams`] implements the attention head: patch tokens from the
//! last L layers are concatenated and projected (ReLU linear embed), a
//! fine-grained branch attends over them with per-query adaptive softmax
//! temperatures, a coarse-grained branch attends over pyramid-merged patch
//! embeddings, and both are summed with a learned projection of the [CLS]
//! token before per-finding linear classifiers. [`LinearProbeParams`] is
//! the baseline: one affine map over the concatenated [CLS] tokens.
//!
//! Every component is an explicit tape computation, so the whole head is
//! differentiable end to end and its attention maps are plain tensors.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor, Var};

/// Which attention branch to read a map from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Fine,
    Coarse,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GLoRIConfig {
    /// Number of disease queries / findings (M).
    pub n_findings: usize,
    /// Input token width after concatenating the backbone layers.
    pub d_model: usize,
    /// Head width.
    pub d_glori: usize,
    /// Attention head count; must divide `d_glori`.
    pub heads: usize,
    /// Hidden width of the temperature MLP.
    pub temp_hidden: usize,
    /// Pyramid pooling sizes.
    pub pyramid_ks: Vec<usize>,
    /// Integrate the [CLS] skip connection.
    pub use_global: bool,
    /// Use the adaptive temperature module on the fine branch.
    pub use_adaptive_temp: bool,
    /// Use the coarse branch (pyramid patch merging + attention).
    pub use_pyramid: bool,
    /// Parameter-init RNG seed.
    pub seed: u64,
}

impl GLoRIConfig {
    /// Full head at the published width: 768 wide, 8 heads, 8x/4x/2x
    /// pyramid, temperature MLP hidden width 256.
    pub fn new(n_findings: usize, d_model: usize) -> Self {
        GLoRIConfig {
            n_findings,
            d_model,
            d_glori: 768,
            heads: 8,
            temp_hidden: 256,
            pyramid_ks: vec![8, 4, 2],
            use_global: true,
            use_adaptive_temp: true,
            use_pyramid: true,
            seed: 0,
        }
    }

    /// Per-head key width (= value width).
    pub fn d_key(&self) -> usize {
        self.d_glori / self.heads
    }

    pub fn d_value(&self) -> usize {
        self.d_key()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_findings == 0 || self.d_model == 0 || self.d_glori == 0 {
            return Err(Error::config("n_findings, d_model and d_glori must be >= 1"));
        }
        if self.heads == 0 || self.d_glori % self.heads != 0 {
            return Err(Error::config(format!(
                "d_glori {} must be divisible by heads {}",
                self.d_glori, self.heads
            )));
        }
        if self.use_pyramid {
            if self.pyramid_ks.is_empty() {
                return Err(Error::config("pyramid enabled but no pooling sizes given"));
            }
            if self.pyramid_ks.iter().any(|&k| k == 0) {
                return Err(Error::config("pyramid pooling sizes must be >= 1"));
            }
            if self.pyramid_widths().iter().any(|&w| w == 0) {
                return Err(Error::config(format!(
                    "d_model {} too narrow for {} pyramid scales",
                    self.d_model,
                    self.pyramid_ks.len()
                )));
            }
        }
        if self.use_adaptive_temp && self.temp_hidden == 0 {
            return Err(Error::config("temp_hidden must be >= 1"));
        }
        Ok(())
    }

    /// Relu-linear projection widths per pyramid scale; they sum to d_model.
    pub fn pyramid_widths(&self) -> Vec<usize> {
        let s = self.pyramid_ks.len();
        if s == 0 {
            return vec![];
        }
        let base = self.d_model.div_ceil(s);
        let mut widths = vec![base; s - 1];
        widths.push(self.d_model.saturating_sub(base * (s - 1)));
        widths
    }
}

/// Affine map parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Key/value/output projections of one attention branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnProjParams {
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Two affine maps with tanh in between and after, then exp: bounds the
/// temperatures to [e^-1, e^1].
#[derive(Clone, Debug, PartialEq)]
pub struct TempMlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Coarse branch: per-scale projections, layer norm, queries, attention.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidParams {
    pub scales: Vec<LinearParams>,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub q: Tensor,
    pub proj: AttnProjParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GLoRIParams {
    pub config: GLoRIConfig,
    pub embed: LinearParams,
    pub q_fine: Tensor,
    pub fine: AttnProjParams,
    pub temp: Option<TempMlpParams>,
    pub coarse: Option<PyramidParams>,
    pub skip: Option<LinearParams>,
    /// Per-finding classifier rows `[M, d_glori]` and biases `[M]`.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> LinearParams {
    let bound = (1.0 / fan_in as f64).sqrt();
    LinearParams {
        w: Tensor::rand_uniform(vec![fan_in, fan_out], -bound, bound, rng),
        b: Tensor::rand_uniform(vec![fan_out], -bound, bound, rng),
    }
}

fn init_attn(rng: &mut impl Rng, d_in: usize, d_glori: usize) -> AttnProjParams {
    let k = init_linear(rng, d_in, d_glori);
    let v = init_linear(rng, d_in, d_glori);
    let o = init_linear(rng, d_glori, d_glori);
    AttnProjParams { wk: k.w, bk: k.b, wv: v.w, bv: v.b, wo: o.w, bo: o.b }
}

impl GLoRIParams {
    /// Fresh parameters: disease queries from a standard normal, all other
    /// affine maps uniform in +-sqrt(1/fan_in), layer norm at identity.
    pub fn init(config: GLoRIConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, "glori-init", 0);
        let dm = config.d_model;
        let dg = config.d_glori;
        let m = config.n_findings;

        let embed = init_linear(&mut rng, dm, dg);
        let q_fine = Tensor::randn(vec![m, dg], &mut rng);
        let fine = init_attn(&mut rng, dg, dg);
        let temp = config.use_adaptive_temp.then(|| {
            let l1 = init_linear(&mut rng, dm, config.temp_hidden);
            let l2 = init_linear(&mut rng, config.temp_hidden, m);
            TempMlpParams { w1: l1.w, b1: l1.b, w2: l2.w, b2: l2.b }
        });
        let coarse = config.use_pyramid.then(|| {
            let scales = config
                .pyramid_widths()
                .iter()
                .map(|&ws| init_linear(&mut rng, dm, ws))
                .collect();
            PyramidParams {
                scales,
                ln_gamma: Tensor::ones(vec![dm]),
                ln_beta: Tensor::zeros(vec![dm]),
                q: Tensor::randn(vec![m, dg], &mut rng),
                proj: init_attn(&mut rng, dm, dg),
            }
        });
        let skip = config.use_global.then(|| init_linear(&mut rng, dm, dg));
        let classifier = init_linear(&mut rng, dg, m);
        // classifier stored as one row per finding
        let mut cls_w = vec![0.0; m * dg];
        for i in 0..dg {
            for j in 0..m {
                cls_w[j * dg + i] = classifier.w.data()[i * m + j];
            }
        }
        Ok(GLoRIParams {
            config,
            embed,
            q_fine,
            fine,
            temp,
            coarse,
            skip,
            cls_w: Tensor::new(vec![m, dg], cls_w)?,
            cls_b: classifier.b,
        })
    }

    /// Canonical (name, tensor) list; ordering is the checkpoint and
    /// optimizer-state contract.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.w".into(), &self.embed.w),
            ("embed.b".into(), &self.embed.b),
            ("q_fine".into(), &self.q_fine),
            ("fine.wk".into(), &self.fine.wk),
            ("fine.bk".into(), &self.fine.bk),
            ("fine.wv".into(), &self.fine.wv),
            ("fine.bv".into(), &self.fine.bv),
            ("fine.wo".into(), &self.fine.wo),
            ("fine.bo".into(), &self.fine.bo),
        ];
        if let Some(t) = &self.temp {
            out.push(("temp.w1".into(), &t.w1));
            out.push(("temp.b1".into(), &t.b1));
            out.push(("temp.w2".into(), &t.w2));
            out.push(("temp.b2".into(), &t.b2));
        }
        if let Some(c) = &self.coarse {
            for (i, s) in c.scales.iter().enumerate() {
                out.push((format!("pyramid.{i}.w"), &s.w));
                out.push((format!("pyramid.{i}.b"), &s.b));
            }
            out.push(("pyramid.ln_gamma".into(), &c.ln_gamma));
            out.push(("pyramid.ln_beta".into(), &c.ln_beta));
            out.push(("q_coarse".into(), &c.q));
            out.push(("coarse.wk".into(), &c.proj.wk));
            out.push(("coarse.bk".into(), &c.proj.bk));
            out.push(("coarse.wv".into(), &c.proj.wv));
            out.push(("coarse.bv".into(), &c.proj.bv));
            out.push(("coarse.wo".into(), &c.proj.wo));
            out.push(("coarse.bo".into(), &c.proj.bo));
        }
        if let Some(s) = &self.skip {
            out.push(("skip.w".into(), &s.w));
            out.push(("skip.b".into(), &s.b));
        }
        out.push(("cls.w".into(), &self.cls_w));
        out.push(("cls.b".into(), &self.cls_b));
        out
    }

    /// Mutable tensors in the same canonical order as [`named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.embed.w,
            &mut self.embed.b,
            &mut self.q_fine,
            &mut self.fine.wk,
            &mut self.fine.bk,
            &mut self.fine.wv,
            &mut self.fine.bv,
            &mut self.fine.wo,
            &mut self.fine.bo,
        ];
        if let Some(t) = &mut self.temp {
            out.push(&mut t.w1);
            out.push(&mut t.b1);
            out.push(&mut t.w2);
            out.push(&mut t.b2);
        }
        if let Some(c) = &mut self.coarse {
            for s in &mut c.scales {
                out.push(&mut s.w);
                out.push(&mut s.b);
            }
            out.push(&mut c.ln_gamma);
            out.push(&mut c.ln_beta);
            out.push(&mut c.q);
            out.push(&mut c.proj.wk);
            out.push(&mut c.proj.bk);
            out.push(&mut c.proj.wv);
            out.push(&mut c.proj.bv);
            out.push(&mut c.proj.wo);
            out.push(&mut c.proj.bo);
        }
        if let Some(s) = &mut self.skip {
            out.push(&mut s.w);
            out.push(&mut s.b);
        }
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out
    }
}

/// Tape handles for a registered parameter set.
pub struct GLoRIVars {
    pub vars: Vec<Var>,
}

impl GLoRIVars {
    /// Gradient tensors aligned with the canonical parameter order.
    pub fn collect_grads(
        &self,
        params: &GLoRIParams,
        grads: &crate::tensor::Gradients,
    ) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.named_tensors())
            .map(|(&v, (_, t))| grads.wrt_or_zeros(v, t.shape()))
            .collect()
    }
}

/// Concatenate the per-layer patch grids and [CLS] tokens along the feature
/// axis: `([h, w, L*d], [L*d])`.
pub fn concat_layers(rec: &EmbeddingRecord) -> Result<(Tensor, Tensor)> {
    rec.validate()?;
    let (h, w) = rec.grid();
    let d = rec.d_layer();
    let l = rec.n_layers();
    let dm = l * d;
    let mut patches = vec![0.0; h * w * dm];
    let mut cls = vec![0.0; dm];
    for (li, layer) in rec.layers.iter().enumerate() {
        cls[li * d..(li + 1) * d].copy_from_slice(layer.cls.data());
        for cell in 0..h * w {
            patches[cell * dm + li * d..cell * dm + (li + 1) * d]
                .copy_from_slice(&layer.patches.data()[cell * d..(cell + 1) * d]);
        }
    }
    Ok((Tensor::new(vec![h, w, dm], patches)?, Tensor::new(vec![dm], cls)?))
}

/// Everything the forward pass produces besides the logits.
pub struct GloriForward {
    pub logits: Var,
    /// Head-averaged fine-branch attention, `[M, N]`.
    pub fine_maps: Var,
    /// Head-averaged coarse-branch attention when the pyramid is enabled.
    pub coarse_maps: Option<Var>,
    /// Temperature vector actually used by the fine branch.
    pub tau: Var,
}

/// ReLU(linear embed) of flattened patch tokens: `[N, d_model] -> [N, d_glori]`.
pub fn embed_patches(tape: &Tape, u: Var, w: Var, b: Var) -> Result<Var> {
    tape.relu(tape.linear(u, w, b)?)
}

/// Temperature vector from mean-pooled patch features:
/// `exp(tanh(affine(tanh(affine(mean(u))))))`, elementwise in (e^-1, e^1).
pub fn adaptive_temperature(
    tape: &Tape,
    u: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let pooled = tape.mean_rows(u)?;
    let h = tape.tanh(tape.linear(pooled, w1, b1)?)?;
    let t = tape.tanh(tape.linear(h, w2, b2)?)?;
    let m = tape.shape(t)[1];
    tape.exp(tape.reshape(t, vec![m])?)
}

/// Multi-head scaled dot-product attention of `M` query rows over `N` key
/// rows, with a per-query temperature shared across heads. Returns the
/// output-projected queries `[M, d_glori]` and head-averaged attention
/// weights `[M, N]`.
pub fn attention(
    tape: &Tape,
    q: Var,
    tokens: Var,
    tau: Var,
    proj: &AttnProjVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let d_glori = tape.shape(q)[1];
    if d_glori % heads != 0 {
        return Err(Error::config("query width not divisible by head count"));
    }
    let dh = d_glori / heads;
    let k = tape.linear(tokens, proj.wk, proj.bk)?;
    let v = tape.linear(tokens, proj.wv, proj.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps: Option<Var> = None;
    for hband in 0..heads {
        let qh = tape.slice_cols(q, hband * dh, dh)?;
        let kh = tape.slice_cols(k, hband * dh, dh)?;
        let vh = tape.slice_cols(v, hband * dh, dh)?;
        let scores = tape.scale(tape.matmul_nt(qh, kh)?, scale)?;
        let attn = tape.softmax_with_temperature(scores, tau)?;
        maps = Some(match maps {
            None => attn,
            Some(acc) => tape.add(acc, attn)?,
        });
        outs.push(tape.matmul(attn, vh)?);
    }
    let concat = tape.concat(&outs, 1)?;
    let out = tape.linear(concat, proj.wo, proj.bo)?;
    let maps = tape.scale(maps.expect("at least one head"), 1.0 / heads as f64)?;
    Ok((out, maps))
}

/// Pyramid patch merging: pool the grid at each scale, project to a slice
/// of `d_model` with ReLU, upsample back, concatenate the scales, and
/// layer-normalize. `[h, w, d_model] -> [N, d_model]`.
pub fn pyramid_merge(
    tape: &Tape,
    u_grid: Var,
    ks: &[usize],
    scales: &[(Var, Var)],
    ln_gamma: Var,
    ln_beta: Var,
) -> Result<Var> {
    let shape = tape.shape(u_grid);
    let (h, w, dm) = (shape[0], shape[1], shape[2]);
    let max_k = ks.iter().copied().max().unwrap_or(1);
    if h % max_k != 0 || w % max_k != 0 {
        return Err(Error::shape(format!(
            "grid {h}x{w} not divisible by pyramid size {max_k}"
        )));
    }
    let mut parts = Vec::with_capacity(ks.len());
    for (&k, &(w_s, b_s)) in ks.iter().zip(scales) {
        let pooled = tape.avg_pool2d(u_grid, k)?;
        let (ph, pw) = (h / k, w / k);
        let flat = tape.reshape(pooled, vec![ph * pw, dm])?;
        let projected = tape.relu(tape.linear(flat, w_s, b_s)?)?;
        let ws = tape.shape(projected)[1];
        let grid = tape.reshape(projected, vec![ph, pw, ws])?;
        parts.push(tape.upsample_nearest(grid, k)?);
    }
    let merged = tape.concat(&parts, 2)?;
    let flat = tape.reshape(merged, vec![h * w, dm])?;
    tape.layer_norm(flat, ln_gamma, ln_beta, LAYER_NORM_EPS)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sum of branch outputs plus the projected [CLS] token, broadcast over the
/// query rows.
pub fn integrate_global(
    tape: &Tape,
    fine_out: Var,
    coarse_out: Option<Var>,
    cls_proj: Option<Var>,
) -> Result<Var> {
    let mut tokens = fine_out;
    if let Some(c) = coarse_out {
        tokens = tape.add(tokens, c)?;
    }
    if let Some(p) = cls_proj {
        tokens = tape.add_bias_rows(tokens, p)?;
    }
    Ok(tokens)
}

/// Per-finding logits: `logit_m = <w_m, token_m> + b_m`.
pub fn classify(tape: &Tape, tokens: Var, cls_w: Var, cls_b: Var) -> Result<Var> {
    tape.add(tape.row_dot(tokens, cls_w)?, cls_b)
}

pub struct AttnProjVars {
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

struct GLoRIVarView {
    embed_w: Var,
    embed_b: Var,
    q_fine: Var,
    fine: AttnProjVars,
    temp: Option<(Var, Var, Var, Var)>,
    pyramid_scales: Vec<(Var, Var)>,
    ln: Option<(Var, Var)>,
    q_coarse: Option<Var>,
    coarse: Option<AttnProjVars>,
    skip: Option<(Var, Var)>,
    cls_w: Var,
    cls_b: Var,
}

fn view(params: &GLoRIParams, vars: &GLoRIVars) -> GLoRIVarView {
    let mut it = vars.vars.iter().copied();
    let mut next = || it.next().expect("var count matches parameter count");
    let embed_w = next();
    let embed_b = next();
    let q_fine = next();
    let fine = AttnProjVars {
        wk: next(),
        bk: next(),
        wv: next(),
        bv: next(),
        wo: next(),
        bo: next(),
    };
    let temp = params.temp.as_ref().map(|_| (next(), next(), next(), next()));
    let (pyramid_scales, ln, q_coarse, coarse) = match &params.coarse {
        Some(c) => {
            let scales: Vec<(Var, Var)> = (0..c.scales.len()).map(|_| (next(), next())).collect();
            let ln = (next(), next());
            let q = next();
            let proj = AttnProjVars {
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
            };
            (scales, Some(ln), Some(q), Some(proj))
        }
        None => (vec![], None, None, None),
    };
    let skip = params.skip.as_ref().map(|_| (next(), next()));
    let cls_w = next();
    let cls_b = next();
    GLoRIVarView {
        embed_w,
        embed_b,
        q_fine,
        fine,
        temp,
        pyramid_scales,
        ln,
        q_coarse,
        coarse,
        skip,
        cls_w,
        cls_b,
    }
}

impl GLoRIParams {
    /// Register every parameter on the tape, in canonical order.
    pub fn register(&self, tape: &Tape, trainable: bool) -> GLoRIVars {
        let vars = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        GLoRIVars { vars }
    }

    /// Full forward pass for one record on an existing tape.
    pub fn forward_on_tape(
        &self,
        tape: &Tape,
        vars: &GLoRIVars,
        rec: &EmbeddingRecord,
    ) -> Result<GloriForward> {
        let cfg = &self.config;
        if rec.d_model() != cfg.d_model {
            return Err(Error::shape(format!(
                "record d_model {} vs config {}",
                rec.d_model(),
                cfg.d_model
            )));
        }
        let (h, w) = rec.grid();
        let n = h * w;
        let (u_grid_t, cls_t) = concat_layers(rec)?;
        let v = view(self, vars);

        let u_grid = tape.constant(u_grid_t);
        let cls = tape.constant(cls_t);
        let u = tape.reshape(u_grid, vec![n, cfg.d_model])?;

        let u_embedded = embed_patches(tape, u, v.embed_w, v.embed_b)?;

        let tau = match (&v.temp, cfg.use_adaptive_temp) {
            (Some((w1, b1, w2, b2)), true) => adaptive_temperature(tape, u, *w1, *b1, *w2, *b2)?,
            _ => tape.constant(Tensor::ones(vec![cfg.n_findings])),
        };

        let (fine_out, fine_maps) = attention(tape, v.q_fine, u_embedded, tau, &v.fine, cfg.heads)?;

        let unit_tau = tape.constant(Tensor::ones(vec![cfg.n_findings]));
        let (coarse_out, coarse_maps) = match (&v.coarse, &v.q_coarse, &v.ln) {
            (Some(proj), Some(qc), Some((gamma, beta))) => {
                let u_pyr = pyramid_merge(
                    tape,
                    u_grid,
                    &cfg.pyramid_ks,
                    &v.pyramid_scales,
                    *gamma,
                    *beta,
                )?;
                let (out, maps) = attention(tape, *qc, u_pyr, unit_tau, proj, cfg.heads)?;
                (Some(out), Some(maps))
            }
            _ => (None, None),
        };

        let cls_proj = match &v.skip {
            Some((ws, bs)) => {
                let cls_row = tape.reshape(cls, vec![1, cfg.d_model])?;
                let projected = tape.linear(cls_row, *ws, *bs)?;
                Some(tape.reshape(projected, vec![cfg.d_glori])?)
            }
            None => None,
        };

        let tokens = integrate_global(tape, fine_out, coarse_out, cls_proj)?;
        let logits = classify(tape, tokens, v.cls_w, v.cls_b)?;
        Ok(GloriForward { logits, fine_maps, coarse_maps, tau })
    }

    /// Inference: logits for one record.
    pub fn forward(&self, rec: &EmbeddingRecord) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.register(&tape, false);
        let out = self.forward_on_tape(&tape, &vars, rec)?;
        Ok(tape.value(out.logits))
    }

    /// Head-averaged attention map of one disease query, `[h_p, w_p]`,
    /// entries non-negative and summing to 1.
    pub fn attention_map(&self, rec: &EmbeddingRecord, disease_index: usize, branch: Branch) -> Result<Tensor> {
        if disease_index >= self.config.n_findings {
            return Err(Error::data(format!(
                "disease index {disease_index} out of range for {} findings",
                self.config.n_findings
            )));
        }
        let tape = Tape::new();
        let vars = self.register(&tape, false);
        let out = self.forward_on_tape(&tape, &vars, rec)?;
        let maps = match branch {
            Branch::Fine => out.fine_maps,
            Branch::Coarse => out.coarse_maps.ok_or_else(|| {
                Error::config("coarse attention maps requested but the pyramid branch is disabled")
            })?,
        };
        let (h, w) = rec.grid();
        let t = tape.value(maps);
        let n = h * w;
        let row = t.data()[disease_index * n..(disease_index + 1) * n].to_vec();
        Tensor::new(vec![h, w], row)
    }
}

/// Linear probe over the concatenated [CLS] tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbeParams {
    pub n_findings: usize,
    pub d_model: usize,
    pub seed: u64,
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearProbeParams {
    pub fn init(n_findings: usize, d_model: usize, seed: u64) -> Result<Self> {
        if n_findings == 0 || d_model == 0 {
            return Err(Error::config("n_findings and d_model must be >= 1"));
        }
        let mut rng = substream(seed, "probe-init", 0);
        let lin = init_linear(&mut rng, d_model, n_findings);
        Ok(LinearProbeParams { n_findings, d_model, seed, w: lin.w, b: lin.b })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn register(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        vec![tape.leaf(self.w.clone(), trainable), tape.leaf(self.b.clone(), trainable)]
    }

    pub fn forward_on_tape(&self, tape: &Tape, vars: &[Var], rec: &EmbeddingRecord) -> Result<Var> {
        if rec.d_model() != self.d_model {
            return Err(Error::shape(format!(
                "record d_model {} vs probe {}",
                rec.d_model(),
                self.d_model
            )));
        }
        let (_, cls) = concat_layers(rec)?;
        let row = tape.constant(cls.with_shape(vec![1, self.d_model])?);
        let logits = tape.linear(row, vars[0], vars[1])?;
        tape.reshape(logits, vec![self.n_findings])
    }

    pub fn forward(&self, rec: &EmbeddingRecord) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.register(&tape, false);
        let out = self.forward_on_tape(&tape, &vars, rec)?;
        Ok(tape.value(out))
    }
}

/// Either head behind one interface for the trainer, evaluator, and
/// checkpoint code.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    Linear(LinearProbeParams),
    Glori(Box<GLoRIParams>),
}

impl HeadParams {
    pub fn n_findings(&self) -> usize {
        match self {
            HeadParams::Linear(p) => p.n_findings,
            HeadParams::Glori(p) => p.config.n_findings,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            HeadParams::Linear(p) => p.d_model,
            HeadParams::Glori(p) => p.config.d_model,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            HeadParams::Linear(_) => "linear",
            HeadParams::Glori(_) => "glori",
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            HeadParams::Linear(p) => p.named_tensors(),
            HeadParams::Glori(p) => p.named_tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            HeadParams::Linear(p) => p.tensors_mut(),
            HeadParams::Glori(p) => p.tensors_mut(),
        }
    }

    /// Inference logits for one record.
    pub fn logits(&self, rec: &EmbeddingRecord) -> Result<Tensor> {
        match self {
            HeadParams::Linear(p) => p.forward(rec),
            HeadParams::Glori(p) => p.forward(rec),
        }
    }

    /// Per-image BCE loss and parameter gradients in canonical order.
    pub fn loss_and_grads(&self, rec: &EmbeddingRecord, labels: &[f64]) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        match self {
            HeadParams::Linear(p) => {
                let vars = p.register(&tape, true);
                let logits = p.forward_on_tape(&tape, &vars, rec)?;
                let loss = tape.bce_with_logits(logits, labels)?;
                let grads = tape.backward(loss)?;
                let gs = vars
                    .iter()
                    .zip(p.named_tensors())
                    .map(|(&v, (_, t))| grads.wrt_or_zeros(v, t.shape()))
                    .collect();
                Ok((tape.scalar_value(loss)?, gs))
            }
            HeadParams::Glori(p) => {
                let vars = p.register(&tape, true);
                let out = p.forward_on_tape(&tape, &vars, rec)?;
                let loss = tape.bce_with_logits(out.logits, labels)?;
                let grads = tape.backward(loss)?;
                Ok((tape.scalar_value(loss)?, vars.collect_grads(p, &grads)))
            }
        }
    }
}

#[cfg(test)]
mod tests;
