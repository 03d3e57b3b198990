//! Patch embedding, pre-norm transformer blocks with recorded attention
//! affinities, the learned mask token and the linear pixel head.
//!
//! Everything batched is laid out `[B, L, D]` with the optional CLS token
//! at row 0 of each sample, so image token `i` sits at row `cls_offset + i`.

use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::corruption::{BatchCorruption, MaskSpec, Strategy};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Architecture and corruption placement.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Block whose output receives feature noise; 0 means the embedding.
    pub noise_block: usize,
    pub strategy: Strategy,
    pub mask_ratio: f64,
    pub disruption_weight: f64,
    pub denoise_weight: f64,
    pub use_cls_token: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 96,
            depth: 6,
            heads: 4,
            mlp_ratio: 4.0,
            noise_block: 2,
            strategy: Strategy::Hybrid,
            mask_ratio: 0.6,
            disruption_weight: 0.1,
            denoise_weight: 1.0,
            use_cls_token: false,
        }
    }
}

impl EncoderConfig {
    /// Tiny configuration used for finite-difference verification.
    pub fn tiny() -> Self {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            noise_block: 1,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 {
            return fail("channels and embed_dim must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.noise_block > self.depth {
            return fail(format!(
                "noise_block {} outside 0..={}",
                self.noise_block, self.depth
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if !(self.disruption_weight >= 0.0) || !(self.denoise_weight >= 0.0) {
            return fail("loss weights must be nonnegative".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens per sample.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn cls_offset(&self) -> usize {
        usize::from(self.use_cls_token)
    }

    /// Tokens per sample including CLS.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + self.cls_offset()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Splits `[C, H, W]` into `[L_img, C*p*p]`: patches in raster order over
/// the grid, channel-major within a patch.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || p == 0 || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
        return Err(Error::shape("patchify", s, &[p, p]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    let src = image.data();
    let mut out = vec![0.0; gh * gw * pd];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * pd;
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * h + gy * p + y) * w + gx * p;
                    let dst = base + (ch * p + y) * p;
                    out[dst..dst + p].copy_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: &Tensor,
    channels: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Tensor> {
    if p == 0
        || !h.is_multiple_of(p)
        || !w.is_multiple_of(p)
        || tokens.shape() != [(h / p) * (w / p), channels * p * p]
    {
        return Err(Error::shape(
            "unpatchify",
            tokens.shape(),
            &[channels, h, w],
        ));
    }
    let gw = w / p;
    let pd = channels * p * p;
    let src = tokens.data();
    let mut out = vec![0.0; channels * h * w];
    for t in 0..tokens.shape()[0] {
        let (gy, gx) = (t / gw, t % gw);
        for ch in 0..channels {
            for y in 0..p {
                let row = (ch * h + gy * p + y) * w + gx * p;
                let s = t * pd + (ch * p + y) * p;
                out[row..row + p].copy_from_slice(&src[s..s + p]);
            }
        }
    }
    Tensor::new(&[channels, h, w], out)
}

/// Stacks patchified images into `[B, L_img, P]`.
pub fn patchify_batch(images: &[Tensor], p: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = None;
    for img in images {
        let t = patchify(img, p)?;
        if *shape.get_or_insert_with(|| t.shape().to_vec()) != t.shape() {
            return Err(Error::shape(
                "patchify_batch",
                shape.as_deref().unwrap_or(&[]),
                t.shape(),
            ));
        }
        data.extend_from_slice(t.data());
    }
    let s = shape.unwrap_or_else(|| vec![0, 0]);
    Tensor::new(&[images.len(), s[0], s[1]], data)
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered parameter collection; the order is the checkpoint and
/// optimizer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

impl ParamStore {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        ParamStore::init_with_std(cfg, seed, INIT_STD)
    }

    /// Truncated-normal(`std`) weights and tokens, zero biases, unit gains.
    pub fn init_with_std(cfg: &EncoderConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let (d, p, l, hm) = (
            cfg.embed_dim,
            cfg.patch_dim(),
            cfg.num_tokens(),
            cfg.mlp_hidden(),
        );
        let mut specs: Vec<(String, Vec<usize>, Init, bool)> = vec![
            ("patch_embed.weight".into(), vec![p, d], Init::Normal, true),
            ("pos_embed".into(), vec![l, d], Init::Normal, false),
        ];
        if cfg.use_cls_token {
            specs.push(("cls_token".into(), vec![d], Init::Normal, false));
        }
        specs.push(("mask_token".into(), vec![d], Init::Normal, false));
        for i in 0..cfg.depth {
            let b = format!("blocks.{i}");
            specs.push((format!("{b}.norm1.gain"), vec![d], Init::Ones, false));
            specs.push((format!("{b}.norm1.bias"), vec![d], Init::Zeros, false));
            for m in ["q", "k", "v", "proj"] {
                specs.push((
                    format!("{b}.attn.{m}.weight"),
                    vec![d, d],
                    Init::Normal,
                    true,
                ));
                // A key bias shifts every logit of a query row equally, so
                // softmax cancels it; it is omitted.
                if m != "k" {
                    specs.push((format!("{b}.attn.{m}.bias"), vec![d], Init::Zeros, false));
                }
            }
            specs.push((format!("{b}.norm2.gain"), vec![d], Init::Ones, false));
            specs.push((format!("{b}.norm2.bias"), vec![d], Init::Zeros, false));
            specs.push((
                format!("{b}.mlp.fc1.weight"),
                vec![d, hm],
                Init::Normal,
                true,
            ));
            specs.push((format!("{b}.mlp.fc1.bias"), vec![hm], Init::Zeros, false));
            specs.push((
                format!("{b}.mlp.fc2.weight"),
                vec![hm, d],
                Init::Normal,
                true,
            ));
            specs.push((format!("{b}.mlp.fc2.bias"), vec![d], Init::Zeros, false));
        }
        specs.push(("head.weight".into(), vec![d, p], Init::Normal, true));
        specs.push(("head.bias".into(), vec![p], Init::Zeros, false));

        let params = specs
            .into_iter()
            .enumerate()
            .map(|(k, (name, shape, init, decay))| {
                let value = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::ones(&shape),
                    Init::Normal => {
                        let mut rng = Rng::derive(seed, Purpose::Init, &[k as u64]);
                        Tensor::from_fn(&shape, |_| rng.truncated_normal(std))
                    }
                };
                Param { name, value, decay }
            })
            .collect();
        ParamStore::from_params(params)
    }

    pub fn from_params(params: Vec<Param>) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter `{}`", p.name)));
            }
        }
        Ok(ParamStore { params, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.params[i].value)
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape) -> Bound<'s, 't> {
        self.bind_where(tape, |_| true)
    }

    /// Records parameters as leaves where `trainable(name)` holds and as
    /// constants elsewhere.
    pub fn bind_where<'s, 't>(
        &'s self,
        tape: &'t Tape,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound<'s, 't> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(&p.name) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }

    /// Uses already-recorded variables, one per parameter in store order.
    pub fn bind_vars<'s, 't>(&'s self, vars: Vec<Var<'t>>) -> Result<Bound<'s, 't>> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound { store: self, vars })
    }
}

/// Parameters recorded on a tape.
#[derive(Clone)]
pub struct Bound<'s, 't> {
    store: &'s ParamStore,
    vars: Vec<Var<'t>>,
}

impl<'s, 't> Bound<'s, 't> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// `prefix.weight` with `prefix.bias` when the store has one.
    fn linear(&self, x: &Var<'t>, prefix: &str) -> Result<Var<'t>> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self
            .store
            .position(&format!("{prefix}.bias"))
            .map(|i| self.vars[i]);
        x.linear(&w, b.as_ref())
    }

    fn norm(&self, x: &Var<'t>, prefix: &str) -> Result<Var<'t>> {
        let g = self.get(&format!("{prefix}.gain"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        x.layer_norm(&g, &b, LN_EPS)
    }
}

/// Post-softmax attention of one block, `[B, H, L, L]`.
#[derive(Clone, Copy)]
pub struct AffinityRecord<'t> {
    pub layer: usize,
    pub per_head: Var<'t>,
    /// Whether a loss term backpropagates through these values.
    pub retained_for_grad: bool,
}

/// Linear patch projection (no bias), optional CLS prepend and positional
/// table: `[B, L_img, P]` to `[B, L, D]`.
pub fn embed<'t>(
    patches: &Var<'t>,
    weight: &Var<'t>,
    pos: &Var<'t>,
    cls: Option<&Var<'t>>,
) -> Result<Var<'t>> {
    let mut x = patches.linear(weight, None)?;
    if let Some(c) = cls {
        x = x.prepend_row(c)?;
    }
    let (xs, ps) = (x.shape(), pos.shape());
    if ps.len() != 2 || xs[xs.len() - 2..] != ps[..] {
        return Err(Error::Config(format!(
            "positional table {ps:?} does not match {} tokens of width {}",
            xs[xs.len() - 2],
            xs[xs.len() - 1]
        )));
    }
    x.add(pos)
}

/// Replaces masked image rows of `[B, L, D]` by `theta + pos[row]`.
pub fn apply_mask_tokens<'t>(
    features: &Var<'t>,
    masks: &[MaskSpec],
    theta: &Var<'t>,
    pos: &Var<'t>,
    cls_offset: usize,
) -> Result<Var<'t>> {
    let s = features.shape();
    let l = s[s.len() - 2];
    let batch = features.value().len() / (l * s[s.len() - 1]).max(1);
    if masks.len() != batch {
        return Err(Error::Contract(format!(
            "{} masks for a batch of {batch}",
            masks.len()
        )));
    }
    let mut flat = vec![false; batch * l];
    for (b, m) in masks.iter().enumerate() {
        if m.len() + cls_offset != l {
            return Err(Error::Contract(format!(
                "mask over {} tokens for {} image tokens",
                m.len(),
                l - cls_offset
            )));
        }
        for &i in m.masked_idx() {
            flat[b * l + cls_offset + i] = true;
        }
    }
    if !flat.iter().any(|&m| m) {
        return Ok(*features);
    }
    let fill = pos.add(theta)?;
    features.replace_rows(&flat, &fill)
}

/// Multi-head self-attention sublayer on already-normalized input; returns
/// the projected output and the `[B, H, L, L]` affinities.
pub fn attention<'t>(
    x: &Var<'t>,
    params: &Bound<'_, 't>,
    prefix: &str,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let d = x.shape()[x.shape().len() - 1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape("attention", &x.shape(), &[heads]));
    }
    let q = params
        .linear(x, &format!("{prefix}.q"))?
        .split_heads(heads)?;
    let k = params
        .linear(x, &format!("{prefix}.k"))?
        .split_heads(heads)?;
    let v = params
        .linear(x, &format!("{prefix}.v"))?
        .split_heads(heads)?;
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let probs = q.matmul_t(&k, scale)?.softmax_rows();
    let out = probs.matmul(&v)?.merge_heads()?;
    Ok((params.linear(&out, &format!("{prefix}.proj"))?, probs))
}

/// Result of [`encoder_forward`].
pub struct EncoderOutput<'t> {
    /// Final token features `[B, L, D]`.
    pub features: Var<'t>,
    /// One record per block.
    pub affinities: Vec<AffinityRecord<'t>>,
    /// `hidden[0]` is the (hooked, when `k = 0`) embedding, `hidden[i]` the
    /// output of block `i`.
    pub hidden: Vec<Var<'t>>,
}

/// Runs the block stack. `hook` is applied exactly once: to the input when
/// `noise_block == 0`, otherwise to the residual output of that block.
pub fn encoder_forward<'t>(
    input: Var<'t>,
    cfg: &EncoderConfig,
    params: &Bound<'_, 't>,
    hook: &mut dyn FnMut(Var<'t>) -> Result<Var<'t>>,
    retain_affinity: bool,
) -> Result<EncoderOutput<'t>> {
    let mut calls = 0usize;
    let mut run_hook = |x: Var<'t>, calls: &mut usize| {
        *calls += 1;
        hook(x)
    };
    let mut x = input;
    if cfg.noise_block == 0 {
        x = run_hook(x, &mut calls)?;
    }
    let mut hidden = vec![x];
    let mut affinities = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        let h = params.norm(&x, &format!("{b}.norm1"))?;
        let (a, probs) = attention(&h, params, &format!("{b}.attn"), cfg.heads)?;
        x = x.add(&a)?;
        let h = params.norm(&x, &format!("{b}.norm2"))?;
        let h = params.linear(&h, &format!("{b}.mlp.fc1"))?.gelu();
        x = x.add(&params.linear(&h, &format!("{b}.mlp.fc2"))?)?;
        if cfg.noise_block == i + 1 {
            x = run_hook(x, &mut calls)?;
        }
        affinities.push(AffinityRecord {
            layer: i,
            per_head: probs,
            retained_for_grad: retain_affinity,
        });
        hidden.push(x);
    }
    if calls != 1 {
        return Err(Error::Contract(format!(
            "feature hook ran {calls} times (noise_block {}, depth {})",
            cfg.noise_block, cfg.depth
        )));
    }
    Ok(EncoderOutput {
        features: x,
        affinities,
        hidden,
    })
}

/// Linear head over image tokens: `[B, L, D]` to `[B * L_img, P]`.
pub fn predict_pixels<'t>(
    features: &Var<'t>,
    weight: &Var<'t>,
    bias: &Var<'t>,
    cls_offset: usize,
) -> Result<Var<'t>> {
    let s = features.shape();
    let l = s[s.len() - 2];
    let img = if cls_offset > 0 {
        features.narrow_rows(cls_offset, l - cls_offset)?
    } else {
        *features
    };
    let out = img.linear(weight, Some(bias))?;
    let p = weight.shape()[1];
    let rows = out.value().len() / p.max(1);
    out.reshape(&[rows, p])
}

/// Full corrupted forward pass.
pub struct ModelOutput<'t> {
    pub encoder: EncoderOutput<'t>,
    /// `[B * L_img, P]` pixel predictions.
    pub pred: Var<'t>,
}

/// Embeds `[B, L_img, P]` patches, substitutes mask tokens, runs the
/// blocks with the batch's noise plan at `noise_block` and predicts pixels.
pub fn model_forward<'t>(
    cfg: &EncoderConfig,
    params: &Bound<'_, 't>,
    patches: Var<'t>,
    corruption: &BatchCorruption,
) -> Result<ModelOutput<'t>> {
    let pos = params.get("pos_embed")?;
    let cls = if cfg.use_cls_token {
        Some(params.get("cls_token")?)
    } else {
        None
    };
    let mut x = embed(
        &patches,
        &params.get("patch_embed.weight")?,
        &pos,
        cls.as_ref(),
    )?;
    let batch = x.shape()[0];
    if corruption.batch() != batch {
        return Err(Error::Contract(format!(
            "corruption plan for {} samples, batch of {batch}",
            corruption.batch()
        )));
    }
    if corruption.strategy.uses_mask_token() {
        x = apply_mask_tokens(
            &x,
            &corruption.masks,
            &params.get("mask_token")?,
            &pos,
            cfg.cls_offset(),
        )?;
    }
    let (rows, shift) = corruption.noise_parts(cfg.num_tokens(), cfg.cls_offset());
    let mut hook = |v: Var<'t>| {
        if rows.is_empty() {
            Ok(v)
        } else {
            v.row_affine(&rows, &shift)
        }
    };
    let encoder = encoder_forward(x, cfg, params, &mut hook, cfg.disruption_weight > 0.0)?;
    let pred = predict_pixels(
        &encoder.features,
        &params.get("head.weight")?,
        &params.get("head.bias")?,
        cfg.cls_offset(),
    )?;
    Ok(ModelOutput { encoder, pred })
}

/// Uncorrupted hidden states at every depth, as plain tensors `[B, L, D]`.
pub fn clean_hidden_states(
    cfg: &EncoderConfig,
    store: &ParamStore,
    patches: &Tensor,
) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let params = store.bind_where(&tape, |_| false);
    let batch = patches.shape()[0];
    let plan = BatchCorruption::clean(batch, cfg.num_patches());
    let out = model_forward(cfg, &params, tape.constant(patches.clone()), &plan)?;
    Ok(out.encoder.hidden.iter().map(|h| h.to_tensor()).collect())
}

/// Uncorrupted attention affinities `[B, H, L, L]` for every layer.
pub fn clean_affinities(
    cfg: &EncoderConfig,
    store: &ParamStore,
    patches: &Tensor,
) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let params = store.bind_where(&tape, |_| false);
    let plan = BatchCorruption::clean(patches.shape()[0], cfg.num_patches());
    let out = model_forward(cfg, &params, tape.constant(patches.clone()), &plan)?;
    Ok(out
        .encoder
        .affinities
        .iter()
        .map(|a| a.per_head.to_tensor())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::build_schedule;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 2,
            channels: 1,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            noise_block: 1,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            heads: 5,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            noise_block: 7,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            image_size: 30,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(EncoderConfig::default().num_patches(), 64);
    }

    #[test]
    fn patchify_raster_order() {
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        assert_eq!(t.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0]);
        let single = patchify(&Tensor::ones(&[1, 2, 2]), 2).unwrap();
        assert_eq!(single.shape(), &[1, 4]);
        assert!(patchify(&Tensor::ones(&[1, 3, 4]), 2).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let mut rng = Rng::new(1, 0);
        let img = Tensor::from_fn(&[3, 32, 32], |_| rng.uniform());
        let back = unpatchify(&patchify(&img, 4).unwrap(), 3, 32, 32, 4).unwrap();
        assert!(back.bit_eq(&img));
    }

    #[test]
    fn param_names_and_decay() {
        let store = ParamStore::init(&small_cfg(), 0).unwrap();
        assert!(store.get("blocks.1.attn.q.weight").is_some());
        assert!(store.get("cls_token").is_none());
        let decayed: Vec<&str> = store
            .params()
            .iter()
            .filter(|p| p.decay)
            .map(|p| p.name.as_str())
            .collect();
        assert!(decayed.iter().all(|n| n.ends_with(".weight")));
        assert!(!decayed.contains(&"mask_token"));
        let w = store.get("patch_embed.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn embed_zero_patches_gives_pos() {
        let tape = Tape::new();
        let patches = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let w = tape.constant(Tensor::ones(&[4, 2]));
        let pos = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let y = embed(&patches, &w, &pos, None).unwrap();
        assert_eq!(y.value().data(), pos.value().data());
        let bad_pos = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            embed(&patches, &w, &bad_pos, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_tokens_replace_only_masked_rows() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 4, 2], |i| i as f64));
        let theta = tape.constant(Tensor::new(&[2], vec![10.0, 20.0]).unwrap());
        let pos = tape.constant(Tensor::from_fn(&[4, 2], |i| 0.5 * i as f64));
        let mask = MaskSpec::from_masked(4, 0.5, vec![0, 2], true).unwrap();
        let y = apply_mask_tokens(&x, &[mask], &theta, &pos, 0)
            .unwrap()
            .to_tensor();
        assert_eq!(y.row(0), &[10.0, 20.5]);
        assert_eq!(y.row(1), &[2.0, 3.0]);
        assert_eq!(y.row(2), &[12.0, 22.5]);
        assert_eq!(y.row(3), &[6.0, 7.0]);
        let short = MaskSpec::from_masked(3, 0.5, vec![0], true).unwrap();
        assert!(apply_mask_tokens(&x, &[short], &theta, &pos, 0).is_err());
    }

    #[test]
    fn affinity_rows_are_distributions() {
        let cfg = small_cfg();
        let store = ParamStore::init_with_std(&cfg, 3, 0.5).unwrap();
        let mut rng = Rng::new(0, 0);
        let patches = Tensor::from_fn(&[2, 16, 4], |_| rng.normal());
        for a in clean_affinities(&cfg, &store, &patches).unwrap() {
            assert_eq!(a.shape(), &[2, 2, 16, 16]);
            for r in 0..a.len() / 16 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hook_runs_once_at_each_block() {
        let sched = build_schedule(10, 1e-4, 0.02).unwrap();
        for k in 0..=2 {
            let cfg = EncoderConfig {
                noise_block: k,
                ..small_cfg()
            };
            let store = ParamStore::init(&cfg, 0).unwrap();
            let tape = Tape::new();
            let params = store.bind(&tape);
            let plan =
                BatchCorruption::draw(Strategy::Hybrid, 2, 16, 8, 0.5, &sched, 1, 0).unwrap();
            let patches = tape.constant(Tensor::ones(&[2, 16, 4]));
            let out = model_forward(&cfg, &params, patches, &plan).unwrap();
            assert_eq!(out.pred.shape(), vec![32, 4]);
            assert_eq!(out.encoder.hidden.len(), 3);
        }
    }

    #[test]
    fn depth_zero_returns_hooked_input() {
        let cfg = EncoderConfig {
            depth: 0,
            noise_block: 0,
            ..small_cfg()
        };
        let store = ParamStore::init(&cfg, 0).unwrap();
        let tape = Tape::new();
        let params = store.bind(&tape);
        let x = tape.constant(Tensor::from_fn(&[1, 16, 8], |i| i as f64));
        let out = encoder_forward(x, &cfg, &params, &mut |v| Ok(v.scale(2.0)), false).unwrap();
        let expect: Vec<f64> = (0..128).map(|i| 2.0 * i as f64).collect();
        assert_eq!(out.features.value().data(), expect.as_slice());
    }

    #[test]
    fn cls_token_is_excluded_from_prediction() {
        let cfg = EncoderConfig {
            use_cls_token: true,
            ..small_cfg()
        };
        let store = ParamStore::init(&cfg, 0).unwrap();
        let tape = Tape::new();
        let params = store.bind(&tape);
        let plan = BatchCorruption::clean(3, 16);
        let patches = tape.constant(Tensor::zeros(&[3, 16, 4]));
        let out = model_forward(&cfg, &params, patches, &plan).unwrap();
        assert_eq!(out.encoder.features.shape(), vec![3, 17, 8]);
        assert_eq!(out.pred.shape(), vec![48, 4]);
    }
}
