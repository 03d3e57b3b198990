//! Token masks, the diffusion noise schedule and the three corruption
//! strategies.
//!
//! Convention used everywhere: `mask[i] == true` means image token `i` is
//! hidden (masked), never the other way round.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

/// How a sample is corrupted before reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Masked tokens replaced by the learned mask token; no noise.
    Mim,
    /// Masked tokens replaced by noised copies of themselves; no mask token.
    Diffused,
    /// Mask token on masked tokens, noise on the remaining visible tokens.
    Hybrid,
}

impl Strategy {
    pub fn uses_mask_token(self) -> bool {
        !matches!(self, Strategy::Diffused)
    }

    pub fn uses_noise(self) -> bool {
        !matches!(self, Strategy::Mim)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Mim => "mim",
            Strategy::Diffused => "diffused",
            Strategy::Hybrid => "hybrid",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mim" => Ok(Strategy::Mim),
            "diffused" => Ok(Strategy::Diffused),
            "hybrid" => Ok(Strategy::Hybrid),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected mim, diffused or hybrid)"
            ))),
        }
    }
}

/// Number of masked tokens for `l` tokens at ratio `gamma`.
pub fn mask_count(l: usize, gamma: f64) -> usize {
    ((gamma * l as f64).round() as usize).min(l)
}

/// Per-sample token mask with its index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    mask: Vec<bool>,
    gamma: f64,
    masked_idx: Vec<usize>,
    noisy_visible_idx: Vec<usize>,
}

impl MaskSpec {
    /// Builds a mask from an explicit masked index set. With
    /// `noisy_visible`, every unmasked token joins the noisy-visible set.
    pub fn from_masked(
        l_img: usize,
        gamma: f64,
        mut masked: Vec<usize>,
        noisy_visible: bool,
    ) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&i| i >= l_img) {
            return Err(Error::Contract(format!(
                "masked index out of range for {l_img} tokens"
            )));
        }
        let mut mask = vec![false; l_img];
        for &i in &masked {
            mask[i] = true;
        }
        let noisy_visible_idx = if noisy_visible {
            (0..l_img).filter(|&i| !mask[i]).collect()
        } else {
            Vec::new()
        };
        Ok(MaskSpec {
            mask,
            gamma,
            masked_idx: masked,
            noisy_visible_idx,
        })
    }

    /// All-visible mask with no noisy tokens.
    pub fn empty(l_img: usize) -> Self {
        MaskSpec {
            mask: vec![false; l_img],
            gamma: 0.0,
            masked_idx: Vec::new(),
            noisy_visible_idx: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn masked_idx(&self) -> &[usize] {
        &self.masked_idx
    }

    pub fn noisy_visible_idx(&self) -> &[usize] {
        &self.noisy_visible_idx
    }

    /// Same mask with tokens relabelled: new token `perm[i]` is old token `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let map = |idx: &[usize]| {
            let mut v: Vec<usize> = idx.iter().map(|&i| perm[i]).collect();
            v.sort_unstable();
            v
        };
        let mut mask = vec![false; self.mask.len()];
        for (i, &m) in self.mask.iter().enumerate() {
            mask[perm[i]] = m;
        }
        MaskSpec {
            mask,
            gamma: self.gamma,
            masked_idx: map(&self.masked_idx),
            noisy_visible_idx: map(&self.noisy_visible_idx),
        }
    }
}

/// Draws exactly `round(gamma * l_img)` masked tokens uniformly without
/// replacement (shuffle, take prefix).
pub fn generate_mask(
    rng: &mut Rng,
    l_img: usize,
    gamma: f64,
    noisy_visible: bool,
) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("mask ratio {gamma} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..l_img).collect();
    rng.shuffle(&mut order);
    order.truncate(mask_count(l_img, gamma));
    MaskSpec::from_masked(l_img, gamma, order, noisy_visible)
}

/// Linear-beta diffusion schedule with its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear interpolation of beta over `t = 1..=steps`;
/// `alpha_bar[t] = prod_{s <= t} (1 - beta[s])` with `alpha_bar[0] = 1`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config(
            "noise schedule needs at least one step".into(),
        ));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "noise schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start)
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `beta[t]` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Cumulative signal retention; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at step `t`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Timestep drawn uniformly from `1..=T`.
    pub fn sample_t(&self, rng: &mut Rng) -> usize {
        1 + rng.below(self.steps() as u64) as usize
    }
}

/// Single-shot forward diffusion with a given `eps`. `t == 0` is the
/// identity.
pub fn add_noise_with(x: &Tensor, t: usize, sched: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    let (signal, noise) = sched.coefficients(t)?;
    if x.shape() != eps.shape() {
        return Err(Error::shape("add_noise", x.shape(), eps.shape()));
    }
    if t == 0 {
        return Ok(x.clone());
    }
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&v, &e)| signal * v + noise * e)
        .collect();
    Tensor::new(x.shape(), data)
}

/// `sqrt(ab) * x + sqrt(1 - ab) * eps` with fresh `eps ~ N(0, I)`; returns
/// the noised tensor and `eps`.
pub fn add_noise(
    x: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    sched.check_t(t)?;
    let eps = Tensor::new(x.shape(), rng.normals(x.len()))?;
    let noised = add_noise_with(x, t, sched, &eps)?;
    Ok((noised, eps))
}

/// Noising recipe for a subset of one sample's token rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RowNoise {
    rows: Vec<usize>,
    t: usize,
    signal: f64,
    noise: f64,
    eps: Vec<f64>,
    dim: usize,
}

impl RowNoise {
    /// Draws `eps` for `rows` (each `dim` wide) at step `t`.
    pub fn draw(
        rows: &[usize],
        t: usize,
        sched: &NoiseSchedule,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let eps = rng.normals(rows.len() * dim);
        RowNoise::with_eps(rows, t, sched, dim, eps)
    }

    pub fn with_eps(
        rows: &[usize],
        t: usize,
        sched: &NoiseSchedule,
        dim: usize,
        eps: Vec<f64>,
    ) -> Result<Self> {
        let (signal, noise) = sched.coefficients(t)?;
        if eps.len() != rows.len() * dim {
            return Err(Error::shape("row_noise", &[rows.len(), dim], &[eps.len()]));
        }
        Ok(RowNoise {
            rows: rows.to_vec(),
            t,
            signal,
            noise,
            eps,
            dim,
        })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    /// True when applying this recipe changes nothing (`alpha_bar == 1` or
    /// no rows).
    pub fn is_identity(&self) -> bool {
        self.t == 0 || self.rows.is_empty()
    }

    /// Row multipliers and additive terms, with rows shifted by `offset`.
    pub fn affine_parts(&self, offset: usize) -> (Vec<(usize, f64)>, Vec<f64>) {
        if self.is_identity() {
            return (Vec::new(), Vec::new());
        }
        let rows = self
            .rows
            .iter()
            .map(|&r| (r + offset, self.signal))
            .collect();
        let shift = self.eps.iter().map(|&e| self.noise * e).collect();
        (rows, shift)
    }

    /// Applies the recipe to a plain `[L, D]` tensor whose image rows start
    /// at `offset`.
    pub fn apply(&self, x: &Tensor, offset: usize) -> Result<Tensor> {
        if x.last_dim() != self.dim {
            return Err(Error::shape("row_noise", x.shape(), &[self.dim]));
        }
        let mut out = x.clone();
        let (rows, shift) = self.affine_parts(offset);
        let d = self.dim;
        for (k, &(r, s)) in rows.iter().enumerate() {
            if (r + 1) * d > out.len() {
                return Err(Error::Contract(format!("row {r} out of range")));
            }
            let dst = &mut out.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                dst[j] = s * dst[j] + shift[k * d + j];
            }
        }
        Ok(out)
    }
}

/// Diffused masking: masked rows become `sqrt(ab) x + sqrt(1-ab) eps`,
/// visible rows are untouched, and no mask token is involved.
pub fn diffused_corrupt(
    x: &Tensor,
    mask: &MaskSpec,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    check_rows(x, mask)?;
    RowNoise::draw(mask.masked_idx(), t, sched, x.last_dim(), rng)?.apply(x, 0)
}

/// Feature-level noise of hybrid masking: only the noisy-visible rows are
/// noised.
pub fn feature_noise(
    features: &Tensor,
    mask: &MaskSpec,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    check_rows(features, mask)?;
    RowNoise::draw(mask.noisy_visible_idx(), t, sched, features.last_dim(), rng)?.apply(features, 0)
}

/// Mask-token substitution of hybrid masking: masked rows become `theta`.
pub fn hybrid_corrupt(embedding: &Tensor, mask: &MaskSpec, theta: &Tensor) -> Result<Tensor> {
    check_rows(embedding, mask)?;
    let d = embedding.last_dim();
    if theta.shape() != [d] {
        return Err(Error::shape(
            "hybrid_corrupt",
            embedding.shape(),
            theta.shape(),
        ));
    }
    let mut out = embedding.clone();
    for &i in mask.masked_idx() {
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(theta.data());
    }
    Ok(out)
}

fn check_rows(x: &Tensor, mask: &MaskSpec) -> Result<()> {
    if x.rank() != 2 || x.shape()[0] != mask.len() {
        return Err(Error::Contract(format!(
            "corruption of shape {:?} with a mask over {} tokens",
            x.shape(),
            mask.len()
        )));
    }
    Ok(())
}

/// Everything random about one batch's corruption, drawn up front so the
/// forward pass is a pure function of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchCorruption {
    pub strategy: Strategy,
    pub masks: Vec<MaskSpec>,
    pub timesteps: Vec<usize>,
    /// Per-sample noise recipe (rows are image-token indices).
    pub noise: Vec<Option<RowNoise>>,
}

impl BatchCorruption {
    /// Draws masks, timesteps `t ~ U{1..T}` and noise for every sample.
    /// Sample `b` of step `step` uses its own derived streams.
    #[allow(clippy::too_many_arguments)]
    pub fn draw(
        strategy: Strategy,
        batch: usize,
        l_img: usize,
        dim: usize,
        gamma: f64,
        sched: &NoiseSchedule,
        seed: u64,
        step: u64,
    ) -> Result<Self> {
        let mut masks = Vec::with_capacity(batch);
        let mut timesteps = Vec::with_capacity(batch);
        for b in 0..batch as u64 {
            let mut mrng = Rng::derive(seed, Purpose::Mask, &[step, b]);
            masks.push(generate_mask(
                &mut mrng,
                l_img,
                gamma,
                strategy.uses_noise(),
            )?);
            let t = if strategy.uses_noise() {
                sched.sample_t(&mut Rng::derive(seed, Purpose::Timestep, &[step, b]))
            } else {
                0
            };
            timesteps.push(t);
        }
        let noise = (0..batch)
            .map(|b| {
                let mut nrng = Rng::derive(seed, Purpose::Noise, &[step, b as u64]);
                noise_for(strategy, &masks[b], timesteps[b], sched, dim, &mut nrng)
            })
            .collect::<Result<_>>()?;
        Ok(BatchCorruption {
            strategy,
            masks,
            timesteps,
            noise,
        })
    }

    /// Same masks, but every sample noised at `timesteps[b]` with fresh draws.
    pub fn with_timesteps(
        strategy: Strategy,
        masks: Vec<MaskSpec>,
        timesteps: Vec<usize>,
        sched: &NoiseSchedule,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if masks.len() != timesteps.len() {
            return Err(Error::Contract("one timestep per mask required".into()));
        }
        let noise = masks
            .iter()
            .zip(&timesteps)
            .map(|(m, &t)| noise_for(strategy, m, t, sched, dim, rng))
            .collect::<Result<_>>()?;
        Ok(BatchCorruption {
            strategy,
            masks,
            timesteps,
            noise,
        })
    }

    /// No masking and no noise.
    pub fn clean(batch: usize, l_img: usize) -> Self {
        BatchCorruption {
            strategy: Strategy::Mim,
            masks: vec![MaskSpec::empty(l_img); batch],
            timesteps: vec![0; batch],
            noise: vec![None; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.masks.len()
    }

    /// Flat `[B * L]` row mask of tokens that take the mask token, with
    /// image token `i` of sample `b` at row `b * l_total + offset + i`.
    pub fn token_mask(&self, l_total: usize, offset: usize) -> Vec<bool> {
        let mut out = vec![false; self.batch() * l_total];
        if !self.strategy.uses_mask_token() {
            return out;
        }
        for (b, m) in self.masks.iter().enumerate() {
            for &i in m.masked_idx() {
                out[b * l_total + offset + i] = true;
            }
        }
        out
    }

    /// Row multipliers and additive terms for the whole batch.
    pub fn noise_parts(&self, l_total: usize, offset: usize) -> (Vec<(usize, f64)>, Vec<f64>) {
        let mut rows = Vec::new();
        let mut shift = Vec::new();
        for (b, n) in self.noise.iter().enumerate() {
            if let Some(n) = n {
                let (r, s) = n.affine_parts(b * l_total + offset);
                rows.extend(r);
                shift.extend(s);
            }
        }
        (rows, shift)
    }

    /// Flat row indices (over `[B * L_img]`) of masked tokens.
    pub fn masked_rows(&self) -> Vec<usize> {
        flat_rows(&self.masks, |m| m.masked_idx())
    }

    /// Flat row indices (over `[B * L_img]`) of noisy-visible tokens.
    pub fn noisy_visible_rows(&self) -> Vec<usize> {
        flat_rows(&self.masks, |m| m.noisy_visible_idx())
    }
}

fn flat_rows(masks: &[MaskSpec], pick: impl Fn(&MaskSpec) -> &[usize]) -> Vec<usize> {
    masks
        .iter()
        .enumerate()
        .flat_map(|(b, m)| pick(m).iter().map(move |&i| b * m.len() + i))
        .collect()
}

fn noise_for(
    strategy: Strategy,
    mask: &MaskSpec,
    t: usize,
    sched: &NoiseSchedule,
    dim: usize,
    rng: &mut Rng,
) -> Result<Option<RowNoise>> {
    let rows = match strategy {
        Strategy::Mim => return Ok(None),
        Strategy::Diffused => mask.masked_idx(),
        Strategy::Hybrid => mask.noisy_visible_idx(),
    };
    Ok(Some(RowNoise::draw(rows, t, sched, dim, rng)?))
}
