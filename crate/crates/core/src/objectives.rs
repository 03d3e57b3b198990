//! Reconstruction, denoising and attention-disruption losses.
//!
//! All rows are flat indices: pixel rows over `[B * L_img, P]`, affinity
//! rows over `[B * H * L, L]`.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::corruption::BatchCorruption;
use crate::encoder::{AffinityRecord, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor inside the entropy logarithm.
pub const ENTROPY_FLOOR: f64 = 1e-12;

/// Which affinity columns enter the entropy of a noisy-visible row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DisruptColumns {
    All,
    MaskedOnly,
}

impl fmt::Display for DisruptColumns {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DisruptColumns::All => "all",
            DisruptColumns::MaskedOnly => "masked_only",
        })
    }
}

impl FromStr for DisruptColumns {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(DisruptColumns::All),
            "masked_only" => Ok(DisruptColumns::MaskedOnly),
            other => Err(Error::Config(format!(
                "unknown disrupt_columns `{other}` (expected all or masked_only)"
            ))),
        }
    }
}

/// Loss options that are not architecture parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Layers whose affinities enter the disruption loss; `None` is all.
    pub disrupt_layers: Option<Vec<usize>>,
    pub disrupt_columns: DisruptColumns,
    pub normalize_per_patch: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            disrupt_layers: None,
            disrupt_columns: DisruptColumns::All,
            normalize_per_patch: false,
        }
    }
}

/// Scalar values of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_mim: f64,
    pub l_denoise: f64,
    pub l_disrupt: f64,
    pub total: f64,
    pub masked: usize,
    pub noisy_visible: usize,
}

/// Mean squared error per element over `rows` of `[N, P]` predictions;
/// 0 for an empty row set. `target` holds the full `[N, P]` targets.
pub fn row_mse<'t>(pred: &Var<'t>, target: &Tensor, rows: &[usize]) -> Result<Var<'t>> {
    let ps = pred.shape();
    if ps != target.shape() {
        return Err(Error::shape("reconstruction loss", &ps, target.shape()));
    }
    let tape = pred.tape();
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p = target.last_dim();
    let mut tdata = Vec::with_capacity(rows.len() * p);
    for &r in rows {
        if r * p >= target.len() {
            return Err(Error::Contract(format!("loss row {r} out of range")));
        }
        tdata.extend_from_slice(target.row(r));
    }
    let t = tape.constant(Tensor::new(&[rows.len(), p], tdata)?);
    let diff = pred.select_rows(rows)?.sub(&t)?;
    Ok(diff.mul(&diff)?.sum().scale(1.0 / (rows.len() * p) as f64))
}

/// Reconstruction of masked tokens.
pub fn mim_loss<'t>(pred: &Var<'t>, target: &Tensor, masked_rows: &[usize]) -> Result<Var<'t>> {
    row_mse(pred, target, masked_rows)
}

/// Reconstruction of clean pixels at noisy-visible tokens.
pub fn denoise_loss<'t>(pred: &Var<'t>, target: &Tensor, noisy_rows: &[usize]) -> Result<Var<'t>> {
    row_mse(pred, target, noisy_rows)
}

/// Which affinity rows and columns the disruption loss reads.
#[derive(Clone, Debug, PartialEq)]
pub struct DisruptSelection {
    /// Flat rows over `[B * H * L, L]`.
    pub rows: Vec<usize>,
    /// `[rows, L]` 0/1 column weights when restricted to masked columns.
    pub columns: Option<Tensor>,
}

impl DisruptSelection {
    /// Rows of every head for each sample's noisy-visible tokens.
    pub fn new(
        corruption: &BatchCorruption,
        heads: usize,
        cls_offset: usize,
        columns: DisruptColumns,
    ) -> Self {
        let l_img = corruption.masks.first().map_or(0, |m| m.len());
        let l = l_img + cls_offset;
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for (b, m) in corruption.masks.iter().enumerate() {
            let mut colmask = vec![0.0; l];
            for &j in m.masked_idx() {
                colmask[cls_offset + j] = 1.0;
            }
            for h in 0..heads {
                for &i in m.noisy_visible_idx() {
                    rows.push((b * heads + h) * l + cls_offset + i);
                    if columns == DisruptColumns::MaskedOnly {
                        weights.extend_from_slice(&colmask);
                    }
                }
            }
        }
        let columns = match columns {
            DisruptColumns::All => None,
            DisruptColumns::MaskedOnly => {
                Some(Tensor::new(&[rows.len(), l], weights).expect("column weights"))
            }
        };
        DisruptSelection { rows, columns }
    }
}

/// Mean Shannon entropy of the selected affinity rows, averaged over rows
/// (heads included) and over the given layers; 0 when nothing is selected.
pub fn disruption_loss<'t>(
    tape: &'t Tape,
    affinities: &[AffinityRecord<'t>],
    selection: &DisruptSelection,
    layers: Option<&[usize]>,
) -> Result<Var<'t>> {
    let chosen: Vec<&AffinityRecord<'t>> = affinities
        .iter()
        .filter(|a| layers.is_none_or(|ls| ls.contains(&a.layer)))
        .collect();
    if chosen.is_empty() || selection.rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let weights = selection.columns.as_ref().map(|c| tape.constant(c.clone()));
    let mut total: Option<Var<'t>> = None;
    for rec in chosen.iter() {
        let mut p = rec.per_head.select_rows(&selection.rows)?;
        if !rec.retained_for_grad {
            p = tape.constant(p.to_tensor());
        }
        let mut plogp = p.mul(&p.add_scalar(ENTROPY_FLOOR).log()?)?;
        if let Some(w) = &weights {
            plogp = plogp.mul(w)?;
        }
        let h = plogp.sum();
        total = Some(match total {
            Some(acc) => acc.add(&h)?,
            None => h,
        });
    }
    let n = (selection.rows.len() * chosen.len()) as f64;
    Ok(total.expect("nonempty").scale(-1.0 / n))
}

/// `l_mim + lambda_n * l_denoise + lambda_d * l_disrupt`, with the report
/// read back from the recorded values.
pub fn total_loss<'t>(
    l_mim: Var<'t>,
    l_denoise: Var<'t>,
    l_disrupt: Var<'t>,
    lambda_n: f64,
    lambda_d: f64,
) -> Result<(Var<'t>, LossReport)> {
    if !(lambda_n >= 0.0 && lambda_d >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be nonnegative, got {lambda_n}, {lambda_d}"
        )));
    }
    let total = l_mim
        .add(&l_denoise.scale(lambda_n))?
        .add(&l_disrupt.scale(lambda_d))?;
    let report = LossReport {
        l_mim: l_mim.item(),
        l_denoise: l_denoise.item(),
        l_disrupt: l_disrupt.item(),
        total: total.item(),
        masked: 0,
        noisy_visible: 0,
    };
    for (name, v) in [
        ("l_mim", report.l_mim),
        ("l_denoise", report.l_denoise),
        ("l_disrupt", report.l_disrupt),
        ("total", report.total),
    ] {
        if !v.is_finite() {
            return Err(Error::non_finite(format!("{name} = {v}")));
        }
    }
    Ok((total, report))
}

/// Targets for one batch: `[B * L_img, P]`, optionally standardized per
/// patch.
pub fn pixel_targets(patches: &Tensor, normalize_per_patch: bool) -> Result<Tensor> {
    let p = patches.last_dim();
    let rows = patches.len() / p.max(1);
    let mut t = patches.clone().reshape(&[rows, p])?;
    if normalize_per_patch {
        for r in t.data_mut().chunks_mut(p) {
            let mean = r.iter().sum::<f64>() / p as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let inv = 1.0 / (var + 1e-6).sqrt();
            r.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }
    Ok(t)
}

/// All three terms for a corrupted forward pass.
pub fn batch_losses<'t>(
    cfg: &EncoderConfig,
    loss: &LossConfig,
    pred: &Var<'t>,
    affinities: &[AffinityRecord<'t>],
    targets: &Tensor,
    corruption: &BatchCorruption,
) -> Result<(Var<'t>, LossReport)> {
    let masked = corruption.masked_rows();
    let noisy = corruption.noisy_visible_rows();
    if masked.is_empty() && cfg.denoise_weight == 0.0 && cfg.disruption_weight == 0.0 {
        log::warn!("degenerate objective: no masked tokens and both auxiliary weights are zero");
    }
    let l_mim = mim_loss(pred, targets, &masked)?;
    let l_den = denoise_loss(pred, targets, &noisy)?;
    let sel = DisruptSelection::new(
        corruption,
        cfg.heads,
        cfg.cls_offset(),
        loss.disrupt_columns,
    );
    let l_dis = disruption_loss(
        pred.tape(),
        affinities,
        &sel,
        loss.disrupt_layers.as_deref(),
    )?;
    let (total, mut report) = total_loss(
        l_mim,
        l_den,
        l_dis,
        cfg.denoise_weight,
        cfg.disruption_weight,
    )?;
    report.masked = masked.len();
    report.noisy_visible = noisy.len();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{MaskSpec, Strategy};

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let target = Tensor::zeros(&[3, 2]);
        let pred = tape.leaf(Tensor::new(&[3, 2], vec![9.0, 9.0, 1.0, 1.0, 9.0, 9.0]).unwrap());
        assert_eq!(mim_loss(&pred, &target, &[1]).unwrap().item(), 1.0);
        assert_eq!(mim_loss(&pred, &target, &[]).unwrap().item(), 0.0);
        let same = tape.leaf(target.clone());
        assert_eq!(denoise_loss(&same, &target, &[0, 2]).unwrap().item(), 0.0);
    }

    fn record<'t>(tape: &'t Tape, rows: &[f64], l: usize) -> AffinityRecord<'t> {
        let n = rows.len() / l;
        AffinityRecord {
            layer: 0,
            per_head: tape.leaf(Tensor::new(&[1, 1, n, l], rows.to_vec()).unwrap()),
            retained_for_grad: true,
        }
    }

    fn all_rows(n: usize) -> DisruptSelection {
        DisruptSelection {
            rows: (0..n).collect(),
            columns: None,
        }
    }

    #[test]
    fn entropy_examples() {
        let tape = Tape::new();
        let uniform = record(&tape, &[0.125; 8], 8);
        let v = disruption_loss(&tape, &[uniform], &all_rows(1), None)
            .unwrap()
            .item();
        assert!((v - 3.0 * std::f64::consts::LN_2).abs() < 1e-9, "{v}");
        let half = record(&tape, &[0.5, 0.5], 2);
        let v = disruption_loss(&tape, &[half], &all_rows(1), None)
            .unwrap()
            .item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9, "{v}");
        let one_hot = record(&tape, &[0.0, 1.0, 0.0], 3);
        let v = disruption_loss(&tape, &[one_hot], &all_rows(1), None)
            .unwrap()
            .item();
        assert!(v.abs() < 1e-11, "{v}");
    }

    #[test]
    fn total_combination() {
        let tape = Tape::new();
        let one = || tape.leaf(Tensor::scalar(1.0));
        let (_, r) = total_loss(one(), one(), one(), 1.0, 0.1).unwrap();
        assert!((r.total - 2.1).abs() < 1e-15);
        let (_, r) = total_loss(one(), one(), one(), 0.0, 0.0).unwrap();
        assert_eq!(r.total, r.l_mim);
        let nan = tape.leaf(Tensor::scalar(f64::NAN));
        assert!(matches!(
            total_loss(nan, one(), one(), 1.0, 0.1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn selection_offsets_rows() {
        let masks = vec![MaskSpec::from_masked(3, 0.3, vec![1], true).unwrap()];
        let bc = BatchCorruption {
            strategy: Strategy::Hybrid,
            masks,
            timesteps: vec![0],
            noise: vec![None],
        };
        let sel = DisruptSelection::new(&bc, 2, 1, DisruptColumns::MaskedOnly);
        assert_eq!(sel.rows, vec![1, 3, 5, 7]);
        let cols = sel.columns.unwrap();
        assert_eq!(cols.row(0), &[0.0, 0.0, 1.0, 0.0]);
    }
}
