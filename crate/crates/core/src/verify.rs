//! End-to-end finite-difference verification of every parameter gradient,
//! one loss component at a time, plus per-op-family spot checks.

use crate::autograd::{Tape, Var};
use crate::corruption::{build_schedule, BatchCorruption, MaskSpec};
use crate::encoder::{model_forward, EncoderConfig, ParamStore};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_many};
use crate::objectives::{
    denoise_loss, disruption_loss, mim_loss, pixel_targets, DisruptColumns, DisruptSelection,
};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub encoder: EncoderConfig,
    pub batch: usize,
    pub seed: u64,
    /// Larger than the training init so gradients sit well above
    /// finite-difference noise.
    pub init_std: f64,
    pub eps: f64,
    pub threshold: f64,
    /// Fixed diffusion step used for the noise plan.
    pub timestep: usize,
    /// Test hook: doubles the analytic gradient of this parameter.
    pub corrupt_param: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            encoder: EncoderConfig::tiny(),
            batch: 2,
            seed: 0,
            init_std: 0.4,
            eps: 1e-5,
            threshold: 1e-4,
            timestep: 400,
            corrupt_param: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Mim,
    Denoise,
    Disrupt,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Mim, Component::Denoise, Component::Disrupt];

    pub fn name(self) -> &'static str {
        match self {
            Component::Mim => "l_mim",
            Component::Denoise => "l_denoise",
            Component::Disrupt => "l_disrupt",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub component: Component,
    /// `(parameter, max relative error)` in store order.
    pub per_param: Vec<(String, f64)>,
}

impl ComponentReport {
    /// Worst parameter and its error.
    pub fn worst(&self) -> (&str, f64) {
        self.per_param.iter().fold(
            ("", 0.0),
            |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc },
        )
    }
}

struct Fixture {
    store: ParamStore,
    patches: Tensor,
    targets: Tensor,
    plan: BatchCorruption,
}

fn fixture(cfg: &GradcheckConfig) -> Result<Fixture> {
    let enc = &cfg.encoder;
    enc.validate()?;
    let store = ParamStore::init_with_std(enc, cfg.seed, cfg.init_std)?;
    let mut rng = Rng::derive(cfg.seed, Purpose::Synthetic, &[0]);
    let (l_img, p) = (enc.num_patches(), enc.patch_dim());
    let patches = Tensor::from_fn(&[cfg.batch, l_img, p], |_| rng.normal());
    let targets = pixel_targets(&patches, false)?;
    let sched = build_schedule(1000, 1e-4, 0.02)?;
    let mut mrng = Rng::derive(cfg.seed, Purpose::Mask, &[0]);
    let masks = (0..cfg.batch)
        .map(|_| {
            crate::corruption::generate_mask(
                &mut mrng,
                l_img,
                enc.mask_ratio.clamp(0.25, 0.75),
                true,
            )
        })
        .collect::<Result<Vec<MaskSpec>>>()?;
    let plan = BatchCorruption::with_timesteps(
        enc.strategy,
        masks,
        vec![cfg.timestep; cfg.batch],
        &sched,
        enc.embed_dim,
        &mut Rng::derive(cfg.seed, Purpose::Noise, &[0]),
    )?;
    Ok(Fixture {
        store,
        patches,
        targets,
        plan,
    })
}

fn component_value<'t>(
    cfg: &GradcheckConfig,
    fx: &Fixture,
    tape: &'t Tape,
    vars: &[Var<'t>],
    which: Component,
) -> Result<Var<'t>> {
    let enc = &cfg.encoder;
    let vars: Vec<Var<'t>> = vars
        .iter()
        .zip(fx.store.params())
        .map(|(v, p)| match &cfg.corrupt_param {
            // 2v - v has the value of v but twice its gradient.
            Some(name) if *name == p.name => v.scale(2.0).sub(&tape.constant(v.to_tensor())),
            _ => Ok(*v),
        })
        .collect::<Result<_>>()?;
    let params = fx.store.bind_vars(vars)?;
    let out = model_forward(enc, &params, tape.constant(fx.patches.clone()), &fx.plan)?;
    match which {
        Component::Mim => mim_loss(&out.pred, &fx.targets, &fx.plan.masked_rows()),
        Component::Denoise => denoise_loss(&out.pred, &fx.targets, &fx.plan.noisy_visible_rows()),
        Component::Disrupt => {
            let sel =
                DisruptSelection::new(&fx.plan, enc.heads, enc.cls_offset(), DisruptColumns::All);
            let mut affs = out.encoder.affinities;
            affs.iter_mut().for_each(|a| a.retained_for_grad = true);
            disruption_loss(tape, &affs, &sel, None)
        }
    }
}

/// Checks every parameter gradient of each loss component.
pub fn check_components(cfg: &GradcheckConfig) -> Result<Vec<ComponentReport>> {
    let fx = fixture(cfg)?;
    let inputs = fx.store.values();
    Component::ALL
        .iter()
        .map(|&which| {
            let reports = grad_check_many(
                |tape, vars| component_value(cfg, &fx, tape, vars, which),
                &inputs,
                cfg.eps,
            )?;
            let per_param = fx
                .store
                .params()
                .iter()
                .zip(reports)
                .map(|(p, r)| (p.name.clone(), r.max_rel_error))
                .collect();
            Ok(ComponentReport {
                component: which,
                per_param,
            })
        })
        .collect()
}

/// Worst relative error for each differentiable op family on random input.
pub fn check_op_families(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::derive(seed, Purpose::Synthetic, &[1]);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.normal());
    let a = rand(&[2, 3, 4]);
    let b = rand(&[2, 4, 5]);
    let w = rand(&[4, 3]);
    let pos = Tensor::from_fn(&[2, 5], |i| 0.5 + i as f64 * 0.1);
    let g = rand(&[4]);
    let mut out = Vec::new();
    let bt = b.clone();
    out.push((
        "matmul",
        grad_check(
            |t, x| Ok(x.matmul(&t.constant(bt.clone()))?.gelu().sum()),
            &a,
            eps,
        )?,
    ));
    let bt = rand(&[2, 5, 4]);
    out.push((
        "matmul_t",
        grad_check(
            |t, x| Ok(x.matmul_t(&t.constant(bt.clone()), 0.7)?.gelu().sum()),
            &a,
            eps,
        )?,
    ));
    let wt = w.clone();
    out.push((
        "linear",
        grad_check(
            |t, x| Ok(x.linear(&t.constant(wt.clone()), None)?.gelu().sum()),
            &a,
            eps,
        )?,
    ));
    let c = rand(&[2, 3, 4]);
    out.push((
        "softmax_rows",
        grad_check(
            |t, x| Ok(x.softmax_rows().mul(&t.constant(c.clone()))?.sum()),
            &a,
            eps,
        )?,
    ));
    let (gt, bt2) = (g.clone(), rand(&[4]));
    let c2 = c.clone();
    out.push((
        "layer_norm",
        grad_check(
            |t, x| {
                let y = x.layer_norm(&t.constant(gt.clone()), &t.constant(bt2.clone()), 1e-6)?;
                Ok(y.mul(&t.constant(c2.clone()))?.sum())
            },
            &a,
            eps,
        )?,
    ));
    out.push(("mul", grad_check(|_, x| Ok(x.mul(&x)?.sum()), &a, eps)?));
    out.push(("gelu", grad_check(|_, x| Ok(x.gelu().sum()), &a, eps)?));
    out.push(("log", grad_check(|_, x| Ok(x.log()?.sum()), &pos, eps)?));
    out.push(("sqrt", grad_check(|_, x| Ok(x.sqrt()?.sum()), &pos, eps)?));
    let c3 = rand(&[2, 3, 4]);
    out.push((
        "heads",
        grad_check(
            |t, x| {
                let y = x.split_heads(2)?.gelu().merge_heads()?;
                Ok(y.mul(&t.constant(c3.clone()))?.sum())
            },
            &a,
            eps,
        )?,
    ));
    let fill = rand(&[3, 4]);
    out.push((
        "rows",
        grad_check(
            |t, x| {
                let y = x.replace_rows(
                    &[true, false, false, false, true, false],
                    &t.constant(fill.clone()),
                )?;
                let y = y.row_affine(&[(1, 0.5)], &[1.0; 4])?;
                Ok(y.select_rows(&[1, 2, 5])?.gelu().sum())
            },
            &a,
            eps,
        )?,
    ));
    Ok(out)
}
