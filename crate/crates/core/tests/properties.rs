// Index loops mirror the permutation algebra being checked.
#![allow(clippy::needless_range_loop)]

use noisymim_core::analysis::{attention_map, head_distribution, head_kl, kl_divergence};
use noisymim_core::autograd::Tape;
use noisymim_core::checkpoint::Checkpoint;
use noisymim_core::config::TrainConfig;
use noisymim_core::corruption::{
    build_schedule, diffused_corrupt, feature_noise, generate_mask, hybrid_corrupt, mask_count,
    BatchCorruption, MaskSpec, RowNoise, Strategy,
};
use noisymim_core::data::{
    encode_cifar, parse_cifar, synthetic_dataset, Dataset, SynthSpec, CIFAR_RECORD,
};
use noisymim_core::encoder::{model_forward, EncoderConfig, ParamStore};
use noisymim_core::objectives::{
    batch_losses, disruption_loss, pixel_targets, DisruptSelection, LossConfig,
};
use noisymim_core::optim::{adamw_step, AdamState, AdamWConfig};
use noisymim_core::rng::Rng;
use noisymim_core::tensor::{softmax_rows, Tensor};
use noisymim_core::Error;
use proptest::prelude::*;

fn small(cfg: u32) -> ProptestConfig {
    ProptestConfig {
        cases: cfg,
        ..ProptestConfig::default()
    }
}

fn strategy_of(i: u8) -> Strategy {
    [Strategy::Mim, Strategy::Diffused, Strategy::Hybrid][i as usize % 3]
}

fn tiny(strategy: Strategy, cls: bool, lambda_d: f64) -> EncoderConfig {
    EncoderConfig {
        strategy,
        use_cls_token: cls,
        disruption_weight: lambda_d,
        ..EncoderConfig::tiny()
    }
}

fn random_patches(cfg: &EncoderConfig, batch: usize, seed: u64) -> Tensor {
    let mut r = Rng::new(seed, 11);
    Tensor::from_fn(&[batch, cfg.num_patches(), cfg.patch_dim()], |_| r.normal())
}

proptest! {
    #![proptest_config(small(64))]

    #[test]
    fn softmax_rows_are_distributions(
        width in 1usize..16,
        values in prop::collection::vec(-1e4f64..1e4, 1..64),
    ) {
        let rows = values.len() / width;
        prop_assume!(rows > 0);
        let t = Tensor::new(&[rows, width], values[..rows * width].to_vec()).unwrap();
        let s = softmax_rows(&t);
        for r in 0..rows {
            let row = s.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn reused_tensor_accumulates_both_paths(seed in any::<u64>()) {
        let mut r = Rng::new(seed, 0);
        let x = Tensor::from_fn(&[3, 4], |_| r.normal());
        let w = Tensor::from_fn(&[4, 4], |_| r.normal());
        // f(a, b) = sum(gelu(a W) * b), evaluated at a = b = x.
        let shared = {
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            let f = v.linear(&tape.constant(w.clone()), None).unwrap().gelu().mul(&v).unwrap().sum();
            tape.backward(f).unwrap().get(v).unwrap().clone()
        };
        let split = {
            let tape = Tape::new();
            let a = tape.leaf(x.clone());
            let b = tape.leaf(x.clone());
            let f = a.linear(&tape.constant(w.clone()), None).unwrap().gelu().mul(&b).unwrap().sum();
            let g = tape.backward(f).unwrap();
            let (ga, gb) = (g.get(a).unwrap(), g.get(b).unwrap());
            Tensor::from_fn(&[3, 4], |i| ga.data()[i] + gb.data()[i])
        };
        prop_assert!(shared.max_abs_diff(&split) < 1e-14);
    }

    #[test]
    fn masks_have_exact_counts_and_partition(
        l in 1usize..=4096,
        gamma in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let m = generate_mask(&mut Rng::new(seed, 3), l, gamma, true).unwrap();
        prop_assert_eq!(m.masked_idx().len(), mask_count(l, gamma));
        prop_assert_eq!(m.mask().iter().filter(|&&b| b).count(), m.masked_idx().len());
        prop_assert_eq!(m.masked_idx().len() + m.noisy_visible_idx().len(), l);
        prop_assert!(m.noisy_visible_idx().iter().all(|&i| !m.mask()[i]));
        let again = generate_mask(&mut Rng::new(seed, 3), l, gamma, true).unwrap();
        prop_assert_eq!(m, again);
    }

    #[test]
    fn schedules_are_monotone_and_variance_preserving(
        steps in 1usize..2000,
        start in 1e-6f64..0.05,
        span in 0.0f64..0.5,
    ) {
        let s = build_schedule(steps, start, (start + span).min(0.999)).unwrap();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let (a, b) = s.coefficients(t).unwrap();
            prop_assert!((a * a + b * b - 1.0).abs() <= 4.0 * f64::EPSILON);
        }
        prop_assert!(s.coefficients(steps + 1).is_err());
    }

    #[test]
    fn batch_draws_are_deterministic(seed in any::<u64>(), step in 0u64..1000, s in 0u8..3) {
        let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
        let draw = || BatchCorruption::draw(strategy_of(s), 3, 16, 8, 0.6, &sched, seed, step).unwrap();
        prop_assert_eq!(draw(), draw());
    }

    #[test]
    fn corruption_never_touches_cls(seed in any::<u64>(), s in 0u8..3, gamma in 0.0f64..=1.0) {
        let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
        let plan = BatchCorruption::draw(strategy_of(s), 4, 4, 8, gamma, &sched, seed, 0).unwrap();
        let l_total = 5;
        let tm = plan.token_mask(l_total, 1);
        let (rows, _) = plan.noise_parts(l_total, 1);
        for b in 0..4 {
            prop_assert!(!tm[b * l_total]);
            prop_assert!(rows.iter().all(|&(r, _)| r != b * l_total));
        }
    }

    #[test]
    fn cifar_round_trip_is_exact(records in 1usize..12, seed in any::<u64>()) {
        let mut r = Rng::new(seed, 5);
        let pixels: Vec<u8> = (0..records * 3072).map(|_| r.below(256) as u8).collect();
        let labels: Vec<u8> = (0..records).map(|_| r.below(10) as u8).collect();
        let ds = Dataset::new(pixels, labels, (3, 32, 32), Vec::new()).unwrap();
        let bytes = encode_cifar(&ds).unwrap();
        prop_assert_eq!(bytes.len(), records * CIFAR_RECORD);
        prop_assert_eq!(parse_cifar(&bytes, 10).unwrap(), ds);
    }

    #[test]
    fn truncated_cifar_is_a_format_error(records in 1usize..4, cut in 1usize..CIFAR_RECORD) {
        let bytes = vec![1u8; records * CIFAR_RECORD];
        let at = bytes.len() - cut;
        match parse_cifar(&bytes[..at], 10) {
            Err(Error::Format { offset, .. }) => prop_assert_eq!(offset as usize, at / CIFAR_RECORD * CIFAR_RECORD),
            other => prop_assert!(false, "{:?}", other.map(|d| d.len())),
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        raw in prop::collection::vec(0.0f64..1.0, 2..24),
        heads in 2usize..4,
    ) {
        let l = raw.len();
        let a = Tensor::from_fn(&[1, heads, l, l], |i| raw[(i * 7 + i / l) % l] + 1e-3);
        let mut a = a;
        for row in a.data_mut().chunks_mut(l) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        for h in 0..heads {
            let d = head_distribution(&a, h).unwrap();
            prop_assert!((d.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(kl_divergence(d.data(), d.data()), 0.0);
        }
        for rec in head_kl(0, &a).unwrap() {
            prop_assert!(rec.kl >= 0.0 && rec.layer_mean >= 0.0);
            let (p, q) = (head_distribution(&a, rec.head_i).unwrap(), head_distribution(&a, rec.head_j).unwrap());
            if p.data() == q.data() {
                prop_assert_eq!(rec.kl, 0.0);
            }
        }
    }

    #[test]
    fn disruption_is_bounded_row_entropy(
        raw in prop::collection::vec(0.0f64..1.0, 8..64),
        one_hot in any::<bool>(),
    ) {
        let l = 8;
        let rows = raw.len() / l;
        let mut t = Tensor::new(&[1, 1, rows, l], raw[..rows * l].to_vec()).unwrap();
        for (r, row) in t.data_mut().chunks_mut(l).enumerate() {
            if one_hot {
                row.iter_mut().enumerate().for_each(|(k, v)| *v = f64::from(u8::from(k == r % l)));
            } else {
                row.iter_mut().for_each(|v| *v += 1e-3);
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let tape = Tape::new();
        let rec = noisymim_core::encoder::AffinityRecord { layer: 0, per_head: tape.leaf(t), retained_for_grad: true };
        let sel = DisruptSelection { rows: (0..rows).collect(), columns: None };
        let v = disruption_loss(&tape, &[rec], &sel, None).unwrap().item();
        prop_assert!(v >= -1e-9 && v <= (l as f64).ln() + 1e-9);
        if one_hot {
            prop_assert!(v.abs() < 1e-9);
        } else {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn adamw_moves_some_parameter(seed in any::<u64>(), lr in 1e-6f64..1e-1) {
        let cfg = EncoderConfig::tiny();
        let mut ps = ParamStore::init(&cfg, seed).unwrap();
        let before = ps.clone();
        let mut st = AdamState::new(&ps);
        let mut r = Rng::new(seed, 1);
        let grads: Vec<Tensor> = ps.params().iter().map(|p| Tensor::from_fn(p.value.shape(), |_| r.normal())).collect();
        adamw_step(&mut ps, &grads, &mut st, &AdamWConfig::default(), lr).unwrap();
        prop_assert!(ps != before);
    }

    #[test]
    fn synthetic_pixels_stay_in_range(classes in 2usize..12, seed in any::<u64>()) {
        let spec = SynthSpec { classes, size: 16, seed, ..SynthSpec::default() };
        let ds = synthetic_dataset(&spec, 1, 0).unwrap();
        for i in 0..ds.len() {
            prop_assert!(ds.image(i).data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(ds.label(i) < classes);
        }
    }

    #[test]
    fn checkpoint_garbage_never_panics(pos in 0usize..4096, byte in any::<u8>(), cut in 0usize..4096) {
        let config = TrainConfig { encoder: EncoderConfig::tiny(), ..TrainConfig::default() };
        let params = ParamStore::init(&config.encoder, 1).unwrap();
        let ck = Checkpoint { config, params, optimizer: None, step: 0 };
        let mut bytes = ck.encode();
        let n = bytes.len();
        bytes[pos % n] = byte;
        bytes.truncate(n - cut % n);
        let _ = Checkpoint::decode(&bytes);
    }
}

proptest! {
    #![proptest_config(small(12))]

    #[test]
    fn affinity_rows_sum_to_one(s in 0u8..3, cls in any::<bool>(), ld in prop::sample::select(vec![0.0, 0.5]), seed in any::<u64>()) {
        let cfg = tiny(strategy_of(s), cls, ld);
        let store = ParamStore::init_with_std(&cfg, seed, 0.5).unwrap();
        let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
        let plan = BatchCorruption::draw(cfg.strategy, 2, cfg.num_patches(), cfg.embed_dim, 0.5, &sched, seed, 0).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = model_forward(&cfg, &bound, tape.constant(random_patches(&cfg, 2, seed)), &plan).unwrap();
        for rec in &out.encoder.affinities {
            let a = rec.per_head.to_tensor();
            for row in a.data().chunks(cfg.num_tokens()) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    /// Relabelling image tokens (patches, positional rows, mask and noise
    /// rows together) relabels every output row and affinity entry.
    #[test]
    fn forward_is_permutation_consistent(seed in any::<u64>(), s in 0u8..3, cls in any::<bool>()) {
        let cfg = EncoderConfig { image_size: 8, patch_size: 2, ..tiny(strategy_of(s), cls, 0.1) };
        let (l, off, d) = (cfg.num_patches(), cfg.cls_offset(), cfg.embed_dim);
        let mut r = Rng::new(seed, 2);
        let mut perm: Vec<usize> = (0..l).collect();
        r.shuffle(&mut perm);

        let store = ParamStore::init_with_std(&cfg, seed, 0.3).unwrap();
        let mut pstore = store.clone();
        let pos = store.get("pos_embed").unwrap().clone();
        let ppos = pstore.get_mut("pos_embed").unwrap();
        for i in 0..l {
            let (src, dst) = (off + i, off + perm[i]);
            ppos.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&pos.data()[src * d..(src + 1) * d]);
        }
        let patches = random_patches(&cfg, 1, seed);
        let p = cfg.patch_dim();
        let mut ppatches = patches.clone();
        for i in 0..l {
            ppatches.data_mut()[perm[i] * p..(perm[i] + 1) * p].copy_from_slice(&patches.data()[i * p..(i + 1) * p]);
        }

        let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
        let mask = generate_mask(&mut r, l, 0.5, cfg.strategy == Strategy::Hybrid).unwrap();
        let t = if cfg.strategy == Strategy::Mim { 0 } else { 300 };
        let noisy = match cfg.strategy {
            Strategy::Mim => Vec::new(),
            Strategy::Diffused => mask.masked_idx().to_vec(),
            Strategy::Hybrid => mask.noisy_visible_idx().to_vec(),
        };
        let eps = r.normals(noisy.len() * d);
        let plan = |m: MaskSpec, rows: Vec<usize>| BatchCorruption {
            strategy: cfg.strategy,
            masks: vec![m],
            timesteps: vec![t],
            noise: vec![Some(RowNoise::with_eps(&rows, t, &sched, d, eps.clone()).unwrap())],
        };
        let base = plan(mask.clone(), noisy.clone());
        let moved = plan(mask.permuted(&perm), noisy.iter().map(|&i| perm[i]).collect());

        let run = |st: &ParamStore, x: &Tensor, pl: &BatchCorruption| {
            let tape = Tape::new();
            let bound = st.bind(&tape);
            let out = model_forward(&cfg, &bound, tape.constant(x.clone()), pl).unwrap();
            (out.pred.to_tensor(), out.encoder.affinities.last().unwrap().per_head.to_tensor())
        };
        let (pred, aff) = run(&store, &patches, &base);
        let (ppred, paff) = run(&pstore, &ppatches, &moved);
        let tok = |i: usize| if i < off { i } else { off + perm[i - off] };
        let lt = cfg.num_tokens();
        for i in 0..l {
            for k in 0..p {
                prop_assert!((pred.data()[i * p + k] - ppred.data()[perm[i] * p + k]).abs() < 1e-10);
            }
        }
        for h in 0..cfg.heads {
            for q in 0..lt {
                for k in 0..lt {
                    let a = aff.data()[(h * lt + q) * lt + k];
                    let b = paff.data()[(h * lt + tok(q)) * lt + tok(k)];
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
        // The same relabelling carries over to heatmaps.
        let grid = cfg.grid();
        for q in 0..lt {
            let m = attention_map(&aff, q, 0, off, grid).unwrap();
            let pm = attention_map(&paff, tok(q), 0, off, grid).unwrap();
            for i in 0..l {
                prop_assert!((m.data()[i] - pm.data()[perm[i]]).abs() < 1e-12);
            }
        }
    }

    /// Changing the disruption weight leaves the other components of the
    /// same forward pass untouched.
    #[test]
    fn loss_components_are_additive(seed in any::<u64>(), ld in 0.0f64..2.0) {
        let cfg = tiny(Strategy::Hybrid, false, 0.1);
        let store = ParamStore::init_with_std(&cfg, seed, 0.3).unwrap();
        let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
        let plan = BatchCorruption::draw(cfg.strategy, 2, cfg.num_patches(), cfg.embed_dim, 0.5, &sched, seed, 1).unwrap();
        let patches = random_patches(&cfg, 2, seed);
        let targets = pixel_targets(&patches, false).unwrap();
        let eval = |lambda_d: f64| {
            let c = EncoderConfig { disruption_weight: lambda_d, ..cfg.clone() };
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let out = model_forward(&c, &bound, tape.constant(patches.clone()), &plan).unwrap();
            batch_losses(&c, &LossConfig::default(), &out.pred, &out.encoder.affinities, &targets, &plan).unwrap().1
        };
        let (a, b) = (eval(0.1), eval(ld));
        prop_assert_eq!(a.l_mim, b.l_mim);
        prop_assert_eq!(a.l_denoise, b.l_denoise);
        prop_assert_eq!(a.l_disrupt, b.l_disrupt);
        prop_assert!((b.total - (b.l_mim + b.l_denoise * cfg.denoise_weight + ld * b.l_disrupt)).abs() < 1e-12);
    }
}

#[test]
fn op_families_pass_on_ten_seeds() {
    for seed in 0..10 {
        for (name, err) in noisymim_core::verify::check_op_families(seed, 1e-5).unwrap() {
            assert!(err < 1e-4, "seed {seed} {name}: {err}");
        }
    }
}

#[test]
fn plain_tensor_strategy_reductions() {
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let mut r = Rng::new(4, 0);
    let x = Tensor::from_fn(&[16, 6], |_| r.normal());
    let mask = generate_mask(&mut r, 16, 0.5, true).unwrap();
    let theta = Tensor::from_fn(&[6], |i| i as f64);

    // Hybrid at alpha_bar = 1 is mask-token substitution alone.
    let mim = hybrid_corrupt(&x, &mask, &theta).unwrap();
    let hybrid = feature_noise(&mim, &mask, 0, &sched, &mut r).unwrap();
    assert!(hybrid.bit_eq(&mim));

    // Diffused at the last step is nearly pure noise on the masked rows.
    let seed_rng = Rng::new(8, 8);
    let out = diffused_corrupt(&x, &mask, 1000, &sched, &mut seed_rng.clone()).unwrap();
    let eps = seed_rng.clone().normals(mask.masked_idx().len() * 6);
    for (k, &i) in mask.masked_idx().iter().enumerate() {
        for j in 0..6 {
            let got = out.data()[i * 6 + j];
            assert!((got - eps[k * 6 + j]).abs() < 0.01 * (1.0 + x.data()[i * 6 + j].abs()));
        }
    }
    for i in mask.noisy_visible_idx() {
        assert_eq!(out.row(*i), x.row(*i));
    }
}

#[test]
fn degenerate_corruption_trains_without_nan() {
    let mut cfg = TrainConfig::default();
    for kv in [
        "encoder.image_size=8",
        "encoder.patch_size=4",
        "encoder.embed_dim=8",
        "encoder.depth=2",
        "encoder.heads=2",
        "encoder.noise_block=0",
        "encoder.strategy=mim",
        "encoder.mask_ratio=0",
        "encoder.denoise_weight=0",
        "encoder.disruption_weight=0",
        "train.steps=3",
        "train.batch_size=4",
        "data.classes=2",
        "data.samples_per_class=4",
        "data.eval_per_class=0",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    let data = noisymim_core::train::load_data(&cfg).unwrap();
    let mut t = noisymim_core::train::Trainer::new(cfg, data).unwrap();
    for _ in 0..3 {
        let log = t.step().unwrap();
        assert_eq!(log.report.l_mim, 0.0);
        assert_eq!(log.report.total, 0.0);
    }
}
