//! Attention diagnostics and a frozen-feature linear probe.
//!
//! A head's distribution is its post-softmax key distribution averaged over
//! every query row and every sample, then renormalized. Head divergence is
//! the KL between those distributions for every ordered pair of heads.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{ChannelStats, Dataset};
use crate::encoder::{clean_affinities, clean_hidden_states, EncoderConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::batch_patches;

/// Floor applied to probabilities inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-12;

pub const HEAD_KL_CSV: &str = "head_kl.csv";
pub const LAYER_KL_CSV: &str = "layer_kl.csv";
pub const HEAD_KL_SVG: &str = "head_kl.svg";

/// `(batch, heads, L)` of a `[B, H, L, L]` or `[H, L, L]` affinity tensor.
fn affinity_dims(affinity: &Tensor) -> Result<(usize, usize, usize)> {
    let s = affinity.shape();
    let (b, h, l, l2) = match *s {
        [h, l, l2] => (1, h, l, l2),
        [b, h, l, l2] => (b, h, l, l2),
        _ => return Err(Error::shape("affinity", s, &[0, 0, 0, 0])),
    };
    if l != l2 || l == 0 || h == 0 {
        return Err(Error::shape("affinity", s, &[b, h, l, l]));
    }
    Ok((b, h, l))
}

/// Key distribution of one head, averaged over queries and samples.
pub fn head_distribution(affinity: &Tensor, head: usize) -> Result<Tensor> {
    let (b, h, l) = affinity_dims(affinity)?;
    if head >= h {
        return Err(Error::Contract(format!(
            "head {head} out of range for {h} heads"
        )));
    }
    let mut acc = vec![0.0; l];
    let data = affinity.data();
    for s in 0..b {
        let base = (s * h + head) * l * l;
        for row in data[base..base + l * l].chunks_exact(l) {
            acc.iter_mut().zip(row).for_each(|(a, &p)| *a += p);
        }
    }
    let total: f64 = acc.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::non_finite(format!("attention mass of head {head}")));
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Tensor::new(&[l], acc)
}

/// `KL(p || q)` with both arguments floored at [`KL_FLOOR`] inside the log.
/// Zero-probability entries of `p` contribute nothing; the result is clamped
/// at 0 so round-off never yields a negative divergence.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(KL_FLOOR).ln() - qi.max(KL_FLOOR).ln()))
        .sum();
    kl.max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadKLRecord {
    pub layer: usize,
    pub head_i: usize,
    pub head_j: usize,
    pub kl: f64,
    /// Mean `kl` over every ordered pair of this layer.
    pub layer_mean: f64,
}

/// Divergence for every ordered head pair `(i, j)`, `i != j`, in row-major
/// pair order.
pub fn head_kl(layer: usize, affinity: &Tensor) -> Result<Vec<HeadKLRecord>> {
    let (_, h, _) = affinity_dims(affinity)?;
    if h < 2 {
        return Err(Error::Contract(format!(
            "head divergence needs at least 2 heads, got {h}"
        )));
    }
    let dists = (0..h)
        .map(|i| head_distribution(affinity, i))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(h * (h - 1));
    for i in 0..h {
        for j in (0..h).filter(|&j| j != i) {
            out.push(HeadKLRecord {
                layer,
                head_i: i,
                head_j: j,
                kl: kl_divergence(dists[i].data(), dists[j].data()),
                layer_mean: 0.0,
            });
        }
    }
    let mean = out.iter().map(|r| r.kl).sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|r| r.layer_mean = mean);
    Ok(out)
}

/// Records for every layer, ordered by (layer, i, j).
pub fn head_kl_all(affinities: &[Tensor]) -> Result<Vec<HeadKLRecord>> {
    let mut out = Vec::new();
    for (layer, a) in affinities.iter().enumerate() {
        out.extend(head_kl(layer, a)?);
    }
    Ok(out)
}

/// `(layer, mean_kl)` once per layer, in layer order.
pub fn layer_means(records: &[HeadKLRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for r in records {
        if out.last().map(|&(l, _)| l) != Some(r.layer) {
            out.push((r.layer, r.layer_mean));
        }
    }
    out
}

pub fn head_kl_csv(records: &[HeadKLRecord]) -> String {
    let mut s = String::from("layer,head_i,head_j,kl\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.layer, r.head_i, r.head_j, r.kl);
    }
    s
}

pub fn layer_kl_csv(records: &[HeadKLRecord]) -> String {
    let mut s = String::from("layer,mean_kl\n");
    for (l, m) in layer_means(records) {
        let _ = writeln!(s, "{l},{m}");
    }
    s
}

/// Scatter of per-pair divergence (small markers) and per-layer means
/// (large markers) against layer index.
pub fn kl_summary_plot(records: &[HeadKLRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Contract("no divergence records to plot".into()));
    }
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let max_layer = records.iter().map(|r| r.layer).max().unwrap_or(0);
    let max_kl = records.iter().map(|r| r.kl).fold(0.0, f64::max);
    let y_top = if max_kl > 0.0 { max_kl * 1.1 } else { 1.0 };
    let x_of = |l: usize| M + (l as f64 + 0.5) / (max_layer as f64 + 1.0) * (W - 2.0 * M);
    let y_of = |kl: f64| H - M - kl / y_top * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M
    );
    for l in 0..=max_layer {
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{y}" font-size="11" text-anchor="middle">{l}</text>"#,
            x = x_of(l),
            y = H - M + 16.0
        );
    }
    for k in 0..=4 {
        let v = y_top * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y:.2}" font-size="11" text-anchor="end">{v:.3}</text>"#,
            x = M - 6.0,
            y = y_of(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle">layer</text>"#,
        x = W / 2.0,
        y = H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{y}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {y})">KL</text>"#,
        y = H / 2.0
    );
    for r in records {
        let _ = writeln!(
            s,
            r##"<circle class="pair" cx="{:.2}" cy="{:.2}" r="2.5" fill="#4477aa" fill-opacity="0.6"/>"##,
            x_of(r.layer),
            y_of(r.kl)
        );
    }
    for (l, m) in layer_means(records) {
        let _ = writeln!(
            s,
            r##"<circle class="layer-mean" cx="{:.2}" cy="{:.2}" r="6" fill="#cc3311"/>"##,
            x_of(l),
            y_of(m)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Head-averaged attention of `query` (full token index, CLS included) in
/// sample `sample` of one layer's `[B, H, L, L]` affinities, restricted to
/// image-token keys and laid out on the `grid x grid` patch raster.
pub fn attention_map(
    affinity: &Tensor,
    query: usize,
    sample: usize,
    cls_offset: usize,
    grid: usize,
) -> Result<Tensor> {
    let (b, h, l) = affinity_dims(affinity)?;
    if l != cls_offset + grid * grid {
        return Err(Error::Contract(format!(
            "{l} tokens do not form a {grid}x{grid} grid with {cls_offset} leading tokens"
        )));
    }
    if query >= l {
        return Err(Error::Contract(format!(
            "query {query} out of range for {l} tokens"
        )));
    }
    if sample >= b {
        return Err(Error::Contract(format!(
            "sample {sample} out of range for batch {b}"
        )));
    }
    let mut map = vec![0.0; grid * grid];
    let data = affinity.data();
    for head in 0..h {
        let row = ((sample * h + head) * l + query) * l;
        map.iter_mut()
            .zip(&data[row + cls_offset..row + l])
            .for_each(|(m, &p)| *m += p / h as f64);
    }
    Tensor::new(&[grid, grid], map)
}

/// Plain-text portable graymap, scaled so the map's maximum is 255.
pub fn heatmap_pgm(map: &Tensor) -> Result<String> {
    let [rows, cols] = *map.shape() else {
        return Err(Error::shape("heatmap_pgm", map.shape(), &[0, 0]));
    };
    let max = map.data().iter().copied().fold(0.0, f64::max);
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = map
            .row(r)
            .iter()
            .map(|&v| {
                let g = if max > 0.0 {
                    (v.max(0.0) / max * 255.0).round()
                } else {
                    0.0
                };
                (g as u32).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn heatmap_csv(map: &Tensor) -> Result<String> {
    let [rows, _] = *map.shape() else {
        return Err(Error::shape("heatmap_csv", map.shape(), &[0, 0]));
    };
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = map.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Options for [`analyze_attention`].
#[derive(Clone, Debug)]
pub struct AttentionAnalysis {
    /// Number of leading samples of the dataset to average over.
    pub samples: usize,
    /// Layer for the heatmap; defaults to the last block.
    pub layer: Option<usize>,
    /// Query token for the heatmap (full index, CLS slot included).
    pub query: usize,
    /// Sample whose heatmap is drawn.
    pub heatmap_sample: usize,
}

impl Default for AttentionAnalysis {
    fn default() -> Self {
        AttentionAnalysis {
            samples: 64,
            layer: None,
            query: 0,
            heatmap_sample: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalysisArtifacts {
    pub records: Vec<HeadKLRecord>,
    pub heatmap: Tensor,
    pub files: Vec<PathBuf>,
}

/// Clean forward pass over the first `opts.samples` images of `ds`, then
/// writes divergence CSVs, the summary plot and one heatmap into `out`.
pub fn analyze_attention(
    cfg: &EncoderConfig,
    store: &ParamStore,
    ds: &Dataset,
    stats: &ChannelStats,
    opts: &AttentionAnalysis,
    out: &Path,
) -> Result<AnalysisArtifacts> {
    let n = opts.samples.min(ds.len());
    if n == 0 {
        return Err(Error::Data("no samples to analyze".into()));
    }
    let layer = opts.layer.unwrap_or(cfg.depth - 1);
    if layer >= cfg.depth {
        return Err(Error::Contract(format!(
            "layer {layer} out of range for depth {}",
            cfg.depth
        )));
    }
    let idx: Vec<usize> = (0..n).collect();
    let patches = batch_patches(ds, &idx, stats, &vec![false; n], cfg.patch_size)?;
    let affinities = clean_affinities(cfg, store, &patches)?;
    let records = head_kl_all(&affinities)?;
    let heatmap = attention_map(
        &affinities[layer],
        opts.query,
        opts.heatmap_sample,
        cfg.cls_offset(),
        cfg.grid(),
    )?;

    fs::create_dir_all(out)?;
    let stem = format!("attn_layer{layer}_query{}", opts.query);
    let files = [
        (HEAD_KL_CSV.to_string(), head_kl_csv(&records)),
        (LAYER_KL_CSV.to_string(), layer_kl_csv(&records)),
        (HEAD_KL_SVG.to_string(), kl_summary_plot(&records)?),
        (format!("{stem}.pgm"), heatmap_pgm(&heatmap)?),
        (format!("{stem}.csv"), heatmap_csv(&heatmap)?),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, text) in files {
        let p = out.join(name);
        fs::write(&p, text)?;
        paths.push(p);
    }
    Ok(AnalysisArtifacts {
        records,
        heatmap,
        files: paths,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub test_acc: f64,
    pub feature_layer: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Images per forward pass while extracting features.
    pub chunk: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.1,
            chunk: 32,
        }
    }
}

/// `[N, D]` features: image tokens of hidden state `layer` (0 is the
/// embedding, `depth` the last block), mean-pooled. No corruption.
pub fn pooled_features(
    cfg: &EncoderConfig,
    store: &ParamStore,
    ds: &Dataset,
    stats: &ChannelStats,
    layer: usize,
    chunk: usize,
) -> Result<Tensor> {
    if layer > cfg.depth {
        return Err(Error::Contract(format!(
            "feature layer {layer} exceeds depth {}",
            cfg.depth
        )));
    }
    let (d, l, off) = (cfg.embed_dim, cfg.num_tokens(), cfg.cls_offset());
    let img = l - off;
    let mut out = Vec::with_capacity(ds.len() * d);
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(chunk.max(1)) {
        let patches = batch_patches(ds, idx, stats, &vec![false; idx.len()], cfg.patch_size)?;
        let hidden = clean_hidden_states(cfg, store, &patches)?;
        let h = hidden[layer].data();
        for b in 0..idx.len() {
            let mut pooled = vec![0.0; d];
            for t in off..l {
                let row = &h[(b * l + t) * d..(b * l + t + 1) * d];
                pooled.iter_mut().zip(row).for_each(|(p, &v)| *p += v);
            }
            out.extend(pooled.into_iter().map(|p| p / img as f64));
        }
    }
    Tensor::new(&[ds.len(), d], out)
}

/// Standardizes columns with the training split's statistics.
fn standardize(train: &mut Tensor, test: &mut Tensor) {
    let (n, d) = (train.shape()[0], train.last_dim());
    for j in 0..d {
        let mean = (0..n).map(|i| train.data()[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (train.data()[i * d + j] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        for t in [&mut *train, &mut *test] {
            t.data_mut()
                .chunks_exact_mut(d)
                .for_each(|r| r[j] = (r[j] - mean) / std);
        }
    }
}

/// Multinomial logistic regression on fixed features: zero init, full-batch
/// gradient descent on mean cross-entropy. Returns `[D + 1, C]` with the
/// bias in the last row.
pub fn fit_softmax_regression(
    x: &Tensor,
    y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<Tensor> {
    let (n, d) = (x.shape()[0], x.last_dim());
    if y.len() != n || n == 0 {
        return Err(Error::Data(format!(
            "{} labels for {n} feature rows",
            y.len()
        )));
    }
    let xb = with_bias_column(x);
    let xt = xb.transpose()?;
    let mut w = Tensor::zeros(&[d + 1, classes]);
    for _ in 0..cfg.epochs {
        let mut g = xb.matmul(&w)?;
        for (row, &label) in g.data_mut().chunks_exact_mut(classes).zip(y) {
            crate::tensor::softmax_in_place(row);
            row[label] -= 1.0;
        }
        let grad = xt.matmul(&g)?;
        let step = cfg.lr / n as f64;
        w.data_mut()
            .iter_mut()
            .zip(grad.data())
            .for_each(|(p, g)| *p -= step * g);
    }
    Ok(w)
}

/// `[N, D + 1]` with a trailing column of ones.
fn with_bias_column(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let rows = x.len() / d.max(1);
    let mut out = Vec::with_capacity(rows * (d + 1));
    for r in x.data().chunks_exact(d.max(1)).take(rows) {
        out.extend_from_slice(r);
        out.push(1.0);
    }
    Tensor::new(&[rows, d + 1], out).expect("bias column shape")
}

/// Fraction of rows whose arg-max logit (lowest index on ties) is the label.
pub fn accuracy(w: &Tensor, x: &Tensor, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Ok(0.0);
    }
    let c = w.last_dim();
    let logits = with_bias_column(x).matmul(w)?;
    let hits = logits
        .data()
        .chunks_exact(c)
        .zip(y)
        .filter(|(row, &label)| (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b }) == label)
        .count();
    Ok(hits as f64 / y.len() as f64)
}

/// Train and test accuracy of a probe on precomputed features. Every class below `classes` must occur
/// in the training labels.
pub fn probe_features(
    mut train_x: Tensor,
    train_y: &[usize],
    mut test_x: Tensor,
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    for c in 0..classes {
        if !train_y.contains(&c) {
            return Err(Error::Data(format!("class {c} has no training samples")));
        }
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&l| l >= classes) {
        return Err(Error::Data(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    standardize(&mut train_x, &mut test_x);
    let w = fit_softmax_regression(&train_x, train_y, classes, cfg)?;
    Ok((
        accuracy(&w, &train_x, train_y)?,
        accuracy(&w, &test_x, test_y)?,
    ))
}

/// Frozen-encoder probe: pooled features of `layer` on both splits, then
/// softmax regression fitted on `train` and scored on both.
pub fn linear_probe(
    cfg: &EncoderConfig,
    store: &ParamStore,
    train: &Dataset,
    test: &Dataset,
    stats: &ChannelStats,
    feature_layer: usize,
    probe: &ProbeConfig,
) -> Result<ProbeResult> {
    let classes = train.num_classes().max(test.num_classes());
    let labels = |ds: &Dataset| ds.labels().iter().map(|&l| l as usize).collect::<Vec<_>>();
    let tx = pooled_features(cfg, store, train, stats, feature_layer, probe.chunk)?;
    let vx = pooled_features(cfg, store, test, stats, feature_layer, probe.chunk)?;
    let (train_acc, test_acc) =
        probe_features(tx, &labels(train), vx, &labels(test), classes, probe)?;
    Ok(ProbeResult {
        train_acc,
        test_acc,
        feature_layer,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn affinity_from_rows(h: usize, l: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[1, h, l, l], |i| f(i / (l * l), (i / l) % l, i % l))
    }

    #[test]
    fn distribution_examples() {
        let one = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(head_distribution(&one, 0).unwrap().data(), &[1.0]);

        let uni = affinity_from_rows(2, 5, |_, _, _| 0.2);
        for v in head_distribution(&uni, 1).unwrap().data() {
            assert!((v - 0.2).abs() < 1e-15);
        }

        // Head 1 of a 2-head, 4-token record, averaged by hand:
        // rows (1,0,0,0), (0,1,0,0), (.5,.5,0,0), (.25,.25,.25,.25).
        let rows = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.5, 0.5, 0.0, 0.0],
            [0.25, 0.25, 0.25, 0.25],
        ];
        let a = affinity_from_rows(2, 4, |h, q, k| if h == 1 { rows[q][k] } else { 0.25 });
        let d = head_distribution(&a, 1).unwrap();
        let want = [0.4375, 0.4375, 0.0625, 0.0625];
        for (x, w) in d.data().iter().zip(want) {
            assert!((x - w).abs() < 1e-15);
        }
        assert!(matches!(head_distribution(&a, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_examples() {
        let a = affinity_from_rows(3, 4, |_, q, k| if q == k { 0.7 } else { 0.1 });
        let recs = head_kl(0, &a).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().all(|r| r.kl == 0.0 && r.layer_mean == 0.0));

        let mut p = vec![0.0; 8];
        p[0] = 1.0;
        let q = vec![0.125; 8];
        assert!((kl_divergence(&p, &q) - 8f64.ln()).abs() < 1e-15);

        assert!(matches!(
            head_kl(0, &affinity_from_rows(1, 4, |_, _, _| 0.25)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn csv_and_plot_shapes() {
        let mut rng = Rng::new(3, 0);
        let a = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.uniform() + 0.01);
        let a = crate::tensor::softmax_rows(&a);
        let recs = head_kl_all(&[a.clone(), a]).unwrap();
        assert_eq!(head_kl_csv(&recs).lines().count(), 1 + 2 * 3 * 2);
        assert_eq!(layer_kl_csv(&recs).lines().count(), 3);

        let one = vec![HeadKLRecord {
            layer: 0,
            head_i: 0,
            head_j: 1,
            kl: 0.0,
            layer_mean: 0.0,
        }];
        let svg = kl_summary_plot(&one).unwrap();
        assert_eq!(svg.matches(r#"class="pair""#).count(), 1);
        assert_eq!(svg.matches(r#"class="layer-mean""#).count(), 1);
        // Zero divergence sits on the x axis.
        assert!(svg.contains(r#"cy="272.00""#), "{svg}");
        assert!(kl_summary_plot(&[]).is_err());
    }

    #[test]
    fn heatmap_examples() {
        let uni = affinity_from_rows(2, 4, |_, _, _| 0.25);
        let m = attention_map(&uni, 0, 0, 0, 2).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.25));
        assert_eq!(heatmap_pgm(&m).unwrap(), "P2\n2 2\n255\n255 255\n255 255\n");

        // One-hot on token 2 lands at grid cell (1, 0).
        let hot = affinity_from_rows(2, 5, |_, _, k| if k == 3 { 1.0 } else { 0.0 });
        let m = attention_map(&hot, 0, 0, 1, 2).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            attention_map(&hot, 5, 0, 1, 2),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            attention_map(&hot, 0, 1, 1, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn probe_on_toy_features() {
        let mut rng = Rng::new(9, 0);
        let mut make = |n: usize| {
            let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let x = Tensor::from_fn(&[n, 4], |i| {
                let (r, c) = (i / 4, i % 4);
                rng.normal() * 0.1 + if c == y[r] { 2.0 } else { 0.0 }
            });
            (x, y)
        };
        let (tx, ty) = make(60);
        let (vx, vy) = make(30);
        let acc =
            probe_features(tx.clone(), &ty, vx.clone(), &vy, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, (1.0, 1.0));

        let missing: Vec<usize> = ty.iter().map(|&l| l.min(1)).collect();
        assert!(matches!(
            probe_features(tx, &missing, vx, &vy, 3, &ProbeConfig::default()),
            Err(Error::Data(_))
        ));
    }
}
