//! Attributions for the target model and for the cascaded target + attack
//! map, SSIM between them, and PCA projections of activations.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attack::AttackModel;
use crate::capture::{ActivationMatrix, Flattening, LayerRegistry, RegisteredLayer};
use crate::features::{assemble_batch, head_input};
use crate::io;
use crate::nn::Tensor;
use crate::selection::SelectionMask;
use crate::zoo::ModelCheckpoint;
use crate::{Error, Result};

/// A differentiable scalar function of an image batch `[n, c, h, w]`.
pub trait ScalarMap: Sync {
    fn values(&self, x: &Tensor) -> Result<Vec<f64>>;
    /// Values and their gradients with respect to `x`.
    fn gradients(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// One logit of the target model.
pub struct TargetLogit<'a> {
    pub ckpt: &'a ModelCheckpoint,
    pub class: usize,
}

impl ScalarMap for TargetLogit<'_> {
    fn values(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.ckpt.check_input(x)?;
        let out = self.ckpt.logits(x);
        Ok((0..out.batch()).map(|i| out.row(i)[self.class]).collect())
    }

    fn gradients(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.ckpt.check_input(x)?;
        let net = &self.ckpt.network;
        let trace = net.forward(x, false, None, &[]);
        let n = x.batch();
        let k = self.ckpt.classes;
        let mut g = vec![0.0; n * k];
        for i in 0..n {
            g[i * k + self.class] = 1.0;
        }
        let values = (0..n).map(|i| trace.output.row(i)[self.class]).collect();
        let dx = net.backward(&trace, Tensor::new(vec![n, k], g), &[], None, true);
        Ok((values, dx))
    }
}

/// Target model, feature extraction and attack model composed into one
/// map from an image to member probability.
#[derive(Clone, Debug)]
pub struct CascadedModel {
    pub target: ModelCheckpoint,
    pub layer: RegisteredLayer,
    pub flattening: Flattening,
    pub mask: Vec<usize>,
    pub attack: AttackModel,
}

pub fn cascade(
    target: &ModelCheckpoint,
    registry: &LayerRegistry,
    mask: &SelectionMask,
    attack: &AttackModel,
) -> Result<CascadedModel> {
    let layer = registry.get(&mask.layer)?.clone();
    let s = &attack.shapes;
    if mask.indices.len() != s.activation {
        return Err(Error::InvalidConfiguration(format!(
            "mask {} selects {} neurons but the attack model reads {}",
            mask.name(),
            mask.indices.len(),
            s.activation
        )));
    }
    if let Some(&j) = mask.indices.iter().find(|&&j| j >= layer.neurons) {
        return Err(Error::InvalidConfiguration(format!(
            "mask index {j} outside layer {} with {} neurons",
            layer.id, layer.neurons
        )));
    }
    let head_in = head_input(target)?;
    let h = target.network.shape_after(&[1, target.input[0], target.input[1], target.input[2]], head_in);
    if s.classes != target.classes || s.gradient != [target.classes, h[1..].iter().product()] {
        return Err(Error::InvalidConfiguration(format!(
            "attack model expects {} classes and a {:?} gradient block",
            s.classes, s.gradient
        )));
    }
    Ok(CascadedModel {
        target: target.clone(),
        layer,
        flattening: registry.flattening,
        mask: mask.indices.clone(),
        attack: attack.clone(),
    })
}

fn softmax_vjp(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for k in 0..p.len() {
        out[k] += p[k] * (g[k] - dot);
    }
}

impl CascadedModel {
    /// Member probability of each image, given its true label.
    pub fn forward(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        self.target.check_input(x)?;
        let head_in = head_input(&self.target)?;
        let (logits, taps) = self.target.network.predict_with_taps(x, &[self.layer.index, head_in]);
        let batch = assemble_batch(&self.layer, self.flattening, &self.mask, &logits, &taps[0], &taps[1], labels)?;
        self.attack.predict_proba(&batch)
    }

    /// Member probability and its gradient with respect to the pixels.
    pub fn input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        self.target.check_input(x)?;
        let net = &self.target.network;
        let head_in = head_input(&self.target)?;
        let trace = net.forward(x, false, None, &[self.layer.index, head_in]);
        let (acts, h) = (&trace.taps[0], &trace.taps[1]);
        let batch = assemble_batch(&self.layer, self.flattening, &self.mask, &trace.output, acts, h, labels)?;
        let (p1, g) = self.attack.member_probability_gradients(&batch)?;
        let n = x.batch();
        let k = self.target.classes;
        let f = h.row_len();
        let mut dlogits = vec![0.0; n * k];
        let mut dh = vec![0.0; n * f];
        let mut dacts = vec![0.0; acts.len()];
        let plane = match (self.flattening, self.layer.shape.len()) {
            (Flattening::ChannelMean, 3) => Some(self.layer.shape[1] * self.layer.shape[2]),
            _ => None,
        };
        for i in 0..n {
            let p = batch.posterior.row(i);
            let r: Vec<f64> = (0..k).map(|c| p[c] - f64::from(u8::from(c == labels[i]))).collect();
            let dl = &mut dlogits[i * k..(i + 1) * k];
            softmax_vjp(p, g[1].row(i), dl);
            // loss = logsumexp(z) - z_y
            let dloss = g[3].row(i)[0];
            for c in 0..k {
                dl[c] += dloss * r[c];
            }
            // G = r (x) h
            let dg = g[4].row(i);
            let hr = h.row(i);
            let mut dr = vec![0.0; k];
            let dhi = &mut dh[i * f..(i + 1) * f];
            for c in 0..k {
                let row = &dg[c * f..(c + 1) * f];
                dr[c] = row.iter().zip(hr).map(|(a, b)| a * b).sum();
                for (d, v) in dhi.iter_mut().zip(row) {
                    *d += r[c] * v;
                }
            }
            softmax_vjp(p, &dr, dl);
            let da = g[0].row(i);
            let w = acts.row_len();
            let dst = &mut dacts[i * w..(i + 1) * w];
            for (m, &j) in self.mask.iter().enumerate() {
                match plane {
                    Some(pl) => dst[j * pl..(j + 1) * pl].iter_mut().for_each(|v| *v += da[m] / pl as f64),
                    None => dst[j] += da[m],
                }
            }
        }
        let dacts = Tensor::new(acts.shape().to_vec(), dacts);
        let dh = Tensor::new(h.shape().to_vec(), dh);
        let dx = net.backward(
            &trace,
            Tensor::new(vec![n, k], dlogits),
            &[(self.layer.index, &dacts), (head_in, &dh)],
            None,
            true,
        );
        Ok((p1, dx))
    }
}

/// The cascade with every image labelled `label`.
pub struct MembershipMap<'a> {
    pub cascade: &'a CascadedModel,
    pub label: usize,
}

impl ScalarMap for MembershipMap<'_> {
    fn values(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.cascade.forward(x, &vec![self.label; x.batch()])
    }

    fn gradients(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.cascade.input_gradient(x, &vec![self.label; x.batch()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    TargetClass,
    AttackMembership,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Interpolation steps between baseline and input.
    pub steps: usize,
    /// Spread the remaining completeness gap over features in proportion
    /// to their attribution magnitude.
    pub correct: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self { steps: 64, correct: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// `[c, h, w]`.
    pub shape: [usize; 3],
    pub values: Vec<f64>,
    /// Map value at the baseline.
    pub base: f64,
    /// Map value at the input.
    pub output: f64,
    /// `f(x) - base - sum(values)` before correction.
    pub raw_gap: f64,
    pub subject: Subject,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Channel-summed `h x w` map.
    pub fn plane(&self) -> Vec<f64> {
        let [c, h, w] = self.shape;
        let mut out = vec![0.0; h * w];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&self.values[ch * h * w..(ch + 1) * h * w]) {
                *o += v;
            }
        }
        out
    }
}

const IG_CHUNK: usize = 64;

/// Path-integrated gradients from `baseline` to `x` (both `[1, c, h, w]`)
/// with midpoint sampling.
pub fn attribute(
    map: &dyn ScalarMap,
    x: &Tensor,
    baseline: &Tensor,
    config: &AttributionConfig,
    subject: Subject,
) -> Result<AttributionMap> {
    if x.shape() != baseline.shape() || x.shape().len() != 4 || x.batch() != 1 {
        return Err(Error::InvalidInput(format!(
            "input {:?} and baseline {:?} must both be one image",
            x.shape(),
            baseline.shape()
        )));
    }
    if config.steps == 0 {
        return Err(Error::InvalidArgument("attribution needs at least one step".into()));
    }
    let d = x.row_len();
    let mut pair_shape = x.shape().to_vec();
    pair_shape[0] = 2;
    let ends = map.values(&Tensor::new(pair_shape, [baseline.data(), x.data()].concat()))?;
    let (base, output) = (ends[0], ends[1]);
    if !base.is_finite() || !output.is_finite() {
        return Err(Error::NumericFault {
            index: 0,
            what: format!("map values {base} and {output}"),
        });
    }
    let diff: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let mut avg = vec![0.0; d];
    let alphas: Vec<f64> = (0..config.steps).map(|s| (s as f64 + 0.5) / config.steps as f64).collect();
    for chunk in alphas.chunks(IG_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * d);
        for &a in chunk {
            data.extend(baseline.data().iter().zip(&diff).map(|(b, dv)| b + a * dv));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = chunk.len();
        let (_, g) = map.gradients(&Tensor::new(shape, data))?;
        if !g.all_finite() {
            return Err(Error::NumericFault {
                index: 0,
                what: "non-finite gradient".into(),
            });
        }
        for i in 0..chunk.len() {
            for (a, v) in avg.iter_mut().zip(g.row(i)) {
                *a += v;
            }
        }
    }
    let mut values: Vec<f64> = avg
        .iter()
        .zip(&diff)
        .map(|(g, dv)| g / config.steps as f64 * dv)
        .collect();
    let raw_gap = output - base - values.iter().sum::<f64>();
    if config.correct && raw_gap != 0.0 {
        let mass: f64 = values.iter().map(|v| v.abs()).sum();
        if mass > 0.0 {
            values.iter_mut().for_each(|v| *v += raw_gap * v.abs() / mass);
        } else {
            let moved: Vec<usize> = (0..d).filter(|&j| diff[j] != 0.0).collect();
            for &j in &moved {
                values[j] += raw_gap / moved.len() as f64;
            }
        }
    }
    let s = x.shape();
    Ok(AttributionMap {
        shape: [s[1], s[2], s[3]],
        values,
        base,
        output,
        raw_gap,
        subject,
    })
}

/// Attributions of the predicted-class logit and of the member probability
/// for one image.
pub fn explain_pair(
    target: &ModelCheckpoint,
    cascaded: &CascadedModel,
    x: &Tensor,
    label: usize,
    baseline: &Tensor,
    config: &AttributionConfig,
) -> Result<(AttributionMap, AttributionMap)> {
    let logits = target.logits(x);
    let class = crate::nn::loss::argmax(logits.row(0));
    let t = attribute(&TargetLogit { ckpt: target, class }, x, baseline, config, Subject::TargetClass)?;
    let a = attribute(
        &MembershipMap { cascade: cascaded, label },
        x,
        baseline,
        config,
        Subject::AttackMembership,
    )?;
    Ok((t, a))
}

pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over all `8 x 8` windows at unit stride.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, dynamic_range: f64) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::InvalidInput(format!(
            "maps of {} and {} values for a {h}x{w} grid",
            a.len(),
            b.len()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("{h}x{w} is smaller than the SSIM window")));
    }
    if !(dynamic_range > 0.0) {
        return Err(Error::InvalidArgument("dynamic range must be positive".into()));
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    sa += a[y * w + x];
                    sb += b[y * w + x];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (da, db) = (a[y * w + x] - ma, b[y * w + x] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Min-max normalizes both maps with one shared range.
pub fn joint_normalize(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scale = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
            .collect()
    };
    (scale(a), scale(b))
}

/// SSIM between two attribution maps after channel summing and joint
/// min-max normalization.
pub fn attribution_ssim(a: &AttributionMap, b: &AttributionMap) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::InvalidInput(format!("maps {:?} and {:?} differ", a.shape, b.shape)));
    }
    let (na, nb) = joint_normalize(&a.plane(), &b.plane());
    ssim(&na, &nb, a.shape[1], a.shape[2], 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimRow {
    pub sample: usize,
    pub membership: u8,
    pub ssim: f64,
}

pub fn write_ssim_csv(rows: &[SsimRow], path: &Path) -> Result<()> {
    io::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_record(["sample", "membership", "ssim"])?;
    for r in rows {
        w.write_record([r.sample.to_string(), r.membership.to_string(), io::fmt_f64(r.ssim)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Mean SSIM per membership class `(non-members, members)`.
pub fn mean_ssim(rows: &[SsimRow]) -> (Option<f64>, Option<f64>) {
    let mean = |m: u8| {
        let v: Vec<f64> = rows.iter().filter(|r| r.membership == m).map(|r| r.ssim).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(0), mean(1))
}

/// Projects rows onto the top two principal components of the (optionally
/// masked) activations.
pub fn pca_project(acts: &ActivationMatrix, mask: Option<&SelectionMask>) -> Result<Vec<[f64; 2]>> {
    if acts.rows < 2 {
        return Err(Error::InvalidInput(format!("PCA needs at least 2 rows, got {}", acts.rows)));
    }
    let cols: Vec<usize> = match mask {
        Some(m) => m.indices.clone(),
        None => (0..acts.cols).collect(),
    };
    if let Some(&j) = cols.iter().find(|&&j| j >= acts.cols) {
        return Err(Error::InvalidInput(format!("mask index {j} outside {} columns", acts.cols)));
    }
    let n = acts.rows;
    let d = cols.len();
    let mut x = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        let row = acts.row(i);
        for (k, &j) in cols.iter().enumerate() {
            x[(i, k)] = row[j] as f64;
        }
    }
    for k in 0..d {
        let m = x.column(k).mean();
        x.column_mut(k).add_scalar_mut(-m);
    }
    // scores = U * S; from the smaller of the two Gram matrices
    let scores = if d <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        let top = top_two(&eig.eigenvalues);
        top.map(|c| {
            let mut v = eig.eigenvectors.column(c).into_owned();
            orient(&mut v);
            &x * v
        })
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let top = top_two(&eig.eigenvalues);
        top.map(|c| {
            let u = eig.eigenvectors.column(c).into_owned();
            let mut v = x.transpose() * &u;
            let norm = v.norm();
            if norm > 0.0 {
                v /= norm;
            }
            orient(&mut v);
            &x * v
        })
    };
    Ok((0..n).map(|i| [scores[0][i], scores[1][i]]).collect())
}

fn top_two(values: &nalgebra::DVector<f64>) -> [usize; 2] {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    [idx[0], *idx.get(1).unwrap_or(&idx[0])]
}

/// Fixes the eigenvector sign: the largest-magnitude loading is positive.
fn orient(v: &mut nalgebra::DVector<f64>) {
    let big = v.iamax();
    if v[big] < 0.0 {
        *v *= -1.0;
    }
}

/// Renders the grayscale input with target and attack attributions side by
/// side: positive in red, negative in blue, opacity by magnitude.
pub fn render_overlay(x: &Tensor, maps: &[&AttributionMap], scale: u32) -> RgbImage {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let gray: Vec<f64> = {
        let mut g = vec![0.0; h * w];
        for ch in 0..c {
            for (o, v) in g.iter_mut().zip(&x.data()[ch * h * w..(ch + 1) * h * w]) {
                *o += v / c as f64;
            }
        }
        let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        g.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
    };
    let gap = 2;
    let width = (w as u32 * scale + gap) * maps.len() as u32 - gap;
    let mut img = RgbImage::from_pixel(width, h as u32 * scale, Rgb([255, 255, 255]));
    for (m, map) in maps.iter().enumerate() {
        let plane = map.plane();
        let peak = plane.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let x0 = m as u32 * (w as u32 * scale + gap);
        for y in 0..h {
            for xx in 0..w {
                let g = gray[y * w + xx] * 255.0;
                let v = if peak > 0.0 { plane[y * w + xx] / peak } else { 0.0 };
                let alpha = v.abs().min(1.0);
                let tint = if v >= 0.0 { [230.0, 40.0, 20.0] } else { [20.0, 80.0, 230.0] };
                let px = Rgb(tint.map(|t: f64| ((1.0 - alpha) * g + alpha * t).round().clamp(0.0, 255.0) as u8));
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(x0 + xx as u32 * scale + dx, y as u32 * scale + dy, px);
                    }
                }
            }
        }
    }
    img
}

pub fn save_overlay(img: &RgbImage, path: &Path) -> Result<()> {
    io::ensure_parent(path)?;
    img.save(path).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}
