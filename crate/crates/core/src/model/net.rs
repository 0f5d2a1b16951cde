//! Tree-convolution value network with hand-written backpropagation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::loss::{LossKind, LossReport, EPSILON};
use crate::encoding::{EncodedTree, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::seed;

const LN_EPS: f64 = 1e-5;
/// Bounds on the log prediction, keeping `exp` finite.
const LOG_PRED_MIN: f64 = -13.815_510_557_964_274; // ln(EPSILON)
const LOG_PRED_MAX: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub conv: Vec<usize>,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: FEATURE_DIM,
            conv: vec![64, 32, 16],
            hidden: 8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvOffsets {
    d_in: usize,
    d_out: usize,
    w_top: usize,
    w_left: usize,
    w_right: usize,
    bias: usize,
    gain: usize,
    shift: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    conv: Vec<ConvOffsets>,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    pooled: usize,
    hidden: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let mut conv = Vec::new();
        let mut d_in = arch.input_dim;
        for &d_out in &arch.conv {
            let w = d_in * d_out;
            let c = ConvOffsets {
                d_in,
                d_out,
                w_top: off,
                w_left: off + w,
                w_right: off + 2 * w,
                bias: off + 3 * w,
                gain: off + 3 * w + d_out,
                shift: off + 3 * w + 2 * d_out,
            };
            off += 3 * w + 3 * d_out;
            conv.push(c);
            d_in = d_out;
        }
        let pooled = d_in;
        let fc1_w = off;
        let fc1_b = fc1_w + arch.hidden * pooled;
        let fc2_w = fc1_b + arch.hidden;
        let fc2_b = fc2_w + arch.hidden;
        Layout {
            conv,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            pooled,
            hidden: arch.hidden,
            total: fc2_b + 1,
        }
    }
}

/// Log-reward normalization fitted on the first training batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub mu: f64,
    pub sigma: f64,
}

impl TargetNorm {
    fn fit(rewards: &[f64]) -> Self {
        let logs: Vec<f64> = rewards.iter().map(|r| r.max(EPSILON).ln()).collect();
        let n = logs.len().max(1) as f64;
        let mu = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / n;
        TargetNorm {
            mu,
            sigma: var.sqrt().max(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            clip_norm: 10.0,
        }
    }
}

/// The reward predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub arch: Architecture,
    pub loss: LossKind,
    pub train: TrainConfig,
    pub norm: Option<TargetNorm>,
    pub step: u64,
    pub seed: u64,
    pub(crate) params: Vec<f64>,
    pub(crate) adam_m: Vec<f64>,
    pub(crate) adam_v: Vec<f64>,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.total == other.total
    }
}

/// Intermediate values of one forward pass.
struct Cache {
    /// Input to each conv layer, then the last layer's output.
    acts: Vec<Vec<f64>>,
    /// Pre-activation after normalization, per layer.
    pre: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    out: f64,
    log_pred: f64,
    clamped: bool,
}

impl Cache {
    /// Every discrete choice made by the forward pass.
    fn signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for layer in &self.pre {
            sig.extend(layer.iter().map(|&v| u64::from(v > 0.0)));
        }
        sig.extend(self.argmax.iter().map(|&i| i as u64));
        sig.extend(self.a1.iter().map(|&v| u64::from(v > 0.0)));
        sig.push(u64::from(self.clamped));
        sig
    }
}

impl ValueModel {
    pub fn new(arch: Architecture, loss: LossKind, seed: u64) -> Self {
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = seed::rng(seed::derive(seed, b"model-init"));
        let mut normal = |scale: f64| -> f64 { scale * rng.sample::<f64, _>(StandardNormal) };
        for c in &layout.conv {
            let std = (2.0 / (3 * c.d_in) as f64).sqrt();
            for p in &mut params[c.w_top..c.bias] {
                *p = normal(std);
            }
            params[c.gain..c.gain + c.d_out].fill(1.0);
        }
        let std = (2.0 / layout.pooled as f64).sqrt();
        for p in &mut params[layout.fc1_w..layout.fc1_b] {
            *p = normal(std);
        }
        // The output layer starts at zero, so an untrained model scores every
        // plan the same.
        let n = params.len();
        ValueModel {
            arch,
            loss,
            train: TrainConfig::default(),
            norm: None,
            step: 0,
            seed,
            params,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            layout,
        }
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        loss: LossKind,
        train: TrainConfig,
        norm: Option<TargetNorm>,
        step: u64,
        seed: u64,
        params: Vec<f64>,
        adam_m: Vec<f64>,
        adam_v: Vec<f64>,
    ) -> Result<Self> {
        let layout = Layout::new(&arch);
        for v in [&params, &adam_m, &adam_v] {
            if v.len() != layout.total {
                return Err(Error::ShapeMismatch {
                    expected: layout.total,
                    actual: v.len(),
                });
            }
        }
        Ok(ValueModel {
            arch,
            loss,
            train,
            norm,
            step,
            seed,
            params,
            adam_m,
            adam_v,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn norm_or_default(&self) -> TargetNorm {
        self.norm.unwrap_or(TargetNorm { mu: 0.0, sigma: 1.0 })
    }

    fn check(&self, tree: &EncodedTree) -> Result<()> {
        if tree.feature_dim() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                expected: self.arch.input_dim,
                actual: tree.feature_dim(),
            });
        }
        if tree.is_empty() {
            return Err(Error::ShapeMismatch { expected: 1, actual: 0 });
        }
        Ok(())
    }

    /// Predicted reward, strictly positive.
    pub fn predict(&self, tree: &EncodedTree) -> Result<f64> {
        self.check(tree)?;
        Ok(self.forward(tree).log_pred.exp())
    }

    fn forward(&self, tree: &EncodedTree) -> Cache {
        let p = &self.params;
        let n = tree.len();
        let mut x: Vec<f64> = tree.features.iter().flatten().copied().collect();
        let mut acts = Vec::with_capacity(self.layout.conv.len() + 1);
        let mut pre = Vec::new();
        let mut xhats = Vec::new();
        let mut inv_stds = Vec::new();
        for c in &self.layout.conv {
            let (di, d) = (c.d_in, c.d_out);
            let mut z = vec![0.0; n * d];
            for i in 0..n {
                let zi = &mut z[i * d..(i + 1) * d];
                zi.copy_from_slice(&p[c.bias..c.bias + d]);
                matvec_add(&p[c.w_top..c.w_top + d * di], &x[i * di..(i + 1) * di], zi);
                if tree.left[i] >= 0 {
                    let l = tree.left[i] as usize;
                    matvec_add(&p[c.w_left..c.w_left + d * di], &x[l * di..(l + 1) * di], zi);
                }
                if tree.right[i] >= 0 {
                    let r = tree.right[i] as usize;
                    matvec_add(&p[c.w_right..c.w_right + d * di], &x[r * di..(r + 1) * di], zi);
                }
            }
            let mut xhat = vec![0.0; n * d];
            let mut inv_std = vec![0.0; n];
            let mut y = vec![0.0; n * d];
            for i in 0..n {
                let zi = &z[i * d..(i + 1) * d];
                let mean = zi.iter().sum::<f64>() / d as f64;
                let var = zi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[i] = is;
                for j in 0..d {
                    let xh = (zi[j] - mean) * is;
                    xhat[i * d + j] = xh;
                    y[i * d + j] = p[c.gain + j] * xh + p[c.shift + j];
                }
            }
            acts.push(x);
            x = y.iter().map(|&v| v.max(0.0)).collect();
            pre.push(y);
            xhats.push(xhat);
            inv_stds.push(inv_std);
        }
        let d = self.layout.pooled;
        let mut pooled = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![0; d];
        for i in 0..n {
            for j in 0..d {
                if x[i * d + j] > pooled[j] {
                    pooled[j] = x[i * d + j];
                    argmax[j] = i;
                }
            }
        }
        acts.push(x);

        let h = self.layout.hidden;
        let mut a1 = p[self.layout.fc1_b..self.layout.fc1_b + h].to_vec();
        matvec_add(&p[self.layout.fc1_w..self.layout.fc1_b], &pooled, &mut a1);
        let h1: Vec<f64> = a1.iter().map(|&v| v.max(0.0)).collect();
        let out = p[self.layout.fc2_b]
            + p[self.layout.fc2_w..self.layout.fc2_b]
                .iter()
                .zip(&h1)
                .map(|(w, v)| w * v)
                .sum::<f64>();
        let norm = self.norm_or_default();
        let raw = norm.mu + norm.sigma * out;
        let log_pred = raw.clamp(LOG_PRED_MIN, LOG_PRED_MAX);
        Cache {
            acts,
            pre,
            xhat: xhats,
            inv_std: inv_stds,
            argmax,
            pooled,
            a1,
            h1,
            out,
            log_pred,
            clamped: raw != log_pred,
        }
    }

    /// Accumulates `dloss/dlog_pred * dlog_pred/dtheta` into `grad`.
    fn backward(&self, tree: &EncodedTree, cache: &Cache, dlog: f64, grad: &mut [f64]) {
        if cache.clamped {
            return;
        }
        let p = &self.params;
        let lay = &self.layout;
        let dout = dlog * self.norm_or_default().sigma;
        grad[lay.fc2_b] += dout;
        let h = lay.hidden;
        let d = lay.pooled;
        let mut da1 = vec![0.0; h];
        for k in 0..h {
            grad[lay.fc2_w + k] += dout * cache.h1[k];
            if cache.a1[k] > 0.0 {
                da1[k] = dout * p[lay.fc2_w + k];
            }
        }
        let mut dpooled = vec![0.0; d];
        for k in 0..h {
            if da1[k] == 0.0 {
                continue;
            }
            grad[lay.fc1_b + k] += da1[k];
            let row = lay.fc1_w + k * d;
            for j in 0..d {
                grad[row + j] += da1[k] * cache.pooled[j];
                dpooled[j] += da1[k] * p[row + j];
            }
        }

        let n = tree.len();
        let mut dh = vec![0.0; n * d];
        for j in 0..d {
            dh[cache.argmax[j] * d + j] += dpooled[j];
        }

        for (li, c) in lay.conv.iter().enumerate().rev() {
            let (di, dd) = (c.d_in, c.d_out);
            let y = &cache.pre[li];
            let xhat = &cache.xhat[li];
            let x = &cache.acts[li];
            let mut dz = vec![0.0; n * dd];
            for i in 0..n {
                let mut dxh = vec![0.0; dd];
                let mut any = false;
                for j in 0..dd {
                    let g = if y[i * dd + j] > 0.0 { dh[i * dd + j] } else { 0.0 };
                    if g != 0.0 {
                        any = true;
                        grad[c.gain + j] += g * xhat[i * dd + j];
                        grad[c.shift + j] += g;
                        dxh[j] = g * p[c.gain + j];
                    }
                }
                if !any {
                    continue;
                }
                let sum: f64 = dxh.iter().sum();
                let dot: f64 = dxh.iter().zip(&xhat[i * dd..(i + 1) * dd]).map(|(a, b)| a * b).sum();
                let is = cache.inv_std[li][i];
                let m = dd as f64;
                for j in 0..dd {
                    dz[i * dd + j] = is / m * (m * dxh[j] - sum - xhat[i * dd + j] * dot);
                }
            }
            let mut dx = if li > 0 { vec![0.0; n * di] } else { Vec::new() };
            for i in 0..n {
                let dzi = &dz[i * dd..(i + 1) * dd];
                if dzi.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for j in 0..dd {
                    grad[c.bias + j] += dzi[j];
                }
                let mut blocks = vec![(c.w_top, i)];
                if tree.left[i] >= 0 {
                    blocks.push((c.w_left, tree.left[i] as usize));
                }
                if tree.right[i] >= 0 {
                    blocks.push((c.w_right, tree.right[i] as usize));
                }
                for (w, src) in blocks {
                    let xs = &x[src * di..(src + 1) * di];
                    for j in 0..dd {
                        let g = dzi[j];
                        if g == 0.0 {
                            continue;
                        }
                        let row = w + j * di;
                        for (gk, &xk) in grad[row..row + di].iter_mut().zip(xs) {
                            *gk += g * xk;
                        }
                        if li > 0 {
                            for (dk, &wk) in dx[src * di..(src + 1) * di].iter_mut().zip(&p[row..row + di]) {
                                *dk += g * wk;
                            }
                        }
                    }
                }
            }
            dh = dx;
        }
    }

    /// Loss of one sample and its derivative with respect to the log prediction.
    fn sample_loss(&self, log_pred: f64, reward: f64) -> (f64, f64) {
        let norm = self.norm_or_default();
        self.loss.eval(log_pred, reward.max(EPSILON).ln(), norm.mu, norm.sigma)
    }

    /// Mean loss and gradient over a set of samples.
    fn loss_and_grad(&self, batch: &[(&EncodedTree, f64)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for &(tree, reward) in batch {
            let cache = self.forward(tree);
            let (l, dl) = self.sample_loss(cache.log_pred, reward);
            total += l;
            self.backward(tree, &cache, dl * scale, &mut grad);
        }
        (total * scale, grad)
    }

    /// One pass over `batch` in seeded minibatches; returns the post-step report.
    ///
    /// On a non-finite gradient or parameter the model is restored to its
    /// state before the call.
    pub fn train(&mut self, batch: &[(EncodedTree, f64)]) -> Result<LossReport> {
        self.epoch(batch)?;
        self.report(batch)
    }

    /// `epochs` passes over `batch`, reporting once at the end.
    pub fn fit(&mut self, batch: &[(EncodedTree, f64)], epochs: usize) -> Result<LossReport> {
        for _ in 0..epochs {
            self.epoch(batch)?;
        }
        self.report(batch)
    }

    fn epoch(&mut self, batch: &[(EncodedTree, f64)]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyClass("training batch".into()));
        }
        for (tree, reward) in batch {
            self.check(tree)?;
            if !(*reward > 0.0) {
                return Err(Error::NonPositiveInput(*reward));
            }
        }
        if self.norm.is_none() {
            let rewards: Vec<f64> = batch.iter().map(|b| b.1).collect();
            self.norm = Some(TargetNorm::fit(&rewards));
        }
        let snapshot = (self.params.clone(), self.adam_m.clone(), self.adam_v.clone(), self.step);

        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_ints(
            self.seed,
            &[0x7472_6169_6e, self.step],
        )));
        for chunk in order.chunks(self.train.batch_size.max(1)) {
            let mb: Vec<(&EncodedTree, f64)> = chunk.iter().map(|&i| (&batch[i].0, batch[i].1)).collect();
            let (_, mut grad) = self.loss_and_grad(&mb);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                let step = self.step;
                self.restore(snapshot);
                return Err(Error::NonFiniteGradient { step });
            }
            if norm > self.train.clip_norm {
                let s = self.train.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            self.adam_step(&grad);
            if self.params.iter().any(|p| !p.is_finite()) {
                let step = self.step;
                self.restore(snapshot);
                return Err(Error::NonFiniteGradient { step });
            }
        }
        Ok(())
    }

    fn restore(&mut self, (params, m, v, step): (Vec<f64>, Vec<f64>, Vec<f64>, u64)) {
        self.params = params;
        self.adam_m = m;
        self.adam_v = v;
        self.step = step;
    }

    fn adam_step(&mut self, grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        let lr = self.train.learning_rate;
        for (((p, m), v), &g) in self
            .params
            .iter_mut()
            .zip(&mut self.adam_m)
            .zip(&mut self.adam_v)
            .zip(grad)
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
        }
    }

    pub fn report(&self, batch: &[(EncodedTree, f64)]) -> Result<LossReport> {
        let preds = batch.iter().map(|(t, _)| self.predict(t)).collect::<Result<Vec<_>>>()?;
        let reals: Vec<f64> = batch.iter().map(|b| b.1).collect();
        LossReport::from_pairs(&preds, &reals)
    }

    /// Compares analytic gradients with central differences on a random
    /// subset of parameters.
    pub fn gradient_check(
        &self,
        tree: &EncodedTree,
        reward: f64,
        n_params: usize,
        check_seed: u64,
    ) -> Result<GradCheck> {
        self.check(tree)?;
        let h = 1e-4;
        let base = self.forward(tree);
        let (_, dl) = self.sample_loss(base.log_pred, reward);
        let mut result = GradCheck::default();
        if self.loss == LossKind::QError && (base.log_pred - reward.max(EPSILON).ln()).abs() < 1e-9 {
            result.tie_excluded = true;
            return Ok(result);
        }
        let mut grad = vec![0.0; self.params.len()];
        self.backward(tree, &base, dl, &mut grad);
        let sig = base.signature();

        let mut rng = seed::rng(check_seed);
        let mut idx: Vec<usize> = (0..self.params.len()).collect();
        idx.shuffle(&mut rng);
        let mut probe = self.clone();
        for &i in idx.iter().take(n_params) {
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let plus = probe.forward(tree);
            probe.params[i] = orig - h;
            let minus = probe.forward(tree);
            probe.params[i] = orig;
            if plus.signature() != sig || minus.signature() != sig {
                result.kink_excluded += 1;
                continue;
            }
            let lp = probe.sample_loss(plus.log_pred, reward).0;
            let lm = probe.sample_loss(minus.log_pred, reward).0;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grad[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            result.max_rel_error = result.max_rel_error.max((analytic - numeric).abs() / denom);
            result.checked += 1;
        }
        Ok(result)
    }

    /// The pre-clamp network output; exposed for diagnostics.
    pub fn raw_output(&self, tree: &EncodedTree) -> Result<f64> {
        self.check(tree)?;
        Ok(self.forward(tree).out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU, pooling or clamp choice.
    pub kink_excluded: usize,
    /// The sample sits on the non-differentiable tie of the q-error.
    pub tie_excluded: bool,
}

fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let di = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(di)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::featurize;
    use crate::sim::plan::{AbstractPlan, Operator, PlanNode};

    fn tree() -> EncodedTree {
        featurize(&AbstractPlan::new(PlanNode {
            operator: Operator::HashJoin,
            est_cost: 120.0,
            est_size: 3000.0,
            children: vec![
                PlanNode::leaf(Operator::TableScan, 50.0, 1e5),
                PlanNode {
                    operator: Operator::Filter,
                    est_cost: 10.0,
                    est_size: 40.0,
                    children: vec![PlanNode::leaf(Operator::IndexScan, 3.0, 400.0)],
                },
            ],
        }))
    }

    #[test]
    fn fresh_model_predicts_positive_and_deterministically() {
        let m = ValueModel::new(Architecture::default(), LossKind::Mse, 3);
        let a = m.predict(&tree()).unwrap();
        assert!(a.is_finite() && a > 0.0);
        assert_eq!(a, m.predict(&tree()).unwrap());
        let other = featurize(&AbstractPlan::new(PlanNode::leaf(Operator::TableScan, 1.0, 2.0)));
        assert_eq!(a, m.predict(&other).unwrap());
    }

    #[test]
    fn overfits_single_sample() {
        let mut m = ValueModel::new(Architecture::default(), LossKind::Mse, 5);
        let batch = vec![(tree(), 5.0)];
        for _ in 0..300 {
            m.train(&batch).unwrap();
        }
        let p = m.predict(&tree()).unwrap();
        assert!((p / 5.0 - 1.0).abs() < 0.01, "{p}");
    }

    #[test]
    fn gradients_match_for_each_loss() {
        for loss in [LossKind::Mse, LossKind::QError, LossKind::MseRaw] {
            let mut m = ValueModel::new(Architecture::default(), loss, 8);
            m.train(&[(tree(), 3.0), (tree(), 9.0)]).unwrap();
            m.norm = Some(TargetNorm { mu: 1.0, sigma: 1.5 });
            for p in &mut m.params[m.layout.fc2_w..m.layout.fc2_b] {
                *p += 0.3;
            }
            let g = m.gradient_check(&tree(), 40.0, 400, 2).unwrap();
            assert!(g.checked > 100, "{g:?}");
            assert!(g.max_rel_error < 1e-4, "{loss}: {g:?}");
        }
    }
}
