//! A two-layer ReLU feature extractor trained end to end on synthetic data.
//!
//! The network is `ψ(x) = W φ(x) + b` with features
//! `φ(x) = relu(W2 relu(W1 x + b1) + b2)`. Collapse metrics are computed on the
//! realized features by the same code that measures the unconstrained model.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::metrics::{nc_metrics_lenient, NcMetrics};
use crate::model::{Hyperparams, ModelState};
use crate::numerics::softmax;
use crate::rng::{gaussian_matrix, stream_rng};

/// Generator settings of a [`SynthDataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
    pub random_labels: bool,
}

/// Balanced Gaussian-mixture data. Column `j` of `x` was drawn from mixture
/// component `j / per_class`; `labels[j]` (0-based) is that component unless
/// labels were randomized.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub spec: SynthSpec,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// FNV-1a hash of the inputs' bit patterns and the labels.
    pub fn digest(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for byte in v.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        self.x.iter().for_each(|v| eat(v.to_bits()));
        self.labels.iter().for_each(|&l| eat(l as u64));
        hash
    }
}

pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    input_dim: usize,
    separation: f64,
    noise: f64,
    seed: u64,
    random_labels: bool,
) -> Result<SynthDataset> {
    if classes < 1 || per_class < 1 || input_dim < 1 {
        return Err(domain("classes, per_class and input_dim must be >= 1"));
    }
    if !(separation.is_finite() && noise.is_finite() && noise >= 0.0) {
        return Err(domain("separation must be finite and noise finite and >= 0"));
    }
    let mut means = gaussian_matrix(&mut stream_rng(seed, 0), input_dim, classes);
    for mut col in means.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        col *= separation;
    }
    let total = classes * per_class;
    let mut x = gaussian_matrix(&mut stream_rng(seed, 1), input_dim, total) * noise;
    for j in 0..total {
        let mut col = x.column_mut(j);
        col += means.column(j / per_class);
    }
    let mut labels: Vec<usize> = (0..total).map(|j| j / per_class).collect();
    if random_labels {
        // Permuting the balanced label vector keeps every class at `per_class`.
        labels.shuffle(&mut stream_rng(seed, 2));
    }
    let spec = SynthSpec {
        classes,
        per_class,
        input_dim,
        separation,
        noise,
        seed,
        random_labels,
    };
    Ok(SynthDataset { x, labels, spec })
}

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        let Architecture {
            input_dim: di,
            hidden: h,
            feature_dim: d,
            classes: k,
        } = *self;
        h * di + h + d * h + d + k * d + k
    }
}

/// Network weights; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl BackboneParams {
    /// He-scaled Gaussian weights, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let a = *arch;
        let w1 = gaussian_matrix(&mut stream_rng(seed, 10), a.hidden, a.input_dim) * (2.0 / a.input_dim as f64).sqrt();
        let w2 = gaussian_matrix(&mut stream_rng(seed, 11), a.feature_dim, a.hidden) * (2.0 / a.hidden as f64).sqrt();
        let w =
            gaussian_matrix(&mut stream_rng(seed, 12), a.classes, a.feature_dim) * (1.0 / a.feature_dim as f64).sqrt();
        Self {
            w1,
            b1: DVector::zeros(a.hidden),
            w2,
            b2: DVector::zeros(a.feature_dim),
            w,
            b: DVector::zeros(a.classes),
        }
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let a = *arch;
        Self {
            w1: DMatrix::zeros(a.hidden, a.input_dim),
            b1: DVector::zeros(a.hidden),
            w2: DMatrix::zeros(a.feature_dim, a.hidden),
            b2: DVector::zeros(a.feature_dim),
            w: DMatrix::zeros(a.classes, a.feature_dim),
            b: DVector::zeros(a.classes),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.w1.ncols(),
            hidden: self.w1.nrows(),
            feature_dim: self.w2.nrows(),
            classes: self.w.nrows(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let a = self.architecture();
        let ok = self.b1.len() == a.hidden
            && self.w2.ncols() == a.hidden
            && self.b2.len() == a.feature_dim
            && self.w.ncols() == a.feature_dim
            && self.b.len() == a.classes;
        if !ok {
            return Err(shape("inconsistent backbone parameter shapes"));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(domain("backbone parameters have non-finite entries"));
        }
        Ok(())
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let parts: [&[f64]; 6] = [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w.as_slice(),
            self.b.as_slice(),
        ];
        DVector::from_iterator(
            parts.iter().map(|p| p.len()).sum(),
            parts.iter().flat_map(|p| p.iter().copied()),
        )
    }

    pub fn from_flat(x: &DVector<f64>, arch: &Architecture) -> Self {
        let mut out = Self::zeros(arch);
        let mut offset = 0;
        for dst in [
            out.w1.as_mut_slice(),
            out.b1.as_mut_slice(),
            out.w2.as_mut_slice(),
            out.b2.as_mut_slice(),
            out.w.as_mut_slice(),
            out.b.as_mut_slice(),
        ] {
            dst.copy_from_slice(&x.as_slice()[offset..offset + dst.len()]);
            offset += dst.len();
        }
        out
    }

    fn squared_norm(&self) -> f64 {
        self.to_flat().norm_squared()
    }
}

/// Intermediate activations of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub pre_hidden: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
    pub pre_features: DMatrix<f64>,
    /// d×N realized features.
    pub features: DMatrix<f64>,
    /// K×N.
    pub logits: DMatrix<f64>,
}

fn affine(w: &DMatrix<f64>, x: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut out = w * x;
    for mut col in out.column_iter_mut() {
        col += b;
    }
    out
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

/// Multiplies `grad` by the ReLU derivative at `pre` (zero at zero).
fn relu_mask(grad: &DMatrix<f64>, pre: &DMatrix<f64>) -> DMatrix<f64> {
    grad.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

pub fn forward(params: &BackboneParams, x: &DMatrix<f64>) -> Result<Forward> {
    params.check()?;
    if x.nrows() != params.w1.ncols() {
        return Err(shape(format!(
            "inputs have dimension {}, network expects {}",
            x.nrows(),
            params.w1.ncols()
        )));
    }
    let pre_hidden = affine(&params.w1, x, &params.b1);
    let hidden = relu(&pre_hidden);
    let pre_features = affine(&params.w2, &hidden, &params.b2);
    let features = relu(&pre_features);
    let logits = affine(&params.w, &features, &params.b);
    Ok(Forward {
        pre_hidden,
        hidden,
        pre_features,
        features,
        logits,
    })
}

/// Where weight decay is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayMode {
    /// `λ/2` times the squared norm of every weight and bias.
    AllParams,
    /// `λ/2 (‖W‖² + ‖H‖²)` on the classifier and the realized features `H = φ(X)`;
    /// the feature penalty reaches the extractor weights through backprop.
    PeeledWH,
}

impl std::str::FromStr for DecayMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all-params" | "all" => Ok(Self::AllParams),
            "peeled-wh" | "peeled" => Ok(Self::PeeledWH),
            other => Err(format!(
                "unknown decay mode '{other}' (expected all-params or peeled-wh)"
            )),
        }
    }
}

/// Loss value split into its data and regularization parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub data: f64,
    pub regularizer: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.data + self.regularizer
    }
}

fn check_batch(params: &BackboneParams, x: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if x.ncols() != labels.len() {
        return Err(shape(format!("{} inputs but {} labels", x.ncols(), labels.len())));
    }
    if labels.is_empty() {
        return Err(domain("empty batch"));
    }
    let k = params.w.nrows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(domain(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

fn loss_from_forward(
    params: &BackboneParams,
    fwd: &Forward,
    labels: &[usize],
    lambda: f64,
    mode: DecayMode,
) -> LossParts {
    let mut data = 0.0;
    for (j, col) in fwd.logits.column_iter().enumerate() {
        let z: Vec<f64> = col.iter().copied().collect();
        data += crate::numerics::logsumexp(&z) - z[labels[j]];
    }
    data /= labels.len() as f64;
    let regularizer = match mode {
        DecayMode::AllParams => 0.5 * lambda * params.squared_norm(),
        DecayMode::PeeledWH => 0.5 * lambda * (params.w.norm_squared() + fwd.features.norm_squared()),
    };
    LossParts { data, regularizer }
}

/// Mean cross-entropy plus the decay term of `mode`.
pub fn loss(
    params: &BackboneParams,
    x: &DMatrix<f64>,
    labels: &[usize],
    lambda: f64,
    mode: DecayMode,
) -> Result<LossParts> {
    check_batch(params, x, labels)?;
    let fwd = forward(params, x)?;
    Ok(loss_from_forward(params, &fwd, labels, lambda, mode))
}

/// Exact gradient of [`loss`] by backpropagation.
pub fn backward(
    params: &BackboneParams,
    x: &DMatrix<f64>,
    labels: &[usize],
    lambda: f64,
    mode: DecayMode,
) -> Result<(LossParts, BackboneParams)> {
    check_batch(params, x, labels)?;
    let fwd = forward(params, x)?;
    let parts = loss_from_forward(params, &fwd, labels, lambda, mode);
    let inv_n = 1.0 / labels.len() as f64;

    let mut g = fwd.logits.clone();
    for (j, mut col) in g.column_iter_mut().enumerate() {
        let z: Vec<f64> = col.iter().copied().collect();
        for (dst, p) in col.iter_mut().zip(softmax(&z)) {
            *dst = p;
        }
        col[labels[j]] -= 1.0;
        col *= inv_n;
    }
    let mut grad_w = &g * fwd.features.transpose();
    let grad_b = g.column_sum();
    let mut grad_features = params.w.transpose() * &g;
    if mode == DecayMode::PeeledWH {
        grad_w += &params.w * lambda;
        grad_features += &fwd.features * lambda;
    }
    let d_pre_features = relu_mask(&grad_features, &fwd.pre_features);
    let grad_w2 = &d_pre_features * fwd.hidden.transpose();
    let grad_b2 = d_pre_features.column_sum();
    let d_pre_hidden = relu_mask(&(params.w2.transpose() * &d_pre_features), &fwd.pre_hidden);
    let grad_w1 = &d_pre_hidden * x.transpose();
    let grad_b1 = d_pre_hidden.column_sum();

    let mut grad = BackboneParams {
        w1: grad_w1,
        b1: grad_b1,
        w2: grad_w2,
        b2: grad_b2,
        w: grad_w,
        b: grad_b,
    };
    if mode == DecayMode::AllParams {
        let flat = grad.to_flat() + params.to_flat() * lambda;
        grad = BackboneParams::from_flat(&flat, &params.architecture());
    }
    Ok((parts, grad))
}

/// Full-batch GD-momentum settings for the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub step_size: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Step size is multiplied by `decay_factor` every `decay_period` epochs (0 = never).
    pub decay_factor: f64,
    pub decay_period: usize,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 2000,
            decay_factor: 0.1,
            decay_period: 0,
            init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(domain("step_size must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(domain("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(domain("weight_decay must be >= 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(domain("decay_factor must lie in (0, 1]"));
        }
        Ok(())
    }

    fn step_at(&self, epoch: usize) -> f64 {
        match epoch.checked_div(self.decay_period) {
            Some(periods) => self.step_size * self.decay_factor.powi(periods as i32),
            None => self.step_size,
        }
    }
}

/// Metrics after one full-batch epoch (recorded before that epoch's update;
/// the last record is the final parameters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub objective: f64,
    pub train_error: f64,
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BackboneRun {
    pub params: BackboneParams,
    pub records: Vec<EpochRecord>,
}

impl BackboneRun {
    pub fn first(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("a run records at least one epoch")
    }
}

/// Fraction of samples whose largest logit is not the label (ties count as errors).
pub fn training_error(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let wrong = logits
        .column_iter()
        .zip(labels)
        .filter(|(col, &l)| col.iter().enumerate().any(|(i, &v)| i != l && v >= col[l]))
        .count();
    wrong as f64 / labels.len() as f64
}

/// NC metrics of the realized features, regrouped into class-major order.
pub fn feature_metrics(params: &BackboneParams, features: &DMatrix<f64>, labels: &[usize]) -> Result<NcMetrics> {
    let k = params.w.nrows();
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let n = counts[0];
    if counts.iter().any(|&c| c != n) {
        return Err(domain("feature metrics need balanced classes"));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&j| labels[j]);
    let h = DMatrix::from_fn(features.nrows(), features.ncols(), |r, c| features[(r, order[c])]);
    let hp = Hyperparams::new(k, features.nrows(), n, 0.0, 0.0, 0.0)?;
    let state = ModelState {
        w: params.w.clone(),
        h,
        b: params.b.clone(),
    };
    Ok(nc_metrics_lenient(&state, &hp))
}

fn record(
    epoch: usize,
    params: &BackboneParams,
    data: &SynthDataset,
    cfg: &BackboneConfig,
    mode: DecayMode,
    start: &Instant,
) -> Result<EpochRecord> {
    let fwd = forward(params, &data.x)?;
    let parts = loss_from_forward(params, &fwd, &data.labels, cfg.weight_decay, mode);
    let m = feature_metrics(params, &fwd.features, &data.labels)?;
    Ok(EpochRecord {
        epoch,
        loss: parts.data,
        objective: parts.total(),
        train_error: training_error(&fwd.logits, &data.labels),
        nc1: m.nc1,
        nc2: m.nc2,
        nc3: m.nc3,
        nc4: m.nc4,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains the backbone by full-batch GD with momentum, recording metrics every
/// `record_every` epochs plus the last.
pub fn train_backbone(
    data: &SynthDataset,
    arch: &Architecture,
    cfg: &BackboneConfig,
    mode: DecayMode,
    record_every: usize,
) -> Result<BackboneRun> {
    cfg.validate()?;
    if arch.input_dim != data.spec.input_dim || arch.classes != data.spec.classes {
        return Err(shape("architecture does not match the dataset"));
    }
    let every = record_every.max(1);
    let start = Instant::now();
    let mut params = BackboneParams::init(arch, cfg.init_seed);
    let mut x = params.to_flat();
    let mut velocity = DVector::zeros(x.len());
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        if epoch % every == 0 {
            records.push(record(epoch, &params, data, cfg, mode, &start)?);
        }
        let (parts, grad) = backward(&params, &data.x, &data.labels, cfg.weight_decay, mode)?;
        let grad = grad.to_flat();
        if !parts.total().is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::BackboneDiverged {
                epoch,
                reason: format!("objective became {}", parts.total()),
                trace: records,
            });
        }
        velocity = &velocity * cfg.momentum + grad;
        x.axpy(-cfg.step_at(epoch), &velocity, 1.0);
        params = BackboneParams::from_flat(&x, arch);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::BackboneDiverged {
            epoch: cfg.epochs,
            reason: "non-finite parameters".into(),
            trace: records,
        });
    }
    records.push(record(cfg.epochs, &params, data, cfg, mode, &start)?);
    Ok(BackboneRun { params, records })
}
