//! Drafter training against a frozen target with the three-term loss
//! (noise MSE, feature cosine, feature Smooth-L1), plus the regression fit
//! that turns an analytic mixture into a feature-bearing target network.

use crate::error::{check_dim, Error, Result};
use crate::models::{eps_from_score, GmmTarget, Gradients, MlpNet, ModelOutput, ScoreModel};
use crate::schedule::NoiseSchedule;
use crate::stats::{fill_gaussian, Purpose, RngKey};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub beta_huber: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_f: 0.5,
            lambda_s: 0.005,
            beta_huber: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_f >= 0.0 && self.lambda_s >= 0.0 && self.beta_huber > 0.0;
        if ok && self.lambda_f.is_finite() && self.lambda_s.is_finite() && self.beta_huber.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Guard added to the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Mean over dimensions of the squared noise error.
pub fn loss_noise(eps_pred: &[f64], eps_ref: &[f64]) -> f64 {
    let n = eps_pred.len() as f64;
    eps_pred.iter().zip(eps_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

pub fn loss_noise_grad(eps_pred: &[f64], eps_ref: &[f64]) -> Vec<f64> {
    let n = eps_pred.len() as f64;
    eps_pred.iter().zip(eps_ref).map(|(a, b)| 2.0 * (a - b) / n).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - <f, f_ref> / (‖f‖‖f_ref‖ + ε)` for a single token.
pub fn loss_feat(f_pred: &[f64], f_ref: &[f64], epsilon_div: f64) -> f64 {
    let dot: f64 = f_pred.iter().zip(f_ref).map(|(a, b)| a * b).sum();
    1.0 - dot / (norm(f_pred) * norm(f_ref) + epsilon_div)
}

pub fn loss_feat_grad(f_pred: &[f64], f_ref: &[f64], epsilon_div: f64) -> Vec<f64> {
    let dot: f64 = f_pred.iter().zip(f_ref).map(|(a, b)| a * b).sum();
    let (na, nb) = (norm(f_pred), norm(f_ref));
    let den = na * nb + epsilon_div;
    // ‖a‖ is not differentiable at 0; its term is dropped there.
    let radial = if na > 0.0 { dot * nb / (na * den * den) } else { 0.0 };
    f_pred
        .iter()
        .zip(f_ref)
        .map(|(a, b)| -(b / den) + radial * a)
        .collect()
}

/// Smooth-L1: `u²/(2β)` inside `|u| < β`, `|u| - β/2` outside.
pub fn smooth_l1(u: f64, beta: f64) -> f64 {
    if u.abs() < beta {
        0.5 * u * u / beta
    } else {
        u.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad(u: f64, beta: f64) -> f64 {
    if u.abs() < beta {
        u / beta
    } else {
        u.signum()
    }
}

/// Mean Smooth-L1 of the feature residual.
pub fn loss_smooth(f_pred: &[f64], f_ref: &[f64], beta_huber: f64) -> f64 {
    let n = f_pred.len() as f64;
    f_pred.iter().zip(f_ref).map(|(a, b)| smooth_l1(a - b, beta_huber)).sum::<f64>() / n
}

pub fn loss_smooth_grad(f_pred: &[f64], f_ref: &[f64], beta_huber: f64) -> Vec<f64> {
    let n = f_pred.len() as f64;
    f_pred.iter().zip(f_ref).map(|(a, b)| smooth_l1_grad(a - b, beta_huber) / n).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub noise: f64,
    pub feat: f64,
    pub smooth: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.noise += o.noise;
        self.feat += o.feat;
        self.smooth += o.smooth;
    }

    fn scale(&mut self, c: f64) {
        self.noise *= c;
        self.feat *= c;
        self.smooth *= c;
    }
}

/// `L_noise + λ_f·L_feat + λ_s·L_smooth`.
pub fn loss_total(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.noise + w.lambda_f * parts.feat + w.lambda_s * parts.smooth
}

/// Loss parts for one drafter prediction and the gradients w.r.t. the
/// drafter's noise output and feature.
pub fn drafter_loss(pred: &ModelOutput, reference: &ModelOutput, w: &LossWeights) -> (LossParts, Vec<f64>, Vec<f64>) {
    let parts = LossParts {
        noise: loss_noise(&pred.eps, &reference.eps),
        feat: loss_feat(&pred.feature, &reference.feature, COSINE_EPS),
        smooth: loss_smooth(&pred.feature, &reference.feature, w.beta_huber),
    };
    let d_eps = loss_noise_grad(&pred.eps, &reference.eps);
    let d_feat = loss_feat_grad(&pred.feature, &reference.feature, COSINE_EPS)
        .into_iter()
        .zip(loss_smooth_grad(&pred.feature, &reference.feature, w.beta_huber))
        .map(|(c, s)| w.lambda_f * c + w.lambda_s * s)
        .collect();
    (parts, d_eps, d_feat)
}

/// AdamW with bias correction; `weight_decay = 0` is plain Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    pub fn step(&mut self, net: &mut MlpNet, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let mut k = 0;
        for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
            let pairs = layer
                .weights
                .iter_mut()
                .zip(&g.weights)
                .chain(layer.bias.iter_mut().zip(&g.bias));
            for (p, gi) in pairs {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gi;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gi * gi;
                let update = (self.m[k] / bc1) / ((self.v[k] / bc2).sqrt() + self.eps);
                *p -= self.lr * (update + self.weight_decay * *p);
                k += 1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batches_per_epoch: 8,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub noise: f64,
    pub feat: f64,
    pub smooth: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epochs: Vec<EpochLoss>,
    /// Held-out loss before the first update.
    pub initial: EpochLoss,
    /// Held-out loss after the last update.
    pub final_eval: EpochLoss,
}

/// One drafter supervision example: the drafter sees `(state, t, cond)` and
/// is trained toward the teacher's `(eps, feature)` at that state.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub state: Vec<f64>,
    pub t: usize,
    pub cond: Vec<f64>,
    pub teacher: ModelOutput,
}

/// Batch of teacher-labelled examples.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
}

impl TrainBatch {
    /// Builds a batch: noise a data point to `x_t`, take one target step to
    /// `x_{t-1}` (keeping the feature of that pass), then label `x_{t-1}`
    /// with the target's output at `t-1`.
    pub fn generate<M: ScoreModel + ?Sized>(
        target: &M,
        data: &GmmTarget,
        sched: &NoiseSchedule,
        size: usize,
        key: RngKey,
    ) -> Result<Self> {
        let d = data.dim();
        let mut rng = key.stream();
        let mut z = vec![0.0; d];
        let mut examples = Vec::with_capacity(size);
        for _ in 0..size {
            let x0 = data.sample(&mut rng);
            let t = rng.gen_range(2..=sched.steps());
            fill_gaussian(&mut rng, &mut z);
            let xt = sched.q_sample(&x0, t, &z);
            let first = target.predict(&xt, t, sched)?;
            fill_gaussian(&mut rng, &mut z);
            let state = sched.transition(&xt, &first.eps, t)?.sample_with(&z);
            let teacher = target.predict(&state, t - 1, sched)?;
            examples.push(TrainExample {
                state,
                t: t - 1,
                cond: first.feature,
                teacher,
            });
        }
        Ok(Self { examples })
    }
}

fn batch_loss(drafter: &MlpNet, batch: &TrainBatch, w: &LossWeights, grads: Option<&mut Gradients>) -> Result<LossParts> {
    let mut sum = LossParts::default();
    let mut grads = grads;
    for ex in &batch.examples {
        let (pred, cache) = drafter.forward_cached(&ex.state, ex.t, &ex.cond)?;
        let (parts, d_eps, d_feat) = drafter_loss(&pred, &ex.teacher, w);
        sum.add(&parts);
        if let Some(g) = grads.as_deref_mut() {
            drafter.backward_into(&cache, &d_eps, Some(&d_feat), g);
        }
    }
    sum.scale(1.0 / batch.examples.len() as f64);
    Ok(sum)
}

fn epoch_row(epoch: usize, parts: LossParts, w: &LossWeights) -> EpochLoss {
    EpochLoss {
        epoch,
        noise: parts.noise,
        feat: parts.feat,
        smooth: parts.smooth,
        total: loss_total(&parts, w),
    }
}

/// Trains `drafter` on one-step supervision from the frozen `target`,
/// using data drawn from `data`.
pub fn train_drafter<M: ScoreModel + ?Sized>(
    target: &M,
    drafter: &mut MlpNet,
    data: &GmmTarget,
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.weights.validate()?;
    check_dim(target.state_dim(), drafter.state_dim())?;
    check_dim(target.feature_dim(), drafter.cond_dim())?;
    check_dim(target.feature_dim(), drafter.feature_dim())?;
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let w = config.weights;
    let holdout = TrainBatch::generate(target, data, sched, 256, RngKey::new(config.seed, u64::MAX, Purpose::Data))?;
    let initial = epoch_row(0, batch_loss(drafter, &holdout, &w, None)?, &w);

    let mut opt = AdamW::new(config.learning_rate, drafter.param_count());
    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut mean = LossParts::default();
        for b in 0..config.batches_per_epoch {
            let step = ((epoch - 1) * config.batches_per_epoch + b) as u64;
            let batch = TrainBatch::generate(target, data, sched, config.batch_size, RngKey::new(config.seed, step, Purpose::Data))?;
            let mut grads = Gradients::zeros_like(drafter);
            let parts = batch_loss(drafter, &batch, &w, Some(&mut grads))?;
            let total = loss_total(&parts, &w);
            if !total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {total}, parts {parts:?}"),
                });
            }
            grads.scale(1.0 / config.batch_size as f64);
            opt.step(drafter, &grads);
            mean.add(&parts);
        }
        mean.scale(1.0 / config.batches_per_epoch.max(1) as f64);
        rows.push(epoch_row(epoch, mean, &w));
    }
    let final_eval = epoch_row(config.epochs, batch_loss(drafter, &holdout, &w, None)?, &w);
    Ok(TrainReport {
        epochs: rows,
        initial,
        final_eval,
    })
}

/// Regression fit of a target network to the exact mixture noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The rate follows a cosine from `learning_rate` down to
    /// `learning_rate * final_lr_fraction` over the run.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 300,
            batches_per_epoch: 8,
            batch_size: 64,
            learning_rate: 1e-2,
            final_lr_fraction: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub rmse: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `(epoch, mean training MSE)`.
    pub epochs: Vec<(usize, f64)>,
    pub initial: Residuals,
    pub final_residuals: Residuals,
}

fn regression_batch(gmm: &GmmTarget, sched: &NoiseSchedule, size: usize, key: RngKey) -> Result<Vec<(Vec<f64>, usize, Vec<f64>)>> {
    let mut rng = key.stream();
    let mut z = vec![0.0; gmm.dim()];
    (0..size)
        .map(|_| {
            let x0 = gmm.sample(&mut rng);
            let t = rng.gen_range(1..=sched.steps());
            fill_gaussian(&mut rng, &mut z);
            let xt = sched.q_sample(&x0, t, &z);
            let eps = eps_from_score(&gmm.score(&xt, t, sched)?, t, sched);
            Ok((xt, t, eps))
        })
        .collect()
}

/// Residual statistics of `net` against the exact mixture noise.
pub fn regression_residuals(net: &MlpNet, batch: &[(Vec<f64>, usize, Vec<f64>)]) -> Result<Residuals> {
    let mut sq = 0.0;
    let mut max_abs = 0.0f64;
    let mut count = 0usize;
    for (x, t, eps) in batch {
        let out = net.forward(x, *t, &[])?;
        for (a, b) in out.eps.iter().zip(eps) {
            sq += (a - b) * (a - b);
            max_abs = max_abs.max((a - b).abs());
            count += 1;
        }
    }
    Ok(Residuals {
        rmse: (sq / count as f64).sqrt(),
        max_abs,
    })
}

/// Fits a target network to `eps_from_score(gmm_score(x_t, t))` over
/// forward-noised data with `t` uniform on `1..=T`.
pub fn fit_target_mlp(gmm: &GmmTarget, sched: &NoiseSchedule, config: &FitConfig) -> Result<(MlpNet, FitReport)> {
    let mut net = MlpNet::new(gmm.dim(), 0, &config.hidden, sched.steps(), config.seed)?;
    let holdout = regression_batch(gmm, sched, 1024, RngKey::new(config.seed, u64::MAX, Purpose::Data))?;
    let initial = regression_residuals(&net, &holdout)?;
    let mut opt = AdamW::new(config.learning_rate, net.param_count());
    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let progress = (epoch - 1) as f64 / config.epochs as f64;
        let floor = config.learning_rate * config.final_lr_fraction;
        opt.lr = floor + 0.5 * (config.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos());
        let mut epoch_mse = 0.0;
        for b in 0..config.batches_per_epoch {
            let step = ((epoch - 1) * config.batches_per_epoch + b) as u64;
            let batch = regression_batch(gmm, sched, config.batch_size, RngKey::new(config.seed, step, Purpose::Data))?;
            let mut grads = Gradients::zeros_like(&net);
            let mut mse = 0.0;
            for (x, t, eps) in &batch {
                let (out, cache) = net.forward_cached(x, *t, &[])?;
                mse += loss_noise(&out.eps, eps);
                net.backward_into(&cache, &loss_noise_grad(&out.eps, eps), None, &mut grads);
            }
            mse /= batch.len() as f64;
            if !mse.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("regression loss {mse}"),
                });
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut net, &grads);
            epoch_mse += mse;
        }
        rows.push((epoch, epoch_mse / config.batches_per_epoch.max(1) as f64));
    }
    let final_residuals = regression_residuals(&net, &holdout)?;
    Ok((
        net,
        FitReport {
            epochs: rows,
            initial,
            final_residuals,
        },
    ))
}
