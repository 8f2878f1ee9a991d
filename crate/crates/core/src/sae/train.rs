// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam training with L1 sparsity, unit-norm decoder rows, and dead-feature
//! resampling followed by a learning-rate re-warmup.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Grads, SaeParams};
use crate::corpus::{ActivationBuffer, RowSource};
use crate::error::{Error, Result};
use crate::model::Site;
use crate::numerics::{adam_step, dot, norm2, AdamHyper, AdamState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `d_sae = expansion · d_in`.
    pub expansion: usize,
    pub l1_coeff: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub total_steps: usize,
    /// Check for dead features every this many steps; 0 disables resampling.
    pub resample_every: usize,
    /// No resampling at or after this step.
    pub resample_until: usize,
    /// Rows without a firing before a feature counts as dead.
    pub dead_window: usize,
    pub warmup_steps_after_resample: usize,
    /// Rows drawn from the buffer to choose resampling inputs.
    pub resample_pool: usize,
    pub log_every: usize,
    pub pre_bias: bool,
    /// Start `b_dec` at the mean of the first batch instead of zero.
    pub init_b_dec_mean: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            expansion: 8,
            l1_coeff: 0.2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            batch: 256,
            total_steps: 8000,
            resample_every: 1000,
            resample_until: 4000,
            dead_window: 100_000,
            warmup_steps_after_resample: 1000,
            resample_pool: 8192,
            log_every: 100,
            pre_bias: true,
            init_b_dec_mean: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("expansion", self.expansion),
            ("batch", self.batch),
            ("total_steps", self.total_steps),
            ("dead_window", self.dead_window),
            ("log_every", self.log_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        let ok = self.l1_coeff >= 0.0
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if !ok {
            return Err(Error::InvalidArgument(
                "need l1_coeff >= 0, lr > 0 and betas in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-feature firing bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureActivity {
    /// Rows seen since the feature last fired.
    pub since_fire: Vec<u64>,
    /// Rows on which the feature fired, over the whole run.
    pub fire_count: Vec<u64>,
}

impl FeatureActivity {
    pub fn new(d_sae: usize) -> Self {
        Self {
            since_fire: vec![0; d_sae],
            fire_count: vec![0; d_sae],
        }
    }

    /// Record one batch given the active feature ids of each row.
    pub fn observe(&mut self, active: &[Vec<u32>]) {
        let n = active.len() as u64;
        let mut last = vec![None; self.since_fire.len()];
        for (r, act) in active.iter().enumerate() {
            for &i in act {
                last[i as usize] = Some(r as u64);
                self.fire_count[i as usize] += 1;
            }
        }
        for (s, l) in self.since_fire.iter_mut().zip(last) {
            *s = match l {
                Some(r) => n - 1 - r,
                None => *s + n,
            };
        }
    }

    /// Features silent for at least `window` rows.
    pub fn dead(&self, window: usize) -> Vec<usize> {
        (0..self.since_fire.len())
            .filter(|&i| self.since_fire[i] >= window as u64)
            .collect()
    }
}

/// Adam moments for the four SAE tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub w_enc: AdamState,
    pub b_enc: AdamState,
    pub w_dec: AdamState,
    pub b_dec: AdamState,
}

impl OptState {
    pub fn new(sae: &SaeParams) -> Self {
        Self {
            w_enc: AdamState::new(&sae.w_enc),
            b_enc: AdamState::new(&sae.b_enc),
            w_dec: AdamState::new(&sae.w_dec),
            b_dec: AdamState::new(&sae.b_dec),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResampleOutcome {
    pub resampled: Vec<usize>,
    /// Whether the caller should restart the learning-rate warmup.
    pub warmup: bool,
}

/// Multiplier on the base learning rate `t` steps after a resampling event:
/// `0.1` at `t = 0`, rising on a half cosine to `1` at `t = warmup`.
pub fn lr_factor(since_resample: Option<usize>, warmup: usize) -> f64 {
    match since_resample {
        Some(t) if t < warmup => 0.1 + 0.9 * (1.0 - (PI * t as f64 / warmup as f64).cos()) / 2.0,
        _ => 1.0,
    }
}

/// Reinitialize features silent for `dead_window` rows.
///
/// Each dead feature gets an input drawn from `pool` with probability
/// proportional to its squared reconstruction loss. The decoder row becomes
/// that input (minus `b_dec` under the pre-bias) at unit norm, the encoder
/// column the same direction scaled to 0.2 of the mean alive encoder norm, and
/// the encoder bias zero. Their Adam moments are cleared.
pub fn resample_dead(
    sae: &mut SaeParams,
    activity: &mut FeatureActivity,
    pool: &Tensor,
    dead_window: usize,
    opt: Option<&mut OptState>,
    seed: u64,
) -> Result<ResampleOutcome> {
    let dead = activity.dead(dead_window);
    if dead.is_empty() || pool.rows() == 0 {
        return Ok(ResampleOutcome::default());
    }
    if pool.cols() != sae.d_in() {
        return Err(Error::Shape(format!("pool width {}, SAE d_in {}", pool.cols(), sae.d_in())));
    }
    let (d, m) = (sae.d_in(), sae.d_sae());
    let pass = sae.pass(pool);
    let weights: Vec<f64> = pass
        .err
        .chunks_exact(d)
        .map(|e| {
            let l = dot(e, e);
            l * l
        })
        .collect();
    let total: f64 = weights.iter().sum();

    let is_dead = {
        let mut v = vec![false; m];
        dead.iter().for_each(|&i| v[i] = true);
        v
    };
    let alive: Vec<f64> = (0..m)
        .filter(|&i| !is_dead[i])
        .map(|i| norm2(&sae.encoder_column(i)))
        .collect();
    let enc_norm = if alive.is_empty() {
        1.0
    } else {
        alive.iter().sum::<f64>() / alive.len() as f64
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resampled = Vec::new();
    let mut opt = opt;
    for &i in &dead {
        let row = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (r, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = r;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..pool.rows())
        };
        let mut v = pool.row(row).to_vec();
        if sae.pre_bias {
            v.iter_mut().zip(sae.b_dec.data()).for_each(|(a, b)| *a -= b);
        }
        let n = norm2(&v);
        if n == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        sae.w_dec.row_mut(i).copy_from_slice(&v);
        for (r, vr) in v.iter().enumerate() {
            sae.w_enc.data_mut()[r * m + i] = vr * 0.2 * enc_norm;
        }
        sae.b_enc.data_mut()[i] = 0.0;
        if let Some(o) = opt.as_deref_mut() {
            o.w_dec.reset_indices(i * d..(i + 1) * d);
            o.w_enc.reset_indices((0..d).map(|r| r * m + i));
            o.b_enc.reset_indices([i]);
        }
        activity.since_fire[i] = 0;
        resampled.push(i);
    }
    let warmup = !resampled.is_empty();
    Ok(ResampleOutcome { resampled, warmup })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub mse: f64,
    pub l1: f64,
    pub total: f64,
    pub l0: f64,
    pub n_dead: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub history: Vec<StepStats>,
    /// Total loss of every step.
    pub losses: Vec<f64>,
    /// `(step, number of features resampled)`.
    pub resamples: Vec<(usize, usize)>,
    pub steps_run: usize,
    pub rows_seen: usize,
    /// Windows (by start step) whose mean loss rose more than 5% over the previous window.
    pub rising_windows: Vec<usize>,
    pub divergence_flag: bool,
    pub activity: Option<FeatureActivity>,
}

const SMOOTH_WINDOW: usize = 500;
const RISE_TOLERANCE: f64 = 0.05;

fn flag_rising(losses: &[f64]) -> Vec<usize> {
    let means: Vec<f64> = losses
        .chunks_exact(SMOOTH_WINDOW)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] * (1.0 + RISE_TOLERANCE))
        .map(|(k, _)| (k + 1) * SMOOTH_WINDOW)
        .collect()
}

/// A rising window counts as divergence unless a resample landed inside it:
/// fresh features and the LR re-warmup raise the loss there by design.
fn divergent(rising: &[usize], resamples: &[(usize, usize)]) -> bool {
    rising
        .iter()
        .any(|&start| !resamples.iter().any(|&(r, _)| (start..start + SMOOTH_WINDOW).contains(&r)))
}

fn project_decoder_grad(sae: &SaeParams, g: &mut Grads) {
    for i in 0..sae.d_sae() {
        let d = sae.w_dec.row(i);
        let row = g.w_dec.row_mut(i);
        let along = dot(row, d);
        row.iter_mut().zip(d).for_each(|(gv, dv)| *gv -= along * dv);
    }
}

/// Train an SAE on rows served by `buffer`. Runs until `total_steps` or until
/// the buffer is exhausted. Deterministic for a fixed config and buffer.
pub fn train<S: RowSource>(
    buffer: &mut ActivationBuffer<S>,
    site: Option<Site>,
    cfg: &TrainConfig,
) -> Result<(SaeParams, TrainStats)> {
    cfg.validate()?;
    let d_in = buffer.dim();
    let mut sae = SaeParams::init(d_in, cfg.expansion * d_in, cfg.seed);
    sae.site = site;
    sae.pre_bias = cfg.pre_bias;
    let mut opt = OptState::new(&sae);
    let mut activity = FeatureActivity::new(sae.d_sae());
    let mut stats = TrainStats::default();
    let mut last_resample: Option<usize> = None;

    for step in 0..cfg.total_steps {
        let Some((batch, _)) = buffer.next_batch(cfg.batch)? else {
            break;
        };
        if step == 0 && cfg.init_b_dec_mean {
            let n = batch.rows() as f64;
            let mut mean = vec![0.0; d_in];
            for r in 0..batch.rows() {
                mean.iter_mut().zip(batch.row(r)).for_each(|(m, x)| *m += x / n);
            }
            sae.b_dec = Tensor::vector(mean);
        }
        let (parts, mut grads, pass) = sae.train_pass(&batch, cfg.l1_coeff, None)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {} (mse {}, l1 {})", parts.total, parts.mse, parts.l1),
            });
        }
        project_decoder_grad(&sae, &mut grads);
        let factor = lr_factor(last_resample.map(|r| step - r), cfg.warmup_steps_after_resample);
        let hp = AdamHyper {
            lr: cfg.lr * factor,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        };
        adam_step(&mut sae.w_enc, &grads.w_enc, &mut opt.w_enc, &hp)?;
        adam_step(&mut sae.b_enc, &grads.b_enc, &mut opt.b_enc, &hp)?;
        adam_step(&mut sae.w_dec, &grads.w_dec, &mut opt.w_dec, &hp)?;
        adam_step(&mut sae.b_dec, &grads.b_dec, &mut opt.b_dec, &hp)?;
        sae.normalize_decoder();
        if !(sae.w_enc.all_finite() && sae.w_dec.all_finite() && sae.b_enc.all_finite() && sae.b_dec.all_finite()) {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }

        activity.observe(&pass.active);
        stats.losses.push(parts.total);
        stats.rows_seen += batch.rows();
        stats.steps_run = step + 1;

        if (step + 1) % cfg.log_every == 0 {
            let nnz: usize = pass.active.iter().map(Vec::len).sum();
            stats.history.push(StepStats {
                step: step + 1,
                mse: parts.mse,
                l1: parts.l1,
                total: parts.total,
                l0: nnz as f64 / batch.rows() as f64,
                n_dead: activity.dead(cfg.dead_window).len(),
                lr: hp.lr,
            });
        }

        let due = cfg.resample_every > 0 && (step + 1) % cfg.resample_every == 0 && step + 1 < cfg.resample_until;
        if due && !activity.dead(cfg.dead_window).is_empty() {
            if let Some((pool, _)) = buffer.next_batch(cfg.resample_pool)? {
                stats.rows_seen += pool.rows();
                let seed = cfg.seed ^ ((step as u64 + 1) << 20);
                let out = resample_dead(&mut sae, &mut activity, &pool, cfg.dead_window, Some(&mut opt), seed)?;
                if out.warmup {
                    stats.resamples.push((step + 1, out.resampled.len()));
                    last_resample = Some(step + 1);
                }
            }
        }
    }
    if stats.steps_run == 0 {
        return Err(Error::InsufficientData("buffer produced no rows".into()));
    }
    stats.rising_windows = flag_rising(&stats.losses);
    stats.divergence_flag = divergent(&stats.rising_windows, &stats.resamples);
    stats.activity = Some(activity);
    Ok((sae, stats))
}
