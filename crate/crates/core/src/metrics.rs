// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation of trained SAEs: sparsity, spliced-in loss, dead features,
//! binomial intervals, activation histograms and feature dashboards.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::attribution::{dfa_by_source, direct_logit_effect, head_attribution};
use crate::corpus::{ActivationBuffer, RowSource, RowTag, TokenDataset};
use crate::error::{Error, Result};
use crate::model::{forward, forward_spliced, forward_until, HookedTrace, Hook, Override, Splice, Weights};
use crate::numerics::{log_sum_exp, Tensor};
use crate::sae::SaeParams;
use crate::SCHEMA_VERSION;

/// Mean number of active features per row.
pub fn l0_metric(sae: &SaeParams, z: &Tensor) -> Result<f64> {
    let f = sae.encode_batch(z)?;
    if f.rows() == 0 {
        return Ok(0.0);
    }
    let nnz = f.data().iter().filter(|v| **v > 0.0).count();
    Ok(nnz as f64 / f.rows() as f64)
}

/// Summed next-token cross-entropy (nats) over positions `0..T-1`.
pub fn next_token_ce_sum(trace: &HookedTrace) -> f64 {
    let t = trace.seq_len();
    (0..t.saturating_sub(1))
        .map(|p| {
            let row = trace.logits_at(p);
            log_sum_exp(row) - row[trace.tokens[p + 1] as usize]
        })
        .sum()
}

/// Mean cross-entropies with the site left alone, replaced by the SAE
/// reconstruction, and replaced by zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpliceEval {
    pub ce_clean: f64,
    pub ce_spliced: f64,
    pub ce_zero: f64,
    /// Predicted tokens (the final position of each sequence has no target).
    pub tokens_evaluated: usize,
    /// Activation rows encoded (every position).
    pub rows: usize,
    pub l0: f64,
    /// Rows on which each feature fired.
    pub fire_counts: Vec<u64>,
}

pub fn splice_eval(weights: &Weights, sae: &SaeParams, dataset: &TokenDataset) -> Result<SpliceEval> {
    sae.check_attach(&weights.config)?;
    let site = sae.site.expect("checked by check_attach");
    if dataset.is_empty() || dataset.seq_len < 2 {
        return Err(Error::InsufficientData("need sequences of length >= 2".into()));
    }
    let (mut clean, mut spliced, mut zero) = (0.0, 0.0, 0.0);
    let (mut tokens, mut rows, mut nnz) = (0, 0, 0usize);
    let mut fire_counts = vec![0u64; sae.d_sae()];
    for seq in &dataset.sequences {
        let tr = forward(weights, seq)?;
        let z = tr.site(site)?;
        let f = sae.encode_batch(z)?;
        let mut recon = Vec::with_capacity(z.len());
        for r in 0..f.rows() {
            for (i, &v) in f.row(r).iter().enumerate() {
                if v > 0.0 {
                    fire_counts[i] += 1;
                    nnz += 1;
                }
            }
            recon.extend(sae.decode(f.row(r))?);
        }
        let recon = Tensor::new(z.shape().to_vec(), recon)?;
        let run = |values: Tensor| -> Result<f64> {
            let splice = Splice {
                overrides: vec![Override::all_positions(site, values)],
                ..Splice::default()
            };
            Ok(next_token_ce_sum(&forward_spliced(weights, seq, &splice)?))
        };
        clean += next_token_ce_sum(&tr);
        spliced += run(recon)?;
        zero += run(Tensor::zeros(z.shape()))?;
        tokens += seq.len() - 1;
        rows += seq.len();
    }
    let n = tokens as f64;
    Ok(SpliceEval {
        ce_clean: clean / n,
        ce_spliced: spliced / n,
        ce_zero: zero / n,
        tokens_evaluated: tokens,
        rows,
        l0: nnz as f64 / rows as f64,
        fire_counts,
    })
}

/// `1 - (CE_spliced - CE_clean) / (CE_zero - CE_clean)`.
pub fn loss_recovered(ce_clean: f64, ce_spliced: f64, ce_zero: f64) -> Result<f64> {
    let denom = ce_zero - ce_clean;
    if denom == 0.0 || !denom.is_finite() || !ce_spliced.is_finite() {
        return Err(Error::Degenerate(format!(
            "zero-ablation CE {ce_zero} equals clean CE {ce_clean}; loss recovered is undefined"
        )));
    }
    Ok(1.0 - (ce_spliced - ce_clean) / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub site: String,
    pub l0: f64,
    pub ce_clean: f64,
    pub ce_spliced: f64,
    pub ce_zero: f64,
    pub loss_recovered: f64,
    /// Features that never fired on the evaluation rows.
    pub n_dead: usize,
    pub n_features: usize,
    pub tokens_evaluated: usize,
    pub rows_scanned: usize,
}

pub fn evaluate(weights: &Weights, sae: &SaeParams, dataset: &TokenDataset) -> Result<EvalReport> {
    let ev = splice_eval(weights, sae, dataset)?;
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        site: sae.site.map(|s| s.to_string()).unwrap_or_default(),
        l0: ev.l0,
        ce_clean: ev.ce_clean,
        ce_spliced: ev.ce_spliced,
        ce_zero: ev.ce_zero,
        loss_recovered: loss_recovered(ev.ce_clean, ev.ce_spliced, ev.ce_zero)?,
        n_dead: ev.fire_counts.iter().filter(|c| **c == 0).count(),
        n_features: sae.d_sae(),
        tokens_evaluated: ev.tokens_evaluated,
        rows_scanned: ev.rows,
    })
}

/// Features that never fire over the next `window` rows of `buffer`.
pub fn dead_census<S: RowSource>(
    sae: &SaeParams,
    buffer: &mut ActivationBuffer<S>,
    window: usize,
) -> Result<BTreeSet<usize>> {
    let mut fired = vec![false; sae.d_sae()];
    let mut seen = 0;
    while seen < window {
        let want = (window - seen).min(4096);
        let Some((batch, _)) = buffer.next_batch(want)? else {
            return Err(Error::InsufficientData(format!(
                "dead census needs {window} rows, buffer ran out after {seen}"
            )));
        };
        let f = sae.encode_batch(&batch)?;
        for r in 0..f.rows() {
            for (i, v) in f.row(r).iter().enumerate() {
                fired[i] |= *v > 0.0;
            }
        }
        seen += batch.rows();
    }
    Ok((0..sae.d_sae()).filter(|&i| !fired[i]).collect())
}

/// Beta quantile by bisection on the regularized incomplete beta function.
fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Exact (Clopper-Pearson) two-sided interval for `x` successes in `n` trials
/// at total level `alpha`.
pub fn clopper_pearson(x: u64, n: u64, alpha: f64) -> Result<(f64, f64)> {
    if n == 0 || x > n || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= x <= n, n > 0 and 0 < alpha < 1; got x={x}, n={n}, alpha={alpha}"
        )));
    }
    let (xf, nf) = (x as f64, n as f64);
    let lo = if x == 0 { 0.0 } else { beta_quantile(alpha / 2.0, xf, nf - xf + 1.0) };
    let hi = if x == n { 1.0 } else { beta_quantile(1.0 - alpha / 2.0, xf + 1.0, nf - xf) };
    Ok((lo, hi))
}

/// Fixed-width histogram over positive activations, plus the same bins
/// weighted by activation. With a proxy, each bin also gets its proxy-true part.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Sum of activations falling in each bin.
    pub ev: Vec<f64>,
    pub proxy_counts: Option<Vec<u64>>,
    pub proxy_ev: Option<Vec<f64>>,
}

impl ActivationStats {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Histogram of `acts` (non-positive values are ignored). `proxy[k]` labels `acts[k]`.
pub fn activation_stats(acts: &[f64], proxy: Option<&[bool]>, n_bins: usize) -> Result<ActivationStats> {
    if proxy.is_some_and(|p| p.len() != acts.len()) {
        return Err(Error::Shape("proxy labels and activations differ in length".into()));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let max = acts.iter().copied().filter(|a| *a > 0.0).fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(ActivationStats::default());
    }
    let width = max / n_bins as f64;
    let mut st = ActivationStats {
        bin_edges: (0..=n_bins).map(|b| b as f64 * width).collect(),
        counts: vec![0; n_bins],
        ev: vec![0.0; n_bins],
        proxy_counts: proxy.map(|_| vec![0; n_bins]),
        proxy_ev: proxy.map(|_| vec![0.0; n_bins]),
    };
    for (k, &a) in acts.iter().enumerate() {
        if a <= 0.0 {
            continue;
        }
        let b = ((a / width) as usize).min(n_bins - 1);
        st.counts[b] += 1;
        st.ev[b] += a;
        if proxy.is_some_and(|p| p[k]) {
            st.proxy_counts.as_mut().unwrap()[b] += 1;
            st.proxy_ev.as_mut().unwrap()[b] += a;
        }
    }
    Ok(st)
}

/// Active features of every position in a dataset, kept sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseActivations {
    pub tags: Vec<RowTag>,
    /// Per row, `(feature, activation)` for active features in ascending id.
    pub active: Vec<Vec<(u32, f64)>>,
    pub d_sae: usize,
}

impl SparseActivations {
    pub fn collect(weights: &Weights, sae: &SaeParams, dataset: &TokenDataset) -> Result<Self> {
        sae.check_attach(&weights.config)?;
        let site = sae.site.expect("checked by check_attach");
        let mut tags = Vec::new();
        let mut active = Vec::new();
        for (s, seq) in dataset.sequences.iter().enumerate() {
            let tr = forward_until(weights, seq, site.layer)?;
            let f = sae.encode_batch(tr.site(site)?)?;
            for pos in 0..seq.len() {
                tags.push(RowTag { seq: s, pos });
                active.push(
                    f.row(pos)
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v > 0.0)
                        .map(|(i, v)| (i as u32, *v))
                        .collect(),
                );
            }
        }
        Ok(Self {
            tags,
            active,
            d_sae: sae.d_sae(),
        })
    }

    /// Activation of `feature` on every row (zero where inactive).
    pub fn column(&self, feature: usize) -> Vec<f64> {
        self.active
            .iter()
            .map(|row| {
                row.binary_search_by_key(&(feature as u32), |e| e.0)
                    .map_or(0.0, |k| row[k].1)
            })
            .collect()
    }

    pub fn fire_counts(&self) -> Vec<u64> {
        let mut c = vec![0; self.d_sae];
        for row in &self.active {
            for (i, _) in row {
                c[*i as usize] += 1;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DashboardExample {
    pub seq: usize,
    pub position: usize,
    pub tokens: Vec<u32>,
    pub activation: f64,
    /// Constant part of the pre-activation (encoder bias and pre-bias term).
    pub bias: f64,
    /// Per source position; sums to `activation - bias` (empty for non-`z_cat` SAEs).
    pub dfa_by_source: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBin {
    pub lo: f64,
    pub hi: f64,
    pub examples: Vec<DashboardExample>,
}

/// Everything shown on a feature's dashboard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DashboardRecord {
    pub schema_version: u32,
    pub site: String,
    pub feature: usize,
    pub n_positions: usize,
    pub n_fired: usize,
    pub frequency: f64,
    pub top_examples: Vec<DashboardExample>,
    /// Equal-width slices of `(0, max activation]`, lowest first.
    pub quantiles: Vec<QuantileBin>,
    pub head_attribution: Vec<f64>,
    pub top_logits: Vec<(u32, f64)>,
    pub bottom_logits: Vec<(u32, f64)>,
    pub histogram: ActivationStats,
}

pub const DASHBOARD_BINS: usize = 10;
pub const EXAMPLES_PER_BIN: usize = 5;
const HISTOGRAM_BINS: usize = 30;
const LOGIT_TOKENS: usize = 10;

fn dashboard_example(
    weights: &Weights,
    sae: &SaeParams,
    feature: usize,
    dataset: &TokenDataset,
    tag: RowTag,
    activation: f64,
) -> Result<DashboardExample> {
    let site = sae.site.expect("checked by caller");
    let tokens = dataset.sequences[tag.seq].clone();
    let dfa = if site.hook == Hook::ZCat {
        let tr = forward_until(weights, &tokens[..=tag.pos], site.layer)?;
        dfa_by_source(sae, feature, &tr, tag.pos)?.values()
    } else {
        Vec::new()
    };
    Ok(DashboardExample {
        seq: tag.seq,
        position: tag.pos,
        tokens,
        activation,
        bias: sae.feature_bias(feature),
        dfa_by_source: dfa,
    })
}

/// Assemble one dashboard from precomputed activations.
pub fn dashboard_from(
    weights: &Weights,
    sae: &SaeParams,
    feature: usize,
    dataset: &TokenDataset,
    acts: &SparseActivations,
    k: usize,
) -> Result<DashboardRecord> {
    sae.check_attach(&weights.config)?;
    sae.check_feature(feature)?;
    let site = sae.site.expect("checked by check_attach");
    let col = acts.column(feature);
    let mut fired: Vec<(usize, f64)> = col.iter().copied().enumerate().filter(|(_, a)| *a > 0.0).collect();
    fired.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let example = |(row, a): (usize, f64)| dashboard_example(weights, sae, feature, dataset, acts.tags[row], a);
    let top_examples = fired.iter().take(k).map(|&e| example(e)).collect::<Result<Vec<_>>>()?;

    let mut quantiles = Vec::new();
    if let Some(&(_, max)) = fired.first() {
        let width = max / DASHBOARD_BINS as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(feature as u64);
        for b in 0..DASHBOARD_BINS {
            let (lo, hi) = (b as f64 * width, (b + 1) as f64 * width);
            let in_bin: Vec<(usize, f64)> = fired
                .iter()
                .copied()
                .filter(|(_, a)| *a > lo && (*a <= hi || b == DASHBOARD_BINS - 1))
                .collect();
            let mut picked: Vec<(usize, f64)> =
                in_bin.choose_multiple(&mut rng, EXAMPLES_PER_BIN).copied().collect();
            picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            quantiles.push(QuantileBin {
                lo,
                hi,
                examples: picked.into_iter().map(example).collect::<Result<Vec<_>>>()?,
            });
        }
    }

    let (head_attr, top_logits, bottom_logits) = if site.hook == Hook::ZCat {
        let h = head_attribution(sae, feature, weights.config.n_heads).unwrap_or_default();
        let dle = direct_logit_effect(weights, sae, feature, LOGIT_TOKENS)?;
        (h, dle.top, dle.bottom)
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    Ok(DashboardRecord {
        schema_version: SCHEMA_VERSION,
        site: site.to_string(),
        feature,
        n_positions: col.len(),
        n_fired: fired.len(),
        frequency: if col.is_empty() { 0.0 } else { fired.len() as f64 / col.len() as f64 },
        top_examples,
        quantiles,
        head_attribution: head_attr,
        top_logits,
        bottom_logits,
        histogram: activation_stats(&col, None, HISTOGRAM_BINS)?,
    })
}

pub fn export_dashboard(
    weights: &Weights,
    sae: &SaeParams,
    feature: usize,
    dataset: &TokenDataset,
    k: usize,
) -> Result<DashboardRecord> {
    let acts = SparseActivations::collect(weights, sae, dataset)?;
    dashboard_from(weights, sae, feature, dataset, &acts, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Interpretable,
    Not,
    Dead,
}

/// A human judgment about one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAnnotation {
    pub feature_id: usize,
    pub verdict: Verdict,
    #[serde(default)]
    pub note: String,
}

pub fn load_annotations(path: &Path) -> Result<Vec<FeatureAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Share of judged live features marked interpretable, with its exact interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpSummary {
    pub interpretable: u64,
    pub not_interpretable: u64,
    pub dead: u64,
    pub fraction: f64,
    pub interval: (f64, f64),
    pub alpha: f64,
}

pub fn summarize_annotations(annotations: &[FeatureAnnotation], alpha: f64) -> Result<InterpSummary> {
    let count = |v: Verdict| annotations.iter().filter(|a| a.verdict == v).count() as u64;
    let (yes, no, dead) = (count(Verdict::Interpretable), count(Verdict::Not), count(Verdict::Dead));
    let n = yes + no;
    if n == 0 {
        return Err(Error::InsufficientData("no live features were judged".into()));
    }
    Ok(InterpSummary {
        interpretable: yes,
        not_interpretable: no,
        dead,
        fraction: yes as f64 / n as f64,
        interval: clopper_pearson(yes, n, alpha)?,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_random_repeated, VecSource};
    use crate::model::{build_induction_model, build_random_model, ModelConfig, Site};

    #[test]
    fn l0_counts() {
        let mut sae = SaeParams::init(4, 6, 0);
        sae.pre_bias = false;
        sae.w_enc = Tensor::zeros(&[4, 6]);
        sae.b_enc = Tensor::vector(vec![1.0, 1.0, 1.0, -1.0, 0.0, -2.0]);
        let z = Tensor::zeros(&[5, 4]);
        assert_eq!(l0_metric(&sae, &z).unwrap(), 3.0);
        sae.b_enc = Tensor::zeros(&[6]);
        assert_eq!(l0_metric(&sae, &z).unwrap(), 0.0);

        let sae = SaeParams::init(4, 6, 3);
        let z = Tensor::from_fn(&[9, 4], |ix| ((ix[0] * 7 + ix[1] * 3) % 5) as f64 - 2.0);
        let mut count = 0;
        for r in 0..9 {
            count += sae.encode(z.row(r)).unwrap().iter().filter(|v| **v > 0.0).count();
        }
        assert_eq!(l0_metric(&sae, &z).unwrap(), count as f64 / 9.0);
    }

    #[test]
    fn loss_recovered_cases() {
        assert_eq!(loss_recovered(2.0, 2.0, 4.0).unwrap(), 1.0);
        assert_eq!(loss_recovered(2.0, 4.0, 4.0).unwrap(), 0.0);
        assert_eq!(loss_recovered(2.0, 5.0, 4.0).unwrap(), -0.5);
        assert!(matches!(loss_recovered(2.0, 3.0, 2.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn clopper_pearson_values() {
        let (lo, hi) = clopper_pearson(20, 30, 0.05).unwrap();
        assert!((lo - 0.472).abs() < 1e-3 && (hi - 0.827).abs() < 1e-3);
        let (lo, hi) = clopper_pearson(30, 30, 0.05).unwrap();
        assert_eq!(hi, 1.0);
        assert!((lo - 0.025f64.powf(1.0 / 30.0)).abs() < 1e-9);
        let (lo, hi) = clopper_pearson(0, 30, 0.05).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - (1.0 - 0.025f64.powf(1.0 / 30.0))).abs() < 1e-9);
        assert!(clopper_pearson(31, 30, 0.05).is_err());
        assert!(clopper_pearson(1, 30, 1.0).is_err());
    }

    #[test]
    fn clopper_pearson_monotone() {
        let mut prev = (0.0, 0.0);
        for x in 0..=30 {
            let (lo, hi) = clopper_pearson(x, 30, 0.05).unwrap();
            assert!(lo >= prev.0 && hi >= prev.1 && lo <= hi);
            prev = (lo, hi);
        }
    }

    #[test]
    fn histogram_cases() {
        assert!(activation_stats(&[0.0, -1.0], None, 5).unwrap().is_empty());
        let acts = [0.1, 0.5, 0.0, 2.0, 1.3, 0.7];
        let st = activation_stats(&acts, Some(&[true; 6]), 4).unwrap();
        assert_eq!(st.counts.iter().sum::<u64>(), 5);
        assert_eq!(st.proxy_counts.as_ref().unwrap(), &st.counts);
        assert_eq!(st.proxy_ev.as_ref().unwrap(), &st.ev);
        let total: f64 = acts.iter().filter(|a| **a > 0.0).sum();
        assert!((st.ev.iter().sum::<f64>() - total).abs() < 1e-12);
        let half = activation_stats(&acts, Some(&[false, true, false, true, false, false]), 4).unwrap();
        assert_eq!(half.proxy_counts.unwrap().iter().sum::<u64>(), 2);
    }

    #[test]
    fn census_cases() {
        let mut sae = SaeParams::init(3, 4, 0);
        sae.pre_bias = false;
        sae.w_enc.data_mut().iter_mut().for_each(|v| *v = 0.0);
        sae.w_enc.data_mut()[2] = 1.0; // feature 2 reads input 0
        sae.b_enc = Tensor::vector(vec![0.0, 0.5, 0.0, -0.1]);
        let rows: Vec<Vec<f64>> = (0..300).map(|i| vec![(i % 3) as f64 - 1.0, 0.0, 1.0]).collect();
        let mut buf = ActivationBuffer::new(VecSource::new(rows.clone()).unwrap(), 64, 1).unwrap();
        let dead = dead_census(&sae, &mut buf, 200).unwrap();
        assert_eq!(dead, BTreeSet::from([0, 3]));
        let mut short = ActivationBuffer::new(VecSource::new(rows[..50].to_vec()).unwrap(), 16, 1).unwrap();
        assert!(matches!(dead_census(&sae, &mut short, 200), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn census_matches_recount() {
        let sae = SaeParams::init(4, 40, 9);
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|i| (0..4).map(|j| (((i * 13 + j * 7) % 17) as f64 - 8.0) / 8.0 - 0.9).collect())
            .collect();
        let mut buf = ActivationBuffer::new(VecSource::new(rows.clone()).unwrap(), 100, 2).unwrap();
        let dead = dead_census(&sae, &mut buf, 500).unwrap();
        let mut oracle = BTreeSet::new();
        for i in 0..40 {
            if rows.iter().all(|r| sae.encode(r).unwrap()[i] <= 0.0) {
                oracle.insert(i);
            }
        }
        assert_eq!(dead, oracle);
    }

    fn exact_sae(d: usize, site: Site) -> SaeParams {
        // ±identity pairs reconstruct any input exactly
        let mut sae = SaeParams::init(d, 2 * d, 0).with_site(site);
        sae.pre_bias = false;
        sae.b_dec = Tensor::zeros(&[d]);
        sae.b_enc = Tensor::zeros(&[2 * d]);
        sae.w_enc = Tensor::from_fn(&[d, 2 * d], |ix| {
            if ix[1] == ix[0] {
                1.0
            } else if ix[1] == ix[0] + d {
                -1.0
            } else {
                0.0
            }
        });
        sae.w_dec = sae.w_enc.transpose();
        sae
    }

    #[test]
    fn identity_splice_matches_clean() {
        let w = build_induction_model(26, 8, 10.0).unwrap();
        let ds = gen_random_repeated(6, 8, 26, 1).unwrap();
        let sae = exact_sae(w.config.d_model, Site::z(1));
        let ev = splice_eval(&w, &sae, &ds).unwrap();
        assert!((ev.ce_spliced - ev.ce_clean).abs() < 1e-6);
        assert!(ev.ce_zero > ev.ce_clean);
        assert_eq!(ev.tokens_evaluated, 6 * 7);
        let rep = evaluate(&w, &sae, &ds).unwrap();
        assert!((rep.loss_recovered - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let w = build_induction_model(6, 8, 10.0).unwrap();
        let ds = gen_random_repeated(2, 8, 6, 1).unwrap();
        let sae = SaeParams::init(10, 20, 0).with_site(Site::z(1));
        assert!(splice_eval(&w, &sae, &ds).is_err());
    }

    fn dash_setup() -> (Weights, SaeParams, TokenDataset) {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 0,
            vocab: 9,
            max_seq: 10,
            eps: 1e-5,
        };
        let w = build_random_model(&cfg, 4).unwrap();
        let ds = gen_random_repeated(20, 10, 9, 3).unwrap();
        let sae = SaeParams::init(8, 12, 5).with_site(Site::z(1));
        (w, sae, ds)
    }

    #[test]
    fn dashboard_contract() {
        let (w, sae, ds) = dash_setup();
        let acts = SparseActivations::collect(&w, &sae, &ds).unwrap();
        let counts = acts.fire_counts();
        let f = (0..12).max_by_key(|&i| counts[i]).unwrap();
        let rec = dashboard_from(&w, &sae, f, &ds, &acts, 20).unwrap();
        assert_eq!(rec.top_examples.len(), 20.min(rec.n_fired));
        for pair in rec.top_examples.windows(2) {
            assert!(pair[0].activation >= pair[1].activation);
        }
        let all = rec.top_examples.iter().chain(rec.quantiles.iter().flat_map(|q| q.examples.iter()));
        for ex in all {
            let s: f64 = ex.dfa_by_source.iter().sum();
            assert!((s - (ex.activation - ex.bias)).abs() < 1e-6 * ex.activation.abs().max(1.0));
            assert!(ex.dfa_by_source.len() == ex.position + 1);
        }
        assert_eq!(rec.quantiles.len(), DASHBOARD_BINS);
        assert!(rec.quantiles.iter().all(|q| q.examples.len() <= EXAMPLES_PER_BIN));
        assert!((rec.head_attribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let json = serde_json::to_string(&rec).unwrap();
        let back: DashboardRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.feature, f);
    }

    #[test]
    fn dashboard_of_dead_feature() {
        let (w, mut sae, ds) = dash_setup();
        sae.b_enc.data_mut()[3] = -1e6;
        let rec = export_dashboard(&w, &sae, 3, &ds, 20).unwrap();
        assert!(rec.top_examples.is_empty() && rec.quantiles.is_empty());
        assert_eq!(rec.frequency, 0.0);
        assert!(rec.histogram.is_empty());
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.json");
        let mut v: Vec<FeatureAnnotation> = (0..20)
            .map(|i| FeatureAnnotation {
                feature_id: i,
                verdict: Verdict::Interpretable,
                note: String::new(),
            })
            .collect();
        for a in v.iter_mut().take(10).skip(2) {
            a.verdict = Verdict::Not;
        }
        v.push(FeatureAnnotation {
            feature_id: 99,
            verdict: Verdict::Dead,
            note: "never fires".into(),
        });
        fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
        let back = load_annotations(&p).unwrap();
        assert_eq!(back, v);
        let s = summarize_annotations(&back, 0.05).unwrap();
        assert_eq!((s.interpretable, s.not_interpretable, s.dead), (12, 8, 1));
        assert_eq!(s.interval, clopper_pearson(12, 20, 0.05).unwrap());
        fs::write(&p, "[{\"feature_id\": 1, \"verdict\": \"maybe\"}]").unwrap();
        assert!(matches!(load_annotations(&p), Err(Error::Format(_))));
    }
}
