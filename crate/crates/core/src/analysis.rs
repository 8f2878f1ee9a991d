// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature-family checks and causal experiments: token-pattern proxies,
//! induction heuristics, induction scores, and zero-ablation / patching.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{direct_logit_effect, head_attribution};
use crate::corpus::{gen_prefix_induction, TokenDataset};
use crate::error::{Error, Result};
use crate::metrics::{activation_stats, next_token_ce_sum, SparseActivations};
use crate::model::{forward, forward_spliced, forward_until, HookedTrace, Override, Site, Splice, Weights};
use crate::numerics::Tensor;
use crate::sae::SaeParams;

/// A predicate over `(sequence, position)` describing where a feature is
/// expected to fire.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Proxy {
    /// Never true.
    Never,
    /// True when, for every offset, the token at `pos + offset` is in `tokens`.
    TokenAt { tokens: BTreeSet<u32>, offsets: Vec<isize> },
    /// True at `q` when the token at `q` occurred earlier at `p` and was followed
    /// by a token at `p + 1 < q`; with `target`, that follower must be `target`.
    Induction { target: Option<u32> },
    /// True within `n` positions after a trigger token (inclusive of the trigger),
    /// unless a stop token intervenes.
    AfterToken {
        triggers: BTreeSet<u32>,
        n: usize,
        stop: BTreeSet<u32>,
    },
    /// True exactly at the listed `(sequence index, position)` pairs.
    Positions(BTreeSet<(usize, usize)>),
}

impl Proxy {
    pub fn eval(&self, seq_idx: usize, seq: &[u32], pos: usize) -> bool {
        match self {
            Proxy::Never => false,
            Proxy::TokenAt { tokens, offsets } => offsets.iter().all(|&o| {
                let p = pos as isize + o;
                p >= 0 && (p as usize) < seq.len() && tokens.contains(&seq[p as usize])
            }),
            Proxy::Induction { target } => (0..pos.saturating_sub(1))
                .any(|p| seq[p] == seq[pos] && target.is_none_or(|t| seq[p + 1] == t)),
            Proxy::AfterToken { triggers, n, stop } => {
                for back in 0..=(*n).min(pos) {
                    let t = seq[pos - back];
                    if triggers.contains(&t) {
                        return true;
                    }
                    if stop.contains(&t) {
                        return false;
                    }
                }
                false
            }
            Proxy::Positions(set) => set.contains(&(seq_idx, pos)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyBin {
    pub lo: f64,
    pub hi: f64,
    /// Firings where the proxy holds.
    pub tp: u64,
    /// Firings where it does not.
    pub fp: u64,
    /// Sum of activations over each group.
    pub ev_tp: f64,
    pub ev_fp: f64,
}

impl ProxyBin {
    /// Fraction of this bin's firings explained by the proxy; `None` when empty.
    pub fn specificity(&self) -> Option<f64> {
        let n = self.tp + self.fp;
        (n > 0).then(|| self.tp as f64 / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FalseNegative {
    pub seq: usize,
    pub position: usize,
    /// Tokens around the position, clipped to the sequence.
    pub context: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub feature: usize,
    pub proxy: Proxy,
    pub bins: Vec<ProxyBin>,
    pub firings: u64,
    pub tp: u64,
    pub fp: u64,
    pub false_negatives: Vec<FalseNegative>,
    /// Proxy-true positions overall.
    pub proxy_true: u64,
    /// Share of total activation mass on proxy-true firings.
    pub ev_fraction_proxy: Option<f64>,
}

/// Tokens either side of a false negative kept in its context window.
pub const FN_CONTEXT: usize = 5;

/// Classify every firing of `feature` against `proxy` and list proxy-true
/// positions where it stayed silent.
pub fn proxy_report(
    weights: &Weights,
    sae: &SaeParams,
    feature: usize,
    proxy: &Proxy,
    dataset: &TokenDataset,
    n_bins: usize,
) -> Result<ProxyReport> {
    sae.check_feature(feature)?;
    let acts = SparseActivations::collect(weights, sae, dataset)?;
    proxy_report_from(&acts, feature, proxy, dataset, n_bins)
}

/// [`proxy_report`] over activations already collected on `dataset`.
pub fn proxy_report_from(
    acts: &SparseActivations,
    feature: usize,
    proxy: &Proxy,
    dataset: &TokenDataset,
    n_bins: usize,
) -> Result<ProxyReport> {
    if feature >= acts.d_sae {
        return Err(Error::OutOfRange(format!("feature {feature} of {}", acts.d_sae)));
    }
    let col = acts.column(feature);
    let labels: Vec<bool> = acts
        .tags
        .iter()
        .map(|t| proxy.eval(t.seq, &dataset.sequences[t.seq], t.pos))
        .collect();
    let st = activation_stats(&col, Some(&labels), n_bins)?;
    let (pc, pe) = (st.proxy_counts.clone().unwrap_or_default(), st.proxy_ev.clone().unwrap_or_default());
    let bins: Vec<ProxyBin> = (0..st.counts.len())
        .map(|b| ProxyBin {
            lo: st.bin_edges[b],
            hi: st.bin_edges[b + 1],
            tp: pc[b],
            fp: st.counts[b] - pc[b],
            ev_tp: pe[b],
            ev_fp: st.ev[b] - pe[b],
        })
        .collect();
    let false_negatives = acts
        .tags
        .iter()
        .zip(&col)
        .zip(&labels)
        .filter(|((_, a), l)| **l && **a <= 0.0)
        .map(|((t, _), _)| {
            let seq = &dataset.sequences[t.seq];
            let lo = t.pos.saturating_sub(FN_CONTEXT);
            let hi = (t.pos + FN_CONTEXT + 1).min(seq.len());
            FalseNegative {
                seq: t.seq,
                position: t.pos,
                context: seq[lo..hi].to_vec(),
            }
        })
        .collect();
    let tp: u64 = bins.iter().map(|b| b.tp).sum();
    let fp: u64 = bins.iter().map(|b| b.fp).sum();
    let ev_tp: f64 = bins.iter().map(|b| b.ev_tp).sum();
    let ev_all: f64 = st.ev.iter().sum();
    Ok(ProxyReport {
        feature,
        proxy: proxy.clone(),
        bins,
        firings: tp + fp,
        tp,
        fp,
        false_negatives,
        proxy_true: labels.iter().filter(|l| **l).count() as u64,
        ev_fraction_proxy: (ev_all > 0.0).then(|| ev_tp / ev_all),
    })
}

/// Live features whose weight-based attribution to `head` is at least `threshold`.
/// Features with an all-zero decoder row are skipped.
pub fn induction_candidates(
    sae: &SaeParams,
    head: usize,
    n_heads: usize,
    threshold: f64,
    live: Option<&[bool]>,
) -> Result<Vec<usize>> {
    if head >= n_heads {
        return Err(Error::OutOfRange(format!("head {head} of {n_heads}")));
    }
    if live.is_some_and(|l| l.len() != sae.d_sae()) {
        return Err(Error::Shape("live mask length differs from d_sae".into()));
    }
    let mut out = Vec::new();
    for i in 0..sae.d_sae() {
        if live.is_some_and(|l| !l[i]) {
            continue;
        }
        match head_attribution(sae, i, n_heads) {
            Ok(h) if h[head] >= threshold => out.push(i),
            Ok(_) | Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    /// No sampled sequence offered an opportunity to test the feature.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionPassRate {
    pub feature: usize,
    /// Most boosted token by the direct logit effect.
    pub token: u32,
    pub sampled: usize,
    pub unique_sequences: usize,
    /// First occurrences of a bigram `(A, token)` inspected.
    pub first_checks: u64,
    /// First occurrences where the feature already fired on `A`.
    pub first_violations: u64,
    /// Repeat occurrences where the feature should fire on `A`.
    pub obligations: u64,
    /// Obligations met, counted only in sequences with no first-occurrence violation.
    pub satisfied: u64,
    pub rate: Option<f64>,
    pub outcome: Outcome,
}

/// Pass threshold on the induction pass rate.
pub const PASS_RATE: f64 = 0.6;

/// Behavioral induction check on a `z_cat` feature.
///
/// Takes the token `t` the feature most boosts, samples `n_examples` sequences
/// containing `t` (with replacement), and for each occurrence of `t` with
/// predecessor `A`: the first `(A, t)` in a sequence must not fire on `A`;
/// every later one must. The rate is met obligations over all obligations,
/// where a sequence that violated the first condition meets none.
/// Activation must exceed `fire_threshold` to count as firing.
pub fn induction_pass_rate(
    weights: &Weights,
    sae: &SaeParams,
    feature: usize,
    dataset: &TokenDataset,
    n_examples: usize,
    fire_threshold: f64,
    seed: u64,
) -> Result<InductionPassRate> {
    sae.check_attach(&weights.config)?;
    let site = sae.site.expect("checked by check_attach");
    let token = direct_logit_effect(weights, sae, feature, 1)?
        .argmax()
        .ok_or_else(|| Error::Degenerate("empty vocabulary".into()))?;
    let pool: Vec<usize> = (0..dataset.len())
        .filter(|&s| dataset.sequences[s].iter().skip(1).any(|&t| t == token))
        .collect();
    let mut res = InductionPassRate {
        feature,
        token,
        sampled: 0,
        unique_sequences: 0,
        first_checks: 0,
        first_violations: 0,
        obligations: 0,
        satisfied: 0,
        rate: None,
        outcome: Outcome::Inconclusive,
    };
    if pool.is_empty() || n_examples == 0 {
        return Ok(res);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..n_examples).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
    res.sampled = picks.len();
    res.unique_sequences = picks.iter().collect::<BTreeSet<_>>().len();
    for s in picks {
        let seq = &dataset.sequences[s];
        let tr = forward_until(weights, seq, site.layer)?;
        let f = sae.encode_batch(tr.site(site)?)?;
        let fires = |p: usize| f.at(p, feature) > fire_threshold;
        let mut seen = BTreeSet::new();
        let (mut violated, mut met, mut owed) = (false, 0u64, 0u64);
        for p in 1..seq.len() {
            if seq[p] != token {
                continue;
            }
            let a = seq[p - 1];
            if seen.insert(a) {
                res.first_checks += 1;
                if fires(p - 1) {
                    violated = true;
                    res.first_violations += 1;
                }
            } else {
                owed += 1;
                met += fires(p - 1) as u64;
            }
        }
        res.obligations += owed;
        if !violated {
            res.satisfied += met;
        }
    }
    if res.obligations > 0 {
        let rate = res.satisfied as f64 / res.obligations as f64;
        res.rate = Some(rate);
        res.outcome = if rate > PASS_RATE { Outcome::Pass } else { Outcome::Fail };
    }
    Ok(res)
}

/// Mean attention from each annotated query to its induction target source.
pub fn induction_score(weights: &Weights, layer: usize, head: usize, dataset: &TokenDataset) -> Result<f64> {
    if head >= weights.config.n_heads {
        return Err(Error::OutOfRange(format!("head {head} of {}", weights.config.n_heads)));
    }
    if !dataset.is_annotated() || dataset.annotated().next().is_none() {
        return Err(Error::InvalidArgument("induction score needs an annotated dataset".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (s, seq) in dataset.sequences.iter().enumerate() {
        if dataset.annotations[s].is_empty() {
            continue;
        }
        let tr = forward_until(weights, seq, layer)?;
        let pat = &tr.layer(layer)?.pattern[head];
        for a in &dataset.annotations[s] {
            if a.query_pos >= seq.len() || a.target_source_pos > a.query_pos {
                return Err(Error::OutOfRange(format!(
                    "annotation ({}, {}) in sequence {s} of length {}",
                    a.query_pos,
                    a.target_source_pos,
                    seq.len()
                )));
            }
            sum += pat.at(a.query_pos, a.target_source_pos);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub prefix_len: usize,
    pub score: f64,
}

/// Induction score on freshly generated prefix-matching data for each length.
pub fn prefix_sweep(
    weights: &Weights,
    layer: usize,
    head: usize,
    prefix_lens: &[usize],
    n: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    prefix_lens
        .iter()
        .map(|&k| {
            let ds = gen_prefix_induction(n, k, seq_len, weights.config.vocab, seed.wrapping_add(k as u64))?;
            Ok(SweepPoint {
                prefix_len: k,
                score: induction_score(weights, layer, head, &ds)?,
            })
        })
        .collect()
}

/// What an experiment measures on a single forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    /// Mean next-token cross-entropy in nats.
    Loss,
    /// `logit[a] - logit[b]` at `position`.
    LogitDiff { position: usize, a: u32, b: u32 },
    Logit { position: usize, token: u32 },
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Loss => "loss".into(),
            Metric::LogitDiff { position, a, b } => format!("logit_diff(pos={position}, {a}, {b})"),
            Metric::Logit { position, token } => format!("logit(pos={position}, {token})"),
        }
    }

    pub fn eval(&self, trace: &HookedTrace) -> Result<f64> {
        match *self {
            Metric::Loss => {
                let t = trace.seq_len();
                if t < 2 {
                    return Err(Error::InsufficientData("loss needs at least two tokens".into()));
                }
                Ok(next_token_ce_sum(trace) / (t - 1) as f64)
            }
            Metric::LogitDiff { position, a, b } => {
                trace.check_position(position)?;
                logit_diff(trace.logits_at(position), a, b)
            }
            Metric::Logit { position, token } => {
                trace.check_position(position)?;
                let l = trace.logits_at(position);
                l.get(token as usize)
                    .copied()
                    .ok_or_else(|| Error::OutOfRange(format!("token {token} >= vocab {}", l.len())))
            }
        }
    }
}

pub fn logit_diff(logits: &[f64], a: u32, b: u32) -> Result<f64> {
    let v = logits.len();
    match (logits.get(a as usize), logits.get(b as usize)) {
        (Some(x), Some(y)) => Ok(x - y),
        _ => Err(Error::OutOfRange(format!("tokens ({a}, {b}) with vocab {v}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Features { site: Site, ids: Vec<usize> },
    Head { layer: usize, head: usize },
    Patch { site: Site, positions: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub target: Target,
    pub metric: String,
    pub clean: f64,
    pub ablated: f64,
    /// `ablated - clean`
    pub delta: f64,
}

impl AblationResult {
    fn new(target: Target, metric: &Metric, clean: f64, ablated: f64) -> Self {
        Self {
            target,
            metric: metric.name(),
            clean,
            ablated,
            delta: ablated - clean,
        }
    }
}

/// Which pieces of `z = sum_j f_j d_j + b_dec + err` to remove before splicing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub features: Vec<usize>,
    pub bias: bool,
    pub error: bool,
}

fn ablate_terms(sae: &SaeParams, z: &Tensor, terms: &Terms) -> Result<Tensor> {
    for &i in &terms.features {
        sae.check_feature(i)?;
    }
    let f = sae.encode_batch(z)?;
    let mut out = z.clone();
    for r in 0..z.rows() {
        let row = out.row_mut(r);
        if terms.error {
            let recon = sae.decode(f.row(r))?;
            for (o, (x, y)) in row.iter_mut().zip(z.row(r).iter().zip(&recon)) {
                *o -= x - y;
            }
        }
        for &i in &terms.features {
            let a = f.at(r, i);
            if a != 0.0 {
                for (o, d) in row.iter_mut().zip(sae.decoder_row(i)) {
                    *o -= a * d;
                }
            }
        }
        if terms.bias {
            for (o, b) in row.iter_mut().zip(sae.b_dec.data()) {
                *o -= b;
            }
        }
    }
    Ok(out)
}

/// Remove the chosen terms of the SAE decomposition at every position and
/// rerun with patterns and LayerNorm scales free.
pub fn ablate_sae_terms(
    weights: &Weights,
    sae: &SaeParams,
    terms: &Terms,
    tokens: &[u32],
    metric: &Metric,
) -> Result<AblationResult> {
    sae.check_attach(&weights.config)?;
    let site = sae.site.expect("checked by check_attach");
    let clean = forward(weights, tokens)?;
    let z = ablate_terms(sae, clean.site(site)?, terms)?;
    let splice = Splice {
        overrides: vec![Override::all_positions(site, z)],
        ..Splice::default()
    };
    let ablated = forward_spliced(weights, tokens, &splice)?;
    Ok(AblationResult::new(
        Target::Features {
            site,
            ids: terms.features.clone(),
        },
        metric,
        metric.eval(&clean)?,
        metric.eval(&ablated)?,
    ))
}

/// Zero-ablate one feature's term.
pub fn zero_ablate_feature(
    weights: &Weights,
    sae: &SaeParams,
    feature: usize,
    tokens: &[u32],
    metric: &Metric,
) -> Result<AblationResult> {
    zero_ablate_features(weights, sae, &[feature], tokens, metric)
}

pub fn zero_ablate_features(
    weights: &Weights,
    sae: &SaeParams,
    features: &[usize],
    tokens: &[u32],
    metric: &Metric,
) -> Result<AblationResult> {
    let terms = Terms {
        features: features.to_vec(),
        ..Terms::default()
    };
    ablate_sae_terms(weights, sae, &terms, tokens, metric)
}

/// Run `corrupt`, copy its activations at `site` and `positions` into a run on
/// `clean`, and report the metric change.
pub fn patch_site(
    weights: &Weights,
    clean: &[u32],
    corrupt: &[u32],
    site: Site,
    positions: &[usize],
    metric: &Metric,
) -> Result<AblationResult> {
    if clean.len() != corrupt.len() {
        return Err(Error::Shape(format!(
            "clean prompt has {} tokens, corrupt prompt {}",
            clean.len(),
            corrupt.len()
        )));
    }
    site.check(&weights.config)?;
    let clean_tr = forward(weights, clean)?;
    let corrupt_tr = forward(weights, corrupt)?;
    let src = corrupt_tr.site(site)?;
    let mut values = Vec::with_capacity(positions.len() * src.cols());
    for &p in positions {
        corrupt_tr.check_position(p)?;
        values.extend_from_slice(src.row(p));
    }
    let splice = Splice {
        overrides: vec![Override {
            site,
            positions: positions.to_vec(),
            values: Tensor::new(vec![positions.len(), src.cols()], values)?,
        }],
        ..Splice::default()
    };
    let patched = forward_spliced(weights, clean, &splice)?;
    Ok(AblationResult::new(
        Target::Patch {
            site,
            positions: positions.to_vec(),
        },
        metric,
        metric.eval(&clean_tr)?,
        metric.eval(&patched)?,
    ))
}

/// Zero each head's `z` slice in `layer` in turn; report the mean loss change
/// over `dataset`.
pub fn head_ablation_sweep(weights: &Weights, layer: usize, dataset: &TokenDataset) -> Result<Vec<AblationResult>> {
    let cfg = &weights.config;
    let site = Site::z(layer);
    site.check(cfg)?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    let mut clean = 0.0;
    let mut ablated = vec![0.0; cfg.n_heads];
    for seq in &dataset.sequences {
        let tr = forward(weights, seq)?;
        clean += Metric::Loss.eval(&tr)?;
        let z = tr.site(site)?;
        for (h, acc) in ablated.iter_mut().enumerate() {
            let mut zh = z.clone();
            for r in 0..zh.rows() {
                zh.row_mut(r)[h * cfg.d_head..(h + 1) * cfg.d_head].fill(0.0);
            }
            let splice = Splice {
                overrides: vec![Override::all_positions(site, zh)],
                ..Splice::default()
            };
            *acc += Metric::Loss.eval(&forward_spliced(weights, seq, &splice)?)?;
        }
    }
    let n = dataset.len() as f64;
    Ok(ablated
        .into_iter()
        .enumerate()
        .map(|(head, a)| AblationResult::new(Target::Head { layer, head }, &Metric::Loss, clean / n, a / n))
        .collect())
}

/// Largest delta divided by the absolute median delta (`inf` when the median is zero).
pub fn dominance_over_median(results: &[AblationResult]) -> Option<(usize, f64)> {
    if results.is_empty() {
        return None;
    }
    let mut d: Vec<f64> = results.iter().map(|r| r.delta).collect();
    let (top, max) = d
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty");
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    Some((top, if median == 0.0 { f64::INFINITY } else { max / median.abs() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corrupt_dataset, gen_random_repeated};
    use crate::model::{build_induction_model, build_long_prefix_model, InductionLayout, LongPrefixLayout};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::seq::SliceRandom;

    const V: usize = 26;
    const T: usize = 16;

    fn fixture() -> Weights {
        build_induction_model(V, T, 10.0).unwrap()
    }

    /// Three features on layer-1 `z_cat`, all writing the induction head's
    /// coordinate for `token`: 0 fires when induction predicts `token`,
    /// 1 never fires, 2 fires everywhere.
    fn constructed_sae(w: &Weights, token: u32) -> SaeParams {
        let d_in = w.config.n_heads * w.config.d_head;
        let (_, h) = InductionLayout::new(V, T).induction_head;
        let coord = h * w.config.d_head + token as usize;
        let mut sae = SaeParams::init(d_in, 3, 0).with_site(Site::z(1));
        sae.pre_bias = false;
        sae.w_enc = Tensor::zeros(&[d_in, 3]);
        sae.w_dec = Tensor::zeros(&[3, d_in]);
        for i in 0..3 {
            sae.w_dec.row_mut(i)[coord] = 1.0;
        }
        sae.w_enc.data_mut()[coord * 3] = 1.0;
        sae.b_enc = Tensor::vector(vec![-0.3, -100.0, 1.0]);
        sae
    }

    /// Repeated sequences whose first half has distinct tokens.
    fn distinct_repeated(n: usize, seed: u64) -> TokenDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<u32> = (0..V as u32).collect();
        let seqs = (0..n)
            .map(|_| {
                let half: Vec<u32> = all.choose_multiple(&mut rng, T / 2).copied().collect();
                half.iter().chain(&half).copied().collect()
            })
            .collect();
        TokenDataset::new(T, V, "distinct", seqs).unwrap()
    }

    #[test]
    fn proxy_predicates() {
        let seq = [1, 2, 3, 1, 2, 4, 1];
        let at = Proxy::TokenAt {
            tokens: [1].into(),
            offsets: vec![-1],
        };
        assert!(at.eval(0, &seq, 1) && !at.eval(0, &seq, 0) && !at.eval(0, &seq, 2));
        let ind = Proxy::Induction { target: Some(2) };
        let hits: Vec<usize> = (0..seq.len()).filter(|&p| ind.eval(0, &seq, p)).collect();
        assert_eq!(hits, vec![3, 6]);
        let any = Proxy::Induction { target: None };
        assert!(any.eval(0, &seq, 4) && !any.eval(0, &seq, 5));
        let win = Proxy::AfterToken {
            triggers: [3].into(),
            n: 2,
            stop: [2].into(),
        };
        let hits: Vec<usize> = (0..seq.len()).filter(|&p| win.eval(0, &seq, p)).collect();
        assert_eq!(hits, vec![2, 3]);
        assert!(!Proxy::Never.eval(0, &seq, 0));
    }

    #[test]
    fn self_proxy_and_empty_proxy() {
        let w = fixture();
        let ds = gen_random_repeated(20, T, V, 3).unwrap();
        let sae = SaeParams::init(4 * w.config.d_head, 16, 5).with_site(Site::z(1));
        let acts = SparseActivations::collect(&w, &sae, &ds).unwrap();
        let i = (0..16).max_by_key(|&i| acts.fire_counts()[i]).unwrap();
        let col = acts.column(i);
        let own: BTreeSet<(usize, usize)> = acts
            .tags
            .iter()
            .zip(&col)
            .filter(|(_, a)| **a > 0.0)
            .map(|(t, _)| (t.seq, t.pos))
            .collect();
        assert!(!own.is_empty());
        let r = proxy_report_from(&acts, i, &Proxy::Positions(own.clone()), &ds, 10).unwrap();
        assert_eq!((r.fp, r.tp, r.false_negatives.len()), (0, own.len() as u64, 0));
        assert_eq!(r.ev_fraction_proxy, Some(1.0));
        let r = proxy_report_from(&acts, i, &Proxy::Never, &ds, 10).unwrap();
        assert_eq!((r.tp, r.fp, r.false_negatives.len()), (0, own.len() as u64, 0));
    }

    #[test]
    fn induction_proxy_specificity_on_constructed_feature() {
        let w = fixture();
        let sae = constructed_sae(&w, 7);
        let ds = distinct_repeated(60, 2);
        let r = proxy_report(&w, &sae, 0, &Proxy::Induction { target: Some(7) }, &ds, 5).unwrap();
        assert!(r.firings > 0);
        let top = r.bins.iter().rev().find(|b| b.tp + b.fp > 0).unwrap();
        assert!(top.specificity().unwrap() >= 0.9);
        assert_eq!(r.tp + r.fp, r.firings);
        for f in &r.false_negatives {
            let seq = &ds.sequences[f.seq];
            assert!(Proxy::Induction { target: Some(7) }.eval(f.seq, seq, f.position));
        }
    }

    #[test]
    fn candidates_by_threshold() {
        let d_head = 3;
        let mut sae = SaeParams::init(4 * d_head, 3, 0);
        sae.w_dec = Tensor::zeros(&[3, 12]);
        sae.w_dec.row_mut(0)[4] = 1.0;
        sae.w_dec.row_mut(1).fill(0.5 / 3f64.sqrt());
        sae.w_dec.row_mut(2)[3..6].copy_from_slice(&[0.6, 0.0, 0.0]);
        sae.w_dec.row_mut(2)[9] = 0.8;
        for t in [0.0, 0.3, 1.0] {
            assert!(induction_candidates(&sae, 1, 4, t, None).unwrap().contains(&0));
        }
        assert_eq!(induction_candidates(&sae, 1, 4, 0.6, None).unwrap(), vec![0]);
        assert_eq!(induction_candidates(&sae, 1, 4, 0.0, None).unwrap(), vec![0, 1, 2]);
        assert_eq!(
            induction_candidates(&sae, 1, 4, 0.0, Some(&[true, false, true])).unwrap(),
            vec![0, 2]
        );
    }

    proptest! {
        #[test]
        fn candidates_match_scan(seed in 0u64..500, t in 0.0f64..1.0, head in 0usize..4) {
            let sae = SaeParams::init(12, 20, seed);
            let got = induction_candidates(&sae, head, 4, t, None).unwrap();
            let want: Vec<usize> = (0..20)
                .filter(|&i| head_attribution(&sae, i, 4).unwrap()[head] >= t)
                .collect();
            prop_assert_eq!(&got, &want);
            let tighter = induction_candidates(&sae, head, 4, (t + 0.1).min(1.0), None).unwrap();
            prop_assert!(tighter.iter().all(|i| got.contains(i)));
        }
    }

    #[test]
    fn pass_rate_on_constructed_features() {
        let w = fixture();
        let sae = constructed_sae(&w, 7);
        let ds = distinct_repeated(300, 4);
        let good = induction_pass_rate(&w, &sae, 0, &ds, 200, 0.0, 1).unwrap();
        assert_eq!(good.token, 7);
        assert!(good.obligations > 0);
        assert_eq!(good.rate, Some(1.0));
        assert_eq!(good.outcome, Outcome::Pass);
        assert!(good.unique_sequences <= good.sampled);

        let never = induction_pass_rate(&w, &sae, 1, &ds, 200, 0.0, 1).unwrap();
        assert_eq!((never.rate, never.outcome), (Some(0.0), Outcome::Fail));

        let always = induction_pass_rate(&w, &sae, 2, &ds, 200, 0.0, 1).unwrap();
        assert!(always.first_violations > 0);
        assert!(always.rate.unwrap() < 1.0);

        let without: Vec<Vec<u32>> = ds.sequences.iter().filter(|s| !s.contains(&7)).cloned().collect();
        let without = TokenDataset::new(T, V, "no-7", without).unwrap();
        let none = induction_pass_rate(&w, &sae, 0, &without, 200, 0.0, 1).unwrap();
        assert_eq!((none.rate, none.outcome), (None, Outcome::Inconclusive));
    }

    #[test]
    fn induction_score_on_fixture() {
        let w = fixture();
        let (l, h) = InductionLayout::new(V, T).induction_head;
        // Short sequences keep accidental repeats inside the first half rare.
        let ds = gen_random_repeated(100, 8, V, 9).unwrap();
        let s = induction_score(&w, l, h, &ds).unwrap();
        assert!(s >= 0.9, "{s}");
        let bare = TokenDataset::new(8, V, "bare", ds.sequences.clone()).unwrap();
        assert!(matches!(induction_score(&w, l, h, &bare), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn uniform_head_scores_one_over_length() {
        // All-zero query/key weights give uniform causal attention.
        let w = fixture();
        let dead = InductionLayout::new(V, T).dead_head;
        let ds = gen_random_repeated(10, T, V, 1).unwrap();
        let want: f64 = ds.annotated().map(|(_, a)| 1.0 / (a.query_pos + 1) as f64).sum::<f64>()
            / ds.annotated().count() as f64;
        let got = induction_score(&w, dead.0, dead.1, &ds).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn prefix_sweep_is_flat_on_short_prefix_head() {
        let w = fixture();
        let (l, h) = InductionLayout::new(V, T).induction_head;
        let pts = prefix_sweep(&w, l, h, &[1, 2, 3, 4], 30, T, 0).unwrap();
        assert_eq!(pts.len(), 4);
        for p in &pts {
            assert!(p.score > 0.9, "{p:?}");
        }
    }

    #[test]
    fn corruption_hits_long_prefix_detector_only() {
        let lp = build_long_prefix_model(V, T, 10.0).unwrap();
        let (ll, lh) = LongPrefixLayout::new(V, T).detector_head;
        let ds = gen_prefix_induction(40, 3, T, V, 5).unwrap();
        let bad = corrupt_dataset(&ds, 6).unwrap();
        let (before, after) = (
            induction_score(&lp, ll, lh, &ds).unwrap(),
            induction_score(&lp, ll, lh, &bad).unwrap(),
        );
        assert!(after < before - 0.5, "{before} -> {after}");

        let w = fixture();
        let (l, h) = InductionLayout::new(V, T).induction_head;
        let (a, b) = (induction_score(&w, l, h, &ds).unwrap(), induction_score(&w, l, h, &bad).unwrap());
        assert!((a - b).abs() <= 0.1, "{a} -> {b}");
    }

    #[test]
    fn logit_diff_contract() {
        let l = [0.5, -1.0, 2.0];
        assert_eq!(logit_diff(&l, 1, 1).unwrap(), 0.0);
        assert_eq!(logit_diff(&l, 0, 2).unwrap(), -logit_diff(&l, 2, 0).unwrap());
        assert_eq!(logit_diff(&l, 2, 1).unwrap(), l[2] - l[1]);
        assert!(logit_diff(&l, 3, 0).is_err());
    }

    #[test]
    fn feature_ablation() {
        let w = fixture();
        let sae = constructed_sae(&w, 7);
        let seq = distinct_repeated(40, 8)
            .sequences
            .into_iter()
            .find(|s| s[1..T / 2].contains(&7))
            .unwrap();
        let src = seq.iter().position(|&t| t == 7).unwrap();
        let q = T / 2 + src - 1;
        let m = Metric::Logit { position: q, token: 7 };
        let r = zero_ablate_feature(&w, &sae, 0, &seq, &m).unwrap();
        assert!(r.delta < -1.0, "{r:?}");
        assert_eq!(r.delta, r.ablated - r.clean);

        let never = zero_ablate_feature(&w, &sae, 1, &seq, &m).unwrap();
        assert_eq!(never.delta, 0.0);

        let all = Terms {
            features: (0..3).collect(),
            bias: true,
            error: true,
        };
        let zero = ablate_sae_terms(&w, &sae, &all, &seq, &Metric::Loss).unwrap();
        let ds = TokenDataset::new(T, V, "one", vec![seq.clone()]).unwrap();
        let ev = crate::metrics::splice_eval(&w, &sae, &ds).unwrap();
        assert!((zero.ablated - ev.ce_zero).abs() < 1e-12);
    }

    #[test]
    fn ablations_compose() {
        let w = fixture();
        let sae = SaeParams::init(4 * w.config.d_head, 40, 2).with_site(Site::z(1));
        let seq = &gen_random_repeated(1, T, V, 3).unwrap().sequences[0];
        let tr = forward(&w, seq).unwrap();
        let z = tr.site(Site::z(1)).unwrap();
        let f = sae.encode_batch(z).unwrap();
        let (i, j) = {
            let fired: Vec<usize> = (0..40).filter(|&k| (0..T).any(|r| f.at(r, k) > 0.0)).collect();
            (fired[0], fired[1])
        };
        let both = ablate_terms(&sae, z, &Terms { features: vec![i, j], ..Terms::default() }).unwrap();
        let mut seq_z = z.clone();
        for k in [i, j] {
            for r in 0..T {
                let a = f.at(r, k);
                for (o, d) in seq_z.row_mut(r).iter_mut().zip(sae.decoder_row(k)) {
                    *o -= a * d;
                }
            }
        }
        assert!(both.max_abs_diff(&seq_z) < 1e-9);
        let m = Metric::Loss;
        let a = zero_ablate_features(&w, &sae, &[i, j], seq, &m).unwrap();
        let b = zero_ablate_features(&w, &sae, &[j, i], seq, &m).unwrap();
        assert!((a.delta - b.delta).abs() < 1e-9);
    }

    #[test]
    fn patching() {
        let w = fixture();
        let seq = distinct_repeated(1, 11).sequences.remove(0);
        let q = T - 2;
        let target = seq[q + 1];
        let m = Metric::Logit { position: q, token: target };
        let same = patch_site(&w, &seq, &seq, Site::z(1), &[q], &m).unwrap();
        assert_eq!(same.delta, 0.0);

        let mut corrupt = seq.clone();
        let fresh: Vec<u32> = (0..V as u32).filter(|t| !seq.contains(t)).collect();
        corrupt[T / 2..].copy_from_slice(&fresh[..T / 2]);
        let site = Site::new(1, crate::model::Hook::AttnOut);
        let r = patch_site(&w, &seq, &corrupt, site, &[q], &m).unwrap();
        assert!(r.delta < -4.0, "{r:?}");

        let future = patch_site(&w, &seq, &corrupt, site, &[q + 1], &m).unwrap();
        assert_eq!(future.delta, 0.0);
        assert!(patch_site(&w, &seq, &seq[1..], site, &[0], &m).is_err());
    }

    #[test]
    fn head_sweep_on_induction_data() {
        let w = fixture();
        let lay = InductionLayout::new(V, T);
        let ds = gen_random_repeated(30, T, V, 12).unwrap();
        let res = head_ablation_sweep(&w, 1, &ds).unwrap();
        assert_eq!(res.len(), 4);
        let (top, ratio) = dominance_over_median(&res).unwrap();
        assert_eq!(top, lay.induction_head.1);
        assert!(ratio >= 5.0, "{ratio}");
        assert_eq!(res[lay.dead_head.1].delta, 0.0);

        let sub = TokenDataset::new(T, V, "sub", ds.sequences[..10].to_vec()).unwrap();
        let again = head_ablation_sweep(&w, 1, &sub).unwrap();
        let rev: Vec<Vec<u32>> = sub.sequences.iter().rev().cloned().collect();
        let rev = head_ablation_sweep(&w, 1, &TokenDataset::new(T, V, "rev", rev).unwrap()).unwrap();
        for (a, b) in again.iter().zip(&rev) {
            assert!((a.delta - b.delta).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn score_is_a_probability(seed in 0u64..1000, head in 0usize..4) {
            let w = fixture();
            let ds = gen_random_repeated(2, T, V, seed).unwrap();
            let s = induction_score(&w, 1, head, &ds).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        }
    }
}
