// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear attribution of SAE features with attention patterns and LayerNorm
//! scales frozen: head attribution from decoder weights, direct feature
//! attribution by head and by source position, residual-stream decompositions,
//! recursive expansion, direct logit effects and QK feature lookup.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookedTrace, Hook, Site, Weights};
use crate::numerics::{dot, Tensor};
use crate::sae::SaeParams;

fn head_width(d_in: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || !d_in.is_multiple_of(n_heads) {
        return Err(Error::Shape(format!("d_in {d_in} does not split into {n_heads} heads")));
    }
    Ok(d_in / n_heads)
}

fn sae_layer(sae: &SaeParams, hook: Hook) -> Result<usize> {
    match sae.site {
        Some(s) if s.hook == hook => Ok(s.layer),
        Some(s) => Err(Error::InvalidArgument(format!(
            "SAE reads {s}, expected a {} site",
            Site::new(s.layer, hook)
        ))),
        None => Err(Error::InvalidArgument("SAE has no site descriptor".into())),
    }
}

/// Weight-based head attribution: the norm of each head's slice of the
/// decoder row, normalized to sum to one.
pub fn head_attribution(sae: &SaeParams, feature: usize, n_heads: usize) -> Result<Vec<f64>> {
    sae.check_feature(feature)?;
    let dh = head_width(sae.d_in(), n_heads)?;
    let norms: Vec<f64> = sae
        .decoder_row(feature)
        .chunks_exact(dh)
        .map(|s| dot(s, s).sqrt())
        .collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate(format!("feature {feature} has an all-zero decoder row")));
    }
    Ok(norms.into_iter().map(|n| n / total).collect())
}

/// Live features ranked by attribution to `head`, ties by ascending id.
/// `live = None` treats every feature with a nonzero decoder row as live.
pub fn top_features_for_head(
    sae: &SaeParams,
    head: usize,
    n_heads: usize,
    top_n: usize,
    live: Option<&[bool]>,
) -> Result<Vec<(usize, f64)>> {
    if head >= n_heads {
        return Err(Error::OutOfRange(format!("head {head} of {n_heads}")));
    }
    if live.is_some_and(|l| l.len() != sae.d_sae()) {
        return Err(Error::Shape("liveness mask length differs from d_sae".into()));
    }
    let mut scored = Vec::new();
    for i in 0..sae.d_sae() {
        if live.is_some_and(|l| !l[i]) {
            continue;
        }
        match head_attribution(sae, i, n_heads) {
            Ok(h) => scored.push((i, h[head])),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_n);
    Ok(scored)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Head,
    SourcePosition,
    ResidFeature,
    ResidComponent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub key: String,
    pub value: f64,
}

/// Additive breakdown of one quantity: `Σ contributions + remainder = total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfaBreakdown {
    pub feature: Option<usize>,
    pub dest: usize,
    pub source: Option<usize>,
    pub axis: Axis,
    pub contributions: Vec<Entry>,
    /// Bias terms, reported separately rather than spread over the contributions.
    pub remainder: f64,
    /// The quantity being decomposed, computed independently.
    pub total: f64,
}

impl DfaBreakdown {
    pub fn sum(&self) -> f64 {
        self.contributions.iter().map(|e| e.value).sum::<f64>() + self.remainder
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.contributions.iter().find(|e| e.key == key).map(|e| e.value)
    }

    pub fn values(&self) -> Vec<f64> {
        self.contributions.iter().map(|e| e.value).collect()
    }
}

fn check_zcat_trace(sae: &SaeParams, trace: &HookedTrace, dest: usize) -> Result<usize> {
    let layer = sae_layer(sae, Hook::ZCat)?;
    trace.layer(layer)?;
    trace.check_position(dest)?;
    if trace.layers[layer].z_cat.cols() != sae.d_in() {
        return Err(Error::Shape(format!(
            "SAE d_in {} vs z_cat width {}",
            sae.d_in(),
            trace.layers[layer].z_cat.cols()
        )));
    }
    Ok(layer)
}

/// DFA by head: `w_{i,k} · z_k` at `dest`, with the feature bias as remainder.
pub fn dfa_by_head(sae: &SaeParams, feature: usize, trace: &HookedTrace, dest: usize) -> Result<DfaBreakdown> {
    sae.check_feature(feature)?;
    let layer = check_zcat_trace(sae, trace, dest)?;
    let lt = &trace.layers[layer];
    let w = sae.encoder_column(feature);
    let dh = head_width(sae.d_in(), lt.z.len())?;
    let z = lt.z_cat.row(dest);
    let contributions = (0..lt.z.len())
        .map(|k| Entry {
            key: format!("head {k}"),
            value: dot(&w[k * dh..(k + 1) * dh], &z[k * dh..(k + 1) * dh]),
        })
        .collect();
    Ok(DfaBreakdown {
        feature: Some(feature),
        dest,
        source: None,
        axis: Axis::Head,
        contributions,
        remainder: sae.feature_bias(feature),
        total: sae.pre_activation(z)?[feature],
    })
}

/// DFA by source position: `Σ_k A_k[dest, s] · w_{i,k} · v_k[s]`, zero for `s > dest`.
pub fn dfa_by_source(sae: &SaeParams, feature: usize, trace: &HookedTrace, dest: usize) -> Result<DfaBreakdown> {
    sae.check_feature(feature)?;
    let layer = check_zcat_trace(sae, trace, dest)?;
    let lt = &trace.layers[layer];
    let w = sae.encoder_column(feature);
    let dh = head_width(sae.d_in(), lt.z.len())?;
    let mut values = vec![0.0; trace.seq_len()];
    for (s, val) in values.iter_mut().enumerate().take(dest + 1) {
        *val = (0..lt.z.len())
            .map(|k| lt.pattern[k].at(dest, s) * dot(&w[k * dh..(k + 1) * dh], lt.v[k].row(s)))
            .sum();
    }
    Ok(DfaBreakdown {
        feature: Some(feature),
        dest,
        source: None,
        axis: Axis::SourcePosition,
        contributions: values
            .into_iter()
            .enumerate()
            .map(|(s, value)| Entry {
                key: format!("pos {s}"),
                value,
            })
            .collect(),
        remainder: sae.feature_bias(feature),
        total: sae.pre_activation(lt.z_cat.row(dest))?[feature],
    })
}

/// Additive pieces of the residual stream entering `layer` at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidComponents {
    pub layer: usize,
    pub position: usize,
    pub parts: Vec<(String, Vec<f64>)>,
}

impl ResidComponents {
    pub fn sum(&self) -> Vec<f64> {
        let d = self.parts.first().map_or(0, |p| p.1.len());
        let mut out = vec![0.0; d];
        for (_, v) in &self.parts {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        }
        out
    }
}

/// `resid_pre` at `layer` (or the final residual when `layer == n_layers`) as
/// embed + pos + every upstream attention and MLP output.
pub fn resid_components(trace: &HookedTrace, layer: usize, position: usize) -> Result<ResidComponents> {
    if layer > trace.layers.len() {
        return Err(Error::OutOfRange(format!(
            "layer {layer} in a trace of {} layers",
            trace.layers.len()
        )));
    }
    trace.check_position(position)?;
    let mut parts = vec![
        ("embed".to_string(), trace.embed.row(position).to_vec()),
        ("pos".to_string(), trace.pos.row(position).to_vec()),
    ];
    for (l, lt) in trace.layers.iter().enumerate().take(layer) {
        parts.push((format!("attn_{l}"), lt.attn_out.row(position).to_vec()));
        if !lt.ln2_scale.is_empty() {
            parts.push((format!("mlp_{l}"), lt.mlp_out.row(position).to_vec()));
        }
    }
    Ok(ResidComponents { layer, position, parts })
}

/// Project each residual component onto `probe`.
pub fn dfa_by_resid_component(
    trace: &HookedTrace,
    layer: usize,
    position: usize,
    probe: &[f64],
) -> Result<DfaBreakdown> {
    let comps = resid_components(trace, layer, position)?;
    let resid = if layer == trace.layers.len() {
        trace.layers.last().map(|l| l.resid_post.row(position)).unwrap_or(comps.parts[0].1.as_slice())
    } else {
        trace.layers[layer].resid_pre.row(position)
    };
    if probe.len() != resid.len() {
        return Err(Error::Shape(format!("probe of length {} for width {}", probe.len(), resid.len())));
    }
    Ok(DfaBreakdown {
        feature: None,
        dest: position,
        source: Some(position),
        axis: Axis::ResidComponent,
        contributions: comps
            .parts
            .iter()
            .map(|(k, v)| Entry {
                key: k.clone(),
                value: dot(probe, v),
            })
            .collect(),
        remainder: 0.0,
        total: dot(probe, resid),
    })
}

/// `x · W` for `W: [rows × cols]`.
fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (xr, row) in x.iter().zip(w.chunks_exact(cols)) {
        if *xr != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, wv)| *o += xr * wv);
        }
    }
    out
}

/// `W · y` for `W: [rows × cols]`.
fn mat_vec(w: &[f64], cols: usize, y: &[f64]) -> Vec<f64> {
    w.chunks_exact(cols).map(|row| dot(row, y)).collect()
}

fn center(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// The residual-space functional equivalent to `u · LN(x)` under a frozen scale,
/// i.e. `g` with `u · (γ ⊙ (x - mean x) · scale) = g · x`.
fn through_frozen_ln(u: &[f64], gamma: &[f64], scale: f64) -> Vec<f64> {
    let mut g: Vec<f64> = u.iter().zip(gamma).map(|(a, b)| a * b * scale).collect();
    center(&mut g);
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    AttnFeature,
    SourcePosition,
    ResidFeature,
    Component,
    Token,
    Bias,
    Error,
}

/// What a node multiplies, kept so the node can be expanded later.
#[derive(Clone, Debug, Default, PartialEq)]
enum Probe {
    #[default]
    None,
    /// Scale on an attention feature's pre-activation.
    Coef(f64),
    /// Per-head `d_head` read vectors applied to value vectors.
    Heads(Vec<Option<Vec<f64>>>),
    /// Linear functional on the residual stream.
    Resid(Vec<f64>),
}

/// One node of a recursive attribution tree. `value` is this node's
/// contribution to the root; an expanded node's children sum to its value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdfaNode {
    pub kind: NodeKind,
    pub label: String,
    /// Layer of the activation this node reads (attention layer, or the layer
    /// whose residual input is decomposed).
    pub layer: Option<usize>,
    /// Position where the quantity lives.
    pub position: usize,
    /// Destination position for source-position nodes.
    pub dest: Option<usize>,
    pub head: Option<usize>,
    pub feature: Option<usize>,
    pub token: Option<u32>,
    pub value: f64,
    pub expandable: bool,
    /// Why a non-leaf-looking node cannot be expanded.
    pub note: Option<String>,
    /// Child indices from the root.
    pub path: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<RdfaNode>,
    #[serde(skip)]
    probe: Probe,
    #[serde(skip)]
    comp: Option<Comp>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Comp {
    AttnHead { layer: usize, head: usize },
}

impl RdfaNode {
    fn leaf(kind: NodeKind, label: impl Into<String>, position: usize, value: f64) -> Self {
        Self {
            kind,
            label: label.into(),
            layer: None,
            position,
            dest: None,
            head: None,
            feature: None,
            token: None,
            value,
            expandable: false,
            note: None,
            path: Vec::new(),
            children: Vec::new(),
            probe: Probe::None,
            comp: None,
        }
    }

    pub fn children_sum(&self) -> f64 {
        self.children.iter().map(|c| c.value).sum()
    }

    /// Largest relative child-sum mismatch anywhere in the expanded tree.
    pub fn max_child_sum_error(&self) -> f64 {
        if self.children.is_empty() {
            return 0.0;
        }
        let scale = self.value.abs().max(self.children.iter().map(|c| c.value.abs()).fold(0.0, f64::max)).max(1e-12);
        let here = (self.children_sum() - self.value).abs() / scale;
        self.children.iter().map(RdfaNode::max_child_sum_error).fold(here, f64::max)
    }

    /// Every node at exactly `depth` below this one, in traversal order.
    pub fn at_depth(&self, depth: usize) -> Vec<&RdfaNode> {
        if depth == 0 {
            return vec![self];
        }
        self.children.iter().flat_map(|c| c.at_depth(depth - 1)).collect()
    }
}

/// Frozen trace plus the SAEs available for decomposition.
pub struct RdfaContext<'a> {
    weights: &'a Weights,
    trace: &'a HookedTrace,
    attn: BTreeMap<usize, &'a SaeParams>,
    resid: BTreeMap<usize, &'a SaeParams>,
}

impl<'a> RdfaContext<'a> {
    pub fn new(weights: &'a Weights, trace: &'a HookedTrace) -> Result<Self> {
        if trace.layers.len() != weights.config.n_layers {
            return Err(Error::InvalidArgument("RDFA needs a full (untruncated) trace".into()));
        }
        Ok(Self {
            weights,
            trace,
            attn: BTreeMap::new(),
            resid: BTreeMap::new(),
        })
    }

    /// Register a `z_cat` SAE (step 5) or a `resid_pre` SAE (step 3).
    pub fn with_sae(mut self, sae: &'a SaeParams) -> Result<Self> {
        sae.check_attach(&self.weights.config)?;
        let site = sae.site.expect("checked by check_attach");
        match site.hook {
            Hook::ZCat => {
                self.attn.insert(site.layer, sae);
            }
            Hook::ResidPre => {
                self.resid.insert(site.layer, sae);
            }
            _ => return Err(Error::InvalidArgument(format!("RDFA cannot use an SAE at {site}"))),
        }
        Ok(self)
    }

    pub fn trace(&self) -> &HookedTrace {
        self.trace
    }

    fn attn_sae(&self, layer: usize) -> Result<&'a SaeParams> {
        self.attn
            .get(&layer)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no attention SAE at layer {layer}")))
    }

    fn feature_node(&self, layer: usize, position: usize, feature: usize, coef: f64) -> Result<RdfaNode> {
        let sae = self.attn_sae(layer)?;
        sae.check_feature(feature)?;
        let pre = sae.pre_activation(self.trace.layers[layer].z_cat.row(position))?[feature];
        Ok(RdfaNode {
            layer: Some(layer),
            feature: Some(feature),
            expandable: true,
            probe: Probe::Coef(coef),
            ..RdfaNode::leaf(NodeKind::AttnFeature, format!("L{layer}.F{feature}"), position, coef * pre)
        })
    }

    /// Root for attention feature `feature` at `dest`; its value is the pre-activation.
    pub fn root(&self, layer: usize, dest: usize, feature: usize) -> Result<RdfaNode> {
        self.trace.layer(layer)?;
        self.trace.check_position(dest)?;
        self.feature_node(layer, dest, feature, 1.0)
    }

    /// Follow `path` (child indices) from the root and return that node, unexpanded.
    pub fn node_at(&self, layer: usize, dest: usize, feature: usize, path: &[usize]) -> Result<RdfaNode> {
        let mut node = self.root(layer, dest, feature)?;
        for &i in path {
            let mut kids = self.expand(&node)?;
            if i >= kids.len() {
                return Err(Error::OutOfRange(format!("child {i} of a node with {} children", kids.len())));
            }
            node = kids.swap_remove(i);
        }
        Ok(node)
    }

    /// Expand `node` and its descendants down to `depth` levels.
    pub fn expand_tree(&self, node: &mut RdfaNode, depth: usize) -> Result<()> {
        if depth == 0 || !node.expandable {
            return Ok(());
        }
        node.children = self.expand(node)?;
        for c in &mut node.children {
            self.expand_tree(c, depth - 1)?;
        }
        Ok(())
    }

    /// Children of `node`. Leaves and unexpandable nodes give an empty list.
    pub fn expand(&self, node: &RdfaNode) -> Result<Vec<RdfaNode>> {
        if !node.expandable {
            return Ok(Vec::new());
        }
        let mut kids = match (&node.kind, &node.probe) {
            (NodeKind::AttnFeature, Probe::Coef(c)) => self.expand_feature(node, *c)?,
            (NodeKind::SourcePosition, Probe::Heads(q)) => self.expand_source(node, q)?,
            (NodeKind::ResidFeature, Probe::Resid(g)) => self.expand_resid_feature(node, g)?,
            (NodeKind::Component, Probe::Resid(g)) => match node.comp {
                Some(Comp::AttnHead { layer, head }) => self.expand_head(node.position, layer, head, g)?,
                None => Vec::new(),
            },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "node '{}' lacks expansion state; rebuild it from its path",
                    node.label
                )))
            }
        };
        for (i, k) in kids.iter_mut().enumerate() {
            k.path = node.path.clone();
            k.path.push(i);
        }
        Ok(kids)
    }

    /// Step 2: split `coef · pre_i` over source positions plus the feature bias.
    fn expand_feature(&self, node: &RdfaNode, coef: f64) -> Result<Vec<RdfaNode>> {
        let (layer, feature, dest) = (node.layer.unwrap(), node.feature.unwrap(), node.position);
        let sae = self.attn_sae(layer)?;
        let dh = self.weights.config.d_head;
        let w = sae.encoder_column(feature);
        let q: Vec<Option<Vec<f64>>> = w
            .chunks_exact(dh)
            .map(|s| Some(s.iter().map(|x| coef * x).collect()))
            .collect();
        let mut kids: Vec<RdfaNode> = (0..=dest).map(|s| self.source_node(layer, dest, s, q.clone())).collect();
        kids.push(RdfaNode::leaf(NodeKind::Bias, "feature bias", dest, coef * sae.feature_bias(feature)));
        Ok(kids)
    }

    fn source_node(&self, layer: usize, dest: usize, s: usize, q: Vec<Option<Vec<f64>>>) -> RdfaNode {
        let lt = &self.trace.layers[layer];
        let value = q
            .iter()
            .enumerate()
            .filter_map(|(h, qh)| qh.as_ref().map(|qh| lt.pattern[h].at(dest, s) * dot(qh, lt.v[h].row(s))))
            .sum();
        let heads: Vec<usize> = (0..q.len()).filter(|&h| q[h].is_some()).collect();
        RdfaNode {
            layer: Some(layer),
            dest: Some(dest),
            head: (heads.len() == 1).then(|| heads[0]),
            token: Some(self.trace.tokens[s]),
            expandable: true,
            probe: Probe::Heads(q),
            ..RdfaNode::leaf(NodeKind::SourcePosition, format!("src {s}"), s, value)
        }
    }

    /// Step 3: push the head read vectors through `W_V` and the frozen LN into
    /// residual space, then split the residual at the source.
    fn expand_source(&self, node: &RdfaNode, q: &[Option<Vec<f64>>]) -> Result<Vec<RdfaNode>> {
        let (layer, dest, s) = (node.layer.unwrap(), node.dest.unwrap(), node.position);
        let cfg = &self.weights.config;
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let lw = &self.weights.layers[layer];
        let lt = &self.trace.layers[layer];
        let mut u = vec![0.0; d];
        let mut constant = 0.0;
        for (h, qh) in q.iter().enumerate() {
            let Some(qh) = qh else { continue };
            let a = lt.pattern[h].at(dest, s);
            let wv = &lw.w_v.data()[h * d * dh..(h + 1) * d * dh];
            let uh = mat_vec(wv, dh, qh);
            u.iter_mut().zip(&uh).for_each(|(x, y)| *x += a * y);
            constant += a * dot(qh, &lw.b_v.data()[h * dh..(h + 1) * dh]);
        }
        constant += dot(&u, lw.ln1.beta.data());
        let g = through_frozen_ln(&u, lw.ln1.gamma.data(), lt.ln1_scale[s]);

        let mut kids = match self.resid.get(&layer) {
            Some(rsae) => self.resid_feature_children(rsae, layer, s, &g)?,
            None => self.component_children(layer, s, &g),
        };
        kids.push(RdfaNode::leaf(NodeKind::Bias, "LN and value bias", s, constant));
        Ok(kids)
    }

    fn resid_feature_children(&self, rsae: &SaeParams, layer: usize, s: usize, g: &[f64]) -> Result<Vec<RdfaNode>> {
        let x = self.trace.layers[layer].resid_pre.row(s);
        let f = rsae.encode(x)?;
        let recon = rsae.decode(&f)?;
        let mut kids = Vec::new();
        for (j, &fj) in f.iter().enumerate() {
            if fj > 0.0 {
                let value = fj * dot(g, rsae.decoder_row(j));
                kids.push(RdfaNode {
                    layer: Some(layer),
                    feature: Some(j),
                    expandable: true,
                    probe: Probe::Resid(g.to_vec()),
                    ..RdfaNode::leaf(NodeKind::ResidFeature, format!("R{layer}.F{j}"), s, value)
                });
            }
        }
        kids.push(RdfaNode::leaf(NodeKind::Bias, "resid SAE decoder bias", s, dot(g, rsae.b_dec.data())));
        let err: Vec<f64> = x.iter().zip(&recon).map(|(a, b)| a - b).collect();
        kids.push(RdfaNode::leaf(NodeKind::Error, "resid SAE error", s, dot(g, &err)));
        Ok(kids)
    }

    /// Step 4 for a residual feature: its pre-activation is linear in the residual.
    fn expand_resid_feature(&self, node: &RdfaNode, g: &[f64]) -> Result<Vec<RdfaNode>> {
        let (layer, j, s) = (node.layer.unwrap(), node.feature.unwrap(), node.position);
        let rsae = self.resid[&layer];
        let coef = dot(g, rsae.decoder_row(j));
        let probe: Vec<f64> = rsae.encoder_column(j).iter().map(|w| coef * w).collect();
        let mut kids = self.component_children(layer, s, &probe);
        kids.push(RdfaNode::leaf(NodeKind::Bias, "resid feature bias", s, coef * rsae.feature_bias(j)));
        Ok(kids)
    }

    /// Step 4: embed, pos, each upstream head, attention output biases, MLPs.
    fn component_children(&self, layer: usize, s: usize, g: &[f64]) -> Vec<RdfaNode> {
        let cfg = &self.weights.config;
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let tok = self.trace.tokens[s];
        let mut kids = vec![
            RdfaNode {
                token: Some(tok),
                ..RdfaNode::leaf(NodeKind::Token, format!("embed (token {tok})"), s, dot(g, self.trace.embed.row(s)))
            },
            RdfaNode::leaf(NodeKind::Component, "pos", s, dot(g, self.trace.pos.row(s))),
        ];
        for m in 0..layer {
            let lw = &self.weights.layers[m];
            let lt = &self.trace.layers[m];
            for h in 0..cfg.n_heads {
                let wo = &lw.w_o.data()[h * dh * d..(h + 1) * dh * d];
                let value = dot(&mat_vec(wo, d, g), lt.z[h].row(s));
                kids.push(RdfaNode {
                    layer: Some(m),
                    head: Some(h),
                    expandable: true,
                    probe: Probe::Resid(g.to_vec()),
                    comp: Some(Comp::AttnHead { layer: m, head: h }),
                    ..RdfaNode::leaf(NodeKind::Component, format!("attn_{m}.head_{h}"), s, value)
                });
            }
            kids.push(RdfaNode {
                layer: Some(m),
                ..RdfaNode::leaf(NodeKind::Bias, format!("attn_{m}.b_O"), s, dot(g, lw.b_o.data()))
            });
            if lw.mlp.is_some() {
                kids.push(RdfaNode {
                    layer: Some(m),
                    note: Some("MLP outputs cannot be passed upstream linearly".into()),
                    ..RdfaNode::leaf(NodeKind::Component, format!("mlp_{m}"), s, dot(g, lt.mlp_out.row(s)))
                });
            }
        }
        kids
    }

    /// Step 5: one head's output at position `s`, split into the upstream
    /// attention SAE's features (or, without an SAE, into that head's sources).
    fn expand_head(&self, s: usize, layer: usize, head: usize, g: &[f64]) -> Result<Vec<RdfaNode>> {
        let cfg = &self.weights.config;
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let wo = &self.weights.layers[layer].w_o.data()[head * dh * d..(head + 1) * dh * d];
        let q = mat_vec(wo, d, g);
        let Some(sae) = self.attn.get(&layer) else {
            let mut probe = vec![None; cfg.n_heads];
            probe[head] = Some(q);
            return Ok((0..=s).map(|src| self.source_node(layer, s, src, probe.clone())).collect());
        };
        let slice = head * dh..(head + 1) * dh;
        let z = self.trace.layers[layer].z_cat.row(s);
        let f = sae.encode(z)?;
        let recon = sae.decode(&f)?;
        let mut kids = Vec::new();
        for (j, &fj) in f.iter().enumerate() {
            if fj > 0.0 {
                let coef = dot(&q, &sae.decoder_row(j)[slice.clone()]);
                if coef != 0.0 {
                    kids.push(self.feature_node(layer, s, j, coef)?);
                }
            }
        }
        kids.push(RdfaNode::leaf(
            NodeKind::Bias,
            "attn SAE decoder bias",
            s,
            dot(&q, &sae.b_dec.data()[slice.clone()]),
        ));
        let err: Vec<f64> = z[slice.clone()].iter().zip(&recon[slice]).map(|(a, b)| a - b).collect();
        kids.push(RdfaNode::leaf(NodeKind::Error, "attn SAE error", s, dot(&q, &err)));
        Ok(kids)
    }
}

/// DFA of one source position's contribution over residual SAE features.
/// Contributions: active features plus `"error"`; remainder: all bias terms.
pub fn dfa_by_resid_feature(
    weights: &Weights,
    attn_sae: &SaeParams,
    resid_sae: &SaeParams,
    feature: usize,
    trace: &HookedTrace,
    dest: usize,
    source: usize,
) -> Result<DfaBreakdown> {
    let layer = sae_layer(attn_sae, Hook::ZCat)?;
    if sae_layer(resid_sae, Hook::ResidPre)? != layer {
        return Err(Error::InvalidArgument(format!("no residual SAE at the input of layer {layer}")));
    }
    if source > dest {
        return Err(Error::OutOfRange(format!("source {source} after destination {dest}")));
    }
    let ctx = RdfaContext::new(weights, trace)?.with_sae(attn_sae)?.with_sae(resid_sae)?;
    let src = ctx.node_at(layer, dest, feature, &[source])?;
    let kids = ctx.expand(&src)?;
    let mut contributions = Vec::new();
    let mut remainder = 0.0;
    for k in kids {
        match k.kind {
            NodeKind::ResidFeature => contributions.push(Entry {
                key: format!("feature {}", k.feature.unwrap()),
                value: k.value,
            }),
            NodeKind::Error => contributions.push(Entry {
                key: "error".into(),
                value: k.value,
            }),
            _ => remainder += k.value,
        }
    }
    Ok(DfaBreakdown {
        feature: Some(feature),
        dest,
        source: Some(source),
        axis: Axis::ResidFeature,
        contributions,
        remainder,
        total: src.value,
    })
}

/// Direct logit effect of a `z_cat` feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitEffect {
    pub values: Vec<f64>,
    /// Most boosted tokens, descending.
    pub top: Vec<(u32, f64)>,
    /// Most suppressed tokens, ascending.
    pub bottom: Vec<(u32, f64)>,
}

impl LogitEffect {
    fn new(values: Vec<f64>, k: usize) -> Self {
        let mut idx: Vec<u32> = (0..values.len() as u32).collect();
        idx.sort_by(|&a, &b| values[b as usize].total_cmp(&values[a as usize]).then(a.cmp(&b)));
        let top = idx.iter().take(k).map(|&t| (t, values[t as usize])).collect();
        idx.sort_by(|&a, &b| values[a as usize].total_cmp(&values[b as usize]).then(a.cmp(&b)));
        let bottom = idx.iter().take(k).map(|&t| (t, values[t as usize])).collect();
        Self { values, top, bottom }
    }

    /// Token with the largest boost (lowest id on ties).
    pub fn argmax(&self) -> Option<u32> {
        self.top.first().map(|t| t.0)
    }
}

fn feature_output(weights: &Weights, sae: &SaeParams, feature: usize) -> Result<Vec<f64>> {
    let layer = sae_layer(sae, Hook::ZCat)?;
    sae.check_attach(&weights.config)?;
    sae.check_feature(feature)?;
    let d = weights.config.d_model;
    Ok(vec_mat(sae.decoder_row(feature), weights.layers[layer].w_o.data(), d))
}

/// `W_U^T (W_O d_i)`, ignoring the final LayerNorm.
pub fn direct_logit_effect(weights: &Weights, sae: &SaeParams, feature: usize, k: usize) -> Result<LogitEffect> {
    let out = feature_output(weights, sae, feature)?;
    Ok(LogitEffect::new(vec_mat(&out, weights.w_u.data(), weights.config.vocab), k))
}

/// As [`direct_logit_effect`], passing `W_O d_i` through the final LayerNorm
/// with a frozen scale (e.g. `trace.final_scale[pos]`).
pub fn direct_logit_effect_frozen(
    weights: &Weights,
    sae: &SaeParams,
    feature: usize,
    final_scale: f64,
    k: usize,
) -> Result<LogitEffect> {
    let out = feature_output(weights, sae, feature)?;
    let mut y: Vec<f64> = out.clone();
    center(&mut y);
    y.iter_mut()
        .zip(weights.ln_final.gamma.data())
        .for_each(|(v, g)| *v *= g * final_scale);
    Ok(LogitEffect::new(vec_mat(&y, weights.w_u.data(), weights.config.vocab), k))
}

/// Frozen LayerNorm scales for the composed OV→QK path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathScales {
    /// At the OV head's source position (where the attention feature is read).
    pub ov_source: f64,
    /// At the QK head's query (destination) position.
    pub query: f64,
    /// At the QK head's key (source) position.
    pub key: f64,
}

/// Bilinear path from a `z_cat` vector at an earlier layer, through one head's
/// OV circuit, into another head's query, scored against a residual vector on
/// the key side. LayerNorm enters with frozen scales; biases are left out.
#[derive(Clone, Debug)]
pub struct QkPath<'a> {
    weights: &'a Weights,
    attn_layer: usize,
    ov: (usize, usize),
    qk: (usize, usize),
    scales: PathScales,
}

impl<'a> QkPath<'a> {
    pub fn new(
        weights: &'a Weights,
        attn_layer: usize,
        ov: (usize, usize),
        qk: (usize, usize),
        scales: PathScales,
    ) -> Result<Self> {
        let cfg = &weights.config;
        if !(attn_layer < ov.0 && ov.0 < qk.0) {
            return Err(Error::InvalidArgument(format!(
                "need attention layer {attn_layer} < OV layer {} < QK layer {}",
                ov.0, qk.0
            )));
        }
        if qk.0 >= cfg.n_layers || ov.1 >= cfg.n_heads || qk.1 >= cfg.n_heads {
            return Err(Error::OutOfRange("head outside the model".into()));
        }
        Ok(Self {
            weights,
            attn_layer,
            ov,
            qk,
            scales,
        })
    }

    fn ln_lin(&self, layer: usize, x: &[f64], scale: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        center(&mut y);
        y.iter_mut()
            .zip(self.weights.layers[layer].ln1.gamma.data())
            .for_each(|(v, g)| *v *= g * scale);
        y
    }

    fn head_proj(&self, w: &Tensor, head: usize, x: &[f64]) -> Vec<f64> {
        let (d, dh) = (self.weights.config.d_model, self.weights.config.d_head);
        vec_mat(x, &w.data()[head * d * dh..(head + 1) * d * dh], dh)
    }

    /// Residual vector the OV head delivers to the query position.
    pub fn moved(&self, z_cat: &[f64]) -> Vec<f64> {
        let (d, dh) = (self.weights.config.d_model, self.weights.config.d_head);
        let resid = vec_mat(z_cat, self.weights.layers[self.attn_layer].w_o.data(), d);
        let (ol, oh) = self.ov;
        let olw = &self.weights.layers[ol];
        let v = self.head_proj(&olw.w_v, oh, &self.ln_lin(ol, &resid, self.scales.ov_source));
        vec_mat(&v, &olw.w_o.data()[oh * dh * d..(oh + 1) * dh * d], d)
    }

    /// Query projection (`d_head`) of a residual vector at the query position.
    pub fn query_from_resid(&self, resid: &[f64]) -> Vec<f64> {
        let (ql, qh) = self.qk;
        self.head_proj(&self.weights.layers[ql].w_q, qh, &self.ln_lin(ql, resid, self.scales.query))
    }

    /// Query-side vector (`d_head`) for a `z_cat` vector at the attention layer.
    pub fn query_vec(&self, z_cat: &[f64]) -> Vec<f64> {
        self.query_from_resid(&self.moved(z_cat))
    }

    /// Key-side vector (`d_head`) for a residual vector at the QK layer.
    pub fn key_vec(&self, resid: &[f64]) -> Vec<f64> {
        let (ql, qh) = self.qk;
        self.head_proj(&self.weights.layers[ql].w_k, qh, &self.ln_lin(ql, resid, self.scales.key))
    }

    /// Contribution to the pre-softmax score (including the `1/sqrt(d_head)`).
    pub fn score(&self, z_cat: &[f64], resid: &[f64]) -> f64 {
        let s = 1.0 / (self.weights.config.d_head as f64).sqrt();
        s * dot(&self.query_vec(z_cat), &self.key_vec(resid))
    }
}

/// Feature-by-feature lookup table `[d_sae_attn × d_sae_resid]` of the path
/// score between attention feature `i` and residual feature `j`. A prompt's
/// score contribution from the pair is `f_i · f_j · entry(i, j)`.
pub fn qk_feature_lookup(
    weights: &Weights,
    attn_sae: &SaeParams,
    resid_sae: &SaeParams,
    ov_head: (usize, usize),
    qk_head: (usize, usize),
    scales: PathScales,
) -> Result<Tensor> {
    let al = sae_layer(attn_sae, Hook::ZCat)?;
    let rl = sae_layer(resid_sae, Hook::ResidPre)?;
    attn_sae.check_attach(&weights.config)?;
    resid_sae.check_attach(&weights.config)?;
    let path = QkPath::new(weights, al, ov_head, qk_head, scales)?;
    if rl != qk_head.0 {
        return Err(Error::InvalidArgument(format!(
            "residual SAE reads layer {rl}, but the QK head reads layer {}",
            qk_head.0
        )));
    }
    let dh = weights.config.d_head;
    let s = 1.0 / (dh as f64).sqrt();
    let (ma, mr) = (attn_sae.d_sae(), resid_sae.d_sae());
    let mut queries = Vec::with_capacity(ma * dh);
    for i in 0..ma {
        queries.extend(path.query_vec(attn_sae.decoder_row(i)));
    }
    let mut keys = Vec::with_capacity(mr * dh);
    for j in 0..mr {
        keys.extend(path.key_vec(resid_sae.decoder_row(j)));
    }
    let mut out = vec![0.0; ma * mr];
    crate::numerics::gemm(ma, dh, mr, &queries, false, &keys, true, &mut out, 0.0);
    out.iter_mut().for_each(|v| *v *= s);
    Tensor::new(vec![ma, mr], out)
}
