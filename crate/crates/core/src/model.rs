//! Masked autoencoder over point tokens.
//!
//! Visible tokens are embedded by a shared per-point MLP with max pooling, run
//! through a hierarchical pre-norm transformer encoder, joined with a shared
//! mask token and decoded over the full token set. Two linear heads regress
//! masked group coordinates and per-token 2D semantics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::cloud::{furthest_point_indices, furthest_point_sample, knn_group, Point, PointCloud};
use crate::error::{config_err, contract_err, input_err, Error, Result};
use crate::guidance::MaskPartition;
use crate::params::{ParamId, ParamStore};
use crate::rng::seeded;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_points: usize,
    pub tokens: usize,
    pub k: usize,
    pub channels: usize,
    pub heads: usize,
    /// Block count of each encoder stage.
    pub encoder_stages: Vec<usize>,
    pub decoder_stages: Vec<usize>,
    pub hierarchical: bool,
    pub mlp_ratio: usize,
    /// Width of the 2D semantic head.
    pub target_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_points: 2048,
            tokens: 512,
            k: 16,
            channels: 384,
            heads: 6,
            encoder_stages: vec![5, 5, 5],
            decoder_stages: vec![1, 1],
            hierarchical: true,
            mlp_ratio: 4,
            target_width: 3 * 384,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.k == 0 || self.tokens > self.n_points || self.k > self.n_points
        {
            return Err(config_err!(
                "need 0 < tokens, k <= points (tokens {}, k {}, points {})",
                self.tokens,
                self.k,
                self.n_points
            ));
        }
        if self.channels < 2 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(config_err!(
                "channels {} must be at least 2 and divisible by heads {}",
                self.channels,
                self.heads
            ));
        }
        if self.encoder_stages.is_empty() {
            return Err(config_err!("encoder needs at least one stage"));
        }
        if self.mlp_ratio == 0 || self.target_width == 0 {
            return Err(config_err!("mlp ratio and target width must be positive"));
        }
        Ok(())
    }

    /// Tokens kept by each encoder stage when `visible` tokens enter it.
    pub fn stage_token_counts(&self, visible: usize) -> Vec<usize> {
        (0..self.encoder_stages.len())
            .map(|s| {
                if self.hierarchical {
                    (visible >> s).max(1).min(visible)
                } else {
                    visible
                }
            })
            .collect()
    }
}

/// Which tokens each reconstruction term is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetAssignment {
    /// 3D on masked tokens, 2D on visible tokens.
    #[default]
    M3dV2d,
    M3d,
    V2d,
    M2d,
    M3dM2d,
}

impl TargetAssignment {
    pub const ALL: [TargetAssignment; 5] = [
        TargetAssignment::M3dV2d,
        TargetAssignment::M3d,
        TargetAssignment::V2d,
        TargetAssignment::M2d,
        TargetAssignment::M3dM2d,
    ];

    pub fn uses_3d(self) -> bool {
        matches!(self, Self::M3dV2d | Self::M3d | Self::M3dM2d)
    }

    /// Rows the 2D term is computed on, if any.
    pub fn semantic_rows(self) -> Option<TokenSide> {
        match self {
            Self::M3dV2d | Self::V2d => Some(TokenSide::Visible),
            Self::M2d | Self::M3dM2d => Some(TokenSide::Masked),
            Self::M3d => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::M3dV2d => "M3D+V2D",
            Self::M3d => "M3D",
            Self::V2d => "V2D",
            Self::M2d => "M2D",
            Self::M3dM2d => "M3D+M2D",
        }
    }
}

impl fmt::Display for TargetAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetAssignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| input_err!("unknown target assignment '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSide {
    Visible,
    Masked,
}

/// Scalar multipliers on the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w3d: f64,
    pub w2d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w3d: 1.0, w2d: 1.0 }
    }
}

/// Token centers with their re-centered neighbor groups.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGroups {
    pub centers: Vec<Point>,
    /// Row-major `M*k x 3`, group `t` occupying rows `t*k..(t+1)*k`.
    pub groups: Vec<f64>,
    pub k: usize,
}

impl TokenGroups {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn rows_of(&self, tokens: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(tokens.len() * self.k * 3);
        for &t in tokens {
            data.extend_from_slice(&self.groups[t * self.k * 3..(t + 1) * self.k * 3]);
        }
        Tensor::new(&[tokens.len() * self.k, 3], data).expect("sized from tokens")
    }

    fn centers_of(&self, tokens: &[usize]) -> Tensor {
        let data = tokens.iter().flat_map(|&t| self.centers[t]).collect();
        Tensor::new(&[tokens.len(), 3], data).expect("sized from tokens")
    }
}

/// FPS to `m` centers (first center drawn from `seed`) and `k`-NN grouping.
pub fn group_tokens(cloud: &PointCloud, m: usize, k: usize, seed: u64) -> Result<TokenGroups> {
    if cloud.len() < m {
        return Err(input_err!(
            "cloud has {} points, fewer than {m} tokens",
            cloud.len()
        ));
    }
    let centers = knn_group(cloud, &furthest_point_sample(cloud, m, seed)?, k)?;
    let mut groups = Vec::with_capacity(m * k * 3);
    for t in 0..m {
        for p in centers.recentered_group(&cloud.points, t) {
            groups.extend_from_slice(&p);
        }
    }
    Ok(TokenGroups {
        centers: centers.centers,
        groups,
        k,
    })
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Stage {
    pos: Linear,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
struct Layout {
    embed1: Linear,
    embed2: Linear,
    encoder: Vec<Stage>,
    mask_token: ParamId,
    decoder_pos: Linear,
    decoder: Vec<Vec<Block>>,
    decoder_norm: Norm,
    head3d: Linear,
    head2d: Linear,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: crate::rng::Rng,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.store.add_gaussian(
                format!("{name}.weight"),
                &[fan_in, fan_out],
                INIT_STD,
                &mut self.rng,
            ),
            b: self
                .store
                .add_constant(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.store.add_constant(format!("{name}.gamma"), &[c], 1.0),
            beta: self.store.add_constant(format!("{name}.beta"), &[c], 0.0),
        }
    }

    fn block(&mut self, prefix: &str, c: usize, hidden: usize) -> Block {
        Block {
            ln1: self.norm(&format!("{prefix}.ln1"), c),
            qkv: self.linear(&format!("{prefix}.attn.qkv"), c, 3 * c),
            proj: self.linear(&format!("{prefix}.attn.proj"), c, c),
            ln2: self.norm(&format!("{prefix}.ln2"), c),
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), c, hidden),
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), hidden, c),
        }
    }
}

/// Differentiable losses of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub total: Var,
    pub l3d: Option<Var>,
    pub l2d: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct I2pMae {
    cfg: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl I2pMae {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hidden = c * cfg.mlp_ratio;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: seeded(seed),
        };
        let embed1 = init.linear("embed.0.0.fc1", 3, c / 2);
        let embed2 = init.linear("embed.0.0.fc2", c / 2, c);
        let encoder = cfg
            .encoder_stages
            .iter()
            .enumerate()
            .map(|(s, &n)| Stage {
                pos: init.linear(&format!("encoder.{s}.pos"), 3, c),
                blocks: (0..n)
                    .map(|b| init.block(&format!("encoder.{s}.{b}"), c, hidden))
                    .collect(),
            })
            .collect();
        let mask_token =
            init.store
                .add_gaussian("decoder.0.mask_token", &[1, c], INIT_STD, &mut init.rng);
        init.store.set_decay(mask_token, false);
        let decoder_pos = init.linear("decoder.0.pos", 3, c);
        let decoder = cfg
            .decoder_stages
            .iter()
            .enumerate()
            .map(|(s, &n)| {
                (0..n)
                    .map(|b| init.block(&format!("decoder.{s}.{b}"), c, hidden))
                    .collect()
            })
            .collect();
        let decoder_norm = init.norm("decoder.out.norm", c);
        let head3d = init.linear("head3d.0.0.proj", c, 3 * cfg.k);
        let head2d = init.linear("head2d.0.0.proj", c, cfg.target_width);
        let layout = Layout {
            embed1,
            embed2,
            encoder,
            mask_token,
            decoder_pos,
            decoder,
            decoder_norm,
            head3d,
            head2d,
        };
        Ok(I2pMae { cfg, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Registers every parameter as a graph leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.store
            .ids()
            .map(|id| g.param(&self.store, id))
            .collect()
    }

    /// Pre-training losses for one sample. `semantic` holds the 2D target of
    /// every token (`M x target_width`, token order); it is required whenever
    /// the assignment has a 2D term.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &TokenGroups,
        partition: &MaskPartition,
        semantic: Option<&[f64]>,
        assignment: TargetAssignment,
        weights: LossWeights,
    ) -> Result<Losses> {
        let p = self.bind(g);
        let m = tokens.len();
        if partition.total() != m || tokens.k != self.cfg.k {
            return Err(contract_err!(
                "partition covers {} tokens of width {}, model expects {} of width {}",
                partition.total(),
                tokens.k,
                m,
                self.cfg.k
            ));
        }
        let vis = &partition.visible_idx;
        let masked = &partition.masked_idx;
        if vis.is_empty() {
            return Err(contract_err!("no visible tokens to encode"));
        }

        let stages = self.encode(g, &p, tokens, vis)?;
        let decoded = self.decode(g, &p, tokens, vis, masked, &stages)?;
        let n_vis = vis.len();

        let l3d = if assignment.uses_3d() && !masked.is_empty() {
            let rows: Vec<usize> = (n_vis..m).collect();
            let x = g.gather_rows(decoded, &rows)?;
            let pred = self.linear(g, &p, self.layout.head3d, x)?;
            let pred = g.reshape(pred, &[masked.len() * self.cfg.k, 3])?;
            let gt = g.constant(tokens.rows_of(masked));
            Some(chamfer_loss(g, pred, gt, self.cfg.k)?)
        } else {
            None
        };

        let l2d = match assignment.semantic_rows() {
            Some(side) => {
                let semantic = semantic.ok_or_else(|| {
                    contract_err!("assignment {assignment} needs semantic targets")
                })?;
                let w = self.cfg.target_width;
                if semantic.len() != m * w {
                    return Err(Error::dim(
                        "semantic_loss",
                        &[semantic.len() / w.max(1), w],
                        &[m, w],
                    ));
                }
                let (token_ids, rows): (&[usize], Vec<usize>) = match side {
                    TokenSide::Visible => (vis, (0..n_vis).collect()),
                    TokenSide::Masked => (masked, (n_vis..m).collect()),
                };
                if token_ids.is_empty() {
                    None
                } else {
                    let x = g.gather_rows(decoded, &rows)?;
                    let pred = self.linear(g, &p, self.layout.head2d, x)?;
                    let mut t = Vec::with_capacity(token_ids.len() * w);
                    for &i in token_ids {
                        t.extend_from_slice(&semantic[i * w..(i + 1) * w]);
                    }
                    let target = g.constant(Tensor::new(&[token_ids.len(), w], t)?);
                    Some(semantic_loss(g, pred, target)?)
                }
            }
            None => None,
        };

        let total = total_loss(g, l3d, l2d, assignment, weights)?;
        Ok(Losses { total, l3d, l2d })
    }

    /// Final-stage encoder features of an unmasked sample: `tokens_last x C`.
    pub fn encode_all(&self, tokens: &TokenGroups) -> Result<Tensor> {
        let mut g = Graph::new();
        let p: Vec<Var> = self
            .store
            .ids()
            .map(|id| g.constant(self.store.tensor(id).clone()))
            .collect();
        let all: Vec<usize> = (0..tokens.len()).collect();
        let stages = self.encode(&mut g, &p, tokens, &all)?;
        let (_, last) = stages.last().expect("at least one stage");
        Ok(g.value(*last).clone())
    }

    /// Token embedding of the given groups: `tokens.len() x C`.
    fn embed(&self, g: &mut Graph, p: &[Var], tokens: &TokenGroups, ids: &[usize]) -> Result<Var> {
        let x = g.constant(tokens.rows_of(ids));
        let h = self.linear(g, p, self.layout.embed1, x)?;
        let h = g.gelu(h);
        let h = self.linear(g, p, self.layout.embed2, h)?;
        g.group_max(h, self.cfg.k)
    }

    /// Runs the encoder on `vis`; returns each stage's output with the
    /// positions (into `vis`) of its rows.
    fn encode(
        &self,
        g: &mut Graph,
        p: &[Var],
        tokens: &TokenGroups,
        vis: &[usize],
    ) -> Result<Vec<(Vec<usize>, Var)>> {
        let mut x = self.embed(g, p, tokens, vis)?;
        let counts = self.cfg.stage_token_counts(vis.len());
        let mut members: Vec<usize> = (0..vis.len()).collect();
        let mut out = Vec::with_capacity(counts.len());
        for (stage, &count) in self.layout.encoder.iter().zip(&counts) {
            if count < members.len() {
                let pts: Vec<Point> = members.iter().map(|&i| tokens.centers[vis[i]]).collect();
                let sel = furthest_point_indices(&pts, count, 0)?;
                x = g.gather_rows(x, &sel)?;
                members = sel.iter().map(|&j| members[j]).collect();
            }
            let ids: Vec<usize> = members.iter().map(|&i| vis[i]).collect();
            let c = g.constant(tokens.centers_of(&ids));
            let pos = self.linear(g, p, stage.pos, c)?;
            x = g.add(x, pos)?;
            for b in &stage.blocks {
                x = self.block(g, p, b, x)?;
            }
            out.push((members.clone(), x));
        }
        Ok(out)
    }

    /// Rows `0..vis.len()` of the result are visible tokens, the rest masked.
    fn decode(
        &self,
        g: &mut Graph,
        p: &[Var],
        tokens: &TokenGroups,
        vis: &[usize],
        masked: &[usize],
        stages: &[(Vec<usize>, Var)],
    ) -> Result<Var> {
        // Each visible token takes its feature from the deepest stage that kept it.
        let mut deepest = vec![0usize; vis.len()];
        let mut offset = 0;
        for (members, _) in stages {
            for (row, &i) in members.iter().enumerate() {
                deepest[i] = offset + row;
            }
            offset += members.len();
        }
        let visible = if stages.len() == 1 {
            stages[0].1
        } else {
            let parts: Vec<Var> = stages.iter().map(|(_, v)| *v).collect();
            let all = g.concat(&parts, 0)?;
            g.gather_rows(all, &deepest)?
        };
        let x = if masked.is_empty() {
            visible
        } else {
            let mt = g.repeat_rows(p[self.layout.mask_token.index()], masked.len())?;
            g.concat(&[visible, mt], 0)?
        };
        let order: Vec<usize> = vis.iter().chain(masked).copied().collect();
        let c = g.constant(tokens.centers_of(&order));
        let pos = self.linear(g, p, self.layout.decoder_pos, c)?;
        let mut x = g.add(x, pos)?;
        for stage in &self.layout.decoder {
            for b in stage {
                x = self.block(g, p, b, x)?;
            }
        }
        self.norm(g, p, self.layout.decoder_norm, x)
    }

    fn linear(&self, g: &mut Graph, p: &[Var], l: Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[l.w.index()])?;
        g.add_row(y, p[l.b.index()])
    }

    fn norm(&self, g: &mut Graph, p: &[Var], n: Norm, x: Var) -> Result<Var> {
        let y = g.layer_norm(x)?;
        let y = g.mul_row(y, p[n.gamma.index()])?;
        g.add_row(y, p[n.beta.index()])
    }

    fn block(&self, g: &mut Graph, p: &[Var], b: &Block, x: Var) -> Result<Var> {
        let h = self.norm(g, p, b.ln1, x)?;
        let a = self.attention(g, p, b, h)?;
        let x = g.add(x, a)?;
        let h = self.norm(g, p, b.ln2, x)?;
        let h = self.linear(g, p, b.fc1, h)?;
        let h = g.gelu(h);
        let h = self.linear(g, p, b.fc2, h)?;
        g.add(x, h)
    }

    fn attention(&self, g: &mut Graph, p: &[Var], b: &Block, x: Var) -> Result<Var> {
        let c = self.cfg.channels;
        let dh = c / self.cfg.heads;
        let qkv = self.linear(g, p, b.qkv, x)?;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, c + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * c + h * dh, dh)?;
            let s = g.matmul_t(q, k)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, 1)?;
            heads.push(g.matmul(a, v)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        };
        self.linear(g, p, b.proj, o)
    }
}

/// Symmetric squared Chamfer distance over groups of `k` rows, normalized by
/// the total row count.
pub fn chamfer_loss(g: &mut Graph, pred: Var, gt: Var, k: usize) -> Result<Var> {
    g.chamfer(pred, gt, k)
}

/// Mean squared error over every element.
pub fn semantic_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim("semantic_loss", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Weighted sum of the terms the assignment activates. A missing active term
/// or a present inactive one is a contract error.
pub fn total_loss(
    g: &mut Graph,
    l3d: Option<Var>,
    l2d: Option<Var>,
    assignment: TargetAssignment,
    weights: LossWeights,
) -> Result<Var> {
    let want = (assignment.uses_3d(), assignment.semantic_rows().is_some());
    let terms: Vec<Var> = [
        (l3d, want.0, weights.w3d, "3D"),
        (l2d, want.1, weights.w2d, "2D"),
    ]
    .into_iter()
    .map(|(term, active, w, what)| match (term, active) {
        (Some(v), true) => Ok(Some(if w == 1.0 { v } else { g.scale(v, w) })),
        (None, false) => Ok(None),
        (Some(_), false) => Err(contract_err!(
            "{what} term computed but {assignment} does not use it"
        )),
        // A term over zero rows (for instance no masked tokens) contributes nothing.
        (None, true) => Ok(None),
    })
    .collect::<Result<Vec<_>>>()?
    .into_iter()
    .flatten()
    .collect();
    match terms.as_slice() {
        [] => Err(contract_err!("{assignment} produced no loss terms")),
        [one] => Ok(*one),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}
