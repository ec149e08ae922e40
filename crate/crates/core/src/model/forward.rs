use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::Vector3;

use super::params::block_key;
use super::{ModelConfig, ParamStore, DEFAULT_RADIUS_MULTIPLIER};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::crystal::CrystalStructure;
use crate::error::{Error, Result};
use crate::features::{angular_basis, distance_basis};
use crate::frames::{
    lattice_frame, max_frame, pca_frames, static_local_frame, weighted_pca_frame, Frame, FrameMethod, FrameMode,
    FrameRng, WeightedNeighborhood,
};
use crate::images::{enumerate_images, PeriodicImage};

/// Neighborhood radius for the fixed `exp(-r²)` local frames, in Å.
pub const STATIC_FRAME_RADIUS: f64 = 6.0;

/// Number of highest-weight images kept per trace record.
pub const TRACE_TOP_IMAGES: usize = 8;

/// Offset added to the first frame axis by the corruption hook.
const CORRUPTION: [f64; 3] = [0.3, 0.1, 0.0];

/// Knobs of a single forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: FrameMode,
    /// Seed and optimizer step keying the train-mode frame streams.
    pub seed: u64,
    pub step: u64,
    pub radius_multiplier: f64,
    /// Which of the four PCA frames to use; `None` samples one in train
    /// mode and means "average all four" at the prediction level.
    pub pca_frame: Option<usize>,
    /// Test hook: skews every frame so it is neither orthonormal nor equivariant.
    pub corrupt_frames: bool,
    pub record_trace: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: FrameMode::Eval,
            seed: 0,
            step: 0,
            radius_multiplier: DEFAULT_RADIUS_MULTIPLIER,
            pca_frame: None,
            corrupt_frames: false,
            record_trace: false,
        }
    }
}

impl ForwardOptions {
    pub fn train(seed: u64, step: u64) -> Self {
        ForwardOptions {
            mode: FrameMode::Train,
            seed,
            step,
            ..Default::default()
        }
    }

    fn rng(&self, layer: usize, head: usize, atom: usize) -> FrameRng {
        match self.mode {
            FrameMode::Train => FrameRng::stream(FrameMode::Train, self.seed, self.step, layer, head, atom),
            FrameMode::Eval => FrameRng::eval(),
        }
    }
}

/// One attention-weighted image in a trace record.
#[derive(Clone, Debug, PartialEq)]
pub struct TracedImage {
    pub j: usize,
    pub shift: [i32; 3],
    pub r: f64,
    pub weight: f64,
}

/// Attention statistics of one (layer, head, atom).
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub layer: usize,
    pub head: usize,
    pub atom: usize,
    pub sigma: f64,
    /// Softmax normalizer `Σ exp(logit)` over all images in range.
    pub normalizer: f64,
    pub weight_sum: f64,
    pub images: usize,
    pub top: Vec<TracedImage>,
    pub frame: Option<Frame>,
}

/// A recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub graph: Graph,
    /// Normalized scalar prediction, shape `[1, 1]`.
    pub output: NodeId,
    /// Pooled state, shape `[1, d]`.
    pub pooled: NodeId,
    /// Atom states after the embedding and after every block.
    pub states: Vec<NodeId>,
    pub params: Vec<(String, NodeId)>,
    pub trace: Vec<TraceRecord>,
}

impl Forward {
    pub fn prediction(&self) -> f64 {
        self.graph.value(self.output).data()[0]
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        self.params.iter().map(|(_, id)| *id).collect()
    }
}

/// Per-structure frames shared by all layers and heads, one per atom.
fn fixed_frames(cfg: &ModelConfig, s: &CrystalStructure, opts: &ForwardOptions) -> Result<Option<Vec<Frame>>> {
    let n = s.len();
    Ok(match cfg.frame_method {
        FrameMethod::Pca => {
            let mut rng = FrameRng::stream(opts.mode, opts.seed, opts.step, usize::MAX, 0, 0);
            let frames = pca_frames(s.positions(), &mut rng)?;
            let pick = match (opts.pca_frame, opts.mode) {
                (Some(k), _) if k < frames.len() => k,
                (Some(k), _) => return Err(Error::invalid(format!("PCA frame index {k} out of range"))),
                (None, FrameMode::Train) => rng.index(frames.len()),
                (None, FrameMode::Eval) => 0,
            };
            Some(vec![frames[pick].clone(); n])
        }
        FrameMethod::Lattice => Some(vec![lattice_frame(s.lattice())?; n]),
        FrameMethod::StaticLocal => Some(
            (0..n)
                .map(|i| {
                    let images = enumerate_images(s, i, STATIC_FRAME_RADIUS)?;
                    if images.iter().all(PeriodicImage::is_self) {
                        Ok(fallback_frame(FrameMethod::StaticLocal))
                    } else {
                        static_local_frame(&images)
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        FrameMethod::None | FrameMethod::Max | FrameMethod::WeightedPca => None,
    })
}

fn fallback_frame(kind: FrameMethod) -> Frame {
    Frame {
        fallback: true,
        ..Frame::identity(kind)
    }
}

fn corrupt(mut f: Frame) -> Frame {
    f.axes[0] += Vector3::from(CORRUPTION);
    f
}

/// Sparse edge list of one head: images grouped by center atom.
struct Edges {
    offsets: Arc<[usize]>,
    center: Arc<[usize]>,
    /// `i·N + j`, indexing the flattened `[N, N]` score matrix.
    pair: Arc<[usize]>,
    r: Vec<f64>,
    dir: Vec<Option<Vector3<f64>>>,
    /// Index into the per-atom image list.
    source: Vec<usize>,
}

fn collect_edges(images: &[Vec<PeriodicImage>], radii: &[f64]) -> Edges {
    let n = images.len();
    let mut offsets = vec![0usize];
    let (mut center, mut pair, mut r, mut dir, mut source) = (vec![], vec![], vec![], vec![], vec![]);
    for (i, list) in images.iter().enumerate() {
        for (k, im) in list.iter().enumerate() {
            if im.r <= radii[i] {
                center.push(i);
                pair.push(i * n + im.j);
                r.push(im.r);
                dir.push(im.dir);
                source.push(k);
            }
        }
        offsets.push(center.len());
    }
    Edges {
        offsets: offsets.into(),
        center: center.into(),
        pair: pair.into(),
        r,
        dir,
        source,
    }
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    s: &'a CrystalStructure,
    opts: &'a ForwardOptions,
    fixed: Option<Vec<Frame>>,
    params: HashMap<String, NodeId>,
    g: Graph,
    trace: Vec<TraceRecord>,
}

impl Builder<'_> {
    fn p(&self, name: &str) -> Result<NodeId> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    fn bp(&self, layer: usize, name: &str) -> Result<NodeId> {
        self.p(&block_key(layer, name))
    }

    fn embed(&mut self) -> Result<NodeId> {
        let n = self.s.len();
        let width = self.cfg.species_count;
        let mut comp = vec![0.0; n * width];
        for i in 0..n {
            for (sp, prob) in self.s.site_distribution(i).iter() {
                if sp.index() >= width {
                    return Err(Error::invalid(format!(
                        "species {} exceeds the embedding table of {width}",
                        sp.z()
                    )));
                }
                comp[i * width + sp.index()] += prob;
            }
        }
        let comp = self.g.constant(Tensor::matrix(n, width, comp)?)?;
        let table = self.p("embed")?;
        self.g.matmul(comp, table)
    }

    fn block(&mut self, x: NodeId, layer: usize) -> Result<NodeId> {
        let cfg = self.cfg;
        let n = self.s.len();
        let heads = cfg.heads;
        let mult = self.opts.radius_multiplier;
        if !(mult > 0.0) {
            return Err(Error::invalid(format!("radius multiplier must be positive, got {mult}")));
        }

        let (wq, wk, wv) = (self.bp(layer, "wq")?, self.bp(layer, "wk")?, self.bp(layer, "wv")?);
        let g = &mut self.g;
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;

        let sw = self.bp(layer, "sigma_w")?;
        let sb = self.bp(layer, "sigma_b")?;
        let g = &mut self.g;
        let u = g.matmul(x, sw)?;
        let u = g.add_row(u, sb)?;
        let gate = g.sigmoid(u)?;
        let spread = g.scale(gate, cfg.sigma_max - cfg.sigma_min)?;
        let sigma = g.add_scalar(spread, cfg.sigma_min)?;
        let sigma_sq = g.mul(sigma, sigma)?;
        let two_sigma_sq = g.scale(sigma_sq, 2.0)?;
        let ones = g.constant(Tensor::filled(&[n, heads], 1.0))?;
        let inv_two_sigma_sq = g.div(ones, two_sigma_sq)?;
        let sigma_vals = g.value(sigma).clone();

        let images = (0..n)
            .map(|i| {
                let widest = sigma_vals.row(i).iter().copied().fold(0.0, f64::max);
                enumerate_images(self.s, i, mult * widest)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let out = self
                .head(layer, h, q, k, v, inv_two_sigma_sq, &sigma_vals, &images)
                .map_err(|e| match e {
                    Error::NonFinite { node, op } => Error::Numeric(format!(
                        "non-finite value in layer {layer} head {h} (node {node}, op {op})"
                    )),
                    other => other,
                })?;
            head_outputs.push(out);
        }

        let (wo, bo) = (self.bp(layer, "wo")?, self.bp(layer, "bo")?);
        let (ff1, bf1, ff2, bf2) = (
            self.bp(layer, "ff1")?,
            self.bp(layer, "bf1")?,
            self.bp(layer, "ff2")?,
            self.bp(layer, "bf2")?,
        );
        let g = &mut self.g;
        let cat = g.concat_cols(&head_outputs)?;
        let proj = g.matmul(cat, wo)?;
        let proj = g.add_row(proj, bo)?;
        let x1 = g.add(x, proj)?;
        let hidden = g.matmul(x1, ff1)?;
        let hidden = g.add_row(hidden, bf1)?;
        let hidden = g.silu(hidden)?;
        let ff = g.matmul(hidden, ff2)?;
        let ff = g.add_row(ff, bf2)?;
        g.add(x1, ff)
    }

    #[allow(clippy::too_many_arguments)]
    fn head(
        &mut self,
        layer: usize,
        h: usize,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        inv_two_sigma_sq: NodeId,
        sigma_vals: &Tensor,
        images: &[Vec<PeriodicImage>],
    ) -> Result<NodeId> {
        let cfg = self.cfg;
        let n = self.s.len();
        let heads = cfg.heads;
        let dk = cfg.head_width();
        let radii: Vec<f64> = (0..n)
            .map(|i| self.opts.radius_multiplier * sigma_vals.data()[i * heads + h])
            .collect();
        let edges = collect_edges(images, &radii);
        let psi_dist = self.bp(layer, "psi_dist")?;
        let psi_angl = self.bp(layer, "psi_angl")?;

        let g = &mut self.g;
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let edge_scores = g.gather(scores, edges.pair.clone())?;
        let inv_h = g.slice_cols(inv_two_sigma_sq, h, 1)?;
        let inv_e = g.gather(inv_h, edges.center.clone())?;
        let r2 = g.constant(Tensor::vector(edges.r.iter().map(|r| r * r).collect()))?;
        let decay = g.mul(r2, inv_e)?;
        let logits = g.sub(edge_scores, decay)?;
        let alpha = g.segment_softmax(logits, edges.offsets.clone())?;

        let attn = g.scatter_add(alpha, edges.pair.clone(), &[n, n])?;
        let mixed = g.matmul(attn, vh)?;

        let lambda = cfg.pos.lambda;
        let dist_basis = Arc::new(distance_basis(&edges.r, &cfg.pos.dist));
        let dist_agg = g.segment_aggregate(alpha, dist_basis, edges.offsets.clone())?;
        let w_dist = g.slice_cols(psi_dist, h * dk, dk)?;
        let psi = g.matmul(dist_agg, w_dist)?;
        let mut psi = g.scale(psi, lambda * cfg.pos.c_dist)?;

        let frames = self.frames_for_head(layer, h, alpha, &edges, images)?;
        if cfg.uses_angles() {
            let frames = frames.as_ref().expect("angles imply frames");
            let angles: Vec<[f64; 3]> = edges
                .center
                .iter()
                .zip(&edges.dir)
                .map(|(&i, d)| frames[i].project(d.as_ref()))
                .collect();
            let g = &mut self.g;
            let basis = Arc::new(angular_basis(&angles, &cfg.pos.angl));
            let angl_agg = g.segment_aggregate(alpha, basis, edges.offsets.clone())?;
            let w_angl = g.slice_cols(psi_angl, h * dk, dk)?;
            let term = g.matmul(angl_agg, w_angl)?;
            let term = g.scale(term, lambda * cfg.pos.c_angl)?;
            psi = g.add(psi, term)?;
        }

        if self.opts.record_trace {
            self.record(layer, h, sigma_vals, logits, alpha, &edges, images, frames);
        }
        self.g.add(mixed, psi)
    }

    /// Frames of every atom for one head, or `None` without angular features.
    fn frames_for_head(
        &self,
        layer: usize,
        h: usize,
        alpha: NodeId,
        edges: &Edges,
        images: &[Vec<PeriodicImage>],
    ) -> Result<Option<Vec<Frame>>> {
        let method = self.cfg.frame_method;
        if method == FrameMethod::None {
            return Ok(None);
        }
        let frames = if let Some(fixed) = &self.fixed {
            fixed.clone()
        } else {
            let weights = self.g.value(alpha).data();
            (0..self.s.len())
                .map(|i| {
                    let span = edges.offsets[i]..edges.offsets[i + 1];
                    let list: Vec<PeriodicImage> =
                        edges.source[span.clone()].iter().map(|&k| images[i][k].clone()).collect();
                    let nbhd = WeightedNeighborhood::from_images(&list, &weights[span])?;
                    if !nbhd.has_positive_weight() {
                        return Ok(fallback_frame(method));
                    }
                    let mut rng = self.opts.rng(layer, h, i);
                    match method {
                        FrameMethod::Max => max_frame(&nbhd, &mut rng),
                        _ => weighted_pca_frame(&nbhd, &mut rng),
                    }
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Some(if self.opts.corrupt_frames {
            frames.into_iter().map(corrupt).collect()
        } else {
            frames
        }))
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        layer: usize,
        h: usize,
        sigma_vals: &Tensor,
        logits: NodeId,
        alpha: NodeId,
        edges: &Edges,
        images: &[Vec<PeriodicImage>],
        frames: Option<Vec<Frame>>,
    ) {
        let logits = self.g.value(logits).data();
        let alpha = self.g.value(alpha).data();
        for i in 0..self.s.len() {
            let span = edges.offsets[i]..edges.offsets[i + 1];
            let mut top: Vec<TracedImage> = span
                .clone()
                .map(|e| {
                    let im = &images[i][edges.source[e]];
                    TracedImage {
                        j: im.j,
                        shift: im.shift,
                        r: im.r,
                        weight: alpha[e],
                    }
                })
                .collect();
            top.sort_by(|a, b| b.weight.total_cmp(&a.weight));
            top.truncate(TRACE_TOP_IMAGES);
            self.trace.push(TraceRecord {
                layer,
                head: h,
                atom: i,
                sigma: sigma_vals.data()[i * self.cfg.heads + h],
                normalizer: logits[span.clone()].iter().map(|l| l.exp()).sum(),
                weight_sum: alpha[span.clone()].iter().sum(),
                images: span.len(),
                top,
                frame: frames.as_ref().map(|f| f[i].clone()),
            });
        }
    }

    fn readout(&mut self, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (w1, b1, w2, b2) = (self.p("head.w1")?, self.p("head.b1")?, self.p("head.w2")?, self.p("head.b2")?);
        let g = &mut self.g;
        let pooled = g.mean_rows(x)?;
        let hidden = g.matmul(pooled, w1)?;
        let hidden = g.add_row(hidden, b1)?;
        let hidden = g.silu(hidden)?;
        let out = g.matmul(hidden, w2)?;
        Ok((pooled, g.add_row(out, b2)?))
    }
}

fn builder<'a>(
    cfg: &'a ModelConfig,
    params: &ParamStore,
    s: &'a CrystalStructure,
    opts: &'a ForwardOptions,
) -> Result<(Builder<'a>, Vec<(String, NodeId)>)> {
    cfg.validate()?;
    let mut g = Graph::new();
    let mut ids = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        ids.push((name.clone(), g.param(name, t.clone())?));
    }
    let b = Builder {
        cfg,
        s,
        opts,
        fixed: if cfg.uses_angles() { fixed_frames(cfg, s, opts)? } else { None },
        params: ids.iter().cloned().collect(),
        g,
        trace: Vec::new(),
    };
    Ok((b, ids))
}

/// Records the full encoder and prediction head for one structure.
pub fn forward(cfg: &ModelConfig, params: &ParamStore, s: &CrystalStructure, opts: &ForwardOptions) -> Result<Forward> {
    let (mut b, ids) = builder(cfg, params, s, opts)?;
    let mut x = b.embed()?;
    let mut states = vec![x];
    for layer in 0..cfg.blocks {
        x = b.block(x, layer)?;
        states.push(x);
    }
    let (pooled, output) = b.readout(x)?;
    Ok(Forward {
        graph: b.g,
        output,
        pooled,
        states,
        params: ids,
        trace: b.trace,
    })
}

/// Applies block `layer` to explicit atom states `x` (shape `[N, d]`).
pub fn attention_block(
    cfg: &ModelConfig,
    params: &ParamStore,
    s: &CrystalStructure,
    x: &Tensor,
    layer: usize,
    opts: &ForwardOptions,
) -> Result<Tensor> {
    if layer >= cfg.blocks {
        return Err(Error::invalid(format!("layer {layer} out of range for {} blocks", cfg.blocks)));
    }
    if x.shape() != [s.len(), cfg.width] {
        return Err(Error::invalid(format!(
            "states have shape {:?}, expected [{}, {}]",
            x.shape(),
            s.len(),
            cfg.width
        )));
    }
    let (mut b, _) = builder(cfg, params, s, opts)?;
    let xin = b.g.constant(x.clone())?;
    let out = b.block(xin, layer)?;
    Ok(b.g.value(out).clone())
}
