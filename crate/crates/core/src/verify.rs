//! Gradient verification suite: reverse-mode gradients against central
//! finite differences on randomized composite graphs and on the full
//! second-stage loss through a small vision transformer.

use std::time::{Duration, Instant};

use crate::encoders::{build_stack, scaled_normal, Conditioning, EncoderConfig};
use crate::error::Result;
use crate::objectives::{head_logits, label_positions, ortho_second, HeadVars};
use crate::prompts::{build_residual_graph, similarity_graph, SimilarityMode};
use crate::rng::Rng;
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};

/// Tolerance for randomized graphs.
pub const RANDOM_GRAPH_TOL: f64 = 1e-4;
/// Tolerance for the second-stage loss.
pub const STAGE2_TOL: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 100;
pub const MAX_DEPTH: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Gelu,
    LayerNorm,
    Softmax,
    LogSoftmax,
    L2Normalize,
    Scale,
    MatmulSquare,
    AddRow,
    Add,
    Sub,
    Mul,
    ScaleByMean,
    Gram,
    ConcatSlice,
    Transpose2,
    LogOfSoftmax,
}

const OPS: [Op; 16] = [
    Op::Gelu,
    Op::LayerNorm,
    Op::Softmax,
    Op::LogSoftmax,
    Op::L2Normalize,
    Op::Scale,
    Op::MatmulSquare,
    Op::AddRow,
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::ScaleByMean,
    Op::Gram,
    Op::ConcatSlice,
    Op::Transpose2,
    Op::LogOfSoftmax,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    WeightedSum,
    CrossEntropy,
    MeanSquare,
    Cosine,
}

/// A randomly drawn graph: two `r × c` leaves, a `c × c` leaf and a `1 × c`
/// leaf, followed by a chain of ops.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    rows: usize,
    cols: usize,
    steps: Vec<(Op, usize, f64)>,
    reduce: Reduce,
    weights: Tensor<f64>,
    targets: Vec<usize>,
    pub params: Vec<Tensor<f64>>,
}

impl RandomGraph {
    pub fn draw(rng: &mut Rng) -> Self {
        let rows = 1 + rng.below(3);
        let cols = 2 + rng.below(4);
        let depth = 1 + rng.below(MAX_DEPTH);
        let mut steps = Vec::with_capacity(depth);
        for k in 0..depth {
            let op = OPS[rng.below(OPS.len())];
            // Nodes 0 and 1 are the r × c leaves, then one node per step.
            let pool = 2 + k;
            let other = match rng.below(pool) {
                i if i < 2 => i,
                i => i + 2,
            };
            steps.push((op, other, 0.5 + rng.uniform()));
        }
        let reduce = [
            Reduce::WeightedSum,
            Reduce::CrossEntropy,
            Reduce::MeanSquare,
            Reduce::Cosine,
        ][rng.below(4)];
        let params = vec![
            scaled_normal(rng, rows, cols, 1.0),
            scaled_normal(rng, rows, cols, 1.0),
            scaled_normal(rng, cols, cols, 0.5),
            scaled_normal(rng, 1, cols, 1.0),
        ];
        Self {
            rows,
            cols,
            steps,
            reduce,
            weights: scaled_normal(rng, rows, cols, 1.0),
            targets: (0..rows).map(|_| rng.below(cols)).collect(),
            params,
        }
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    /// Builds the scalar output on `g` from the leaves `p`.
    pub fn build(&self, g: &mut Graph<f64>, p: &[Var]) -> Result<Var> {
        // nodes: [p0, p1, p2, p3, step outputs...]
        let mut nodes: Vec<Var> = p.to_vec();
        let mut h = p[0];
        for &(op, other, k) in &self.steps {
            let o = nodes[other];
            h = match op {
                Op::Gelu => g.gelu(h)?,
                Op::LayerNorm => g.layer_norm(h)?,
                Op::Softmax => g.softmax(h)?,
                Op::LogSoftmax => g.log_softmax(h)?,
                Op::L2Normalize => g.l2_normalize(h)?,
                Op::Scale => g.scale(h, k)?,
                Op::MatmulSquare => g.matmul(h, p[2])?,
                Op::AddRow => g.add_row(h, p[3])?,
                Op::Add => g.add(h, o)?,
                Op::Sub => g.sub(h, o)?,
                Op::Mul => g.mul(h, o)?,
                Op::ScaleByMean => {
                    let m = g.mean(o)?;
                    g.scale_by(h, m)?
                }
                Op::Gram => {
                    let s = g.matmul_nt(h, o)?;
                    let s = g.scale(s, 1.0 / self.cols as f64)?;
                    g.matmul(s, o)?
                }
                Op::ConcatSlice => {
                    let c = g.concat_cols(&[o, h])?;
                    let c = g.concat_rows(&[c, c])?;
                    let c = g.slice_rows(c, self.rows, self.rows)?;
                    g.slice_cols(c, self.cols, self.cols)?
                }
                Op::Transpose2 => {
                    let t = g.transpose(h)?;
                    let t = g.sum_cols(t)?;
                    let t = g.reshape(t, &[self.cols, 1])?;
                    let t = g.transpose(t)?;
                    let t = g.scale(t, 0.5)?;
                    g.add_row(h, t)?
                }
                Op::LogOfSoftmax => {
                    let s = g.softmax(h)?;
                    g.log(s)?
                }
            };
            nodes.push(h);
        }
        match self.reduce {
            Reduce::WeightedSum => {
                let w = g.constant(self.weights.clone())?;
                let m = g.mul(h, w)?;
                g.sum(m)
            }
            Reduce::CrossEntropy => g.cross_entropy(h, &self.targets),
            Reduce::MeanSquare => {
                let m = g.mul(h, h)?;
                g.mean(m)
            }
            Reduce::Cosine => {
                let w = g.constant(self.weights.clone())?;
                let c = g.cosine_similarity(h, w)?;
                g.sum(c)
            }
        }
    }
}

/// Outcome of one graph of the randomized suite.
#[derive(Clone, Debug)]
pub struct TrialResult {
    pub trial: usize,
    pub depth: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub trials: Vec<TrialResult>,
    pub random_max_rel_err: f64,
    pub stage2: GradCheckReport,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.trials.iter().all(|t| t.passed) && self.stage2.passed
    }

    pub fn failures(&self) -> impl Iterator<Item = &TrialResult> {
        self.trials.iter().filter(|t| !t.passed)
    }
}

/// Checks `trials` random graphs drawn from `seed`.
pub fn random_graph_trials(trials: usize, seed: u64) -> Result<Vec<TrialResult>> {
    let root = Rng::new(seed);
    (0..trials)
        .map(|trial| {
            let graph = RandomGraph::draw(&mut root.fork(trial as u64));
            let report = grad_check(|g, p| graph.build(g, p), &graph.params, RANDOM_GRAPH_TOL)?;
            Ok(TrialResult {
                trial,
                depth: graph.depth(),
                max_rel_err: report.max_rel_err,
                passed: report.passed,
            })
        })
        .collect()
}

/// Encoder used by the second-stage check: a 2-block main transformer.
pub fn stage2_encoder() -> EncoderConfig {
    EncoderConfig {
        d: 8,
        d_prime: 16,
        layers: 2,
        heads: 2,
        seq_len: 5,
        patch_dim: 4,
        text_heads: 2,
        text_layers: 1,
        vision_layers: 1,
        ..EncoderConfig::default()
    }
}

/// Checks the full second-stage objective, `CE(θ; ViT(x | sim·Q)) + λ·ortho(Q)`,
/// with respect to `Q`, `A` and the head `(W, b)` on a batch of two inputs.
pub fn stage2_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = stage2_encoder();
    let stack = build_stack(&cfg, seed)?.cast::<f64>();
    let mut rng = Rng::new(seed).fork(1);
    let classes = 3;
    let xs: Vec<Tensor<f64>> = (0..2)
        .map(|_| scaled_normal(&mut rng, cfg.num_patches(), cfg.patch_dim, 1.0))
        .collect();
    let zs = xs
        .iter()
        .map(|x| stack.vision_encode(x))
        .collect::<Result<Vec<_>>>()?;
    let key: Tensor<f64> = scaled_normal(&mut rng, 1, cfg.d, 1.0 / (cfg.d as f64).sqrt());
    let past: Vec<Tensor<f32>> = vec![scaled_normal(&mut rng, cfg.layers, cfg.d_prime, 1.0)];
    let head_classes = [10usize, 11, 12];
    let labels = [12usize, 10];
    let targets = label_positions(&head_classes, &labels)?;
    let lambda = 0.5;
    let params = vec![
        scaled_normal(&mut rng, cfg.layers, cfg.d_prime, 0.5),
        Tensor::<f64>::full(&[1, cfg.d], 1.0),
        scaled_normal(&mut rng, cfg.d_prime, classes, 0.3),
        scaled_normal(&mut rng, 1, classes, 0.1),
    ];
    grad_check(
        |g, p| {
            let (q, a) = (p[0], p[1]);
            let w = g.constant(key.clone())?;
            let mut cls = Vec::with_capacity(xs.len());
            for (x, z) in xs.iter().zip(&zs) {
                let zv = g.constant(z.clone())?;
                let sim = similarity_graph(g, zv, a, w, SimilarityMode::Weighted)?;
                let r = build_residual_graph(g, q, sim, false)?;
                cls.push(stack.vit_forward_graph(g, x, &Conditioning::Residual(r))?);
            }
            let feats = g.concat_rows(&cls)?;
            let logits = head_logits(
                g,
                HeadVars {
                    weight: p[2],
                    bias: p[3],
                },
                feats,
            )?;
            let ce = g.cross_entropy(logits, &targets)?;
            let o = ortho_second(g, &[q], &past, cfg.layers, false)?;
            let o = g.scale(o, lambda)?;
            g.add(ce, o)
        },
        &params,
        STAGE2_TOL,
    )
}

/// Runs the whole suite with a fixed seed.
pub fn run_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let trials = random_graph_trials(trials, seed)?;
    let random_max_rel_err = trials.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    let stage2 = stage2_check(seed)?;
    Ok(SuiteReport {
        trials,
        random_max_rel_err,
        stage2,
        elapsed: start.elapsed(),
    })
}
