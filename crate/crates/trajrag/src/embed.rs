//! Trajectory embeddings for the fine retrieval index.
//!
//! A trajectory embeds as: deterministic one-hot node features, an
//! order-sensitive aggregate (position-decayed sum plus a bigram term), a
//! trainable linear projection, and a one-hot goal block, L2-normalized.
//! The projection is trained with an InfoNCE-style contrastive objective
//! whose gradient is computed analytically; training is full-batch and
//! seeded, so runs reproduce bit-exactly.

use crate::gridmap::{SectorLabel, SectorVector, SECTOR_COUNT};
use crate::textio::{tokens, LineCursor, TextError};
use crate::topo::TopoPolarTrajectory;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Position-decay factor of the sequence aggregate; the last node always
/// carries weight 1.
pub const DECAY: f64 = 0.8;
/// Default softmax temperature of the contrastive loss.
pub const DEFAULT_TAU: f64 = 0.1;
/// Default output dimension of the trained projection.
pub const DEFAULT_D_OUT: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("sector label category {0} out of alphabet (have {1} categories)")]
    LabelOutOfAlphabet(u16, usize),
    #[error("goal category {0} out of range (have {1})")]
    GoalOutOfRange(u16, usize),
    #[error("cannot aggregate an empty node sequence")]
    EmptySequence,
    #[error("temperature must be positive, got {0}")]
    BadTau(f64),
    #[error("aggregate dimension {0} does not match projection input {1}")]
    DimensionMismatch(usize, usize),
    #[error("degenerate training batch: {0}")]
    DegenerateBatch(String),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Size of the per-sector label alphabet: free, obstacle, unknown, plus one
/// slot per semantic category.
pub fn alphabet_size(n_categories: usize) -> usize {
    3 + n_categories
}

/// Dimension of a node feature vector: one alphabet block per sector.
pub fn feature_dim(n_categories: usize) -> usize {
    SECTOR_COUNT * alphabet_size(n_categories)
}

/// Dimension of the sequence aggregate: decayed-sum block plus bigram block.
pub fn aggregate_dim(n_categories: usize) -> usize {
    2 * feature_dim(n_categories)
}

fn label_slot(label: SectorLabel, n_categories: usize) -> Result<usize, EmbedError> {
    match label {
        SectorLabel::Free => Ok(0),
        SectorLabel::Obstacle => Ok(1),
        SectorLabel::Unknown => Ok(2),
        SectorLabel::Category(c) => {
            if (c as usize) < n_categories {
                Ok(3 + c as usize)
            } else {
                Err(EmbedError::LabelOutOfAlphabet(c, n_categories))
            }
        }
    }
}

/// One-hot encoding of a sector vector: sector k occupies the k-th alphabet
/// block, so the result has exactly 12 ones.
pub fn featurize_node(s: &SectorVector, n_categories: usize) -> Result<Vec<f64>, EmbedError> {
    let a = alphabet_size(n_categories);
    let mut f = vec![0.0; feature_dim(n_categories)];
    for k in 0..SECTOR_COUNT {
        f[k * a + label_slot(s.get(k), n_categories)?] = 1.0;
    }
    Ok(f)
}

/// Order-sensitive pooling of a feature sequence: the decayed sum
/// Σ_t DECAY^(L−1−t)·f_t concatenated with the mean of element-wise products
/// of consecutive features (all zeros for a single node).
pub fn aggregate_sequence(features: &[Vec<f64>]) -> Result<Vec<f64>, EmbedError> {
    let len = features.len();
    if len == 0 {
        return Err(EmbedError::EmptySequence);
    }
    let dim = features[0].len();
    let mut decayed = vec![0.0; dim];
    for (t, f) in features.iter().enumerate() {
        let w = DECAY.powi((len - 1 - t) as i32);
        for (d, x) in f.iter().enumerate() {
            decayed[d] += w * x;
        }
    }
    let mut bigram = vec![0.0; dim];
    if len >= 2 {
        for w in features.windows(2) {
            for d in 0..dim {
                bigram[d] += w[0][d] * w[1][d];
            }
        }
        for b in bigram.iter_mut() {
            *b /= (len - 1) as f64;
        }
    }
    decayed.extend_from_slice(&bigram);
    Ok(decayed)
}

// ============================================================================
// Projection
// ============================================================================

/// The trainable linear layer mapping sequence aggregates into the
/// fine-index embedding space. Row-major `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub n_categories: usize,
    pub d_out: usize,
    pub weights: Vec<f64>,
}

impl ProjectionParams {
    pub fn d_in(&self) -> usize {
        aggregate_dim(self.n_categories)
    }

    pub fn zeros(n_categories: usize, d_out: usize) -> Self {
        let d_in = aggregate_dim(n_categories);
        ProjectionParams { n_categories, d_out, weights: vec![0.0; d_out * d_in] }
    }

    /// Seeded uniform init scaled by the input dimension.
    pub fn random(n_categories: usize, d_out: usize, seed: u64) -> Self {
        let d_in = aggregate_dim(n_categories);
        let scale = (3.0 / d_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..d_out * d_in).map(|_| rng.gen_range(-scale..scale)).collect();
        ProjectionParams { n_categories, d_out, weights }
    }

    fn apply(&self, aggregate: &[f64]) -> Result<Vec<f64>, EmbedError> {
        let d_in = self.d_in();
        if aggregate.len() != d_in {
            return Err(EmbedError::DimensionMismatch(aggregate.len(), d_in));
        }
        let mut u = vec![0.0; self.d_out];
        for (r, out) in u.iter_mut().enumerate() {
            let row = &self.weights[r * d_in..(r + 1) * d_in];
            *out = row.iter().zip(aggregate).map(|(w, a)| w * a).sum();
        }
        Ok(u)
    }

    /// Version-tagged text block: dimensions, then one line per matrix row.
    /// Floats round-trip bit-exactly.
    pub fn to_text_block(&self) -> String {
        let d_in = self.d_in();
        let mut out = String::from("projection v1\n");
        out.push_str(&format!("dims {} {} {}\n", self.d_out, d_in, self.n_categories));
        for r in 0..self.d_out {
            let row: Vec<String> =
                self.weights[r * d_in..(r + 1) * d_in].iter().map(|w| w.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn parse_block(cur: &mut LineCursor) -> Result<ProjectionParams, EmbedError> {
        cur.expect("projection v1")?;
        let dims = cur.expect_key("dims")?;
        let toks = tokens(&dims);
        if toks.len() != 3 {
            return Err(TextError::at(cur.line_no(), "dims expects d_out, d_in, n_categories").into());
        }
        let d_out: usize = cur.parse_one(toks[0], "d_out")?;
        let d_in: usize = cur.parse_one(toks[1], "d_in")?;
        let n_categories: usize = cur.parse_one(toks[2], "n_categories")?;
        if d_in != aggregate_dim(n_categories) {
            return Err(TextError::at(
                cur.line_no(),
                format!("d_in {} does not match {} categories", d_in, n_categories),
            )
            .into());
        }
        let mut weights = Vec::with_capacity(d_out * d_in);
        for _ in 0..d_out {
            let line = cur.next()?.to_string();
            let toks = tokens(&line);
            if toks.len() != d_in {
                return Err(TextError::at(cur.line_no(), format!("expected {} weights", d_in)).into());
            }
            for t in toks {
                weights.push(cur.parse_one::<f64>(t, "weight")?);
            }
        }
        cur.expect("end")?;
        Ok(ProjectionParams { n_categories, d_out, weights })
    }
}

// ============================================================================
// Embedding
// ============================================================================

/// Unit-norm embedding: normalized projection output concatenated with a
/// one-hot goal block, normalized again.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEmbedding(pub Vec<f64>);

impl TrajectoryEmbedding {
    /// Cosine similarity; embeddings are unit norm, so this is the dot
    /// product.
    pub fn dot(&self, other: &TrajectoryEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// A trajectory reduced to what the embedding pipeline needs: its aggregate
/// vector (projection-independent) and goal category.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedItem {
    pub aggregate: Vec<f64>,
    pub goal: u16,
}

pub fn prepare_item(traj: &TopoPolarTrajectory, n_categories: usize) -> Result<EmbedItem, EmbedError> {
    if traj.goal_category as usize >= n_categories {
        return Err(EmbedError::GoalOutOfRange(traj.goal_category, n_categories));
    }
    let features: Vec<Vec<f64>> = traj
        .nodes
        .iter()
        .map(|n| featurize_node(&n.sector_vector, n_categories))
        .collect::<Result<_, _>>()?;
    Ok(EmbedItem { aggregate: aggregate_sequence(&features)?, goal: traj.goal_category })
}

fn embed_item(item: &EmbedItem, params: &ProjectionParams) -> Result<TrajectoryEmbedding, EmbedError> {
    let mut u = params.apply(&item.aggregate)?;
    normalize_in_place(&mut u);
    u.extend((0..params.n_categories).map(|c| if c == item.goal as usize { 1.0 } else { 0.0 }));
    normalize_in_place(&mut u);
    Ok(TrajectoryEmbedding(u))
}

pub fn embed_trajectory(
    traj: &TopoPolarTrajectory,
    params: &ProjectionParams,
) -> Result<TrajectoryEmbedding, EmbedError> {
    embed_item(&prepare_item(traj, params.n_categories)?, params)
}

// ============================================================================
// Contrastive objective
// ============================================================================

/// −log softmax of the positive among positive-plus-negatives, computed in
/// the overflow-safe log-sum-exp form. Zero negatives give exactly 0.
pub fn contrastive_loss(
    anchor: &TrajectoryEmbedding,
    positive: &TrajectoryEmbedding,
    negatives: &[TrajectoryEmbedding],
    tau: f64,
) -> Result<f64, EmbedError> {
    if tau <= 0.0 {
        return Err(EmbedError::BadTau(tau));
    }
    let xp = anchor.dot(positive) / tau;
    // loss = logsumexp(0, x_k − x_p for all negatives k).
    let xs: Vec<f64> = negatives.iter().map(|n| anchor.dot(n) / tau - xp).collect();
    let m = xs.iter().fold(0.0f64, |m, x| m.max(*x));
    let sum = (-m).exp() + xs.iter().map(|x| (x - m).exp()).sum::<f64>();
    Ok(m + sum.ln())
}

/// One training example: anchor, positive, negatives, all indices into the
/// item list.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub entries: Vec<(usize, usize, Vec<usize>)>,
}

struct Embedded {
    aggregate: Vec<f64>,
    /// Projection output direction (unit) and its pre-normalization length.
    unit: Vec<f64>,
    norm: f64,
    goal: u16,
}

fn embed_all(items: &[EmbedItem], params: &ProjectionParams) -> Result<Vec<Embedded>, EmbedError> {
    items
        .iter()
        .map(|it| {
            let mut u = params.apply(&it.aggregate)?;
            let norm = normalize_in_place(&mut u);
            Ok(Embedded { aggregate: it.aggregate.clone(), unit: u, norm, goal: it.goal })
        })
        .collect()
}

/// Embedding similarity written in terms of the projection direction: the
/// goal blocks are one-hot, so the final normalization divides by exactly 2.
fn pair_sim(a: &Embedded, b: &Embedded) -> f64 {
    let udot: f64 = a.unit.iter().zip(&b.unit).map(|(x, y)| x * y).sum();
    let gdot = if a.goal == b.goal { 1.0 } else { 0.0 };
    (udot + gdot) / 2.0
}

fn check_batch(items: &[EmbedItem], batch: &ContrastiveBatch) -> Result<(), EmbedError> {
    if batch.entries.is_empty() {
        return Err(EmbedError::DegenerateBatch("no entries".into()));
    }
    for (a, p, negs) in &batch.entries {
        if *a >= items.len() || *p >= items.len() || negs.iter().any(|n| *n >= items.len()) {
            return Err(EmbedError::DegenerateBatch(format!("entry ({a}, {p}, ..) indexes past items")));
        }
        if negs.is_empty() {
            return Err(EmbedError::DegenerateBatch(format!("anchor {a} has no negatives")));
        }
    }
    Ok(())
}

/// Mean contrastive loss of a batch under the given projection.
pub fn batch_loss(
    params: &ProjectionParams,
    items: &[EmbedItem],
    batch: &ContrastiveBatch,
    tau: f64,
) -> Result<f64, EmbedError> {
    if tau <= 0.0 {
        return Err(EmbedError::BadTau(tau));
    }
    check_batch(items, batch)?;
    let embedded = embed_all(items, params)?;
    let mut total = 0.0;
    for (a, p, negs) in &batch.entries {
        let xp = pair_sim(&embedded[*a], &embedded[*p]) / tau;
        let xs: Vec<f64> =
            negs.iter().map(|n| pair_sim(&embedded[*a], &embedded[*n]) / tau - xp).collect();
        let m = xs.iter().fold(0.0f64, |m, x| m.max(*x));
        let sum = (-m).exp() + xs.iter().map(|x| (x - m).exp()).sum::<f64>();
        total += m + sum.ln();
    }
    Ok(total / batch.entries.len() as f64)
}

/// Exact analytic gradient of `batch_loss` with respect to the projection
/// weights, same shape as `params.weights`.
///
/// For each scored pair the similarity is (û_a·û_j + g_a·g_j)/2 where
/// û = Wa/‖Wa‖, so ∂sim/∂W = ((I−û_aû_aᵀ)û_j/‖Wa_a‖)·a_aᵀ/2 plus the
/// mirrored term in j; the softmax contributes weight (w_j − [j = positive])/τ.
pub fn contrastive_grad(
    params: &ProjectionParams,
    items: &[EmbedItem],
    batch: &ContrastiveBatch,
    tau: f64,
) -> Result<Vec<f64>, EmbedError> {
    if tau <= 0.0 {
        return Err(EmbedError::BadTau(tau));
    }
    check_batch(items, batch)?;
    let embedded = embed_all(items, params)?;
    let d_in = params.d_in();
    let mut grad = vec![0.0; params.d_out * d_in];
    let scale = 1.0 / batch.entries.len() as f64;
    // Accumulates coeff · ∂(û_a·û_j)/∂W into grad.
    let add_pair = |grad: &mut [f64], a: &Embedded, j: &Embedded, coeff: f64| {
        for (x, y) in [(a, j), (j, a)] {
            if x.norm == 0.0 {
                continue;
            }
            let udot: f64 = x.unit.iter().zip(&y.unit).map(|(p, q)| p * q).sum();
            for r in 0..params.d_out {
                let v = coeff * (y.unit[r] - udot * x.unit[r]) / x.norm;
                if v == 0.0 {
                    continue;
                }
                let row = &mut grad[r * d_in..(r + 1) * d_in];
                for (slot, ax) in row.iter_mut().zip(&x.aggregate) {
                    *slot += v * ax;
                }
            }
        }
    };
    for (a, p, negs) in &batch.entries {
        let anchor = &embedded[*a];
        // Stable softmax over the positive and negatives.
        let mut sims = vec![pair_sim(anchor, &embedded[*p]) / tau];
        sims.extend(negs.iter().map(|n| pair_sim(anchor, &embedded[*n]) / tau));
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|x| (x - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        // d(loss)/d(sim_j) = (softmax_j − [j = positive]) / τ; the extra 1/2
        // comes from sim = (û·û + g·g)/2.
        let c = scale / (tau * 2.0);
        add_pair(&mut grad, anchor, &embedded[*p], (exps[0] / denom - 1.0) * c);
        for (k, n) in negs.iter().enumerate() {
            add_pair(&mut grad, anchor, &embedded[*n], (exps[k + 1] / denom) * c);
        }
    }
    Ok(grad)
}

// ============================================================================
// Training
// ============================================================================

/// A trajectory with the topological group it belongs to.
#[derive(Debug, Clone)]
pub struct LabeledTrajectory {
    pub traj: TopoPolarTrajectory,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub d_out: usize,
    pub negatives_per_anchor: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 0.5,
            tau: DEFAULT_TAU,
            d_out: DEFAULT_D_OUT,
            negatives_per_anchor: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ProjectionParams,
    /// Mean batch loss before the first update and after the last one.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Seeded batch construction: every item anchors once when possible, the
/// positive is drawn from items sharing its group or goal, negatives from
/// other groups.
pub fn build_training_batch(
    dataset: &[LabeledTrajectory],
    negatives_per_anchor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ContrastiveBatch, EmbedError> {
    let mut entries = Vec::new();
    for (i, anchor) in dataset.iter().enumerate() {
        let positives: Vec<usize> = (0..dataset.len())
            .filter(|&j| {
                j != i
                    && (dataset[j].group == anchor.group
                        || dataset[j].traj.goal_category == anchor.traj.goal_category)
            })
            .collect();
        let negatives: Vec<usize> =
            (0..dataset.len()).filter(|&j| dataset[j].group != anchor.group).collect();
        let (Some(&p), false) = (positives.as_slice().choose(rng), negatives.is_empty()) else {
            continue;
        };
        let mut negs = negatives;
        negs.shuffle(rng);
        negs.truncate(negatives_per_anchor.max(1));
        negs.sort_unstable();
        entries.push((i, p, negs));
    }
    if entries.is_empty() {
        return Err(EmbedError::DegenerateBatch(
            "no anchor has both a positive and a cross-group negative".into(),
        ));
    }
    Ok(ContrastiveBatch { entries })
}

/// Full-batch gradient descent on the projection. Deterministic for a fixed
/// seed: the initial weights and the batch are both derived from it. Each
/// epoch backtracks (halves the step) while the step would raise the batch
/// loss, so the reported final loss never exceeds the initial one.
pub fn train_projection(
    dataset: &[LabeledTrajectory],
    n_categories: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport, EmbedError> {
    let groups: std::collections::BTreeSet<usize> = dataset.iter().map(|d| d.group).collect();
    if groups.len() < 2 {
        return Err(EmbedError::DegenerateBatch(format!(
            "need at least 2 groups, got {}",
            groups.len()
        )));
    }
    let items: Vec<EmbedItem> =
        dataset.iter().map(|d| prepare_item(&d.traj, n_categories)).collect::<Result<_, _>>()?;
    let mut params = ProjectionParams::random(n_categories, cfg.d_out, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch = build_training_batch(dataset, cfg.negatives_per_anchor, &mut rng)?;
    let initial_loss = batch_loss(&params, &items, &batch, cfg.tau)?;
    let mut loss = initial_loss;
    'epochs: for _ in 0..cfg.epochs {
        let grad = contrastive_grad(&params, &items, &batch, cfg.tau)?;
        let mut step = cfg.lr;
        loop {
            let mut trial = params.clone();
            for (w, g) in trial.weights.iter_mut().zip(&grad) {
                *w -= step * g;
            }
            let trial_loss = batch_loss(&trial, &items, &batch, cfg.tau)?;
            if trial_loss <= loss {
                params = trial;
                loss = trial_loss;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                // No improving step along this gradient; we are at a
                // numerical stationary point.
                break 'epochs;
            }
        }
    }
    Ok(TrainReport { params, initial_loss, final_loss: loss })
}
