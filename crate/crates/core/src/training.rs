//! Loss assembly, SGD over the learnable set, and gradient verification.
//!
//! The learnables are deliberately few: the fusion balance `rho`, the 2n slot
//! weights, the multi-level residual chain, and the background textual
//! vectors. Their gradients are derived analytically layer by layer; central
//! finite differences stay around as the permanent test oracle.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::fusion::FusionParams;
use crate::numerics::{dot, Matrix};
use crate::pipeline::{self, EpisodeInputs, PreparedEpisode};
use crate::prediction::{ClassProbMap, LevelFusionParams, LevelWeights, PredictionParams};
use crate::{Error, Result};

/// Weighting of the auxiliary per-level loss terms and the log clamp floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub eps: f64,
}

impl LossConfig {
    pub fn new(lambda: f64, eps: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(eps > 0.0 && eps <= 1e-3) {
            return Err(Error::Config(format!(
                "eps must lie in (0, 1e-3], got {eps}"
            )));
        }
        Ok(LossConfig { lambda, eps })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.01,
            eps: 1e-6,
        }
    }
}

/// Every learnable scalar, vector and matrix of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub fusion: FusionParams,
    pub prediction: PredictionParams,
    /// One learnable vector per textual slot of the background class.
    pub background_text: Vec<Vec<f64>>,
}

impl ModelParams {
    /// Fresh parameters: unit slot weights, `alpha = 1`, residual-chain
    /// matrices orthogonal scaled by 0.1, zero biases, zero background text.
    /// The scalar projections `w_in`/`w_out` start at all-ones so the chain
    /// begins as a monotone pass-through of the last fused level; a
    /// zero-symmetric start cannot order classes at all.
    pub fn init(n: usize, levels: usize, width: usize, dim: usize, seed: u64) -> Self {
        assert!(n >= 1 && levels >= 1 && width >= 1 && dim >= 1);
        let mut rng = StdRng::seed_from_u64(seed);
        ModelParams {
            fusion: FusionParams::from_rho(0.0),
            prediction: PredictionParams {
                w_p: vec![1.0; 2 * n],
                fusion: LevelFusionParams {
                    w_in: vec![1.0; width],
                    levels: (0..levels)
                        .map(|_| LevelWeights {
                            w: orthogonal_matrix(width, &mut rng).scale(0.1),
                            b: vec![0.0; width],
                        })
                        .collect(),
                    w_out: vec![1.0; width],
                },
            },
            background_text: vec![vec![0.0; dim]; n],
        }
    }

    pub fn slots_per_modality(&self) -> usize {
        self.prediction.w_p.len() / 2
    }

    /// Serializes every learnable into one vector; [`Self::from_flat`]
    /// inverts it. The order matches [`Self::param_names`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = vec![self.fusion.rho()];
        out.extend(&self.prediction.w_p);
        out.extend(&self.prediction.fusion.w_in);
        for lw in &self.prediction.fusion.levels {
            out.extend(lw.w.data());
            out.extend(&lw.b);
        }
        out.extend(&self.prediction.fusion.w_out);
        for row in &self.background_text {
            out.extend(row);
        }
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.flatten().len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.flatten().len(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("length checked");
        out.fusion = FusionParams::from_rho(next());
        for v in &mut out.prediction.w_p {
            *v = next();
        }
        for v in &mut out.prediction.fusion.w_in {
            *v = next();
        }
        for lw in &mut out.prediction.fusion.levels {
            let d = lw.b.len();
            for i in 0..d {
                for j in 0..d {
                    lw.w.set(i, j, next());
                }
            }
            for v in &mut lw.b {
                *v = next();
            }
        }
        for v in &mut out.prediction.fusion.w_out {
            *v = next();
        }
        for row in &mut out.background_text {
            for v in row {
                *v = next();
            }
        }
        Ok(out)
    }

    /// One human-readable name per flattened coordinate.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["rho".to_string()];
        names.extend((0..self.prediction.w_p.len()).map(|i| format!("w_p[{i}]")));
        let d = self.prediction.fusion.width();
        names.extend((0..d).map(|i| format!("w_in[{i}]")));
        for (l, _) in self.prediction.fusion.levels.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    names.push(format!("w_{}[{i}][{j}]", l + 1));
                }
            }
            names.extend((0..d).map(|i| format!("b_{}[{i}]", l + 1)));
        }
        names.extend((0..d).map(|i| format!("w_out[{i}]")));
        for (r, row) in self.background_text.iter().enumerate() {
            names.extend((0..row.len()).map(|c| format!("bg_text[{r}][{c}]")));
        }
        names
    }
}

/// Gradient holder mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub d_rho: f64,
    pub d_w_p: Vec<f64>,
    pub d_w_in: Vec<f64>,
    pub d_levels_w: Vec<Matrix>,
    pub d_levels_b: Vec<Vec<f64>>,
    pub d_w_out: Vec<f64>,
    pub d_background_text: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let d = params.prediction.fusion.width();
        ModelGrads {
            d_rho: 0.0,
            d_w_p: vec![0.0; params.prediction.w_p.len()],
            d_w_in: vec![0.0; d],
            d_levels_w: params
                .prediction
                .fusion
                .levels
                .iter()
                .map(|_| Matrix::zeros(d, d))
                .collect(),
            d_levels_b: params
                .prediction
                .fusion
                .levels
                .iter()
                .map(|_| vec![0.0; d])
                .collect(),
            d_w_out: vec![0.0; d],
            d_background_text: params
                .background_text
                .iter()
                .map(|r| vec![0.0; r.len()])
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = vec![self.d_rho];
        out.extend(&self.d_w_p);
        out.extend(&self.d_w_in);
        for (w, b) in self.d_levels_w.iter().zip(&self.d_levels_b) {
            out.extend(w.data());
            out.extend(b);
        }
        out.extend(&self.d_w_out);
        for row in &self.d_background_text {
            out.extend(row);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Gram-Schmidt on Gaussian rows.
fn orthogonal_matrix(d: usize, rng: &mut StdRng) -> Matrix {
    'retry: loop {
        let mut rows: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        for i in 0..d {
            for j in 0..i {
                let proj = dot(&rows[i], &rows[j]);
                for k in 0..d {
                    rows[i][k] -= proj * rows[j][k];
                }
            }
            let norm = dot(&rows[i], &rows[i]).sqrt();
            if norm < 1e-8 {
                continue 'retry;
            }
            for v in &mut rows[i] {
                *v /= norm;
            }
        }
        return Matrix::from_rows(&rows).expect("square by construction");
    }
}

/// Mean over pixels of `-log(max(p_target, eps))`.
pub fn cross_entropy(probs: &ClassProbMap, target: &[usize], eps: f64) -> Result<f64> {
    let rows = probs.probs.rows();
    if target.len() != rows {
        return Err(Error::shape(format!(
            "{} target pixels vs {} probability rows",
            target.len(),
            rows
        )));
    }
    let classes = probs.classes.len();
    let mut total = 0.0;
    for (r, &t) in target.iter().enumerate() {
        if t >= classes {
            return Err(Error::BadLabel { label: t, classes });
        }
        total -= probs.probs.get(r, t).max(eps).ln();
    }
    Ok(total / rows as f64)
}

/// Final cross-entropy plus `lambda` times the per-level terms.
pub fn total_loss(
    final_probs: &ClassProbMap,
    intermediates: &[ClassProbMap],
    target: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut loss = cross_entropy(final_probs, target, cfg.eps)?;
    for level in intermediates {
        loss += cfg.lambda * cross_entropy(level, target, cfg.eps)?;
    }
    Ok(loss)
}

/// Gradient of the final cross-entropy w.r.t. the pre-softmax logits.
fn ce_softmax_backward(probs: &Matrix, target: &[usize], eps: f64) -> Matrix {
    let n = target.len() as f64;
    let mut d = Matrix::zeros(probs.rows(), probs.cols());
    for (r, &t) in target.iter().enumerate() {
        if probs.get(r, t) <= eps {
            continue; // inside the clamp, locally constant
        }
        let dst = d.row_mut(r);
        for (c, &p) in probs.row(r).iter().enumerate() {
            dst[c] = (p - if c == t { 1.0 } else { 0.0 }) / n;
        }
    }
    d
}

/// Gradient of `weight * CE` w.r.t. the probabilities themselves.
fn ce_prob_backward(probs: &Matrix, target: &[usize], eps: f64, weight: f64) -> Matrix {
    let n = target.len() as f64;
    let mut d = Matrix::zeros(probs.rows(), probs.cols());
    for (r, &t) in target.iter().enumerate() {
        let p = probs.get(r, t);
        if p > eps {
            d.row_mut(r)[t] = -weight / (n * p);
        }
    }
    d
}

/// Loss of one episode under the current parameters.
pub fn episode_loss(
    inputs: &EpisodeInputs,
    params: &ModelParams,
    target: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    let fwd = pipeline::forward(inputs, params)?;
    total_loss(&fwd.final_probs, &fwd.intermediates, target, cfg)
}

/// Loss plus analytic gradients for every learnable.
pub fn episode_loss_and_grads(
    inputs: &EpisodeInputs,
    params: &ModelParams,
    target: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, ModelGrads)> {
    let fwd = pipeline::forward(inputs, params)?;
    let loss = total_loss(&fwd.final_probs, &fwd.intermediates, target, cfg)?;
    let d_logits = ce_softmax_backward(&fwd.final_probs.probs, target, cfg.eps);
    let d_intermediates: Vec<Matrix> = fwd
        .intermediates
        .iter()
        .map(|m| ce_prob_backward(&m.probs, target, cfg.eps, cfg.lambda))
        .collect();
    let grads = pipeline::backward(&fwd, inputs, params, &d_logits, &d_intermediates)?;
    Ok((loss, grads))
}

/// Central differences per coordinate: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(
    mut loss_fn: F,
    params: &[f64],
    h: f64,
) -> Vec<f64> {
    assert!(h > 0.0);
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = loss_fn(&work);
        work[i] = orig - h;
        let minus = loss_fn(&work);
        work[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the analytic episode gradient against central finite differences
/// coordinate by coordinate.
pub fn grad_check_episode(
    inputs: &EpisodeInputs,
    params: &ModelParams,
    target: &[usize],
    cfg: &LossConfig,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = episode_loss_and_grads(inputs, params, target, cfg)?;
    let analytic = grads.flatten();
    let flat = params.flatten();
    let numeric = finite_diff_grad(
        |theta| {
            let p = params.from_flat(theta).expect("same shape");
            episode_loss(inputs, &p, target, cfg).expect("episode evaluates")
        },
        &flat,
        h,
    );
    let names = params.param_names();
    let entries: Vec<GradCheckEntry> = names
        .into_iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(name, (&a, &n))| GradCheckEntry {
            name,
            analytic: a,
            numeric: n,
            rel_err: rel_err(a, n),
        })
        .collect();
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_err,
    })
}

/// A random small episode plus parameters drawn away from the init point,
/// for gradient verification: two content classes with 2x2 blob supports on
/// a 4x4 grid, a two-level pyramid, and every learnable coordinate uniform
/// in (-0.8, 0.8).
pub fn random_check_instance(seed: u64) -> Result<(EpisodeInputs, Vec<usize>, ModelParams)> {
    use crate::partition::BinaryMask;
    use crate::pipeline::{prepare_episode, SupportScene};
    use crate::prototype::{EmbeddingRecord, FeatureMap};
    use crate::ClassId;
    use std::collections::BTreeMap;

    let mut rng = StdRng::seed_from_u64(seed);
    let dim = rng.random_range(2..5);
    let (n, levels) = (2, 2);
    let width = rng.random_range(2..4);
    let rand_map = |rng: &mut StdRng, h: usize, w: usize| {
        FeatureMap::from_values(
            h,
            w,
            dim,
            (0..h * w * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .expect("finite values")
    };
    let support_pyramid = vec![rand_map(&mut rng, 2, 2), rand_map(&mut rng, 4, 4)];
    let query_pyramid = vec![rand_map(&mut rng, 2, 2), rand_map(&mut rng, 4, 4)];
    let mut mask_a = BinaryMask::new(4, 4);
    let mut mask_b = BinaryMask::new(4, 4);
    for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        mask_a.set(x, y, true);
        mask_b.set(x + 2, y + 2, true);
    }
    let scene = SupportScene {
        pyramid: support_pyramid,
        masks: [(ClassId(1), mask_a), (ClassId(2), mask_b)]
            .into_iter()
            .collect(),
    };
    let records: BTreeMap<ClassId, EmbeddingRecord> = [1u32, 2]
        .into_iter()
        .map(|c| {
            (
                ClassId(c),
                EmbeddingRecord {
                    class_id: ClassId(c),
                    name_embedding: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    description_embeddings: vec![(0..dim)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect()],
                },
            )
        })
        .collect();
    let classes = vec![ClassId(0), ClassId(1), ClassId(2)];
    let inputs = prepare_episode(
        &classes,
        ClassId(0),
        &records,
        &[scene],
        &query_pyramid,
        n,
        seed,
    )?;
    let target: Vec<usize> = (0..16).map(|_| rng.random_range(0..3)).collect();

    let base = ModelParams::init(n, levels, width, dim, seed);
    let flat: Vec<f64> = base
        .flatten()
        .iter()
        .map(|_| rng.random_range(-0.8..0.8))
        .collect();
    let params = base.from_flat(&flat)?;
    Ok((inputs, target, params))
}

/// Optimizer state; `params` stay finite after every accepted step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, lr: f64, seed: u64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(TrainState {
            params,
            step: 0,
            lr,
            seed,
        })
    }
}

/// One SGD update: `params <- params - lr * grads`. A non-finite gradient
/// rejects the step and leaves the state untouched.
pub fn sgd_step(state: &TrainState, grads: &ModelGrads) -> Result<TrainState> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let flat = state.params.flatten();
    let g = grads.flatten();
    if flat.len() != g.len() {
        return Err(Error::shape(format!(
            "{} gradient coordinates vs {} parameters",
            g.len(),
            flat.len()
        )));
    }
    let updated: Vec<f64> = flat.iter().zip(&g).map(|(p, d)| p - state.lr * d).collect();
    Ok(TrainState {
        params: state.params.from_flat(&updated)?,
        step: state.step + 1,
        lr: state.lr,
        seed: state.seed,
    })
}

/// Runs `steps` SGD steps sampling episodes uniformly from the pool.
/// Returns the final state and the per-step losses.
pub fn train_on_pool(
    state: TrainState,
    pool: &[PreparedEpisode],
    cfg: &LossConfig,
    steps: usize,
) -> Result<(TrainState, Vec<f64>)> {
    if pool.is_empty() {
        return Err(Error::Episode("empty episode pool".to_string()));
    }
    let mut rng = StdRng::seed_from_u64(state.seed);
    let mut state = state;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let ep = &pool[rng.random_range(0..pool.len())];
        let (loss, grads) = episode_loss_and_grads(&ep.inputs, &state.params, &ep.target, cfg)?;
        state = sgd_step(&state, &grads)?;
        losses.push(loss);
    }
    Ok((state, losses))
}

/// Mean loss over the whole pool under fixed parameters.
pub fn pool_mean_loss(
    params: &ModelParams,
    pool: &[PreparedEpisode],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for ep in pool {
        total += episode_loss(&ep.inputs, params, &ep.target, cfg)?;
    }
    Ok(total / pool.len() as f64)
}
