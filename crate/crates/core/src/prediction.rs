//! Elastic multi-prototype mask prediction and multi-level residual fusion.
//!
//! Every prototype in the bank acts as an independent sub-class classifier:
//! per query pixel the scaled dot products against all entries go through one
//! joint softmax, and a class's probability is the softmax mass summed over
//! its entries. The construction accepts any number of entries per class,
//! which is what makes zero-shot (textual-only) and k-shot banks interchangeable.
//! Per-level probability maps are then combined by a residual chain with skip
//! connections into one scalar logit per class and pixel.

use crate::numerics::{dot, Matrix};
use crate::prototype::FeatureMap;
use crate::{ClassId, Error, Result};

/// One prototype vector acting as a classifier for `class_index`. `slot`
/// indexes the shared per-slot weight vector: textual slots come first
/// (`0..n`), visual slots after (`n..2n`).
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub class_index: usize,
    pub slot: usize,
    pub vector: Vec<f64>,
}

/// Flat prototype collection over an ordered class list, background first.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub classes: Vec<ClassId>,
    pub entries: Vec<BankEntry>,
}

impl PrototypeBank {
    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.vector.len())
    }

    fn validate(&self, n_slots: usize, feature_dim: usize) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        for e in &self.entries {
            if e.class_index >= self.classes.len() {
                return Err(Error::BadLabel {
                    label: e.class_index,
                    classes: self.classes.len(),
                });
            }
            if e.slot >= n_slots {
                return Err(Error::shape(format!(
                    "entry slot {} outside weight vector of length {n_slots}",
                    e.slot
                )));
            }
            if e.vector.len() != feature_dim {
                return Err(Error::shape(format!(
                    "entry dim {} vs feature dim {feature_dim}",
                    e.vector.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel class probabilities; `probs` rows are pixels in row-major order
/// and always sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassId>,
    pub probs: Matrix,
}

impl ClassProbMap {
    /// Per-pixel argmax as class indices into `classes`.
    pub fn argmax_map(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|r| {
                let row = self.probs.row(r);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Nearest-neighbor upsampling to a finer grid.
    pub fn upsample_nearest(&self, height: usize, width: usize) -> ClassProbMap {
        let mut probs = Matrix::zeros(height * width, self.classes.len());
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                probs
                    .row_mut(y * width + x)
                    .copy_from_slice(self.probs.row(sy * self.width + sx));
            }
        }
        ClassProbMap {
            height,
            width,
            classes: self.classes.clone(),
            probs,
        }
    }
}

/// Accumulates coarse-grid gradients from a fine-grid gradient, the adjoint
/// of [`ClassProbMap::upsample_nearest`].
pub fn upsample_nearest_backward(
    d_fine: &Matrix,
    fine_h: usize,
    fine_w: usize,
    coarse_h: usize,
    coarse_w: usize,
) -> Matrix {
    let mut d_coarse = Matrix::zeros(coarse_h * coarse_w, d_fine.cols());
    for y in 0..fine_h {
        let sy = y * coarse_h / fine_h;
        for x in 0..fine_w {
            let sx = x * coarse_w / fine_w;
            let src = d_fine.row(y * fine_w + x).to_vec();
            let dst = d_coarse.row_mut(sy * coarse_w + sx);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    d_coarse
}

/// State of one [`predict_class_probs`] call, kept for the backward pass:
/// the scaled prototype-feature dot products and the joint softmax.
#[derive(Debug, Clone)]
pub struct PredictCache {
    dots: Matrix, // pixels x entries, dot(P_e, f) / sqrt(D)
    attn: Matrix, // pixels x entries, post softmax
}

/// Per pixel: one softmax over all weighted prototype logits jointly, then
/// the mass summed per class.
pub fn predict_class_probs(
    bank: &PrototypeBank,
    w_p: &[f64],
    f_q: &FeatureMap,
) -> Result<ClassProbMap> {
    predict_class_probs_cached(bank, w_p, f_q).map(|(map, _)| map)
}

pub fn predict_class_probs_cached(
    bank: &PrototypeBank,
    w_p: &[f64],
    f_q: &FeatureMap,
) -> Result<(ClassProbMap, PredictCache)> {
    bank.validate(w_p.len(), f_q.dim())?;
    let pixels = f_q.height() * f_q.width();
    let n_entries = bank.entries.len();
    let inv_sqrt_d = 1.0 / (f_q.dim() as f64).sqrt();

    let mut dots = Matrix::zeros(pixels, n_entries);
    let mut attn = Matrix::zeros(pixels, n_entries);
    let mut probs = Matrix::zeros(pixels, bank.classes.len());
    for y in 0..f_q.height() {
        for x in 0..f_q.width() {
            let p = y * f_q.width() + x;
            let f = f_q.cell(x, y);
            for (e, entry) in bank.entries.iter().enumerate() {
                dots.set(p, e, dot(&entry.vector, f) * inv_sqrt_d);
            }
            let row = attn.row_mut(p);
            for (e, entry) in bank.entries.iter().enumerate() {
                row[e] = w_p[entry.slot] * dots.get(p, e);
            }
            crate::numerics::softmax_in_place(row);
            let out = probs.row_mut(p);
            for (e, entry) in bank.entries.iter().enumerate() {
                out[entry.class_index] += row[e];
            }
        }
    }
    let map = ClassProbMap {
        height: f_q.height(),
        width: f_q.width(),
        classes: bank.classes.clone(),
        probs,
    };
    Ok((map, PredictCache { dots, attn }))
}

/// Gradients of one prediction w.r.t. the slot weights and the bank vectors.
#[derive(Debug, Clone)]
pub struct PredictGrads {
    pub d_w_p: Vec<f64>,
    /// One row per bank entry, same order as `bank.entries`.
    pub d_vectors: Matrix,
}

pub fn predict_backward(
    bank: &PrototypeBank,
    w_p: &[f64],
    f_q: &FeatureMap,
    cache: &PredictCache,
    d_probs: &Matrix,
) -> PredictGrads {
    let dim = f_q.dim();
    let inv_sqrt_d = 1.0 / (dim as f64).sqrt();
    let mut d_w_p = vec![0.0; w_p.len()];
    let mut d_vectors = Matrix::zeros(bank.entries.len(), dim);

    for y in 0..f_q.height() {
        for x in 0..f_q.width() {
            let p = y * f_q.width() + x;
            let a = cache.attn.row(p);
            let dp = d_probs.row(p);
            // group-sum backward: every entry inherits its class gradient
            let da: Vec<f64> = bank.entries.iter().map(|e| dp[e.class_index]).collect();
            let inner = dot(a, &da);
            let f = f_q.cell(x, y);
            for (e, entry) in bank.entries.iter().enumerate() {
                let ds = a[e] * (da[e] - inner);
                if ds == 0.0 {
                    continue;
                }
                d_w_p[entry.slot] += ds * cache.dots.get(p, e);
                let scale = ds * w_p[entry.slot] * inv_sqrt_d;
                for (g, &fv) in d_vectors.row_mut(e).iter_mut().zip(f) {
                    *g += scale * fv;
                }
            }
        }
    }
    PredictGrads { d_w_p, d_vectors }
}

/// Weights of the residual multi-level chain. `w_in` lifts a scalar logit
/// into the `d`-dimensional hidden state, each level has its own `d x d`
/// weight and bias, and `w_out` projects the last state back to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFusionParams {
    pub w_in: Vec<f64>,
    pub levels: Vec<LevelWeights>,
    pub w_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelWeights {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LevelFusionParams {
    pub fn width(&self) -> usize {
        self.w_in.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        if d == 0 || self.levels.is_empty() {
            return Err(Error::shape(
                "level fusion needs d >= 1 and L >= 1".to_string(),
            ));
        }
        if self.w_out.len() != d {
            return Err(Error::shape("w_out width differs from w_in".to_string()));
        }
        for lw in &self.levels {
            if lw.w.rows() != d || lw.w.cols() != d || lw.b.len() != d {
                return Err(Error::shape(
                    "level weight shape differs from d".to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// All learnables of the prediction stage: per-slot prototype weights plus
/// the multi-level fusion chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionParams {
    pub w_p: Vec<f64>,
    pub fusion: LevelFusionParams,
}

#[derive(Debug, Clone)]
pub struct MultiLevelCache {
    /// Pre-activation `z_l` per level, rows = pixel*class pairs.
    z: Vec<Matrix>,
    /// Hidden state `o_l` per level.
    o: Vec<Matrix>,
}

/// Residual chain, applied independently per pixel and class:
/// o_1 = ReLU(W_1 (w_in y^1) + b_1), o_l = ReLU(W_l o_{l-1} + b_l) + w_in y^l,
/// output w_out . o_L. Level 1 is the deepest backbone level.
pub fn multi_level_fuse(levels: &[Matrix], fusion: &LevelFusionParams) -> Result<Matrix> {
    multi_level_fuse_cached(levels, fusion).map(|(out, _)| out)
}

pub fn multi_level_fuse_cached(
    levels: &[Matrix],
    fusion: &LevelFusionParams,
) -> Result<(Matrix, MultiLevelCache)> {
    fusion.validate()?;
    if levels.len() != fusion.levels.len() {
        return Err(Error::shape(format!(
            "{} level maps vs {} level weights",
            levels.len(),
            fusion.levels.len()
        )));
    }
    let rows = levels[0].rows();
    let cols = levels[0].cols();
    if levels.iter().any(|m| m.rows() != rows || m.cols() != cols) {
        return Err(Error::shape("level maps must share one shape".to_string()));
    }
    let d = fusion.width();
    let cells = rows * cols;

    let mut cache = MultiLevelCache {
        z: Vec::new(),
        o: Vec::new(),
    };
    let mut prev = Matrix::zeros(cells, d);
    for (l, lw) in fusion.levels.iter().enumerate() {
        let mut z = Matrix::zeros(cells, d);
        let mut o = Matrix::zeros(cells, d);
        for r in 0..rows {
            for c in 0..cols {
                let cell = r * cols + c;
                let y = levels[l].get(r, c);
                let zr = z.row_mut(cell);
                if l == 0 {
                    // z_1 = W_1 (w_in * y) + b_1
                    for i in 0..d {
                        let mut acc = lw.b[i];
                        for j in 0..d {
                            acc += lw.w.get(i, j) * fusion.w_in[j] * y;
                        }
                        zr[i] = acc;
                    }
                } else {
                    let op = prev.row(cell);
                    for i in 0..d {
                        let mut acc = lw.b[i];
                        for j in 0..d {
                            acc += lw.w.get(i, j) * op[j];
                        }
                        zr[i] = acc;
                    }
                }
                let orow = o.row_mut(cell);
                for i in 0..d {
                    let mut v = zr[i].max(0.0);
                    if l > 0 {
                        v += fusion.w_in[i] * y;
                    }
                    orow[i] = v;
                }
            }
        }
        cache.z.push(z);
        prev = o.clone();
        cache.o.push(o);
    }

    let mut out = Matrix::zeros(rows, cols);
    let last = cache.o.last().unwrap();
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, dot(&fusion.w_out, last.row(r * cols + c)));
        }
    }
    Ok((out, cache))
}

/// Gradients of one multi-level fusion: chain weights plus the per-level
/// input maps.
#[derive(Debug, Clone)]
pub struct MultiLevelGrads {
    pub d_w_in: Vec<f64>,
    pub d_levels_w: Vec<Matrix>,
    pub d_levels_b: Vec<Vec<f64>>,
    pub d_w_out: Vec<f64>,
    pub d_inputs: Vec<Matrix>,
}

pub fn multi_level_fuse_backward(
    levels: &[Matrix],
    fusion: &LevelFusionParams,
    cache: &MultiLevelCache,
    d_out: &Matrix,
) -> MultiLevelGrads {
    let rows = d_out.rows();
    let cols = d_out.cols();
    let d = fusion.width();
    let n_levels = fusion.levels.len();

    let mut grads = MultiLevelGrads {
        d_w_in: vec![0.0; d],
        d_levels_w: fusion.levels.iter().map(|_| Matrix::zeros(d, d)).collect(),
        d_levels_b: fusion.levels.iter().map(|_| vec![0.0; d]).collect(),
        d_w_out: vec![0.0; d],
        d_inputs: levels
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect(),
    };

    for r in 0..rows {
        for c in 0..cols {
            let cell = r * cols + c;
            let g = d_out.get(r, c);
            if g == 0.0 {
                continue;
            }
            let o_last = cache.o[n_levels - 1].row(cell);
            let mut d_o: Vec<f64> = fusion.w_out.iter().map(|&w| w * g).collect();
            for i in 0..d {
                grads.d_w_out[i] += g * o_last[i];
            }
            for l in (0..n_levels).rev() {
                let y = levels[l].get(r, c);
                if l > 0 {
                    // skip connection o_l = relu(z_l) + w_in * y_l
                    let mut dy = 0.0;
                    for i in 0..d {
                        dy += fusion.w_in[i] * d_o[i];
                        grads.d_w_in[i] += y * d_o[i];
                    }
                    grads.d_inputs[l].row_mut(r)[c] += dy;
                }
                let z = cache.z[l].row(cell);
                let dz: Vec<f64> = d_o
                    .iter()
                    .zip(z)
                    .map(|(&g, &zv)| if zv > 0.0 { g } else { 0.0 })
                    .collect();
                for i in 0..d {
                    grads.d_levels_b[l][i] += dz[i];
                }
                if l > 0 {
                    let o_prev = cache.o[l - 1].row(cell).to_vec();
                    let lw = &fusion.levels[l];
                    let mut d_prev = vec![0.0; d];
                    for i in 0..d {
                        if dz[i] == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            grads.d_levels_w[l].row_mut(i)[j] += dz[i] * o_prev[j];
                            d_prev[j] += lw.w.get(i, j) * dz[i];
                        }
                    }
                    d_o = d_prev;
                } else {
                    // z_1 = W_1 (w_in * y) + b_1
                    let lw = &fusion.levels[0];
                    let mut du = vec![0.0; d];
                    for i in 0..d {
                        if dz[i] == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            grads.d_levels_w[0].row_mut(i)[j] += dz[i] * fusion.w_in[j] * y;
                            du[j] += lw.w.get(i, j) * dz[i];
                        }
                    }
                    let mut dy = 0.0;
                    for j in 0..d {
                        dy += du[j] * fusion.w_in[j];
                        grads.d_w_in[j] += du[j] * y;
                    }
                    grads.d_inputs[0].row_mut(r)[c] += dy;
                }
            }
        }
    }
    grads
}

/// Full prediction head: per-level prototype competition, nearest-neighbor
/// upsampling to the finest grid, the residual chain, class softmax. Returns the final
/// probabilities and the (upsampled) per-level maps for the auxiliary loss.
pub struct FullForward {
    pub final_probs: ClassProbMap,
    pub final_logits: Matrix,
    pub intermediates: Vec<ClassProbMap>,
    pub caches: FullForwardCaches,
}

pub struct FullForwardCaches {
    pub predict: Vec<PredictCache>,
    pub level_maps: Vec<ClassProbMap>, // at native per-level resolution
    pub mlf: MultiLevelCache,
}

pub fn forward_full(
    pyramid: &[FeatureMap],
    banks: &[PrototypeBank],
    params: &PredictionParams,
) -> Result<FullForward> {
    if pyramid.is_empty() || pyramid.len() != banks.len() {
        return Err(Error::shape(format!(
            "{} pyramid levels vs {} banks",
            pyramid.len(),
            banks.len()
        )));
    }
    for b in &banks[1..] {
        if b.classes != banks[0].classes {
            return Err(Error::Episode(
                "banks disagree on the class registry".to_string(),
            ));
        }
    }
    let h = pyramid.iter().map(FeatureMap::height).max().unwrap();
    let w = pyramid.iter().map(FeatureMap::width).max().unwrap();

    let mut predict_caches = Vec::new();
    let mut level_maps = Vec::new();
    let mut upsampled = Vec::new();
    for (f_q, bank) in pyramid.iter().zip(banks) {
        let (map, cache) = predict_class_probs_cached(bank, &params.w_p, f_q)?;
        upsampled.push(map.upsample_nearest(h, w));
        level_maps.push(map);
        predict_caches.push(cache);
    }

    let prob_mats: Vec<Matrix> = upsampled.iter().map(|m| m.probs.clone()).collect();
    let (final_logits, mlf) = multi_level_fuse_cached(&prob_mats, &params.fusion)?;
    let final_probs = ClassProbMap {
        height: h,
        width: w,
        classes: banks[0].classes.clone(),
        probs: final_logits.softmax_rows(),
    };
    Ok(FullForward {
        final_probs,
        final_logits,
        intermediates: upsampled,
        caches: FullForwardCaches {
            predict: predict_caches,
            level_maps,
            mlf,
        },
    })
}
