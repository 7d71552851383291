//! Complementary fusion of textual and visual prototypes.
//!
//! Cross-attention refines the stacked prototypes of one class against the
//! textual prototypes plus the full support feature grid. A learnable scalar
//! `alpha` is subtracted from the attention logits on background cells, so
//! growing it suppresses background influence; it is stored as `exp(rho)` of
//! an unconstrained `rho` to stay non-negative during SGD. The printed
//! formula is implemented verbatim: no projections and no residual term.

use crate::numerics::{dot, Matrix};
use crate::prototype::{FeatureMap, Modality, PrototypeEntry, PrototypeSet, SoftMask};
use crate::{ClassId, Error, Result};

/// Foreground-background balance parameter, kept positive by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    rho: f64,
}

impl FusionParams {
    pub fn from_rho(rho: f64) -> Self {
        FusionParams { rho }
    }

    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive and finite, got {alpha}"
            )));
        }
        Ok(FusionParams { rho: alpha.ln() })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn alpha(&self) -> f64 {
        self.rho.exp()
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams { rho: 0.0 } // alpha = 1
    }
}

/// Fused multi-modal prototypes for one class: textual rows first, visual
/// rows after, slot labels inherited from the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrototypes {
    pub class_id: ClassId,
    pub vectors: Matrix,
    pub slots: Vec<(Modality, usize)>,
}

impl FusedPrototypes {
    pub fn into_prototype_set(self) -> PrototypeSet {
        let entries = self
            .slots
            .iter()
            .enumerate()
            .map(|(r, &(modality, slot))| PrototypeEntry {
                vector: self.vectors.row(r).to_vec(),
                modality,
                slot,
            })
            .collect();
        PrototypeSet {
            class_id: self.class_id,
            entries,
        }
    }
}

/// Attention-bias matrix: zero on the `n_txt` textual key columns,
/// `1 - mask weight` on every feature-cell column, repeated for each row.
pub fn background_bias(m_s: &SoftMask, n_txt: usize, rows: usize) -> Matrix {
    let row = background_bias_row(m_s, n_txt);
    let mut out = Matrix::zeros(rows, row.len());
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}

fn background_bias_row(m_s: &SoftMask, n_txt: usize) -> Vec<f64> {
    let mut row = vec![0.0; n_txt + m_s.weights().len()];
    for (dst, &w) in row[n_txt..].iter_mut().zip(m_s.weights()) {
        *dst = 1.0 - w;
    }
    row
}

/// Intermediate state of one fusion, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FuseCache {
    pub n_txt: usize,
    queries: Matrix,
    keys: Matrix,
    attn: Matrix,
    bias_row: Vec<f64>,
    alpha: f64,
    inv_sqrt_d: f64,
}

/// Gradients flowing out of one fusion towards the learnables: the scalar
/// `rho` and the textual prototype rows (used when those rows are the
/// learnable background vectors).
#[derive(Debug, Clone)]
pub struct FuseGrads {
    pub d_rho: f64,
    pub d_txt: Vec<Vec<f64>>,
}

/// `softmax(Q K^T / sqrt(D) - alpha * bias) V` with Q = [textual; visual]
/// prototypes and K = V = [textual; feature cells].
pub fn complementary_fuse(
    p_txt: &PrototypeSet,
    p_img: &PrototypeSet,
    f_vis: &FeatureMap,
    m_s: &SoftMask,
    params: &FusionParams,
) -> Result<FusedPrototypes> {
    complementary_fuse_cached(p_txt, p_img, f_vis, m_s, params).map(|(fused, _)| fused)
}

pub fn complementary_fuse_cached(
    p_txt: &PrototypeSet,
    p_img: &PrototypeSet,
    f_vis: &FeatureMap,
    m_s: &SoftMask,
    params: &FusionParams,
) -> Result<(FusedPrototypes, FuseCache)> {
    if p_txt.class_id != p_img.class_id {
        return Err(Error::Episode(format!(
            "fusing prototype sets of classes {} and {}",
            p_txt.class_id, p_img.class_id
        )));
    }
    let dim = p_txt.dim().max(p_img.dim());
    if dim == 0 {
        return Err(Error::shape(
            "fusion needs at least one prototype".to_string(),
        ));
    }
    for v in p_txt.vectors().chain(p_img.vectors()) {
        if v.len() != dim {
            return Err(Error::shape(format!("prototype dim {} != {dim}", v.len())));
        }
    }
    if f_vis.dim() != dim {
        return Err(Error::shape(format!(
            "feature dim {} != prototype dim {dim}",
            f_vis.dim()
        )));
    }
    if f_vis.height() != m_s.height() || f_vis.width() != m_s.width() {
        return Err(Error::shape(format!(
            "feature grid {}x{} vs soft mask {}x{}",
            f_vis.height(),
            f_vis.width(),
            m_s.height(),
            m_s.width()
        )));
    }

    let n_txt = p_txt.entries.len();
    let queries = Matrix::from_rows(
        &p_txt
            .vectors()
            .chain(p_img.vectors())
            .map(<[f64]>::to_vec)
            .collect::<Vec<_>>(),
    )?;
    let mut key_rows: Vec<Vec<f64>> = p_txt.vectors().map(<[f64]>::to_vec).collect();
    for y in 0..f_vis.height() {
        for x in 0..f_vis.width() {
            key_rows.push(f_vis.cell(x, y).to_vec());
        }
    }
    let keys = Matrix::from_rows(&key_rows)?;

    let alpha = params.alpha();
    let inv_sqrt_d = 1.0 / (dim as f64).sqrt();
    let bias_row = background_bias_row(m_s, n_txt);
    let mut scores = queries.matmul(&keys.transpose())?.scale(inv_sqrt_d);
    for r in 0..scores.rows() {
        for (s, &b) in scores.row_mut(r).iter_mut().zip(&bias_row) {
            *s -= alpha * b;
        }
    }
    let attn = scores.softmax_rows();
    let vectors = attn.matmul(&keys)?;

    let slots = p_txt
        .entries
        .iter()
        .chain(&p_img.entries)
        .map(|e| (e.modality, e.slot))
        .collect();
    let fused = FusedPrototypes {
        class_id: p_txt.class_id,
        vectors,
        slots,
    };
    let cache = FuseCache {
        n_txt,
        queries,
        keys,
        attn,
        bias_row,
        alpha,
        inv_sqrt_d,
    };
    Ok((fused, cache))
}

/// Backward pass of [`complementary_fuse_cached`] for the learnable inputs.
/// `d_out` has one row per fused prototype. Textual rows receive gradient
/// both as queries and as keys/values.
pub fn fuse_backward(cache: &FuseCache, d_out: &Matrix) -> FuseGrads {
    let attn = &cache.attn;
    let keys = &cache.keys;
    // d_attn = d_out K^T ; d_keys = attn^T d_out (value path)
    let d_attn = d_out.matmul(&keys.transpose()).expect("cache shapes");
    let mut d_keys = attn.transpose().matmul(d_out).expect("cache shapes");

    // softmax backward, then the score is s = q.k/sqrt(D) - alpha*bias
    let mut d_alpha = 0.0;
    let mut d_scores = Matrix::zeros(attn.rows(), attn.cols());
    for r in 0..attn.rows() {
        let a = attn.row(r);
        let da = d_attn.row(r);
        let inner = dot(a, da);
        let ds = d_scores.row_mut(r);
        for c in 0..a.len() {
            ds[c] = a[c] * (da[c] - inner);
            d_alpha -= ds[c] * cache.bias_row[c];
        }
    }

    let d_queries = d_scores
        .matmul(keys)
        .expect("cache shapes")
        .scale(cache.inv_sqrt_d);
    let dk_score = d_scores
        .transpose()
        .matmul(&cache.queries)
        .expect("cache shapes")
        .scale(cache.inv_sqrt_d);
    d_keys = d_keys.add(&dk_score).expect("cache shapes");

    let d_txt = (0..cache.n_txt)
        .map(|r| {
            d_queries
                .row(r)
                .iter()
                .zip(d_keys.row(r))
                .map(|(q, k)| q + k)
                .collect()
        })
        .collect();
    FuseGrads {
        d_rho: d_alpha * cache.alpha,
        d_txt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn txt_set(class: u32, vectors: &[Vec<f64>]) -> PrototypeSet {
        PrototypeSet {
            class_id: ClassId(class),
            entries: vectors
                .iter()
                .enumerate()
                .map(|(slot, v)| PrototypeEntry {
                    vector: v.clone(),
                    modality: Modality::Textual,
                    slot,
                })
                .collect(),
        }
    }

    fn img_set(class: u32, vectors: &[Vec<f64>]) -> PrototypeSet {
        PrototypeSet {
            class_id: ClassId(class),
            entries: vectors
                .iter()
                .enumerate()
                .map(|(slot, v)| PrototypeEntry {
                    vector: v.clone(),
                    modality: Modality::Visual,
                    slot,
                })
                .collect(),
        }
    }

    #[test]
    fn bias_all_foreground_is_zero() {
        let m = SoftMask::from_weights(2, 2, vec![1.0; 4]).unwrap();
        let b = background_bias(&m, 3, 2);
        assert_eq!(b, Matrix::zeros(2, 7));
    }

    #[test]
    fn bias_all_background() {
        let m = SoftMask::from_weights(1, 2, vec![0.0, 0.0]).unwrap();
        let b = background_bias(&m, 2, 1);
        assert_eq!(b.row(0), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn bias_partial_cell() {
        let m = SoftMask::from_weights(1, 1, vec![0.25]).unwrap();
        let b = background_bias(&m, 1, 4);
        for r in 0..4 {
            assert_eq!(b.row(r), &[0.0, 0.75]);
        }
    }

    #[test]
    fn fuse_constant_inputs() {
        let c = -2.5;
        let p_txt = txt_set(0, &[vec![c]]);
        let p_img = img_set(0, &[vec![c]]);
        let f = FeatureMap::from_values(1, 1, 1, vec![c]).unwrap();
        let m = SoftMask::from_weights(1, 1, vec![1.0]).unwrap();
        let fused = complementary_fuse(
            &p_txt,
            &p_img,
            &f,
            &m,
            &FusionParams::from_alpha(3.0).unwrap(),
        )
        .unwrap();
        assert_eq!(fused.vectors.rows(), 2);
        for r in 0..2 {
            assert!((fused.vectors.get(r, 0) - c).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_two_by_two_enumeration() {
        // n=1, D=1, P_txt=[0], P_img=[1], one feature cell [2], full
        // foreground, alpha irrelevant at weight 1. Dense softmax by hand:
        // textual row logits [0,0] -> 1.0; visual row logits [0,2] ->
        // 2 e^2 / (1 + e^2).
        let p_txt = txt_set(0, &[vec![0.0]]);
        let p_img = img_set(0, &[vec![1.0]]);
        let f = FeatureMap::from_values(1, 1, 1, vec![2.0]).unwrap();
        let m = SoftMask::from_weights(1, 1, vec![1.0]).unwrap();
        let fused = complementary_fuse(
            &p_txt,
            &p_img,
            &f,
            &m,
            &FusionParams::from_rho(f64::NEG_INFINITY),
        )
        .unwrap();
        assert!((fused.vectors.get(0, 0) - 1.0).abs() < 1e-12);
        let e2 = 2.0f64.exp();
        assert!((fused.vectors.get(1, 0) - 2.0 * e2 / (1.0 + e2)).abs() < 1e-12);
        assert!((fused.vectors.get(1, 0) - 1.7615941559557649).abs() < 1e-12);
    }

    #[test]
    fn huge_alpha_ignores_background_cells() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(77);
        for _ in 0..20 {
            let (h, w, dim) = (2, 3, 2);
            let values: Vec<f64> = (0..h * w * dim)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let f = FeatureMap::from_values(h, w, dim, values).unwrap();
            let weights: Vec<f64> = (0..h * w)
                .map(|i| if i % 2 == 0 { 1.0 } else { 0.0 })
                .collect();
            let m = SoftMask::from_weights(h, w, weights).unwrap();
            let p_txt = txt_set(0, &[vec![0.3, -0.2]]);
            let p_img = img_set(0, &[vec![1.0, 0.5]]);
            let params = FusionParams::from_alpha(1e6).unwrap();
            let base = complementary_fuse(&p_txt, &p_img, &f, &m, &params).unwrap();

            let mut g = f.clone();
            for y in 0..h {
                for x in 0..w {
                    if m.weight(x, y) == 0.0 {
                        for v in g.cell_mut(x, y) {
                            *v = rng.random_range(-50.0..50.0);
                        }
                    }
                }
            }
            let perturbed = complementary_fuse(&p_txt, &p_img, &g, &m, &params).unwrap();
            for (a, b) in base.vectors.data().iter().zip(perturbed.vectors.data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn rows_stay_in_value_range() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let dim = 3;
            let f_values: Vec<f64> = (0..4 * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f = FeatureMap::from_values(2, 2, dim, f_values).unwrap();
            let m = SoftMask::from_weights(2, 2, (0..4).map(|_| rng.random()).collect()).unwrap();
            let txts: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let imgs: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let fused = complementary_fuse(
                &txt_set(0, &txts),
                &img_set(0, &imgs),
                &f,
                &m,
                &FusionParams::from_alpha(rng.random_range(0.1..4.0)).unwrap(),
            )
            .unwrap();
            // convexity: outputs bounded by the extreme value-row entries
            for d in 0..dim {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for t in &txts {
                    lo = lo.min(t[d]);
                    hi = hi.max(t[d]);
                }
                for v in f.values().chunks(dim) {
                    lo = lo.min(v[d]);
                    hi = hi.max(v[d]);
                }
                for r in 0..fused.vectors.rows() {
                    let v = fused.vectors.get(r, d);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn background_mass_monotone_in_alpha() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..10 {
            let dim = 2;
            let f_values: Vec<f64> = (0..6 * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f = FeatureMap::from_values(2, 3, dim, f_values).unwrap();
            let m = SoftMask::from_weights(2, 3, (0..6).map(|_| rng.random()).collect()).unwrap();
            let p_txt = txt_set(
                0,
                &[(0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()],
            );
            let p_img = img_set(
                0,
                &[(0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()],
            );
            let mut previous: Option<Vec<f64>> = None;
            for alpha in [0.01, 0.1, 1.0, 5.0, 50.0] {
                let params = FusionParams::from_alpha(alpha).unwrap();
                let (_, cache) =
                    complementary_fuse_cached(&p_txt, &p_img, &f, &m, &params).unwrap();
                // per-row attention mass on background-weighted columns
                let mass: Vec<f64> = (0..cache.attn.rows())
                    .map(|r| {
                        cache
                            .attn
                            .row(r)
                            .iter()
                            .zip(&cache.bias_row)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                if let Some(prev) = previous {
                    for (now, before) in mass.iter().zip(&prev) {
                        assert!(*now <= before + 1e-12);
                    }
                }
                previous = Some(mass);
            }
        }
    }

    #[test]
    fn full_foreground_is_alpha_independent() {
        let p_txt = txt_set(0, &[vec![0.4, 0.1]]);
        let p_img = img_set(0, &[vec![-0.3, 0.9]]);
        let f = FeatureMap::from_values(2, 2, 2, (0..8).map(|i| i as f64 / 4.0).collect()).unwrap();
        let m = SoftMask::from_weights(2, 2, vec![1.0; 4]).unwrap();
        let a = complementary_fuse(
            &p_txt,
            &p_img,
            &f,
            &m,
            &FusionParams::from_alpha(0.5).unwrap(),
        )
        .unwrap();
        let b = complementary_fuse(
            &p_txt,
            &p_img,
            &f,
            &m,
            &FusionParams::from_alpha(250.0).unwrap(),
        )
        .unwrap();
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(41);
        let dim = 3;
        let f = FeatureMap::from_values(
            2,
            2,
            dim,
            (0..4 * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let m = SoftMask::from_weights(2, 2, (0..4).map(|_| rng.random()).collect()).unwrap();
        let txts: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let imgs: Vec<Vec<f64>> = (0..1)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let rho = 0.3;
        // scalar objective: weighted sum of the fused matrix
        let obj_weights: Vec<f64> = (0..3 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |rho: f64, txts: &[Vec<f64>]| -> f64 {
            let fused = complementary_fuse(
                &txt_set(0, txts),
                &img_set(0, imgs.as_slice()),
                &f,
                &m,
                &FusionParams::from_rho(rho),
            )
            .unwrap();
            dot(fused.vectors.data(), &obj_weights)
        };

        let (_, cache) = complementary_fuse_cached(
            &txt_set(0, &txts),
            &img_set(0, &imgs),
            &f,
            &m,
            &FusionParams::from_rho(rho),
        )
        .unwrap();
        let d_out = Matrix::from_vec(3, dim, obj_weights.clone()).unwrap();
        let grads = fuse_backward(&cache, &d_out);

        let h = 1e-6;
        let fd_rho = (eval(rho + h, &txts) - eval(rho - h, &txts)) / (2.0 * h);
        assert!(
            (grads.d_rho - fd_rho).abs() < 1e-6,
            "{} vs {fd_rho}",
            grads.d_rho
        );
        for (r, row) in grads.d_txt.iter().enumerate() {
            for (c, &g) in row.iter().enumerate() {
                let mut plus = txts.clone();
                plus[r][c] += h;
                let mut minus = txts.clone();
                minus[r][c] -= h;
                let fd = (eval(rho, &plus) - eval(rho, &minus)) / (2.0 * h);
                assert!((g - fd).abs() < 1e-6, "txt[{r}][{c}]: {g} vs {fd}");
            }
        }
    }
}
