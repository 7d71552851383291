//! Deterministic desk-scale fixtures standing in for frozen encoder outputs.
//!
//! A scene places one rectangular blob per class on a square grid; every
//! pixel's feature is its class mean plus Gaussian noise, the class-name
//! embedding is the mean itself and description embeddings add small
//! orthogonal offsets. Means live on scaled coordinate axes, so classes are
//! separable by construction.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::evaluation::{ClassRegistry, EpisodeSpec, Protocol, QueryScene};
use crate::partition::BinaryMask;
use crate::pipeline::{prepare_episode, PreparedEpisode, SupportScene};
use crate::prototype::{EmbeddingRecord, FeatureMap};
use crate::{ClassId, Error, Result};

/// Recipe for one synthetic scene family. `means[0]` belongs to the
/// background class; ids follow the index.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub grid: usize,
    pub means: Vec<Vec<f64>>,
    pub noise: f64,
    pub levels: usize,
    /// Description embeddings generated per non-background class.
    pub descriptions: usize,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// Means on scaled coordinate axes: the background sits on axis 0 and
    /// class `c` on axis `c`, so every class (background included) keeps the
    /// same separation margin.
    pub fn axes(
        classes: usize,
        dim: usize,
        scale: f64,
        noise: f64,
        levels: usize,
        descriptions: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim < classes + 1 {
            return Err(Error::Spec(format!(
                "dim {dim} cannot host {} axis means",
                classes + 1
            )));
        }
        if scale == 0.0 {
            return Err(Error::Spec(
                "scale 0 collapses all means onto the origin".to_string(),
            ));
        }
        let mut means = Vec::with_capacity(classes + 1);
        for c in 0..=classes {
            let mut m = vec![0.0; dim];
            m[c] = scale;
            means.push(m);
        }
        let spec = SyntheticSceneSpec {
            grid: 16,
            means,
            noise,
            levels,
            descriptions,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() < 2 {
            return Err(Error::Spec(
                "need a background mean and at least one class".to_string(),
            ));
        }
        let dim = self.means[0].len();
        if dim == 0 || self.means.iter().any(|m| m.len() != dim) {
            return Err(Error::Spec(
                "means must share one positive dimension".to_string(),
            ));
        }
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                if self.means[i] == self.means[j] {
                    return Err(Error::Spec(format!("means {i} and {j} are identical")));
                }
            }
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Spec(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        if self.levels == 0 {
            return Err(Error::Spec(
                "at least one pyramid level required".to_string(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Non-background class ids, ascending.
    pub fn class_ids(&self) -> Vec<ClassId> {
        (1..self.means.len() as u32).map(ClassId).collect()
    }
}

/// One generated scene: feature pyramid, dense annotation, per-class masks
/// and embedding records.
#[derive(Debug, Clone)]
pub struct Scene {
    pub pyramid: Vec<FeatureMap>,
    pub gt: Vec<ClassId>,
    pub masks: BTreeMap<ClassId, BinaryMask>,
    pub records: BTreeMap<ClassId, EmbeddingRecord>,
}

impl Scene {
    /// The full-resolution (shallowest) feature map.
    pub fn base(&self) -> &FeatureMap {
        self.pyramid.last().expect("at least one level")
    }

    pub fn support(&self) -> SupportScene {
        SupportScene {
            pyramid: self.pyramid.clone(),
            masks: self.masks.clone(),
        }
    }

    pub fn query(&self) -> QueryScene {
        QueryScene {
            pyramid: self.pyramid.clone(),
            gt: self.gt.clone(),
        }
    }
}

/// Generates a scene containing every class of the spec.
pub fn gen_scene(spec: &SyntheticSceneSpec) -> Result<Scene> {
    let all: Vec<ClassId> = spec.class_ids();
    gen_scene_subset(spec, &all)
}

/// Generates a scene containing only `present` (non-background) classes; the
/// rest of the grid is background. Blobs sit in a jittered square layout.
pub fn gen_scene_subset(spec: &SyntheticSceneSpec, present: &[ClassId]) -> Result<Scene> {
    spec.validate()?;
    for c in present {
        if c.0 == 0 || c.0 as usize >= spec.means.len() {
            return Err(Error::Spec(format!(
                "class {c} outside the spec's mean table"
            )));
        }
    }
    let side = (present.len() as f64).sqrt().ceil() as usize;
    let g = spec.grid;
    if side > 0 && g / side < 4 {
        return Err(Error::Spec(format!(
            "grid {g} too small for {} blobs",
            present.len()
        )));
    }
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let dim = spec.dim();

    let mut gt = vec![ClassId(0); g * g];
    let mut masks = BTreeMap::new();
    for (idx, &class) in present.iter().enumerate() {
        let q = g / side;
        let (row, col) = (idx / side, idx % side);
        let jitter = |rng: &mut StdRng| rng.random_range(0..2usize);
        let y0 = row * q + 1 + jitter(&mut rng);
        let x0 = col * q + 1 + jitter(&mut rng);
        let y1 = ((row + 1) * q - 1 - jitter(&mut rng)).max(y0 + 2);
        let x1 = ((col + 1) * q - 1 - jitter(&mut rng)).max(x0 + 2);
        let mut mask = BinaryMask::new(g, g);
        for y in y0..y1.min(g) {
            for x in x0..x1.min(g) {
                mask.set(x, y, true);
                gt[y * g + x] = class;
            }
        }
        masks.insert(class, mask);
    }

    let mut values = Vec::with_capacity(g * g * dim);
    for &cell in &gt {
        let mean = &spec.means[cell.0 as usize];
        for &m in mean {
            let n: f64 = rng.sample(StandardNormal);
            values.push(m + spec.noise * n);
        }
    }
    let base = FeatureMap::from_values(g, g, dim, values)?;
    // level 1 is the deepest (coarsest) map, the last level is the base grid
    let pyramid = (0..spec.levels)
        .map(|l| base.avg_pool(1 << (spec.levels - 1 - l)))
        .collect();

    let mut records = BTreeMap::new();
    for &class in present {
        let mean = &spec.means[class.0 as usize];
        let scale = crate::numerics::dot(mean, mean).sqrt();
        let descriptions = (0..spec.descriptions)
            .map(|i| {
                let mut d = mean.clone();
                // first axis not used by any class mean
                let axis = (spec.means.len() + i) % dim;
                d[axis] += 0.1 * scale;
                d
            })
            .collect();
        records.insert(
            class,
            EmbeddingRecord {
                class_id: class,
                name_embedding: mean.clone(),
                description_embeddings: descriptions,
            },
        );
    }

    Ok(Scene {
        pyramid,
        gt,
        masks,
        records,
    })
}

/// Maps a dense annotation to bank class indices given the bank order.
pub fn gt_to_targets(gt: &[ClassId], bank_classes: &[ClassId]) -> Result<Vec<usize>> {
    gt.iter()
        .map(|c| {
            bank_classes
                .iter()
                .position(|b| b == c)
                .ok_or(Error::BadLabel {
                    label: c.0 as usize,
                    classes: bank_classes.len(),
                })
        })
        .collect()
}

/// Builds the training pool: `scenes` scenes containing only seen classes,
/// turned into every ordered (support, query) pair of distinct scenes.
pub fn training_pool(
    spec: &SyntheticSceneSpec,
    registry: &ClassRegistry,
    scenes: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<PreparedEpisode>> {
    let seen: Vec<ClassId> = registry
        .seen
        .iter()
        .copied()
        .filter(|&c| c != registry.background)
        .collect();
    let mut pool_scenes = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let mut s = spec.clone();
        s.seed = crate::pipeline::mix_seed(spec.seed, i as u64, 0);
        pool_scenes.push(gen_scene_subset(&s, &seen)?);
    }
    let mut bank_classes = vec![registry.background];
    bank_classes.extend(&seen);

    let mut pool = Vec::new();
    for (si, support) in pool_scenes.iter().enumerate() {
        for (qi, query) in pool_scenes.iter().enumerate() {
            if si == qi {
                continue;
            }
            let inputs = prepare_episode(
                &bank_classes,
                registry.background,
                &support.records,
                &[support.support()],
                &query.pyramid,
                n,
                crate::pipeline::mix_seed(seed, (si * scenes + qi) as u64, 1),
            )?;
            let target = gt_to_targets(&query.gt, &bank_classes)?;
            pool.push(PreparedEpisode { inputs, target });
        }
    }
    Ok(pool)
}

/// Builds GFS evaluation episodes over the full registry: every episode uses
/// `shots` fresh support scenes and a fresh query scene, all containing every
/// class.
pub fn gfs_episodes(
    spec: &SyntheticSceneSpec,
    registry: &ClassRegistry,
    count: usize,
    shots: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<EpisodeSpec>> {
    let mut episodes = Vec::with_capacity(count);
    for e in 0..count {
        let mut supports = Vec::with_capacity(shots);
        let mut records = BTreeMap::new();
        for s in 0..shots {
            let mut sp = spec.clone();
            sp.seed = crate::pipeline::mix_seed(seed, (e * (shots + 1) + s) as u64, 2);
            let scene = gen_scene(&sp)?;
            records.extend(scene.records.clone());
            supports.push(scene.support());
        }
        let mut qp = spec.clone();
        qp.seed = crate::pipeline::mix_seed(seed, (e * (shots + 1) + shots) as u64, 2);
        let query_scene = gen_scene(&qp)?;
        if records.is_empty() {
            records = query_scene.records.clone();
        }
        episodes.push(EpisodeSpec {
            registry: registry.clone(),
            records,
            supports,
            query: query_scene.query(),
            protocol: Protocol::Generalized,
            n,
            seed: crate::pipeline::mix_seed(seed, e as u64, 3),
        });
    }
    Ok(episodes)
}

/// Builds Z/FS episodes for `target`: each support scene is stripped down to
/// the target's annotation (the protocol provides support information for one
/// class only), the query scene keeps its full ground truth. `shots = 0`
/// yields zero-shot episodes carrying the textual record only.
pub fn zfs_episodes(
    spec: &SyntheticSceneSpec,
    registry: &ClassRegistry,
    target: ClassId,
    count: usize,
    shots: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<EpisodeSpec>> {
    let mut episodes = Vec::with_capacity(count);
    for e in 0..count {
        let mut supports = Vec::with_capacity(shots);
        for s in 0..shots {
            let mut sp = spec.clone();
            sp.seed = crate::pipeline::mix_seed(seed, (e * (shots + 1) + s) as u64, 4);
            let scene = gen_scene(&sp)?;
            let mask = scene
                .masks
                .get(&target)
                .ok_or_else(|| Error::Episode(format!("scene lacks class {target}")))?
                .clone();
            supports.push(SupportScene {
                pyramid: scene.pyramid.clone(),
                masks: [(target, mask)].into_iter().collect(),
            });
        }
        let mut qp = spec.clone();
        qp.seed = crate::pipeline::mix_seed(seed, (e * (shots + 1) + shots) as u64, 4);
        let query_scene = gen_scene(&qp)?;
        let records: BTreeMap<ClassId, EmbeddingRecord> = query_scene
            .records
            .iter()
            .filter(|(&c, _)| c == target)
            .map(|(&c, r)| (c, r.clone()))
            .collect();
        episodes.push(EpisodeSpec {
            registry: registry.clone(),
            records,
            supports,
            query: query_scene.query(),
            protocol: Protocol::ZeroFewShot { target },
            n,
            seed: crate::pipeline::mix_seed(seed, e as u64, 5),
        });
    }
    Ok(episodes)
}

/// Writes a scene as file fixtures consumable by the CLI: one rank-3 tensor
/// per pyramid level, one PGM mask per class, the dense annotation as a PGM
/// label map (sample byte = class id), and an embedding manifest with rank-1
/// tensors.
pub fn write_scene_fixtures(scene: &Scene, dir: impl AsRef<std::path::Path>) -> Result<()> {
    use crate::io::config::{EmbeddingManifest, ManifestClass};
    use crate::io::pgm;
    use crate::io::tensor::{write_tensor, Tensor};

    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (l, f) in scene.pyramid.iter().enumerate() {
        write_tensor(
            dir.join(format!("features_l{}.mpf", l + 1)),
            &Tensor::from_feature_map(f),
        )?;
    }
    for (class, mask) in &scene.masks {
        pgm::write_mask(dir.join(format!("mask_{class}.pgm")), mask)?;
    }
    let base = scene.base();
    let labels: Vec<u8> = scene.gt.iter().map(|c| c.0 as u8).collect();
    pgm::write_gray(dir.join("gt.pgm"), base.width(), base.height(), &labels)?;

    let mut classes = Vec::new();
    for (class, rec) in &scene.records {
        let name_file = format!("emb_{class}_name.mpf");
        write_tensor(
            dir.join(&name_file),
            &Tensor::vector(rec.name_embedding.clone()),
        )?;
        let mut description_embeddings = Vec::new();
        for (i, d) in rec.description_embeddings.iter().enumerate() {
            let file = format!("emb_{class}_desc{i}.mpf");
            write_tensor(dir.join(&file), &Tensor::vector(d.clone()))?;
            description_embeddings.push(file);
        }
        classes.push(ManifestClass {
            id: class.0,
            name: format!("class-{class}"),
            descriptions: (0..rec.description_embeddings.len())
                .map(|i| format!("synthetic description {i} of class {class}"))
                .collect(),
            name_embedding: name_file,
            description_embeddings,
        });
    }
    let manifest = EmbeddingManifest { classes };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?,
    )?;
    Ok(())
}
