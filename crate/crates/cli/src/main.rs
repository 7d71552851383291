//! `mproto`: command-line surface for the prototype segmentation engine.
//!
//! Fixtures stand in for frozen encoders: `gen-scene` materializes feature
//! pyramids, masks and embedding manifests, which the remaining subcommands
//! consume. `MPROTO_THREADS` caps the rayon pool used for episode batches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use mproto_core::evaluation::{run_gfs_episodes, run_zfs_episode, ClassRegistry, ShotMode};
use mproto_core::io::bank::{load_bank, save_bank, BankFile};
use mproto_core::io::checkpoint::{load_checkpoint, save_checkpoint};
use mproto_core::io::config::{load_records, load_registry, save_registry, RunConfig};
use mproto_core::io::pgm;
use mproto_core::io::tensor::{read_tensor, write_tensor, Tensor};
use mproto_core::partition::{kmeans_split, m_splitting, median_duration, BinaryMask};
use mproto_core::pipeline::mix_seed;
use mproto_core::prototype::{
    textual_prototypes, visual_prototypes, FeatureMap, Modality, PrototypeEntry, PrototypeSet,
};
use mproto_core::synthetic::{
    gen_scene, gen_scene_subset, gfs_episodes, training_pool, write_scene_fixtures, zfs_episodes,
    SyntheticSceneSpec,
};
use mproto_core::training::{
    grad_check_episode, train_on_pool, LossConfig, ModelParams, TrainState,
};
use mproto_core::{fusion, ClassId};

#[derive(Parser)]
#[command(
    name = "mproto",
    about = "multi-modal prototype segmentation engine",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a mask into n regions and write one PGM per part.
    SplitMask {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Use the Lloyd's baseline instead of M-Splitting.
        #[arg(long)]
        kmeans: bool,
        #[arg(long, default_value_t = 3)]
        max_iter: usize,
    },
    /// Time M-Splitting against the k-means baseline on one mask.
    BenchSplit {
        /// Mask to split; generated half-foreground when omitted.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 473)]
        height: usize,
        #[arg(long, default_value_t = 473)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Materialize a synthetic scene as file fixtures.
    GenScene {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Extra seed mixed into the scene (distinguishes support/query scenes).
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        /// Restrict the scene to these classes (comma separated ids).
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<u32>>,
    },
    /// Extract raw visual+textual prototypes from a scene directory into a bank file.
    Extract {
        #[arg(long)]
        scene_dir: PathBuf,
        /// Pyramid level to read features from (1 = deepest).
        #[arg(long, default_value_t = 3)]
        level: usize,
        #[arg(long, value_delimiter = ',')]
        classes: Vec<u32>,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also derive a background class from the complement of all masks.
        #[arg(long, default_value_t = true)]
        background: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse the textual and visual prototypes of a bank against support features.
    Fuse {
        #[arg(long)]
        scene_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        level: usize,
        #[arg(long)]
        bank: PathBuf,
        /// Checkpoint directory providing alpha; defaults to alpha = 1.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict per-class masks for a query scene from per-level banks.
    Predict {
        #[arg(long)]
        scene_dir: PathBuf,
        /// One bank per pyramid level, deepest first.
        #[arg(long, value_delimiter = ',')]
        banks: Vec<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on synthetic episodes and write a checkpoint plus a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Zero/few-shot evaluation over synthetic episodes.
    EvalZfs {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Target class; defaults to the first unseen class.
        #[arg(long)]
        target: Option<u32>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generalized few-shot evaluation over synthetic episodes.
    EvalGfs {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> anyhow::Result<()> {
    if let Ok(threads) = std::env::var("MPROTO_THREADS") {
        let threads: usize = threads
            .parse()
            .context("MPROTO_THREADS must be an integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("rayon pool")?;
    }
    match Cli::parse().command {
        Command::SplitMask {
            mask,
            n,
            seed,
            out_dir,
            kmeans,
            max_iter,
        } => split_mask(&mask, n, seed, &out_dir, kmeans, max_iter),
        Command::BenchSplit {
            mask,
            height,
            width,
            n,
            runs,
            seed,
        } => bench_split(mask.as_deref(), height, width, n, runs, seed),
        Command::GenScene {
            config,
            out_dir,
            scene_seed,
            classes,
        } => gen_scene_cmd(&config, &out_dir, scene_seed, classes),
        Command::Extract {
            scene_dir,
            level,
            classes,
            n,
            seed,
            background,
            out,
        } => extract(&scene_dir, level, &classes, n, seed, background, &out),
        Command::Fuse {
            scene_dir,
            level,
            bank,
            ckpt,
            out,
        } => fuse_cmd(&scene_dir, level, &bank, ckpt.as_deref(), &out),
        Command::Predict {
            scene_dir,
            banks,
            ckpt,
            seed,
            out_dir,
        } => predict_cmd(&scene_dir, &banks, ckpt.as_deref(), seed, &out_dir),
        Command::Train { config, out, log } => train_cmd(&config, &out, log.as_deref()),
        Command::EvalZfs {
            config,
            ckpt,
            target,
            report,
        } => eval_zfs(&config, ckpt.as_deref(), target, report.as_deref()),
        Command::EvalGfs {
            config,
            ckpt,
            report,
        } => eval_gfs(&config, ckpt.as_deref(), report.as_deref()),
        Command::GradCheck {
            instances,
            h,
            seed,
            tolerance,
        } => grad_check_cmd(instances, h, seed, tolerance),
    }
}

fn split_mask(
    mask_path: &Path,
    n: usize,
    seed: u64,
    out_dir: &Path,
    kmeans: bool,
    max_iter: usize,
) -> anyhow::Result<()> {
    let mask = pgm::read_mask(mask_path)?;
    std::fs::create_dir_all(out_dir)?;
    let start = std::time::Instant::now();
    let partition = if kmeans {
        kmeans_split(&mask, n, max_iter, seed)?
    } else {
        m_splitting(&mask, n, seed)?
    };
    let elapsed = start.elapsed();
    for (k, part) in partition.parts.iter().enumerate() {
        pgm::write_mask(out_dir.join(format!("part_{k}.pgm")), part)?;
    }
    let algo = if kmeans { "kmeans" } else { "m-splitting" };
    println!(
        "algorithm={algo} parts={n} seconds={:.6}",
        elapsed.as_secs_f64()
    );
    for (k, &(x, y)) in partition.centers.iter().enumerate() {
        println!(
            "center[{k}]=({x},{y}) pixels={}",
            partition.parts[k].foreground_count()
        );
    }
    Ok(())
}

fn half_foreground(height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    for y in 0..height {
        for x in 0..width / 2 {
            mask.set(x, y, true);
        }
    }
    mask
}

fn bench_split(
    mask: Option<&Path>,
    height: usize,
    width: usize,
    n: usize,
    runs: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let mask = match mask {
        Some(p) => pgm::read_mask(p)?,
        None => half_foreground(height, width),
    };
    println!(
        "mask {}x{} foreground={} n={n} runs={runs} (median wall time)",
        mask.height(),
        mask.width(),
        mask.foreground_count()
    );
    let time = |label: &str, f: &mut dyn FnMut()| -> Duration {
        let d = median_duration(runs, f);
        println!("{label:<22} {:>12.6} s", d.as_secs_f64());
        d
    };
    let fast = time("m-splitting", &mut || {
        m_splitting(&mask, n, seed).expect("mask has foreground");
    });
    let k3 = time("kmeans (max_iter=3)", &mut || {
        kmeans_split(&mask, n, 3, seed).expect("mask has foreground");
    });
    let _k10 = time("kmeans (max_iter=10)", &mut || {
        kmeans_split(&mask, n, 10, seed).expect("mask has foreground");
    });
    println!(
        "speedup_vs_kmeans3={:.2}",
        k3.as_secs_f64() / fast.as_secs_f64()
    );
    Ok(())
}

fn spec_from_config(cfg: &RunConfig) -> anyhow::Result<SyntheticSceneSpec> {
    Ok(SyntheticSceneSpec::axes(
        cfg.synthetic.classes,
        cfg.synthetic.dim,
        cfg.synthetic.scale,
        cfg.synthetic.noise,
        cfg.levels,
        cfg.n.saturating_sub(1),
        cfg.synthetic.seed,
    )
    .map(|mut s| {
        s.grid = cfg.synthetic.grid;
        s
    })?)
}

/// Registry from config: explicit file wins, otherwise the last class is
/// held out as unseen.
fn registry_from_config(
    cfg: &RunConfig,
    spec: &SyntheticSceneSpec,
) -> anyhow::Result<ClassRegistry> {
    if let Some(path) = &cfg.registry {
        return Ok(load_registry(path)?);
    }
    let ids = spec.class_ids();
    let (unseen, seen) = ids.split_last().context("at least one class")?;
    let mut seen: Vec<ClassId> = seen.to_vec();
    seen.push(ClassId(0));
    Ok(ClassRegistry::new(seen, [*unseen], ClassId(0))?)
}

fn gen_scene_cmd(
    config: &Path,
    out_dir: &Path,
    scene_seed: u64,
    classes: Option<Vec<u32>>,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut spec = spec_from_config(&cfg)?;
    spec.seed = mix_seed(spec.seed, scene_seed, 0);
    let scene = match classes {
        Some(ids) => {
            let ids: Vec<ClassId> = ids.into_iter().map(ClassId).collect();
            gen_scene_subset(&spec, &ids)?
        }
        None => gen_scene(&spec)?,
    };
    write_scene_fixtures(&scene, out_dir)?;
    let registry = registry_from_config(&cfg, &spec)?;
    save_registry(out_dir.join("registry.json"), &registry)?;
    println!(
        "scene written to {} (grid {}, {} classes, {} levels)",
        out_dir.display(),
        spec.grid,
        scene.masks.len(),
        spec.levels
    );
    Ok(())
}

fn read_level_features(scene_dir: &Path, level: usize) -> anyhow::Result<FeatureMap> {
    let path = scene_dir.join(format!("features_l{level}.mpf"));
    Ok(read_tensor(&path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_feature_map()?)
}

fn read_class_mask(scene_dir: &Path, class: ClassId) -> anyhow::Result<BinaryMask> {
    Ok(pgm::read_mask(scene_dir.join(format!("mask_{class}.pgm")))?)
}

fn extract(
    scene_dir: &Path,
    level: usize,
    classes: &[u32],
    n: usize,
    seed: u64,
    background: bool,
    out: &Path,
) -> anyhow::Result<()> {
    if classes.is_empty() {
        bail!("--classes must name at least one class");
    }
    let features = read_level_features(scene_dir, level)?;
    let records = load_records(scene_dir.join("manifest.json"))?;
    let mut sets: Vec<PrototypeSet> = Vec::new();

    let mut masks = Vec::new();
    for &c in classes {
        masks.push((ClassId(c), read_class_mask(scene_dir, ClassId(c))?));
    }
    if background {
        let all: Vec<&BinaryMask> = masks.iter().map(|(_, m)| m).collect();
        let bg_mask = BinaryMask::union(&all)?.complement();
        let mut set = visual_prototypes(ClassId(0), &features, &bg_mask, n, mix_seed(seed, 0, 0))?;
        // background has no frozen text; reserve slot 0 with a zero vector
        set.entries.insert(
            0,
            PrototypeEntry {
                vector: vec![0.0; features.dim()],
                modality: Modality::Textual,
                slot: 0,
            },
        );
        sets.push(set);
    }
    for (class, mask) in &masks {
        let record = records
            .get(class)
            .with_context(|| format!("manifest lacks embeddings for class {class}"))?;
        let mut set = textual_prototypes(record)?;
        let visual = visual_prototypes(*class, &features, mask, n, mix_seed(seed, 1, class.0))?;
        set.entries.extend(visual.entries);
        sets.push(set);
    }
    save_bank(out, &BankFile::from_sets(n, &sets))?;
    println!(
        "bank with {} classes written to {}",
        sets.len(),
        out.display()
    );
    Ok(())
}

fn load_params(
    ckpt: Option<&Path>,
    n: usize,
    levels: usize,
    width: usize,
    dim: usize,
    seed: u64,
) -> anyhow::Result<ModelParams> {
    match ckpt {
        Some(dir) => Ok(load_checkpoint(dir)?.params),
        None => Ok(ModelParams::init(n, levels, width, dim, seed)),
    }
}

fn fuse_cmd(
    scene_dir: &Path,
    level: usize,
    bank_path: &Path,
    ckpt: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let bank = load_bank(bank_path)?;
    let features = read_level_features(scene_dir, level)?;
    let params = match ckpt {
        Some(dir) => fusion::FusionParams::from_rho(load_checkpoint(dir)?.params.fusion.rho()),
        None => fusion::FusionParams::default(),
    };

    let mut class_masks: BTreeMap<ClassId, BinaryMask> = BTreeMap::new();
    for class in &bank.classes {
        if class.id != ClassId(0) {
            class_masks.insert(class.id, read_class_mask(scene_dir, class.id)?);
        }
    }
    let all: Vec<&BinaryMask> = class_masks.values().collect();
    let bg_mask = if all.is_empty() {
        None
    } else {
        Some(BinaryMask::union(&all)?.complement())
    };

    let mut fused_sets = Vec::new();
    for set in bank.to_sets() {
        let mask = if set.class_id == ClassId(0) {
            bg_mask
                .clone()
                .context("background fusion needs at least one class mask")?
        } else {
            class_masks[&set.class_id].clone()
        };
        let soft =
            mproto_core::prototype::downsample_mask(&mask, features.height(), features.width())?;
        let (txt, img): (Vec<_>, Vec<_>) = set
            .entries
            .iter()
            .cloned()
            .partition(|e| e.modality == Modality::Textual);
        let p_txt = PrototypeSet {
            class_id: set.class_id,
            entries: txt,
        };
        let p_img = PrototypeSet {
            class_id: set.class_id,
            entries: img,
        };
        let fused = fusion::complementary_fuse(&p_txt, &p_img, &features, &soft, &params)?;
        fused_sets.push(fused.into_prototype_set());
    }
    save_bank(out, &BankFile::from_sets(bank.n, &fused_sets))?;
    println!("fused bank written to {}", out.display());
    Ok(())
}

fn predict_cmd(
    scene_dir: &Path,
    banks: &[PathBuf],
    ckpt: Option<&Path>,
    seed: u64,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if banks.is_empty() {
        bail!("--banks must name at least one bank file");
    }
    let mut pyramid = Vec::new();
    let mut proto_banks = Vec::new();
    let mut n = 0;
    for (l, path) in banks.iter().enumerate() {
        pyramid.push(read_level_features(scene_dir, l + 1)?);
        let bank = load_bank(path)?;
        n = bank.n;
        proto_banks.push(bank.to_prototype_bank()?);
    }
    let dim = pyramid[0].dim();
    let params = load_params(ckpt, n.max(1), banks.len(), 8, dim, seed)?;
    let full = mproto_core::prediction::forward_full(&pyramid, &proto_banks, &params.prediction)?;

    std::fs::create_dir_all(out_dir)?;
    let map = &full.final_probs;
    let argmax = map.argmax_map();
    for (ci, class) in map.classes.iter().enumerate() {
        let bits: Vec<u8> = argmax.iter().map(|&a| (a == ci) as u8).collect();
        let mask = BinaryMask::from_bits(map.height, map.width, bits)?;
        pgm::write_mask(out_dir.join(format!("pred_{class}.pgm")), &mask)?;
    }
    write_tensor(
        out_dir.join("probs.mpf"),
        &Tensor::new(
            vec![map.height, map.width, map.classes.len()],
            map.probs.data().to_vec(),
        )?,
    )?;
    for (l, inter) in full.intermediates.iter().enumerate() {
        write_tensor(
            out_dir.join(format!("probs_l{}.mpf", l + 1)),
            &Tensor::new(
                vec![inter.height, inter.width, inter.classes.len()],
                inter.probs.data().to_vec(),
            )?,
        )?;
    }
    println!(
        "wrote {} class masks and probability tensors to {}",
        map.classes.len(),
        out_dir.display()
    );
    Ok(())
}

fn train_cmd(config: &Path, out: &Path, log: Option<&Path>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = spec_from_config(&cfg)?;
    let registry = registry_from_config(&cfg, &spec)?;
    let pool = training_pool(
        &spec,
        &registry,
        cfg.synthetic.train_scenes,
        cfg.n,
        cfg.seed,
    )?;
    let loss_cfg = LossConfig::new(cfg.lambda, cfg.eps)?;
    let params = ModelParams::init(cfg.n, cfg.levels, cfg.width, spec.dim(), cfg.seed);
    let state = TrainState::new(params, cfg.lr, cfg.seed)?;
    let (state, losses) = train_on_pool(state, &pool, &loss_cfg, cfg.steps)?;
    save_checkpoint(out, &state)?;
    let mut log_text = String::new();
    for (i, loss) in losses.iter().enumerate() {
        log_text.push_str(&format!("step={} loss={loss:.9}\n", i + 1));
    }
    std::fs::write(log.unwrap_or(&out.join("loss.log")), log_text)?;
    println!(
        "trained {} steps over {} episodes; final loss {:.6}; checkpoint at {}",
        cfg.steps,
        pool.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn eval_zfs(
    config: &Path,
    ckpt: Option<&Path>,
    target: Option<u32>,
    report: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = spec_from_config(&cfg)?;
    let registry = registry_from_config(&cfg, &spec)?;
    let target = match target {
        Some(t) => ClassId(t),
        None => *registry
            .unseen
            .iter()
            .next()
            .context("registry has no unseen class")?,
    };
    let mode = cfg.shot_mode();
    let shots = match mode {
        ShotMode::Zero => 0,
        ShotMode::Shots(k) => k,
    };
    let episodes = zfs_episodes(
        &spec,
        &registry,
        target,
        cfg.episodes,
        shots,
        cfg.n,
        cfg.seed,
    )?;
    let params = load_params(ckpt, cfg.n, cfg.levels, cfg.width, spec.dim(), cfg.seed)?;

    let mut total = 0.0;
    let mut lines = String::new();
    for (i, ep) in episodes.iter().enumerate() {
        let out = run_zfs_episode(ep, &params, mode)?;
        lines.push_str(&format!("episode[{i}].iou={:.4}\n", out.iou * 100.0));
        total += out.iou;
    }
    let mean = total / episodes.len() as f64;
    lines.push_str(&format!(
        "target={target}\nshots={shots}\nmean_iou={:.4}\n",
        mean * 100.0
    ));
    print!("{lines}");
    if let Some(path) = report {
        let json = serde_json::json!({
            "target": target.0,
            "shots": shots,
            "mean_iou": mean * 100.0,
            "episodes": episodes.len(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn eval_gfs(config: &Path, ckpt: Option<&Path>, report: Option<&Path>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = spec_from_config(&cfg)?;
    let registry = registry_from_config(&cfg, &spec)?;
    let shots = match cfg.shot_mode() {
        ShotMode::Zero => bail!("GFS evaluation needs at least one support shot"),
        ShotMode::Shots(k) => k,
    };
    let episodes = gfs_episodes(&spec, &registry, cfg.episodes, shots, cfg.n, cfg.seed)?;
    let params = load_params(ckpt, cfg.n, cfg.levels, cfg.width, spec.dim(), cfg.seed)?;
    let (_, merged) = run_gfs_episodes(&episodes, &params)?;
    print!("{}", merged.to_kv_lines());
    if let Some(path) = report {
        std::fs::write(path, serde_json::to_string_pretty(&merged.to_json())?)?;
    }
    Ok(())
}

fn grad_check_cmd(instances: usize, h: f64, seed: u64, tolerance: f64) -> anyhow::Result<()> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let instance_seed = mix_seed(seed, i as u64, 0);
        let (inputs, target, params) = mproto_core::training::random_check_instance(instance_seed)?;
        let report = grad_check_episode(&inputs, &params, &target, &LossConfig::default(), h)?;
        println!("instance[{i}] max_rel_err={:.3e}", report.max_rel_err);
        worst = worst.max(report.max_rel_err);
    }
    println!("worst_rel_err={worst:.3e} tolerance={tolerance:.1e}");
    if worst > tolerance {
        bail!("gradient check failed: {worst:.3e} > {tolerance:.1e}");
    }
    println!("gradient check passed");
    Ok(())
}
