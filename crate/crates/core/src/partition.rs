//! Splitting a binary mask into spatial regions.
//!
//! Two algorithms produce the same [`Partition`] contract: a greedy
//! farthest-point scheme ([`m_splitting`]) that picks each new region center
//! as the foreground pixel maximizing the squared distance to the centers
//! chosen so far, and a plain Lloyd's k-means baseline ([`kmeans_split`]).
//! The greedy scheme needs one pass per center and no iteration; the
//! baseline is the conventional iterative clusterer it is benchmarked
//! against.

use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::{Error, Result};

/// Pixel-resolution 0/1 mask, row-major. Coordinates are `(x, y)` with `x`
/// the column and `y` the row; bit index is `y * width + x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::shape("mask bits must be 0 or 1".to_string()));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v as u8;
    }

    /// Foreground coordinates in row-major scan order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.bits[y * self.width + x] == 1 {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    /// Pixelwise union; all masks must share one grid.
    pub fn union(masks: &[&BinaryMask]) -> Result<BinaryMask> {
        let first = masks.first().ok_or(Error::EmptyMask)?;
        let mut out = BinaryMask::new(first.height, first.width);
        for m in masks {
            if m.height != first.height || m.width != first.width {
                return Err(Error::shape(
                    "union over masks of different sizes".to_string(),
                ));
            }
            for (o, &b) in out.bits.iter_mut().zip(&m.bits) {
                *o |= b;
            }
        }
        Ok(out)
    }
}

/// A split of one mask's foreground into disjoint covering parts, each with a
/// center pixel that lies inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub parts: Vec<BinaryMask>,
    pub centers: Vec<(usize, usize)>,
}

impl Partition {
    /// Checks the full contract against the source mask: parts are nonempty,
    /// pairwise disjoint, restricted to the source foreground, cover it, and
    /// every center lies in its own part.
    pub fn validate(&self, source: &BinaryMask) -> Result<()> {
        if self.parts.len() != self.centers.len() {
            return Err(Error::shape("parts/centers length mismatch".to_string()));
        }
        let mut seen = vec![0u8; source.height() * source.width()];
        for (k, part) in self.parts.iter().enumerate() {
            if part.height() != source.height() || part.width() != source.width() {
                return Err(Error::shape("part grid differs from source".to_string()));
            }
            if part.foreground_count() == 0 {
                return Err(Error::Shape(format!("part {k} is empty")));
            }
            let (cx, cy) = self.centers[k];
            if !part.get(cx, cy) {
                return Err(Error::Shape(format!("center {k} not inside part {k}")));
            }
            for (i, &b) in part.bits().iter().enumerate() {
                if b == 1 {
                    if source.bits()[i] == 0 {
                        return Err(Error::Shape(format!("part {k} leaks into background")));
                    }
                    if seen[i] == 1 {
                        return Err(Error::Shape(format!("pixel {i} assigned twice")));
                    }
                    seen[i] = 1;
                }
            }
        }
        if seen != source.bits() {
            return Err(Error::shape(
                "parts do not cover the foreground".to_string(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
fn sq_dist(a: (usize, usize), b: (usize, usize)) -> i64 {
    let dx = a.0 as i64 - b.0 as i64;
    let dy = a.1 as i64 - b.1 as i64;
    dx * dx + dy * dy
}

fn check_split_args(n: usize, foreground: usize) -> Result<()> {
    if foreground == 0 {
        return Err(Error::EmptyMask);
    }
    if n == 0 || n > foreground {
        return Err(Error::InsufficientPixels {
            requested: n,
            available: foreground,
        });
    }
    Ok(())
}

/// Greedy farthest-point split. The first center is drawn uniformly from the
/// foreground using `seed`; every following center is the foreground pixel
/// maximizing the squared distance to the nearest existing center. One pass
/// per center over flat integer coordinates, no iteration.
pub fn m_splitting(mask: &BinaryMask, n: usize, seed: u64) -> Result<Partition> {
    let fg = foreground_flat(mask);
    check_split_args(n, fg.len() / 2)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let pick = rng.random_range(0..fg.len() / 2);
    m_splitting_flat(
        mask,
        n,
        &fg,
        (fg[2 * pick] as usize, fg[2 * pick + 1] as usize),
    )
}

/// Same as [`m_splitting`] but with the first center pinned; useful for
/// deterministic case studies.
pub fn m_splitting_from(mask: &BinaryMask, n: usize, first: (usize, usize)) -> Result<Partition> {
    let fg = foreground_flat(mask);
    check_split_args(n, fg.len() / 2)?;
    if first.0 >= mask.width() || first.1 >= mask.height() || !mask.get(first.0, first.1) {
        return Err(Error::Episode(format!(
            "first center {first:?} is not a foreground pixel"
        )));
    }
    m_splitting_flat(mask, n, &fg, first)
}

/// Interleaved (x, y) foreground coordinates in row-major scan order.
fn foreground_flat(mask: &BinaryMask) -> Vec<i32> {
    let mut out = Vec::with_capacity(mask.width() * mask.height() / 2);
    for y in 0..mask.height() {
        let row = &mask.bits()[y * mask.width()..(y + 1) * mask.width()];
        for (x, &b) in row.iter().enumerate() {
            if b == 1 {
                out.push(x as i32);
                out.push(y as i32);
            }
        }
    }
    out
}

fn m_splitting_flat(
    mask: &BinaryMask,
    n: usize,
    fg: &[i32],
    first: (usize, usize),
) -> Result<Partition> {
    let count = fg.len() / 2;
    let mut centers: Vec<(i32, i32)> = Vec::with_capacity(n);
    centers.push((first.0 as i32, first.1 as i32));
    // One pass per center: the squared distance to the nearest center and the
    // owning center index are updated in place, and the pass tracks the
    // farthest pixel so the next center comes out of the same sweep. Strict
    // comparisons keep the first row-major pixel on distance ties and the
    // lowest center index on assignment ties.
    let mut dist = vec![0i64; count];
    let mut assign = vec![0u32; count];
    let (mut cx, mut cy) = centers[0];
    let mut farthest = 0usize;
    let mut farthest_d = -1i64;
    for (i, d) in dist.iter_mut().enumerate() {
        let dx = (fg[2 * i] - cx) as i64;
        let dy = (fg[2 * i + 1] - cy) as i64;
        *d = dx * dx + dy * dy;
        if *d > farthest_d {
            farthest_d = *d;
            farthest = i;
        }
    }
    for k in 1..n {
        cx = fg[2 * farthest];
        cy = fg[2 * farthest + 1];
        centers.push((cx, cy));
        farthest_d = -1;
        for i in 0..count {
            let dx = (fg[2 * i] - cx) as i64;
            let dy = (fg[2 * i + 1] - cy) as i64;
            let d = dx * dx + dy * dy;
            let closer = d < dist[i];
            dist[i] = if closer { d } else { dist[i] };
            assign[i] = if closer { k as u32 } else { assign[i] };
            if dist[i] > farthest_d {
                farthest_d = dist[i];
                farthest = i;
            }
        }
    }

    let width = mask.width();
    let mut parts = vec![BinaryMask::new(mask.height(), width); n];
    for i in 0..count {
        let (x, y) = (fg[2 * i] as usize, fg[2 * i + 1] as usize);
        parts[assign[i] as usize].bits_mut()[y * width + x] = 1;
    }
    let centers = centers
        .into_iter()
        .map(|(x, y)| (x as usize, y as usize))
        .collect();
    Ok(Partition { parts, centers })
}

type Point = Vec<f64>;

fn euclid(a: &Point, b: &Point) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

fn centroid_mean(points: &[Point], members: &[usize]) -> Point {
    let dim = points[0].len();
    let mut mean = vec![0.0; dim];
    for &i in members {
        for (m, v) in mean.iter_mut().zip(&points[i]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= members.len() as f64;
    }
    mean
}

/// Lloyd's k-means over the foreground pixel coordinates with k-means++
/// seeding, the conventional generic clusterer the greedy split is measured
/// against. Stops once assignments are stable or after `max_iter` update
/// rounds. Empty clusters are re-seeded to the point farthest from the
/// remaining centroids. Reported centers are each cluster's member pixel
/// nearest to its centroid.
pub fn kmeans_split(mask: &BinaryMask, n: usize, max_iter: usize, seed: u64) -> Result<Partition> {
    let fg = mask.foreground();
    check_split_args(n, fg.len())?;
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be >= 1".to_string()));
    }
    let points: Vec<Point> = fg.iter().map(|&(x, y)| vec![x as f64, y as f64]).collect();
    let mut rng = StdRng::seed_from_u64(seed);

    let mut centroids = kmeans_pp_seed(&points, n, &mut rng);
    let mut assignment = assign_points(&points, &centroids);
    for _ in 0..max_iter {
        update_centroids(&points, &assignment, &mut centroids);
        let next = assign_points(&points, &centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    // The update step can still leave a cluster without members in the final
    // assignment; re-seed until every cluster owns at least one pixel.
    loop {
        let mut counts = vec![0usize; n];
        for &a in &assignment {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let far = farthest_point(&points, &centroids, empty);
        centroids[empty] = points[far].clone();
        assignment = assign_points(&points, &centroids);
    }

    let centers = snap_centers(&fg, &points, &assignment, &centroids);
    Ok(build_parts(mask, &fg, &assignment, centers))
}

/// k-means++: each new centroid is sampled with probability proportional to
/// the squared distance to the nearest centroid chosen so far.
fn kmeans_pp_seed(points: &[Point], n: usize, rng: &mut StdRng) -> Vec<Point> {
    let mut centroids: Vec<Point> = Vec::with_capacity(n);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    while centroids.len() < n {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                let d = centroids
                    .iter()
                    .map(|c| euclid(p, c))
                    .fold(f64::INFINITY, f64::min);
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut pick = points.len() - 1;
        let mut t = rng.random::<f64>() * total;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && t < w {
                pick = i;
                break;
            }
            t -= w;
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

fn assign_points(points: &[Point], centroids: &[Point]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = euclid(p, &centroids[0]);
            for (k, c) in centroids.iter().enumerate().skip(1) {
                let d = euclid(p, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn update_centroids(points: &[Point], assignment: &[usize], centroids: &mut [Point]) {
    let n = centroids.len();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &a) in assignment.iter().enumerate() {
        groups[a].push(i);
    }
    for k in 0..n {
        if groups[k].is_empty() {
            let far = farthest_point(points, centroids, k);
            centroids[k] = points[far].clone();
        } else {
            centroids[k] = centroid_mean(points, &groups[k]);
        }
    }
}

/// Index of the point farthest from every centroid except `skip`.
fn farthest_point(points: &[Point], centroids: &[Point], skip: usize) -> usize {
    let mut best = 0;
    let mut best_d = -1.0;
    for (i, p) in points.iter().enumerate() {
        let d = centroids
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != skip)
            .map(|(_, c)| euclid(p, c))
            .fold(f64::INFINITY, f64::min);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn snap_centers(
    fg: &[(usize, usize)],
    points: &[Point],
    assignment: &[usize],
    centroids: &[Point],
) -> Vec<(usize, usize)> {
    centroids
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mut best: Option<(usize, f64)> = None;
            for (i, (&a, p)) in assignment.iter().zip(points).enumerate() {
                if a != k {
                    continue;
                }
                let d = euclid(p, c);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            let (i, _) = best.expect("cluster validated nonempty");
            fg[i]
        })
        .collect()
}

fn build_parts(
    mask: &BinaryMask,
    fg: &[(usize, usize)],
    assignment: &[usize],
    centers: Vec<(usize, usize)>,
) -> Partition {
    let mut parts = vec![BinaryMask::new(mask.height(), mask.width()); centers.len()];
    for (&a, &(x, y)) in assignment.iter().zip(fg) {
        parts[a].set(x, y, true);
    }
    Partition { parts, centers }
}

/// Median wall-clock time of `runs` invocations of `f`.
pub fn median_duration<F: FnMut()>(runs: usize, mut f: F) -> Duration {
    assert!(runs > 0);
    let mut times: Vec<Duration> = (0..runs)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed()
        })
        .collect();
    times.sort();
    times[times.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_str(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let bits = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| (b == b'1') as u8))
            .collect();
        BinaryMask::from_bits(h, w, bits).unwrap()
    }

    /// From-scratch greedy distance: max over fg of min squared distance to
    /// the given centers. Used as the oracle for the farthest-point property.
    fn oracle_max_dist(mask: &BinaryMask, centers: &[(usize, usize)]) -> i64 {
        mask.foreground()
            .iter()
            .map(|&p| centers.iter().map(|&c| sq_dist(p, c)).min().unwrap())
            .max()
            .unwrap()
    }

    #[test]
    fn single_part_is_whole_foreground() {
        let mask = mask_from_str(&["0110", "1111", "0110"]);
        let p = m_splitting(&mask, 1, 9).unwrap();
        p.validate(&mask).unwrap();
        assert_eq!(p.parts[0], mask);
    }

    #[test]
    fn four_by_four_two_centers() {
        // Brute-force check of the greedy distance over all 16 pixels: from
        // (0,0) the unique maximizer of D is (3,3), and the anti-diagonal
        // x+y=3 ties between the two centers, so it goes to part 0.
        let mask = BinaryMask::filled(4, 4);
        let p = m_splitting_from(&mask, 2, (0, 0)).unwrap();
        p.validate(&mask).unwrap();
        assert_eq!(p.centers, vec![(0, 0), (3, 3)]);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(p.parts[0].get(x, y), x + y <= 3, "pixel ({x},{y})");
                assert_eq!(p.parts[1].get(x, y), x + y > 3, "pixel ({x},{y})");
            }
        }
        assert_eq!(sq_dist((3, 3), (0, 0)), oracle_max_dist(&mask, &[(0, 0)]));
    }

    #[test]
    fn n_equals_foreground_gives_singletons() {
        let mask = mask_from_str(&["101", "010"]);
        let p = m_splitting(&mask, 3, 4).unwrap();
        p.validate(&mask).unwrap();
        for part in &p.parts {
            assert_eq!(part.foreground_count(), 1);
        }
    }

    #[test]
    fn split_errors() {
        let empty = BinaryMask::new(3, 3);
        assert_eq!(m_splitting(&empty, 1, 0), Err(Error::EmptyMask));
        let mask = mask_from_str(&["110"]);
        assert_eq!(
            m_splitting(&mask, 3, 0),
            Err(Error::InsufficientPixels {
                requested: 3,
                available: 2
            })
        );
        assert_eq!(
            kmeans_split(&mask, 5, 3, 0),
            Err(Error::InsufficientPixels {
                requested: 5,
                available: 2
            })
        );
        assert_eq!(kmeans_split(&empty, 1, 3, 0), Err(Error::EmptyMask));
        assert!(matches!(kmeans_split(&mask, 1, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn m_splitting_reproducible() {
        let mask = mask_from_str(&["11110", "01111", "11011"]);
        let a = m_splitting(&mask, 4, 1234).unwrap();
        let b = m_splitting(&mask, 4, 1234).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kmeans_single_center_nearest_to_centroid() {
        let mask = mask_from_str(&["100", "000", "001"]);
        // centroid (1.0, 1.0); both pixels tie at sqrt(2); row-major first wins
        let p = kmeans_split(&mask, 1, 5, 7).unwrap();
        p.validate(&mask).unwrap();
        assert_eq!(p.parts[0], mask);
        assert_eq!(p.centers[0], (0, 0));
    }

    #[test]
    fn kmeans_separated_blobs() {
        // Two 2x2 blobs far apart: the blob split is the unique Lloyd fixed
        // point, so every seed must land on it.
        let mask = mask_from_str(&["1100000011", "1100000011"]);
        let left = mask_from_str(&["1100000000", "1100000000"]);
        let right = mask_from_str(&["0000000011", "0000000011"]);
        for seed in 0..10 {
            let p = kmeans_split(&mask, 2, 10, seed).unwrap();
            p.validate(&mask).unwrap();
            let mut parts = vec![p.parts[0].clone(), p.parts[1].clone()];
            parts.sort_by_key(|m| m.foreground()[0]);
            assert_eq!(parts, vec![left.clone(), right.clone()], "seed {seed}");
        }
    }

    #[test]
    fn kmeans_singletons() {
        let mask = mask_from_str(&["101", "010"]);
        let p = kmeans_split(&mask, 3, 3, 11).unwrap();
        p.validate(&mask).unwrap();
        for part in &p.parts {
            assert_eq!(part.foreground_count(), 1);
        }
    }

    #[test]
    fn greedy_center_property_small_grids() {
        for seed in 0..20u64 {
            let mut rng = StdRng::seed_from_u64(900 + seed);
            let h = rng.random_range(2..=16);
            let w = rng.random_range(2..=16);
            let bits: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..2u8)).collect();
            let mask = match BinaryMask::from_bits(h, w, bits) {
                Ok(m) if m.foreground_count() > 0 => m,
                _ => continue,
            };
            let n = rng.random_range(1..=mask.foreground_count());
            let p = m_splitting(&mask, n, seed).unwrap();
            p.validate(&mask).unwrap();
            for k in 1..n {
                let expected = oracle_max_dist(&mask, &p.centers[..k]);
                assert_eq!(
                    sq_dist(p.centers[k], nearest(&p.centers[..k], p.centers[k])),
                    expected
                );
            }
        }
    }

    fn nearest(centers: &[(usize, usize)], p: (usize, usize)) -> (usize, usize) {
        *centers.iter().min_by_key(|&&c| sq_dist(p, c)).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn partition_invariants_random_masks(
            h in 1usize..12,
            w in 1usize..12,
            seed in 0u64..10_000,
            fill in 0.05f64..0.95,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let bits: Vec<u8> = (0..h * w).map(|_| (rng.random::<f64>() < fill) as u8).collect();
            let mask = BinaryMask::from_bits(h, w, bits).unwrap();
            let fg = mask.foreground_count();
            prop_assume!(fg > 0);
            let n = rng.random_range(1..=fg);
            let p = m_splitting(&mask, n, seed).unwrap();
            p.validate(&mask).unwrap();
            let k = kmeans_split(&mask, n, 3, seed).unwrap();
            k.validate(&mask).unwrap();
        }
    }
}
