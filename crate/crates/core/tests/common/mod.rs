//! Independent reference implementations used as test oracles: breadth-first
//! component labeling, naive double-loop metrics, scalar loss formulas and
//! central finite differences. Written from the definitions, sharing no code
//! with the library beyond reading its mask and volume types.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use lesionkit::metrics::{HitRule, MetricConfig};
use lesionkit::{BinaryMask, Dims, Grid, ProbabilityVolume, Spacing, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn coords(d: Dims, i: usize) -> (usize, usize, usize) {
    (i % d.nx, (i / d.nx) % d.ny, i / (d.nx * d.ny))
}

fn neighbours(d: Dims, i: usize, max_nonzero: u32) -> Vec<usize> {
    let (x, y, z) = coords(d, i);
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let nz = (dx != 0) as u32 + (dy != 0) as u32 + (dz != 0) as u32;
                if nz == 0 || nz > max_nonzero {
                    continue;
                }
                let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if a < 0
                    || b < 0
                    || c < 0
                    || a >= d.nx as i64
                    || b >= d.ny as i64
                    || c >= d.nz as i64
                {
                    continue;
                }
                out.push(a as usize + d.nx * (b as usize + d.ny * c as usize));
            }
        }
    }
    out
}

fn max_nonzero(connectivity: u8) -> u32 {
    match connectivity {
        6 => 1,
        18 => 2,
        26 => 3,
        c => panic!("bad connectivity {c}"),
    }
}

/// Components by breadth-first flood fill, each sorted ascending, ordered by
/// smallest voxel index.
pub fn bfs_components(d: Dims, mask: &[bool], connectivity: u8) -> Vec<Vec<usize>> {
    let reach = max_nonzero(connectivity);
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for n in neighbours(d, v, reach) {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    comp.push(n);
                    queue.push_back(n);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn surface(d: Dims, mask: &[bool]) -> Vec<usize> {
    (0..mask.len())
        .filter(|&i| {
            if !mask[i] {
                return false;
            }
            let (x, y, z) = coords(d, i);
            let on_border =
                x == 0 || y == 0 || z == 0 || x + 1 == d.nx || y + 1 == d.ny || z + 1 == d.nz;
            on_border || neighbours(d, i, 1).into_iter().any(|n| !mask[n])
        })
        .collect()
}

pub fn dist_mm(d: Dims, s: [f64; 3], a: usize, b: usize) -> f64 {
    let (ax, ay, az) = coords(d, a);
    let (bx, by, bz) = coords(d, b);
    let dx = (ax as f64 - bx as f64) * s[0];
    let dy = (ay as f64 - by as f64) * s[1];
    let dz = (az as f64 - bz as f64) * s[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn nearest(d: Dims, s: [f64; 3], from: &[usize], to: &[usize]) -> Vec<f64> {
    from.iter()
        .map(|&a| {
            let mut best = f64::INFINITY;
            for &b in to {
                let x = dist_mm(d, s, a, b);
                if x < best {
                    best = x;
                }
            }
            best
        })
        .collect()
}

/// Linear-interpolation percentile, `q` in [0, 1].
pub fn interp_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q;
    let i = h.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] + (h - i as f64) * (v[i + 1] - v[i])
}

pub fn hd95(d: Dims, s: [f64; 3], a: &[bool], b: &[bool]) -> Option<f64> {
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return None;
    }
    let (sa, sb) = (surface(d, a), surface(d, b));
    let ab = interp_percentile(&nearest(d, s, &sa, &sb), 0.95);
    let ba = interp_percentile(&nearest(d, s, &sb, &sa), 0.95);
    Some(if ab > ba { ab } else { ba })
}

pub fn hausdorff(d: Dims, s: [f64; 3], a: &[bool], b: &[bool]) -> Option<f64> {
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return None;
    }
    let (sa, sb) = (surface(d, a), surface(d, b));
    nearest(d, s, &sa, &sb)
        .into_iter()
        .chain(nearest(d, s, &sb, &sa))
        .reduce(f64::max)
}

fn centre_member(d: Dims, s: [f64; 3], comp: &[usize]) -> usize {
    let n = comp.len() as f64;
    let mut sum = [0.0; 3];
    for &v in comp {
        let (x, y, z) = coords(d, v);
        sum[0] += x as f64;
        sum[1] += y as f64;
        sum[2] += z as f64;
    }
    let c = [sum[0] / n, sum[1] / n, sum[2] / n];
    let mut best = comp[0];
    let mut best_d = f64::INFINITY;
    for &v in comp {
        let (x, y, z) = coords(d, v);
        let q = ((x as f64 - c[0]) * s[0]).powi(2)
            + ((y as f64 - c[1]) * s[1]).powi(2)
            + ((z as f64 - c[2]) * s[2]).powi(2);
        if q < best_d {
            best_d = q;
            best = v;
        }
    }
    best
}

fn hits(d: Dims, s: [f64; 3], comps: &[Vec<usize>], other: &[bool], rule: HitRule) -> Vec<bool> {
    comps
        .iter()
        .map(|c| match rule {
            HitRule::AnyOverlap => c.iter().any(|&v| other[v]),
            HitRule::CenterIn => other[centre_member(d, s, c)],
        })
        .collect()
}

/// Every case metric by name, `None` where undefined.
pub fn case_report(
    pred: &BinaryMask,
    gt: &BinaryMask,
    cfg: &MetricConfig,
) -> BTreeMap<String, Option<f64>> {
    let d = pred.dims();
    let s = pred.spacing().0;
    let (p, g) = (pred.data(), gt.data());
    let eps = cfg.eps_metric;
    let conn = cfg.connectivity.as_u8();
    let mut r = BTreeMap::new();

    let np = p.iter().filter(|&&x| x).count();
    let ng = g.iter().filter(|&&x| x).count();
    let inter = (0..p.len()).filter(|&i| p[i] && g[i]).count();
    let dice = if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    };
    r.insert("dice".into(), Some(dice));
    r.insert("hd95_mm".into(), hd95(d, s, p, g));

    let gc = bfs_components(d, g, conn);
    let pc = bfs_components(d, p, conn);
    let gh = hits(d, s, &gc, p, cfg.hit_rule);
    let ph = hits(d, s, &pc, g, cfg.hit_rule);
    let g_hit = gh.iter().filter(|&&h| h).count();
    let p_hit = ph.iter().filter(|&&h| h).count();
    let precision = p_hit as f64 / (pc.len() as f64 + eps);
    let recall = g_hit as f64 / (gc.len() as f64 + eps);
    r.insert("lesion_precision".into(), Some(precision));
    r.insert("lesion_recall".into(), Some(recall));
    r.insert(
        "lesion_f1".into(),
        Some(2.0 * precision * recall / (precision + recall + eps)),
    );

    let small: Vec<usize> = (0..gc.len())
        .filter(|&k| gc[k].len() <= cfg.small_lesion_tau)
        .collect();
    let small_hit = small.iter().filter(|&&k| gh[k]).count();
    r.insert(
        "small_lesion_recall".into(),
        (!small.is_empty()).then(|| small_hit as f64 / (small.len() as f64 + eps)),
    );
    r.insert("gt_lesion_count".into(), Some(gc.len() as f64));
    r.insert("pred_lesion_count".into(), Some(pc.len() as f64));
    r.insert("fn_lesion_count".into(), Some((gc.len() - g_hit) as f64));
    r.insert("miss_rate".into(), Some(1.0 - recall));

    let fp: Vec<usize> = (0..p.len()).filter(|&i| p[i] && !g[i]).collect();
    let fn_ = (0..p.len()).filter(|&i| g[i] && !p[i]).count();
    r.insert(
        "fn_volume_fraction".into(),
        Some(fn_ as f64 / (ng as f64 + eps)),
    );
    r.insert(
        "fp_volume_mm3".into(),
        Some(fp.len() as f64 * (s[0] * s[1] * s[2])),
    );
    r.insert(
        "fp_blob_fraction".into(),
        (!pc.is_empty()).then(|| (pc.len() - p_hit) as f64 / pc.len() as f64),
    );

    let mut edges: Vec<(String, usize, usize)> = Vec::new();
    let mut lo = 0usize;
    for &e in &cfg.size_bins {
        edges.push((format!("recall_le_{e}"), lo, e));
        lo = e + 1;
    }
    edges.push((
        format!("recall_gt_{}", cfg.size_bins.last().unwrap()),
        lo,
        usize::MAX,
    ));
    for (name, lo, hi) in edges {
        let in_bin: Vec<usize> = (0..gc.len())
            .filter(|&k| gc[k].len() >= lo && gc[k].len() <= hi)
            .collect();
        let hit = in_bin.iter().filter(|&&k| gh[k]).count();
        r.insert(
            name,
            (!in_bin.is_empty()).then(|| hit as f64 / in_bin.len() as f64),
        );
    }

    let gt_vox: Vec<usize> = (0..g.len()).filter(|&i| g[i]).collect();
    if fp.is_empty() || gt_vox.is_empty() {
        r.insert("fp_near_fraction".into(), None);
        r.insert("fp_median_distance_mm".into(), None);
    } else {
        let dist = nearest(d, s, &fp, &gt_vox);
        let near = dist.iter().filter(|&&x| x <= cfg.near_distance_mm).count();
        r.insert(
            "fp_near_fraction".into(),
            Some(near as f64 / dist.len() as f64),
        );
        r.insert(
            "fp_median_distance_mm".into(),
            Some(interp_percentile(&dist, 0.5)),
        );
    }
    r
}

/// Names whose values are distances (compared to 1e-9 instead of exactly).
pub const DISTANCE_FIELDS: [&str; 2] = ["hd95_mm", "fp_median_distance_mm"];

// ---- random inputs -------------------------------------------------------

pub fn grid(d: Dims, s: [f64; 3]) -> Grid {
    Grid::new(d, Spacing(s)).unwrap()
}

/// Union of a few random boxes plus sparse salt, giving components of many sizes.
pub fn random_mask(rng: &mut ChaCha8Rng, d: Dims, s: [f64; 3]) -> BinaryMask {
    let mut m = vec![false; d.len()];
    let boxes = rng.random_range(0..4);
    for _ in 0..boxes {
        let x0 = rng.random_range(0..d.nx);
        let y0 = rng.random_range(0..d.ny);
        let z0 = rng.random_range(0..d.nz);
        let w = rng.random_range(1..=3);
        for z in z0..(z0 + w).min(d.nz) {
            for y in y0..(y0 + w).min(d.ny) {
                for x in x0..(x0 + w).min(d.nx) {
                    m[x + d.nx * (y + d.ny * z)] = true;
                }
            }
        }
    }
    let salt = rng.random_range(0.0..0.15);
    for v in m.iter_mut() {
        if rng.random_bool(salt) {
            *v = true;
        }
    }
    BinaryMask::new(d, Spacing(s), m).unwrap()
}

pub fn random_dims(rng: &mut ChaCha8Rng, max: usize) -> Dims {
    Dims::new(
        rng.random_range(1..=max),
        rng.random_range(1..=max),
        rng.random_range(1..=max),
    )
}

pub fn random_spacing(rng: &mut ChaCha8Rng) -> [f64; 3] {
    if rng.random_bool(0.5) {
        [1.0; 3]
    } else {
        [
            rng.random_range(0.5..2.5),
            rng.random_range(0.5..2.5),
            rng.random_range(0.5..2.5),
        ]
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probabilities in [0.02, 0.98] and a ground truth with clustered foreground.
pub fn random_prob_instance(rng: &mut ChaCha8Rng, d: Dims) -> (ProbabilityVolume, BinaryMask) {
    let p: Vec<f64> = (0..d.len()).map(|_| rng.random_range(0.02..0.98)).collect();
    let gt = random_mask(rng, d, [1.0; 3]);
    (
        ProbabilityVolume::new(Volume::new(d, Spacing::default(), p).unwrap()).unwrap(),
        gt,
    )
}

// ---- scalar loss formulas ------------------------------------------------

pub struct LossParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub eps_weight: f64,
    pub w_bg: f64,
    pub eps_mil: f64,
    pub connectivity: u8,
}

/// `1 - (TP + δ)/(TP + α FP + β FN + δ)` with component-adaptive weights.
pub fn cat_value(d: Dims, p: &[f64], g: &[bool], q: &LossParams) -> f64 {
    let mut w = vec![q.w_bg; p.len()];
    for c in bfs_components(d, g, q.connectivity) {
        let wk = (c.len() as f64 + q.eps_weight).powf(-q.gamma);
        for v in c {
            w[v] = wk;
        }
    }
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let gi = if g[i] { 1.0 } else { 0.0 };
        tp += w[i] * p[i] * gi;
        fp += w[i] * p[i] * (1.0 - gi);
        fn_ += w[i] * (1.0 - p[i]) * gi;
    }
    1.0 - (tp + q.delta) / (tp + q.alpha * fp + q.beta * fn_ + q.delta)
}

pub fn mil_value(d: Dims, p: &[f64], g: &[bool], q: &LossParams) -> f64 {
    let comps = bfs_components(d, g, q.connectivity);
    if comps.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for c in &comps {
        let s = c.iter().map(|&v| p[v]).fold(f64::NEG_INFINITY, f64::max);
        total -= (s + q.eps_mil).ln();
    }
    total / comps.len() as f64
}

pub fn dice_ce_value(p: &[f64], g: &[bool], q: &LossParams) -> f64 {
    let (mut i, mut sp, mut sg, mut ce) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..p.len() {
        let gk = if g[k] { 1.0 } else { 0.0 };
        i += p[k] * gk;
        sp += p[k];
        sg += gk;
        let pc = p[k].clamp(q.eps_mil, 1.0 - q.eps_mil);
        ce -= gk * pc.ln() + (1.0 - gk) * (1.0 - pc).ln();
    }
    1.0 - (2.0 * i + q.delta) / (sp + sg + q.delta) + ce / p.len() as f64
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_differences(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
