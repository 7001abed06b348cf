//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance suite. Nothing here calls into the code under test except to
//! build inputs.
#![allow(dead_code)]

use num_bigint::BigInt;
use rand::Rng;

use volseg_core::backend::{BBox2D, Point, PromptSet};
use volseg_core::volume::Volume;

/// 8-bit quantization of a window/level-normalized voxel.
pub fn oracle_quantize(v: f32, window: f64, level: f64) -> u8 {
    let lo = level - window / 2.0;
    let n = ((v as f64 - lo) / window).clamp(0.0, 1.0) as f32;
    (n * 255.0).round() as u8
}

/// Pixels of the slice at `index` along `axis`, read straight off the voxel
/// index formula.
pub fn oracle_slice(v: &Volume, axis: usize, index: usize) -> (usize, usize, Vec<f32>) {
    let [nx, ny, nz] = v.dims();
    let at = |x: usize, y: usize, z: usize| v.voxels()[x + nx * (y + ny * z)];
    match axis {
        2 => (ny, nx, (0..ny).flat_map(|r| (0..nx).map(move |c| (r, c))).map(|(r, c)| at(c, r, index)).collect()),
        1 => (nz, nx, (0..nz).flat_map(|r| (0..nx).map(move |c| (r, c))).map(|(r, c)| at(c, index, r)).collect()),
        0 => (nz, ny, (0..nz).flat_map(|r| (0..ny).map(move |c| (r, c))).map(|(r, c)| at(index, c, r)).collect()),
        _ => unreachable!(),
    }
}

/// Otsu by exhaustive search with exact rational comparison of
/// `w0 * w1 * (mu0 - mu1)^2`. Classes are `q < t` and `q >= t`.
fn oracle_otsu(values: &[u8]) -> u8 {
    let mut best: Option<(u8, BigInt, BigInt)> = None;
    for t in 1..=255u8 {
        let (lo, hi): (Vec<u8>, Vec<u8>) = values.iter().partition(|&&q| q < t);
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let w0 = BigInt::from(lo.len());
        let w1 = BigInt::from(hi.len());
        let s0: BigInt = lo.iter().map(|&q| BigInt::from(q)).sum();
        let s1: BigInt = hi.iter().map(|&q| BigInt::from(q)).sum();
        // w0 w1 (s0/w0 - s1/w1)^2 = (s0 w1 - s1 w0)^2 / (w0 w1)
        let d = &s0 * &w1 - &s1 * &w0;
        let num = &d * &d;
        let den = &w0 * &w1;
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.expect("at least two distinct values").0
}

fn fill(mask: &mut [bool], cols: usize, r: usize, c: usize, region: &BBox2D, member: &dyn Fn(usize, usize) -> bool) {
    let inside = r >= region.row0 as usize
        && r <= region.row1 as usize
        && c >= region.col0 as usize
        && c <= region.col1 as usize;
    if !inside || mask[r * cols + c] || !member(r, c) {
        return;
    }
    mask[r * cols + c] = true;
    if r > 0 {
        fill(mask, cols, r - 1, c, region, member);
    }
    fill(mask, cols, r + 1, c, region, member);
    if c > 0 {
        fill(mask, cols, r, c - 1, region, member);
    }
    fill(mask, cols, r, c + 1, region, member);
}

/// Brute-force reference segmentation of an 8-bit slice. Returns the mask and
/// its score.
pub fn oracle_decode(q: &[u8], rows: usize, cols: usize, p: &PromptSet) -> (Vec<bool>, f32) {
    let region = p.bbox.unwrap_or(BBox2D::new(0, 0, rows as u32 - 1, cols as u32 - 1));
    let in_region = |r: usize, c: usize| {
        r >= region.row0 as usize && r <= region.row1 as usize && c >= region.col0 as usize && c <= region.col1 as usize
    };
    let cells: Vec<(usize, usize)> =
        (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).filter(|&(r, c)| in_region(r, c)).collect();
    let values: Vec<u8> = cells.iter().map(|&(r, c)| q[r * cols + c]).collect();

    // population variance < 1, exactly: sum (n q - S)^2 < n^3
    let n = BigInt::from(values.len());
    let total: BigInt = values.iter().map(|&v| BigInt::from(v)).sum();
    let spread: BigInt = values.iter().map(|&v| (&n * BigInt::from(v) - &total).pow(2)).sum();
    if spread < n.pow(3) {
        let mut mask = vec![false; rows * cols];
        for &(r, c) in &cells {
            mask[r * cols + c] = true;
        }
        return (mask, 0.5);
    }

    let t = oracle_otsu(&values);
    let inside_points: Vec<Point> =
        p.positive.iter().copied().filter(|pt| in_region(pt.row as usize, pt.col as usize)).collect();
    let seed = match inside_points.first() {
        Some(&s) => s,
        None => Point::new((region.row0 + region.row1) / 2, (region.col0 + region.col1) / 2),
    };
    let bright = q[seed.row as usize * cols + seed.col as usize] >= t;
    let member = |r: usize, c: usize| (q[r * cols + c] >= t) == bright;

    let mut mask = vec![false; rows * cols];
    for s in std::iter::once(seed).chain(inside_points.iter().copied()) {
        fill(&mut mask, cols, s.row as usize, s.col as usize, &region, &member);
    }
    for neg in &p.negative {
        let (r, c) = (neg.row as usize, neg.col as usize);
        if !mask[r * cols + c] {
            continue;
        }
        let snapshot = mask.clone();
        let mut component = vec![false; rows * cols];
        fill(&mut component, cols, r, c, &region, &|r, c| snapshot[r * cols + c]);
        for (m, k) in mask.iter_mut().zip(&component) {
            if *k {
                *m = false;
            }
        }
    }

    let (mut si, mut ni, mut so, mut no) = (0f64, 0f64, 0f64, 0f64);
    for &(r, c) in &cells {
        let v = q[r * cols + c] as f64;
        if mask[r * cols + c] {
            si += v;
            ni += 1.0;
        } else {
            so += v;
            no += 1.0;
        }
    }
    let mi = if ni > 0.0 { si / ni } else { 0.0 };
    let mo = if no > 0.0 { so / no } else { 0.0 };
    (mask, ((mi - mo) / 255.0).clamp(0.0, 1.0) as f32)
}

/// Random prompts valid for a `rows x cols` slice, always inferable.
pub fn random_prompts(rng: &mut impl Rng, rows: usize, cols: usize) -> PromptSet {
    let point =
        |rng: &mut dyn rand::RngCore| Point::new(rng.random_range(0..rows as u32), rng.random_range(0..cols as u32));
    let bbox = if rng.random_bool(0.5) {
        let (a, b) = (rng.random_range(0..rows as u32), rng.random_range(0..rows as u32));
        let (c, d) = (rng.random_range(0..cols as u32), rng.random_range(0..cols as u32));
        Some(BBox2D::new(a.min(b), c.min(d), a.max(b), c.max(d)))
    } else {
        None
    };
    let npos = rng.random_range(if bbox.is_some() { 0 } else { 1 }..=3);
    let nneg = rng.random_range(0..=3);
    let positive = (0..npos).map(|_| point(rng)).collect();
    let negative = (0..nneg).map(|_| point(rng)).collect();
    PromptSet { positive, negative, bbox }
}

/// A random 8-bit slice built from a few flat blobs plus sparse noise, so
/// components and thresholds are non-trivial.
pub fn random_levels(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<u8> {
    let levels: Vec<u8> = (0..rng.random_range(1..=4)).map(|_| rng.random()).collect();
    let mut q = vec![levels[0]; rows * cols];
    for _ in 0..rng.random_range(0..6) {
        let level = levels[rng.random_range(0..levels.len())];
        let (r0, c0) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let (r1, c1) = (rng.random_range(r0..rows), rng.random_range(c0..cols));
        for r in r0..=r1 {
            for c in c0..=c1 {
                q[r * cols + c] = level;
            }
        }
    }
    let noise = rng.random_range(0..=rows * cols / 4);
    for _ in 0..noise {
        let i = rng.random_range(0..rows * cols);
        q[i] = rng.random();
    }
    q
}

/// Cylinder along z, centre `(nx/2, ny/2)`, radius varying slowly with z.
/// Bright interior over a dim textured background.
pub fn cylinder_volume(dims: [usize; 3]) -> Volume {
    let (cx, cy) = (dims[0] as f64 / 2.0, dims[1] as f64 / 2.0);
    Volume::from_fn(dims, [0.8, 0.8, 1.0], |x, y, z| {
        let radius = 8.0 + 2.0 * ((z as f64) / 7.0).sin();
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        if d <= radius {
            900.0 + ((x * 7 + y * 3 + z) % 11) as f32
        } else {
            100.0 + ((x * 13 + y * 5 + z * 3) % 17) as f32
        }
    })
    .unwrap()
}

/// Bright ball of the given radius centred at `c`, value 1000 inside, 0 outside.
pub fn sphere_volume(dims: [usize; 3], c: [f64; 3], radius: f64) -> Volume {
    Volume::from_fn(dims, [1.0; 3], |x, y, z| {
        let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
        if d2 <= radius * radius {
            1000.0
        } else {
            0.0
        }
    })
    .unwrap()
}

/// Expected label volume for a fresh session after applying a 3D box, built
/// slice by slice from the brute-force oracle.
pub fn oracle_apply_box(
    v: &Volume,
    window: f64,
    level: f64,
    lo: [usize; 3],
    hi: [usize; 3],
    axis: usize,
    label: u16,
) -> Vec<u16> {
    let [nx, ny, _] = v.dims();
    let mut out = vec![0u16; v.voxel_count()];
    // in-plane (row, col) axes for each propagation axis
    let (ra, ca) = match axis {
        2 => (1, 0),
        1 => (2, 0),
        _ => (2, 1),
    };
    let bbox = BBox2D::new(lo[ra] as u32, lo[ca] as u32, hi[ra] as u32, hi[ca] as u32);
    for index in lo[axis]..=hi[axis] {
        let (rows, cols, pixels) = oracle_slice(v, axis, index);
        let q: Vec<u8> = pixels.iter().map(|&p| oracle_quantize(p, window, level)).collect();
        let (mask, _) = oracle_decode(&q, rows, cols, &PromptSet::bbox(bbox));
        for r in 0..rows {
            for c in 0..cols {
                if !mask[r * cols + c] {
                    continue;
                }
                let mut p = [0usize; 3];
                p[axis] = index;
                p[ra] = r;
                p[ca] = c;
                out[p[0] + nx * (p[1] + ny * p[2])] = label;
            }
        }
    }
    out
}
