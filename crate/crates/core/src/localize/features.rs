//! Classical local features: Harris corners, a global image descriptor, and
//! normalized-cross-correlation patch matching. These are the deterministic,
//! dependency-free stand-ins for the learned detectors and matchers the
//! pipeline design allows plugging in.

use nalgebra::Vector2;

use crate::img::{ImageGray, ImageRgb};

/// A detected corner at integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyPoint {
    pub x: u32,
    pub y: u32,
    pub response: f64,
}

impl KeyPoint {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.x as f64, self.y as f64)
    }
}

const HARRIS_K: f64 = 0.04;
const NMS_RADIUS: i64 = 4;
/// Relative response floor: corners weaker than this fraction of the
/// strongest response are dropped.
const RESPONSE_FLOOR: f64 = 0.01;

fn sobel(gray: &ImageGray) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (gray.width, gray.height);
    let clamped = |x: i64, y: i64| -> f64 {
        gray[(x.clamp(0, w as i64 - 1) as u32, y.clamp(0, h as i64 - 1) as u32)]
    };
    let mut gx = vec![0.0; (w * h) as usize];
    let mut gy = vec![0.0; (w * h) as usize];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let idx = (y as u32 * w + x as u32) as usize;
            gx[idx] = (clamped(x + 1, y - 1) - clamped(x - 1, y - 1)
                + 2.0 * (clamped(x + 1, y) - clamped(x - 1, y))
                + clamped(x + 1, y + 1)
                - clamped(x - 1, y + 1))
                / 8.0;
            gy[idx] = (clamped(x - 1, y + 1) - clamped(x - 1, y - 1)
                + 2.0 * (clamped(x, y + 1) - clamped(x, y - 1))
                + clamped(x + 1, y + 1)
                - clamped(x + 1, y - 1))
                / 8.0;
        }
    }
    (gx, gy)
}

fn gaussian_blur_sigma1(src: &[f64], w: u32, h: u32) -> Vec<f64> {
    // Separable 5-tap kernel for sigma = 1, normalized.
    let raw = [-2.0f64, -1.0, 0.0, 1.0, 2.0].map(|x| (-0.5 * x * x).exp());
    let sum: f64 = raw.iter().sum();
    let kernel = raw.map(|v| v / sum);
    let clamp_w = |x: i64| x.clamp(0, w as i64 - 1) as usize;
    let clamp_h = |y: i64| y.clamp(0, h as i64 - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h as usize {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * src[y * w as usize + clamp_w(x + t as i64 - 2)];
            }
            tmp[y * w as usize + x as usize] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h as i64 {
        for x in 0..w as usize {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[clamp_h(y + t as i64 - 2) * w as usize + x];
            }
            out[y as usize * w as usize + x] = acc;
        }
    }
    out
}

/// Harris corners (k = 0.04, 3x3 Sobel, Gaussian window sigma = 1) with
/// non-maximum suppression of radius 4, the strongest `max_count` retained,
/// ordered by (response desc, row, col).
pub fn detect_keypoints(image: &ImageRgb, max_count: usize) -> Vec<KeyPoint> {
    let gray = image.to_grayscale();
    let (w, h) = (gray.width, gray.height);
    if w < 3 || h < 3 || max_count == 0 {
        return Vec::new();
    }
    let (gx, gy) = sobel(&gray);
    let n = (w * h) as usize;
    let mut ixx = vec![0.0; n];
    let mut iyy = vec![0.0; n];
    let mut ixy = vec![0.0; n];
    for i in 0..n {
        ixx[i] = gx[i] * gx[i];
        iyy[i] = gy[i] * gy[i];
        ixy[i] = gx[i] * gy[i];
    }
    let sxx = gaussian_blur_sigma1(&ixx, w, h);
    let syy = gaussian_blur_sigma1(&iyy, w, h);
    let sxy = gaussian_blur_sigma1(&ixy, w, h);

    let mut response = vec![0.0; n];
    let mut max_response = 0.0f64;
    for i in 0..n {
        let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
        let trace = sxx[i] + syy[i];
        response[i] = det - HARRIS_K * trace * trace;
        max_response = max_response.max(response[i]);
    }
    let floor = (RESPONSE_FLOOR * max_response).max(1e-9);

    let mut corners = Vec::new();
    for y in 0..h as i64 {
        'pixel: for x in 0..w as i64 {
            let r = response[(y as u32 * w + x as u32) as usize];
            if r <= floor {
                continue;
            }
            for dy in -NMS_RADIUS..=NMS_RADIUS {
                for dx in -NMS_RADIUS..=NMS_RADIUS {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let rn = response[(ny as u32 * w + nx as u32) as usize];
                    // Strictly larger neighbors suppress; equal neighbors
                    // suppress only if they come earlier in scan order.
                    if rn > r || (rn == r && (ny, nx) < (y, x)) {
                        continue 'pixel;
                    }
                }
            }
            corners.push(KeyPoint {
                x: x as u32,
                y: y as u32,
                response: r,
            });
        }
    }
    corners.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    corners.truncate(max_count);
    corners
}

pub const GLOBAL_DESCRIPTOR_LEN: usize = 288;

/// Global image descriptor: an 8x8 mean-pooled RGB thumbnail (192 values)
/// concatenated with a 32-bin histogram per channel (96 values), then
/// L2-normalized. Deterministic and scale-comparable across image sizes.
pub fn global_descriptor(image: &ImageRgb) -> Vec<f64> {
    let mut desc = vec![0.0; GLOBAL_DESCRIPTOR_LEN];
    let (w, h) = (image.width as usize, image.height as usize);
    let mut cell_sum = vec![[0.0f64; 3]; 64];
    let mut cell_count = vec![0usize; 64];
    for y in 0..h {
        let cy = (y * 8 / h).min(7);
        for x in 0..w {
            let cx = (x * 8 / w).min(7);
            let px = image[(x as u32, y as u32)];
            let cell = cy * 8 + cx;
            for ch in 0..3 {
                cell_sum[cell][ch] += px[ch];
            }
            cell_count[cell] += 1;
        }
    }
    for cell in 0..64 {
        let count = cell_count[cell].max(1) as f64;
        for ch in 0..3 {
            desc[cell * 3 + ch] = cell_sum[cell][ch] / count;
        }
    }
    let total = (w * h) as f64;
    for px in image.pixels() {
        for ch in 0..3 {
            let bin = ((px[ch].clamp(0.0, 1.0) * 32.0) as usize).min(31);
            desc[192 + ch * 32 + bin] += 1.0 / total;
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut desc {
            *v /= norm;
        }
    }
    desc
}

/// One accepted keypoint match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NccMatch {
    pub query_index: usize,
    pub db_index: usize,
    pub score: f64,
}

const PATCH_RADIUS: i64 = 5;
/// Lowe-style ratio on NCC distance (1 - score).
const NCC_RATIO: f64 = 0.9;
/// Matches with NCC below this are rejected outright.
const NCC_MIN_SCORE: f64 = 0.5;

fn normalized_patch(gray: &ImageGray, cx: u32, cy: u32) -> Option<Vec<f64>> {
    let (w, h) = (gray.width as i64, gray.height as i64);
    let side = (2 * PATCH_RADIUS + 1) as usize;
    let mut patch = Vec::with_capacity(side * side);
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            let x = (cx as i64 + dx).clamp(0, w - 1) as u32;
            let y = (cy as i64 + dy).clamp(0, h - 1) as u32;
            patch.push(gray[(x, y)]);
        }
    }
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    for v in &mut patch {
        *v -= mean;
    }
    let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    for v in &mut patch {
        *v /= norm;
    }
    Some(patch)
}

/// Normalized-cross-correlation matching of 11x11 patches around the given
/// keypoints, with a mutual-best filter and a 0.9 ratio test on NCC
/// distance. Deterministic; flat patches never match.
pub fn match_keypoints_ncc(
    query_image: &ImageRgb,
    query_keypoints: &[KeyPoint],
    db_image: &ImageRgb,
    db_keypoints: &[KeyPoint],
) -> Vec<NccMatch> {
    let query_gray = query_image.to_grayscale();
    let db_gray = db_image.to_grayscale();
    let query_patches: Vec<Option<Vec<f64>>> = query_keypoints
        .iter()
        .map(|kp| normalized_patch(&query_gray, kp.x, kp.y))
        .collect();
    let db_patches: Vec<Option<Vec<f64>>> = db_keypoints
        .iter()
        .map(|kp| normalized_patch(&db_gray, kp.x, kp.y))
        .collect();

    // best[q] = (db index, best score, second-best score)
    let best_for_query: Vec<Option<(usize, f64, f64)>> = query_patches
        .iter()
        .map(|qp| {
            let qp = qp.as_ref()?;
            let mut best: Option<(usize, f64)> = None;
            let mut second = f64::NEG_INFINITY;
            for (di, dp) in db_patches.iter().enumerate() {
                let Some(dp) = dp else { continue };
                let score: f64 = qp.iter().zip(dp).map(|(a, b)| a * b).sum();
                match best {
                    Some((_, bs)) if score <= bs => second = second.max(score),
                    _ => {
                        if let Some((_, bs)) = best {
                            second = second.max(bs);
                        }
                        best = Some((di, score));
                    }
                }
            }
            best.map(|(di, bs)| (di, bs, second))
        })
        .collect();

    let best_for_db: Vec<Option<usize>> = (0..db_keypoints.len())
        .map(|di| {
            let dp = db_patches[di].as_ref()?;
            let mut best: Option<(usize, f64)> = None;
            for (qi, qp) in query_patches.iter().enumerate() {
                let Some(qp) = qp else { continue };
                let score: f64 = qp.iter().zip(dp).map(|(a, b)| a * b).sum();
                if best.map_or(true, |(_, bs)| score > bs) {
                    best = Some((qi, score));
                }
            }
            best.map(|(qi, _)| qi)
        })
        .collect();

    let mut matches = Vec::new();
    for (qi, entry) in best_for_query.iter().enumerate() {
        let Some((di, score, second)) = *entry else {
            continue;
        };
        if score < NCC_MIN_SCORE {
            continue;
        }
        if best_for_db[di] != Some(qi) {
            continue;
        }
        if second.is_finite() && (1.0 - score) > NCC_RATIO * (1.0 - second) {
            continue;
        }
        matches.push(NccMatch {
            query_index: qi,
            db_index: di,
            score,
        });
    }
    matches
}
