//! Micro-image center detection in white images.

use std::collections::{HashMap, VecDeque};

use image::{ImageBuffer, Luma};
use nalgebra::Vector2;
use rayon::prelude::*;

use super::{MicroImageCenter, RectificationError};

/// Centroid window radius as a fraction of the pitch.
const WINDOW: f64 = 0.6;
/// Background level: this quantile of all pixel values.
const BACKGROUND_QUANTILE: f64 = 0.2;
/// Peaks below this fraction of the brightest weight are ignored.
const PEAK_FRACTION: f64 = 0.25;
const MIN_BLOBS: usize = 10;
const PITCH_TOLERANCE: f64 = 0.25;
/// Search radius, in pitches, for the next lens of the label walk.
const WALK_TOLERANCE: f64 = 0.35;

/// Spatial hash of points on cells of size `cell`.
struct Grid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[Vector2<f64>], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (k, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(k);
        }
        Self { cell, buckets }
    }

    fn key(p: &Vector2<f64>, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Nearest point to `q` within `radius`, excluding `skip`.
    fn nearest(&self, points: &[Vector2<f64>], q: &Vector2<f64>, radius: f64, skip: Option<usize>) -> Option<usize> {
        let (cx, cy) = Self::key(q, self.cell);
        let reach = (radius / self.cell).ceil() as i64;
        let mut best: Option<(f64, usize)> = None;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                for &k in self.buckets.get(&(cx + dx, cy + dy)).into_iter().flatten() {
                    if Some(k) == skip {
                        continue;
                    }
                    let d = (points[k] - q).norm();
                    if d <= radius && best.is_none_or(|(bd, bk)| d < bd || (d == bd && k < bk)) {
                        best = Some((d, k));
                    }
                }
            }
        }
        best.map(|(_, k)| k)
    }
}

fn background(data: &[u16]) -> f64 {
    let mut v = data.to_vec();
    let k = ((v.len() - 1) as f64 * BACKGROUND_QUANTILE) as usize;
    let (_, q, _) = v.select_nth_unstable(k);
    *q as f64
}

/// Intensity-weighted centroid in a disc of radius `r` around `start`,
/// iterated until it settles. `None` if the window leaves the image.
fn centroid(weights: &[f64], width: usize, height: usize, start: Vector2<f64>, r: f64) -> Option<Vector2<f64>> {
    let mut c = start;
    for _ in 0..20 {
        if c.x - r < 0.0 || c.y - r < 0.0 || c.x + r > (width - 1) as f64 || c.y + r > (height - 1) as f64 {
            return None;
        }
        let (x0, x1) = ((c.x - r).ceil() as usize, (c.x + r).floor() as usize);
        let (y0, y1) = ((c.y - r).ceil() as usize, (c.y + r).floor() as usize);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let w = weights[y * width + x];
                sw += w;
                sx += w * x as f64;
                sy += w * y as f64;
            }
        }
        if sw <= 0.0 {
            return None;
        }
        let next = Vector2::new(sx / sw, sy / sw);
        let shift = (next - c).norm();
        c = next;
        if shift < 1e-6 {
            break;
        }
    }
    Some(c)
}

/// Assign lattice labels by walking to nearest neighbors from the center
/// closest to `origin`. Unreached centers are dropped.
fn label_walk(points: &[Vector2<f64>], pitch: f64, origin: Vector2<f64>) -> Vec<MicroImageCenter> {
    let grid = Grid::new(points, pitch);
    let start = (0..points.len())
        .min_by(|&a, &b| (points[a] - origin).norm().total_cmp(&(points[b] - origin).norm()))
        .expect("non-empty");
    let tol = WALK_TOLERANCE * pitch;
    let mut basis = [Vector2::new(pitch, 0.0), Vector2::new(0.0, pitch)];
    for b in basis.iter_mut() {
        if let Some(k) = grid.nearest(points, &(points[start] + *b), tol, Some(start)) {
            *b = points[k] - points[start];
        }
    }
    let mut labels: Vec<Option<(i64, i64)>> = vec![None; points.len()];
    let mut taken: HashMap<(i64, i64), usize> = HashMap::new();
    labels[start] = Some((0, 0));
    taken.insert((0, 0), start);
    let mut queue = VecDeque::from([(start, basis)]);
    while let Some((k, basis)) = queue.pop_front() {
        let (i, j) = labels[k].expect("queued centers are labeled");
        for (axis, sign) in [(0usize, 1i64), (0, -1), (1, 1), (1, -1)] {
            let step = basis[axis] * sign as f64;
            let Some(n) = grid.nearest(points, &(points[k] + step), tol, Some(k)) else { continue };
            let label = if axis == 0 { (i + sign, j) } else { (i, j + sign) };
            if labels[n].is_some() || taken.contains_key(&label) {
                continue;
            }
            labels[n] = Some(label);
            taken.insert(label, n);
            let mut next = basis;
            next[axis] = (points[n] - points[k]) * sign as f64;
            queue.push_back((n, next));
        }
    }
    let mut out: Vec<MicroImageCenter> = labels
        .iter()
        .zip(points)
        .filter_map(|(l, p)| l.map(|label| MicroImageCenter { label, center: (p.x, p.y) }))
        .collect();
    out.sort_by_key(|c| (c.label.1, c.label.0));
    out
}

/// Micro-image centers of a white image.
///
/// Background is the 20th percentile. Local maxima are thinned to one per
/// half pitch, refined by an intensity-weighted centroid over a disc of
/// radius `0.6·pitch` and labeled by a nearest-neighbor walk from the center
/// closest to the image center. Blobs whose window leaves the image are
/// dropped.
pub fn detect_centers(
    image: &ImageBuffer<Luma<u16>, Vec<u16>>,
    expected_pitch: f64,
) -> Result<Vec<MicroImageCenter>, RectificationError> {
    let (width, height) = (image.width() as usize, image.height() as usize);
    if !(expected_pitch > 4.0) {
        return Err(RectificationError::InvalidInput(format!("pitch {expected_pitch} must exceed 4 px")));
    }
    if (width as f64) < 3.0 * expected_pitch || (height as f64) < 3.0 * expected_pitch {
        return Err(RectificationError::InvalidInput("image smaller than three pitches".into()));
    }
    let raw = image.as_raw();
    let bg = background(raw);
    let weights: Vec<f64> = raw.iter().map(|&v| (v as f64 - bg).max(0.0)).collect();
    let peak = weights.iter().copied().fold(0.0, f64::max);
    let threshold = PEAK_FRACTION * peak;

    let mut candidates: Vec<(f64, usize, usize)> = (1..height - 1)
        .into_par_iter()
        .flat_map_iter(|y| {
            let weights = &weights;
            (1..width - 1).filter_map(move |x| {
                let w = weights[y * width + x];
                if w <= threshold || w <= 0.0 {
                    return None;
                }
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        let n = weights[(y as i64 + dy) as usize * width + (x as i64 + dx) as usize];
                        if n > w {
                            return None;
                        }
                    }
                }
                Some((w, x, y))
            })
        })
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));

    let min_sep = 0.5 * expected_pitch;
    let mut seeds: Vec<Vector2<f64>> = Vec::new();
    let mut occupied: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (_, x, y) in candidates {
        let p = Vector2::new(x as f64, y as f64);
        let key = Grid::key(&p, min_sep);
        let clash = (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                occupied
                    .get(&(key.0 + dx, key.1 + dy))
                    .is_some_and(|ks| ks.iter().any(|&k| (seeds[k] - p).norm() < min_sep))
            })
        });
        if !clash {
            occupied.entry(key).or_default().push(seeds.len());
            seeds.push(p);
        }
    }

    let radius = WINDOW * expected_pitch;
    let refined: Vec<Option<Vector2<f64>>> =
        seeds.par_iter().map(|s| centroid(&weights, width, height, *s, radius)).collect();
    let mut points: Vec<Vector2<f64>> = refined.into_iter().flatten().collect();
    // two seeds can settle on the same blob
    points.sort_by(|a, b| (a.y, a.x).partial_cmp(&(b.y, b.x)).expect("finite"));
    let mut unique: Vec<Vector2<f64>> = Vec::with_capacity(points.len());
    {
        let grid_cell = min_sep;
        let mut seen: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for p in points {
            let key = Grid::key(&p, grid_cell);
            let dup = (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    seen.get(&(key.0 + dx, key.1 + dy))
                        .is_some_and(|ks| ks.iter().any(|&k| (unique[k] - p).norm() < 0.25 * expected_pitch))
                })
            });
            if !dup {
                seen.entry(key).or_default().push(unique.len());
                unique.push(p);
            }
        }
    }
    if unique.len() < MIN_BLOBS {
        return Err(RectificationError::NoGridFound(unique.len()));
    }

    let grid = Grid::new(&unique, expected_pitch);
    let mut spacings: Vec<f64> = (0..unique.len())
        .filter_map(|k| {
            grid.nearest(&unique, &unique[k], 2.0 * expected_pitch, Some(k))
                .map(|n| (unique[n] - unique[k]).norm())
        })
        .collect();
    if spacings.is_empty() {
        return Err(RectificationError::NoGridFound(unique.len()));
    }
    spacings.sort_by(f64::total_cmp);
    let measured = spacings[spacings.len() / 2];
    if (measured - expected_pitch).abs() > PITCH_TOLERANCE * expected_pitch {
        return Err(RectificationError::AmbiguousPitch { measured, expected: expected_pitch });
    }
    let origin = Vector2::new(width as f64 / 2.0, height as f64 / 2.0);
    Ok(label_walk(&unique, measured, origin))
}
