use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_PRO_THRESHOLDS: usize = 200;

fn check_binary(scores: usize, labels: &[bool], op: &'static str) -> Result<(usize, usize)> {
    if scores != labels.len() {
        return Err(Error::invalid(op, format!("{scores} scores for {} labels", labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(op, "both classes must be present"));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC: P(pos > neg) + 0.5 P(tie), using average ranks.
pub fn auroc<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores.len(), labels, "auroc")?;
    let mut order: Vec<(f64, bool)> = scores.iter().map(|&s| s.into()).zip(labels.iter().copied()).collect();
    if order.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::invalid("auroc", "NaN score"));
    }
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].0 == order[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * order[i..j].iter().filter(|(_, l)| *l).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under a piecewise-linear curve from x=0 to `limit`, interpolating at the limit.
pub fn trapezoid_until(xs: &[f64], ys: &[f64], limit: f64) -> f64 {
    let mut area = 0.0;
    for i in 1..xs.len() {
        let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Descending; point `i + 1` predicts positive for scores >= `thresholds[i]`.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocCurve {
    pub fn new<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<Self> {
        let (pos, neg) = check_binary(scores.len(), labels, "roc")?;
        let mut order: Vec<(f64, bool)> = scores.iter().map(|&s| s.into()).zip(labels.iter().copied()).collect();
        order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        let mut curve = RocCurve { thresholds: Vec::new(), fpr: vec![0.0], tpr: vec![0.0] };
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let t = order[i].0;
            while i < order.len() && order[i].0 == t {
                if order[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            curve.thresholds.push(t);
            curve.fpr.push(fp as f64 / neg as f64);
            curve.tpr.push(tp as f64 / pos as f64);
        }
        Ok(curve)
    }

    pub fn area(&self) -> f64 {
        self.partial_area(1.0)
    }

    /// Unnormalized area up to `fpr_limit`.
    pub fn partial_area(&self, fpr_limit: f64) -> f64 {
        trapezoid_until(&self.fpr, &self.tpr, fpr_limit)
    }
}

/// One 8-connected ground-truth component as row-major pixel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub pixels: Vec<usize>,
}

/// 8-connected components, ordered by their first pixel in raster order.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Result<Vec<Region>> {
    if mask.len() != height * width {
        return Err(Error::shape("connected_components", format!("{} pixels for {height}x{width}", mask.len())));
    }
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        regions.push(Region { pixels });
    }
    Ok(regions)
}

/// One image's localization map and ground truth, both row-major.
#[derive(Debug, Clone, Copy)]
pub struct PixelData<'a> {
    pub scores: &'a [f32],
    pub mask: &'a [bool],
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProCurve {
    pub fpr: Vec<f64>,
    pub overlap: Vec<f64>,
}

/// Thresholds swept by the PRO curve: all unique scores, or `n` evenly spaced
/// quantiles of them when there are more. Descending.
pub fn pro_thresholds(mut unique_desc: Vec<f32>, n: usize) -> Vec<f32> {
    unique_desc.dedup();
    if unique_desc.len() <= n || n < 2 {
        return unique_desc;
    }
    let last = unique_desc.len() - 1;
    let mut out: Vec<f32> = (0..n)
        .map(|i| unique_desc[((i as f64 * last as f64) / (n - 1) as f64).round() as usize])
        .collect();
    out.dedup();
    out
}

pub fn pro_curve(images: &[PixelData], n_thresholds: usize) -> Result<ProCurve> {
    let mut pixels: Vec<(f32, Option<usize>)> = Vec::new();
    let mut region_sizes = Vec::new();
    for img in images {
        let n = img.height * img.width;
        if img.scores.len() != n || img.mask.len() != n {
            return Err(Error::shape("pro_score", format!("map/mask sizes differ from {}x{}", img.height, img.width)));
        }
        if img.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("pro_score", "NaN score"));
        }
        let mut region_of = vec![None; n];
        for r in connected_components(img.mask, img.height, img.width)? {
            for &p in &r.pixels {
                region_of[p] = Some(region_sizes.len());
            }
            region_sizes.push(r.pixels.len());
        }
        pixels.extend(img.scores.iter().copied().zip(region_of));
    }
    let negatives = pixels.iter().filter(|p| p.1.is_none()).count();
    if region_sizes.is_empty() {
        return Err(Error::invalid("pro_score", "no anomalous pixels in the ground truth"));
    }
    if negatives == 0 {
        return Err(Error::invalid("pro_score", "no normal pixels in the ground truth"));
    }
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let thresholds = pro_thresholds(pixels.iter().map(|p| p.0).collect(), n_thresholds);

    let mut hits = vec![0usize; region_sizes.len()];
    let mut fp = 0usize;
    let mut curve = ProCurve { fpr: vec![0.0], overlap: vec![0.0] };
    let mut i = 0;
    for t in thresholds {
        while i < pixels.len() && pixels[i].0 >= t {
            match pixels[i].1 {
                Some(r) => hits[r] += 1,
                None => fp += 1,
            }
            i += 1;
        }
        let overlap_sum: f64 = hits.iter().zip(&region_sizes).map(|(&h, &s)| h as f64 / s as f64).sum();
        curve.fpr.push(fp as f64 / negatives as f64);
        curve.overlap.push(overlap_sum / region_sizes.len() as f64);
    }
    Ok(curve)
}

/// Mean per-region overlap integrated over FPR in [0, fpr_limit], divided by fpr_limit.
pub fn pro_score(images: &[PixelData], fpr_limit: f64, n_thresholds: usize) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::invalid("pro_score", format!("fpr_limit must be in (0, 1], got {fpr_limit}")));
    }
    let c = pro_curve(images, n_thresholds)?;
    Ok(trapezoid_until(&c.fpr, &c.overlap, fpr_limit) / fpr_limit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub anomalous: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub det_auroc: f64,
    pub loc_auroc: f64,
    pub loc_pro: f64,
    pub images: Vec<ImageResult>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "name,det_auroc,loc_auroc,loc_pro";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.name, self.det_auroc, self.loc_auroc, self.loc_pro)
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Detection AUROC on image scores, pixel AUROC pooled over all pixels, and PRO.
pub fn evaluate(
    name: &str,
    images: &[ImageResult],
    pixels: &[PixelData],
    fpr_limit: f64,
    n_thresholds: usize,
) -> Result<EvalReport> {
    if images.len() != pixels.len() {
        return Err(Error::invalid("evaluate", format!("{} image scores for {} maps", images.len(), pixels.len())));
    }
    let scores: Vec<f64> = images.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = images.iter().map(|r| r.anomalous).collect();
    let det_auroc = auroc(&scores, &labels)?;
    let all_scores: Vec<f32> = pixels.iter().flat_map(|p| p.scores.iter().copied()).collect();
    let all_labels: Vec<bool> = pixels.iter().flat_map(|p| p.mask.iter().copied()).collect();
    let loc_auroc = auroc(&all_scores, &all_labels)?;
    let loc_pro = pro_score(pixels, fpr_limit, n_thresholds)?;
    Ok(EvalReport { name: name.into(), det_auroc, loc_auroc, loc_pro, images: images.to_vec() })
}
