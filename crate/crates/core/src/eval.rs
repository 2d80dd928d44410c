//! Retrieval recall and synthesis quality metrics.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{prepare_pair, Coords, ImagePair};
use crate::error::{Error, Result};
use crate::model::Networks;
use crate::raster::RasterImage;
use crate::retrieval::{distance, Descriptor};

/// Recall cut-offs reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum MatchingRule {
    ExactId,
    WithinRadius { meters: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Fraction of queries whose match appears in the top `k`.
    pub r_at: BTreeMap<usize, f64>,
    pub r_at_1percent: f64,
    /// The `k` used for `r_at_1percent`: `ceil(gallery_count / 100)`.
    pub one_percent_k: usize,
    pub query_count: usize,
    pub gallery_count: usize,
    pub matching_rule: MatchingRule,
}

pub fn one_percent_k(gallery_count: usize) -> usize {
    gallery_count.div_ceil(100).max(1)
}

/// Position each query's best correct item takes in its ranking, or `None`
/// when nothing in the gallery is correct. Ranking is by ascending distance,
/// ties by gallery index.
fn best_ranks(queries: &[Descriptor], gallery: &[Descriptor], correct: &[Vec<usize>]) -> Result<Vec<Option<usize>>> {
    queries
        .iter()
        .zip(correct)
        .map(|(q, truth)| {
            let dists = gallery.iter().map(|g| distance(q, g)).collect::<Result<Vec<_>>>()?;
            let best = truth
                .iter()
                .map(|&c| {
                    let dc = dists[c];
                    dists
                        .iter()
                        .enumerate()
                        .filter(|&(j, &d)| d < dc || (d == dc && j < c))
                        .count()
                })
                .min();
            Ok(best)
        })
        .collect()
}

fn report(ranks: &[Option<usize>], gallery_count: usize, ks: &[usize], rule: MatchingRule) -> RecallReport {
    let n = ranks.len() as f64;
    let recall = |k: usize| ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count() as f64 / n;
    let k1 = one_percent_k(gallery_count);
    RecallReport {
        r_at: ks.iter().map(|&k| (k, recall(k))).collect(),
        r_at_1percent: recall(k1),
        one_percent_k: k1,
        query_count: ranks.len(),
        gallery_count,
        matching_rule: rule,
    }
}

fn check_inputs(queries: &[Descriptor], gallery: &[Descriptor], ks: &[usize]) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    if ks.contains(&0) {
        return Err(Error::InvalidArgument("recall k must be >= 1".into()));
    }
    Ok(())
}

/// Recall@k where `truth[q]` lists the gallery indices correct for query `q`.
pub fn recall_at_k(queries: &[Descriptor], gallery: &[Descriptor], truth: &[Vec<usize>], ks: &[usize]) -> Result<RecallReport> {
    check_inputs(queries, gallery, ks)?;
    if truth.len() != queries.len() {
        return Err(Error::shape("recall ground truth", queries.len(), truth.len()));
    }
    for (q, t) in truth.iter().enumerate() {
        if t.is_empty() {
            return Err(Error::InvalidArgument(format!("query {q} has no ground-truth match")));
        }
        if let Some(&bad) = t.iter().find(|&&g| g >= gallery.len()) {
            return Err(Error::InvalidArgument(format!("query {q} matches gallery index {bad} out of range")));
        }
    }
    let ranks = best_ranks(queries, gallery, truth)?;
    Ok(report(&ranks, gallery.len(), ks, MatchingRule::ExactId))
}

/// Recall@k where any gallery item within `radius_m` meters of the query's
/// true position counts as correct.
pub fn recall_within_radius(
    queries: &[Descriptor],
    query_coords: &[Coords],
    gallery: &[Descriptor],
    gallery_coords: &[Coords],
    radius_m: f64,
    ks: &[usize],
) -> Result<RecallReport> {
    check_inputs(queries, gallery, ks)?;
    if query_coords.len() != queries.len() || gallery_coords.len() != gallery.len() {
        return Err(Error::InvalidArgument("coordinates must accompany every descriptor".into()));
    }
    if !(radius_m >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be >= 0, got {radius_m}")));
    }
    let truth: Vec<Vec<usize>> = query_coords
        .iter()
        .map(|&(qe, qn)| {
            gallery_coords
                .iter()
                .enumerate()
                .filter(|&(_, &(ge, gn))| (qe - ge).hypot(qn - gn) <= radius_m)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let ranks = best_ranks(queries, gallery, &truth)?;
    Ok(report(&ranks, gallery.len(), ks, MatchingRule::WithinRadius { meters: radius_m }))
}

fn check_pair(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("image pair", a.shape(), b.shape()));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Window side used for an `h × w` image: 11, shrunk (kept odd) for tiny images.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(11);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

pub const SSIM_SIGMA: f64 = 1.5;

/// Separable 'valid' Gaussian filter of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity with an 11x11 Gaussian window (σ = 1.5),
/// `C1 = (0.01 L)²`, `C2 = (0.03 L)²`, averaged over channels. `b` is mapped
/// into `a`'s value range first.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_pair(a, b)?;
    let b = b.to_range(a.range());
    let l = a.range().span();
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let (h, w) = (a.height(), a.width());
    let taps = gaussian_taps(ssim_window(h, w), SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa: Vec<f64> = a.plane(c).iter().map(|&v| f64::from(v)).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|&v| f64::from(v)).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let (mu_a, _, _) = filter_valid(&pa, h, w, &taps);
        let (mu_b, _, _) = filter_valid(&pb, h, w, &taps);
        let (e_aa, _, _) = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let (e_bb, _, _) = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let (e_ab, _, _) = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_pair(a, b)?;
    let b = b.to_range(a.range());
    let l = a.range().span();
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (l * l / mse).log10())
}

/// `|∂x| + |∂y|` per pixel using forward differences with zeros beyond the border.
fn gradient_magnitude(img: &RasterImage, c: usize) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let at = |y: usize, x: usize| if y < h && x < w { f64::from(img.get(c, y, x)) } else { 0.0 };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = at(y, x);
            out.push((at(y, x + 1) - v).abs() + (at(y + 1, x) - v).abs());
        }
    }
    out
}

/// Sharpness difference in dB:
/// `10 log10(L² / mean |(|∂x a| + |∂y a|) - (|∂x b| + |∂y b|)|)`, `+inf` when
/// the gradient maps agree exactly.
pub fn sharpness_difference(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_pair(a, b)?;
    let b = b.to_range(a.range());
    let l = a.range().span();
    let mut sum = 0.0;
    for c in 0..a.channels() {
        let ga = gradient_magnitude(a, c);
        let gb = gradient_magnitude(&b, c);
        sum += ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    let mean = sum / a.data().len() as f64;
    if mean == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (l * l / mean).log10())
}

/// Metrics for one generated image. `None` stands for the `+inf` sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub id: String,
    pub ssim: f64,
    pub psnr_db: Option<f64>,
    pub sharpness_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub mean_ssim: f64,
    /// Mean over finite values; `None` if every value was infinite.
    pub mean_psnr_db: Option<f64>,
    pub psnr_excluded: usize,
    pub mean_sharpness_db: Option<f64>,
    pub sharpness_excluded: usize,
    pub records: Vec<SynthesisRecord>,
}

fn finite_mean(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), excluded)
}

/// Scores `generated[i]` against `targets[i]`; records come back sorted by id.
pub fn evaluate_synthesis(ids: &[String], generated: &[RasterImage], targets: &[RasterImage]) -> Result<SynthesisReport> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    if generated.len() != ids.len() || targets.len() != ids.len() {
        return Err(Error::InvalidArgument("ids, outputs and targets differ in count".into()));
    }
    let finite = |v: f64| v.is_finite().then_some(v);
    let mut records = ids
        .iter()
        .zip(generated.iter().zip(targets))
        .map(|(id, (g, t))| {
            Ok(SynthesisRecord {
                id: id.clone(),
                ssim: ssim(g, t)?,
                psnr_db: finite(psnr(g, t)?),
                sharpness_db: finite(sharpness_difference(g, t)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mean_ssim = records.iter().map(|r| r.ssim).sum::<f64>() / records.len() as f64;
    let (mean_psnr_db, psnr_excluded) = finite_mean(records.iter().map(|r| r.psnr_db));
    let (mean_sharpness_db, sharpness_excluded) = finite_mean(records.iter().map(|r| r.sharpness_db));
    Ok(SynthesisReport {
        mean_ssim,
        mean_psnr_db,
        psnr_excluded,
        mean_sharpness_db,
        sharpness_excluded,
        records,
    })
}

/// Polar images and street panoramas of `pairs` in `[-1, 1]`, unaugmented.
pub fn prepare_split(cfg: &TrainConfig, pairs: &[ImagePair]) -> Result<(Vec<RasterImage>, Vec<RasterImage>)> {
    if pairs.is_empty() {
        return Err(Error::Data("split has no pairs".into()));
    }
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut polar = Vec::with_capacity(pairs.len());
    let mut street = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (a, b) = prepare_pair(p, &cfg.geometry, cfg.data.out_of_bounds, false, &mut unused)?;
        polar.push(a);
        street.push(b);
    }
    Ok((polar, street))
}

/// Street panoramas query the satellite gallery of the same split. Under
/// [`MatchingRule::ExactId`] each query's match is the pair it came from.
pub fn evaluate_retrieval(
    nets: &Networks,
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    rule: MatchingRule,
    ks: &[usize],
) -> Result<RecallReport> {
    let (polar, street) = prepare_split(cfg, pairs)?;
    let gallery = nets.embed_satellites(&polar)?;
    let queries = nets.embed_streets(&street)?;
    match rule {
        MatchingRule::ExactId => {
            let truth: Vec<Vec<usize>> = (0..pairs.len()).map(|i| vec![i]).collect();
            recall_at_k(&queries, &gallery, &truth, ks)
        }
        MatchingRule::WithinRadius { meters } => {
            let coords = pairs
                .iter()
                .map(|p| p.coords.ok_or_else(|| Error::Data(format!("{}: no coordinates for the radius rule", p.id))))
                .collect::<Result<Vec<_>>>()?;
            recall_within_radius(&queries, &coords, &gallery, &coords, meters, ks)
        }
    }
}

/// Generated panoramas scored against the real ones. Also returns the
/// generated images in `[-1, 1]`, in input order.
pub fn evaluate_generator(nets: &Networks, cfg: &TrainConfig, pairs: &[ImagePair]) -> Result<(SynthesisReport, Vec<RasterImage>)> {
    let (polar, street) = prepare_split(cfg, pairs)?;
    let generated = nets.synthesize(&polar)?;
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    Ok((evaluate_synthesis(&ids, &generated, &street)?, generated))
}

/// The polar images themselves scored against the real panoramas.
pub fn evaluate_polar_baseline(cfg: &TrainConfig, pairs: &[ImagePair]) -> Result<SynthesisReport> {
    let (polar, street) = prepare_split(cfg, pairs)?;
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    evaluate_synthesis(&ids, &polar, &street)
}
