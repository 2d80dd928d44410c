//! Independent reference implementations shared by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use std::f64::consts::TAU;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xview::losses::AnchorSide;
use xview::{polar_transform, OutOfBounds, PolarParams, RasterImage, ValueRange};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth random `c × n × n` image in `[0, 1]`: a few low-frequency waves.
pub fn smooth_field(rng: &mut ChaCha8Rng, c: usize, n: usize) -> RasterImage {
    let waves: Vec<[f64; 4]> = (0..c * 4)
        .map(|_| {
            [
                rng.random_range(-3.0..3.0) * TAU / n as f64,
                rng.random_range(-3.0..3.0) * TAU / n as f64,
                rng.random_range(0.0..TAU),
                rng.random_range(0.05..0.12),
            ]
        })
        .collect();
    let mut data = Vec::with_capacity(c * n * n);
    for ch in 0..c {
        for y in 0..n {
            for x in 0..n {
                let v: f64 = waves[ch * 4..ch * 4 + 4]
                    .iter()
                    .map(|w| w[3] * (w[0] * x as f64 + w[1] * y as f64 + w[2]).sin())
                    .sum();
                data.push((0.5 + v) as f32);
            }
        }
    }
    RasterImage::new(c, n, n, ValueRange::Unit, data).unwrap()
}

fn bilinear(img: &RasterImage, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let at = |xi: isize, yi: isize| f64::from(img.get(c, yi.clamp(0, h - 1) as usize, xi.clamp(0, w - 1) as usize));
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates clockwise by `theta` about `(n/2, n/2)`, the polar warp's center.
pub fn rotate_clockwise(img: &RasterImage, theta: f64) -> RasterImage {
    let n = img.width();
    let c0 = n as f64 / 2.0;
    let mut out = img.clone();
    let (s, co) = theta.sin_cos();
    for ch in 0..img.channels() {
        for y in 0..n {
            for x in 0..n {
                // North-up offsets, rotated back by theta.
                let (dx, dy) = (x as f64 - c0, c0 - y as f64);
                let (sx, sy) = (dx * co - dy * s, dx * s + dy * co);
                out.set(ch, y, x, bilinear(img, ch, c0 + sx, c0 - sy) as f32);
            }
        }
    }
    out
}

/// Mean absolute difference, as a fraction of the value range, between the
/// polar image of `sat` rotated by `m` columns' worth of azimuth and the polar
/// image of `sat` rolled by `m`. Rows whose circle comes within three pixels
/// of the border are left out.
pub fn equivariance_error(sat: &RasterImage, p: &PolarParams, m: usize) -> f64 {
    let theta = TAU * m as f64 / p.polar_width as f64;
    let rotated = polar_transform(&rotate_clockwise(sat, theta), p, OutOfBounds::Clamp).unwrap();
    let shifted = polar_transform(sat, p, OutOfBounds::Clamp).unwrap().roll_horizontal(m);
    let half = p.sat_width as f64 / 2.0;
    let rows = (0..p.polar_height)
        .take_while(|&y| y as f64 / p.polar_height as f64 * half <= half - 3.0)
        .count();
    let (mut sum, mut count) = (0.0, 0usize);
    for c in 0..sat.channels() {
        for y in 0..rows {
            for x in 0..p.polar_width {
                sum += f64::from((rotated.get(c, y, x) - shifted.get(c, y, x)).abs());
                count += 1;
            }
        }
    }
    sum / count as f64 / sat.range().span()
}

/// Largest relative error between `grad` and central differences of `f` at
/// the flat positions `idx` of `x`. Relative to `max(|a|, |b|, floor)`.
pub fn finite_difference_error(
    f: &dyn Fn(&Tensor) -> f64,
    x: &Tensor,
    grad: &Tensor,
    idx: &[usize],
    eps: f64,
    floor: f64,
) -> f64 {
    let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let g = grad.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let mut worst: f64 = 0.0;
    for &i in idx {
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            f(&Tensor::from_vec(v, x.dims(), x.device()).unwrap())
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let err = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn var(t: &Tensor) -> Var {
    Var::from_tensor(&t.to_dtype(DType::F64).unwrap()).unwrap()
}

/// Every `(side, anchor, positive, negative)` tuple, by nested loops.
pub fn triplet_oracle(b: usize) -> Vec<(AnchorSide, usize, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..b {
        for j in 0..b {
            if i != j {
                out.push((AnchorSide::Street, i, i, j));
                out.push((AnchorSide::Satellite, i, i, j));
            }
        }
    }
    out
}

/// Sort-and-truncate: descending loss, ties to the lower index.
pub fn hardest_oracle(losses: &[f64], keep_fraction: f64) -> Vec<usize> {
    let n = losses.len();
    let mut keep = 0;
    while (keep as f64) < keep_fraction * n as f64 - 1e-9 {
        keep += 1;
    }
    let keep = keep.clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    for a in 0..n {
        for b in 0..n - 1 - a {
            let (i, j) = (idx[b], idx[b + 1]);
            if losses[j] > losses[i] || (losses[j] == losses[i] && j < i) {
                idx.swap(b, b + 1);
            }
        }
    }
    let mut kept = idx[..keep].to_vec();
    kept.sort();
    kept
}

/// Full-sort recall oracle: a query counts at `k` when any correct gallery
/// item sits among the first `k` of the complete ranking.
pub fn recall_oracle(queries: &[Vec<f32>], gallery: &[Vec<f32>], correct: &dyn Fn(usize, usize) -> bool, k: usize) -> f64 {
    let mut hits = 0;
    for (qi, q) in queries.iter().enumerate() {
        let mut ranked: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                let d: f64 = q.iter().zip(g).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum();
                (d, gi)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        if ranked.iter().take(k).any(|&(_, gi)| correct(qi, gi)) {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}

/// Direct windowed SSIM on one channel pair, `L` the dynamic range.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, win: usize, sigma: f64, l: f64) -> f64 {
    let c = (win as f64 - 1.0) / 2.0;
    let mut g = vec![0.0; win * win];
    for y in 0..win {
        for x in 0..win {
            g[y * win + x] = (-((y as f64 - c).powi(2) + (x as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - win {
        for ox in 0..=w - win {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..win {
                for x in 0..win {
                    let wt = g[y * win + x];
                    let (va, vb) = (a[(oy + y) * w + ox + x], b[(oy + y) * w + ox + x]);
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Gradient of a scalar loss of one `4 × 6` input against central
/// differences, for every loss term. Double precision throughout.
pub fn loss_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    use xview::losses::{cgan_loss_discriminator, cgan_loss_generator, l1_loss, retrieval_loss, AdversarialForm};

    let mut r = rng(seed);
    let a = randn(&mut r, &[4, 6], 1.0);
    let b = randn(&mut r, &[4, 6], 1.0);
    let idx: Vec<usize> = (0..24).collect();
    let check = |f: &dyn Fn(&Tensor) -> f64, loss: &dyn Fn(&Tensor) -> Tensor, x: &Tensor| {
        let v = var(x);
        let grads = loss(v.as_tensor()).backward().unwrap();
        let g = grads.get(v.as_tensor()).unwrap().clone();
        finite_difference_error(f, x, &g, &idx, 1e-6, 1e-8)
    };
    let mut out = Vec::new();
    let terms: Vec<(&'static str, Box<dyn Fn(&Tensor) -> Tensor>)> = vec![
        ("cgan_discriminator_real", Box::new(|x: &Tensor| cgan_loss_discriminator(x, &b).unwrap())),
        ("cgan_discriminator_fake", Box::new(|x: &Tensor| cgan_loss_discriminator(&b, x).unwrap())),
        ("cgan_generator", Box::new(|x: &Tensor| cgan_loss_generator(x, AdversarialForm::NonSaturating).unwrap())),
        ("cgan_generator_saturating", Box::new(|x: &Tensor| cgan_loss_generator(x, AdversarialForm::Saturating).unwrap())),
        ("l1", Box::new(|x: &Tensor| l1_loss(x, &b).unwrap())),
        ("triplet_street", Box::new(|x: &Tensor| retrieval_loss(x, &b, 2.0, None).unwrap().0)),
        ("triplet_satellite", Box::new(|x: &Tensor| retrieval_loss(&b, x, 0.5, None).unwrap().0)),
        ("triplet_mined", Box::new(|x: &Tensor| retrieval_loss(x, &b, 1.0, Some(0.5)).unwrap().0)),
    ];
    for (name, loss) in &terms {
        let f = |x: &Tensor| scalar(&loss(x));
        out.push((*name, check(&f, loss.as_ref(), &a)));
    }
    out
}

/// Closed-form loss values: `(name, computed, expected)`.
pub fn loss_spot_values() -> Vec<(&'static str, f64, f64)> {
    use xview::losses::{cgan_loss_discriminator, cgan_loss_generator, soft_margin_triplet, softplus, AdversarialForm};

    let zeros = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
    let ln2 = std::f64::consts::LN_2;
    vec![
        ("discriminator at zero logits", scalar(&cgan_loss_discriminator(&zeros, &zeros).unwrap()), 2.0 * ln2),
        ("generator at zero logits", scalar(&cgan_loss_generator(&zeros, AdversarialForm::NonSaturating).unwrap()), ln2),
        ("triplet with margin -1", soft_margin_triplet(0.0, 1.0, 10.0), (-10f64).exp().ln_1p()),
        ("softplus(100)", softplus(100.0), 100.0),
    ]
}

/// Random descriptors; `coarse` draws from a handful of integers so that
/// distance ties are common.
pub fn random_descriptors(rng: &mut ChaCha8Rng, n: usize, dim: usize, coarse: bool) -> Vec<xview::retrieval::Descriptor> {
    (0..n)
        .map(|_| {
            let v = (0..dim)
                .map(|_| if coarse { rng.random_range(0..3) as f32 } else { rng.random_range(-1.0..1.0) })
                .collect();
            xview::retrieval::Descriptor(v)
        })
        .collect()
}

pub struct TripletReport {
    pub count_failures: Vec<usize>,
    pub multiset_matches: bool,
    pub filter_mismatches: usize,
}

/// Exhaustive counts for `B = 2..=64`, the `B = 4` multiset, and the hard
/// negative filter on `batches` random batches with frequent ties.
pub fn triplet_machinery(seed: u64, batches: usize) -> TripletReport {
    use xview::losses::{exhaustive_triplet_count, hard_negative_filter, TripletBatch};

    let count_failures = (2..=64)
        .filter(|&b| {
            let expected = 2 * b * (b - 1);
            exhaustive_triplet_count(b) != expected || TripletBatch::exhaustive(b).unwrap().len() != expected
        })
        .collect();

    let mut ours: Vec<_> = TripletBatch::exhaustive(4)
        .unwrap()
        .triplets
        .iter()
        .map(|t| (t.anchor_side, t.anchor, t.positive, t.negative))
        .collect();
    let mut oracle = triplet_oracle(4);
    ours.sort();
    oracle.sort();

    let mut r = rng(seed);
    let mut filter_mismatches = 0;
    for _ in 0..batches {
        let b = r.random_range(2..=12);
        let mut batch = TripletBatch::exhaustive(b).unwrap();
        let levels = r.random_range(1..=6);
        batch.losses = (0..batch.len()).map(|_| f64::from(r.random_range(0..levels)) * 0.25).collect();
        let keep = match r.random_range(0..4) {
            0 => 1.0,
            1 => 0.1,
            2 => r.random_range(0.01..=1.0),
            _ => [0.25, 0.5, 0.75][r.random_range(0..3)],
        };
        let kept = hard_negative_filter(&batch, keep).unwrap();
        let expected = hardest_oracle(&batch.losses, keep);
        let expected_triplets: Vec<_> = expected.iter().map(|&i| batch.triplets[i]).collect();
        if kept.triplets != expected_triplets {
            filter_mismatches += 1;
        }
    }
    TripletReport {
        count_failures,
        multiset_matches: ours == oracle,
        filter_mismatches,
    }
}

/// Compares `recall_at_k` and `recall_within_radius` against the full-sort
/// oracle on `instances` random problems of up to 200 × 200. Returns the
/// number of disagreeing instances for each.
pub fn recall_mismatches(seed: u64, instances: usize) -> (usize, usize) {
    use xview::eval::{one_percent_k, recall_at_k, recall_within_radius};

    let mut r = rng(seed);
    let (mut exact_bad, mut radius_bad) = (0, 0);
    for i in 0..instances {
        let (nq, ng) = if i == 0 { (200, 200) } else { (r.random_range(1..=200), r.random_range(1..=200)) };
        let dim = r.random_range(1..=12);
        let coarse = i % 2 == 1;
        let queries = random_descriptors(&mut r, nq, dim, coarse);
        let gallery = random_descriptors(&mut r, ng, dim, coarse);
        let ks = [1, 5, 10, one_percent_k(ng)];
        let raw = |d: &[xview::retrieval::Descriptor]| d.iter().map(|d| d.0.clone()).collect::<Vec<_>>();
        let (q, g) = (raw(&queries), raw(&gallery));

        let truth: Vec<Vec<usize>> = (0..nq)
            .map(|_| {
                let mut t: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(0..ng)).collect();
                t.sort();
                t.dedup();
                t
            })
            .collect();
        let report = recall_at_k(&queries, &gallery, &truth, &ks).unwrap();
        let correct = |qi: usize, gi: usize| truth[qi].contains(&gi);
        let agree = ks.iter().all(|&k| report.r_at.get(&k).copied() == Some(recall_oracle(&q, &g, &correct, k)))
            && report.r_at_1percent == recall_oracle(&q, &g, &correct, ks[3]);
        exact_bad += usize::from(!agree);

        let spacing = r.random_range(1.0..8.0);
        let side = (ng as f64).sqrt().ceil() as usize;
        let gcoords: Vec<(f64, f64)> = (0..ng).map(|j| ((j % side) as f64 * spacing, (j / side) as f64 * spacing)).collect();
        let radius = [0.0, 2.5, 5.0, 12.0][i % 4];
        // Radius zero degenerates to exact coordinates, so no jitter there.
        let jitter = if radius == 0.0 { 0.0 } else { 1.0 };
        let qcoords: Vec<(f64, f64)> = (0..nq)
            .map(|_| {
                let (e, n) = gcoords[r.random_range(0..ng)];
                (e + jitter * r.random_range(-1.0..1.0), n + jitter * r.random_range(-1.0..1.0))
            })
            .collect();
        let report = recall_within_radius(&queries, &qcoords, &gallery, &gcoords, radius, &ks).unwrap();
        let near = |qi: usize, gi: usize| {
            let (a, b) = (qcoords[qi], gcoords[gi]);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= radius
        };
        let agree = ks.iter().all(|&k| report.r_at.get(&k).copied() == Some(recall_oracle(&q, &g, &near, k)))
            && report.r_at_1percent == recall_oracle(&q, &g, &near, ks[3]);
        radius_bad += usize::from(!agree);
    }
    (exact_bad, radius_bad)
}

/// Layer shapes at the canonical 112 × 616 geometry: `(layer, expected, got)`.
pub fn canonical_shapes() -> Vec<(String, Vec<usize>, Vec<usize>)> {
    use xview::config::TrainConfig;
    use xview::model::Networks;
    use xview::nn::Mode;

    let cfg = TrainConfig::default();
    let nets = Networks::new(&cfg, DType::F32, &Device::Cpu).unwrap();
    let x = Tensor::randn(0f32, 0.5, (1, 3, 112, 616), &Device::Cpu).unwrap();
    let mut out = Vec::new();
    let mut push = |name: &str, expected: &[usize], got: &[usize]| out.push((name.to_string(), expected.to_vec(), got.to_vec()));

    let (generated, trace) = nets.generator.forward_traced(&x, Mode::Eval).unwrap();
    let find = |name: &str| trace.iter().find(|t| t.name == name).map(|t| t.tensor.dims()[1..].to_vec()).unwrap_or_default();
    let table = [
        ("stem", [32, 112, 616]),
        ("enc1", [64, 56, 308]),
        ("enc2", [128, 28, 154]),
        ("enc3", [256, 14, 77]),
        ("bottleneck", [256, 14, 77]),
        ("up1", [128, 28, 154]),
        ("attention", [256, 28, 154]),
        ("up2", [64, 56, 308]),
        ("up3", [64, 112, 616]),
    ];
    for (name, shape) in table {
        push(&format!("generator {name}"), &shape, &find(name));
    }
    let residuals = trace.iter().filter(|t| t.name.starts_with("res")).count();
    push("generator residual blocks", &[6], &[residuals]);
    push("generator output", &[3, 112, 616], &generated.dims()[1..]);

    let (logits, dtrace) = nets.discriminator.score_traced(&x, &generated, Mode::Eval).unwrap();
    let dtable = [
        ("input", [6, 112, 616]),
        ("conv1", [64, 56, 308]),
        ("conv2", [128, 28, 154]),
        ("attention", [128, 28, 154]),
        ("conv3", [256, 14, 77]),
        ("conv4", [512, 14, 76]),
    ];
    for (name, shape) in dtable {
        let got = dtrace.iter().find(|t| t.name == name).map(|t| t.tensor.dims()[1..].to_vec()).unwrap_or_default();
        push(&format!("discriminator {name}"), &shape, &got);
    }
    push("discriminator output", &[1, 14, 75], &logits.dims()[1..]);

    let street = nets.street.forward(&x, Mode::Eval).unwrap();
    push("street encoder", &[256, 14, 77], &street.dims()[1..]);
    let d_street = nets.street_descriptors(&x, Mode::Eval).unwrap();
    let d_sat = nets.satellite_descriptors(&x, Mode::Eval).unwrap();
    push("street descriptor", &[2048], &d_street.dims()[1..]);
    push("satellite descriptor", &[2048], &d_sat.dims()[1..]);
    out
}

/// Small but complete training configuration on 16 × 88 panoramas.
pub fn tiny_config() -> xview::config::TrainConfig {
    let mut c = xview::config::TrainConfig::default();
    c.geometry = PolarParams::new(32, 16, 88);
    c.batch_size = 4;
    c.total_steps = 10;
    c.checkpoint_every = 0;
    c.model.generator_channels = 4;
    c.model.bottleneck_blocks = 1;
    c.model.discriminator_channels = 4;
    c.model.street_channels = 8;
    c.model.street_blocks = [1, 1, 1];
    c
}

/// `n` prepared pairs of random signed images.
pub fn random_prepared(n: usize, seed: u64) -> Vec<xview::trainer::Prepared> {
    let mut r = rng(seed);
    let mut img = || {
        let data = (0..3 * 16 * 88).map(|_| r.random_range(-1.0f32..1.0)).collect();
        RasterImage::new(3, 16, 88, ValueRange::Signed, data).unwrap()
    };
    (0..n)
        .map(|i| xview::trainer::Prepared {
            id: format!("p{i:03}"),
            polar: img(),
            street: img(),
        })
        .collect()
}

pub struct DeterminismReport {
    pub runs_identical: bool,
    pub resume_identical: bool,
    pub steps: usize,
}

/// Trains twice for `cfg.total_steps` steps and compares the metrics logs,
/// then trains to `split`, reloads the checkpoint from disk, continues to
/// the end and compares again.
pub fn determinism(cfg: &xview::config::TrainConfig, data: &[xview::trainer::Prepared], split: u64) -> DeterminismReport {
    use xview::checkpoint::Checkpoint;
    use xview::trainer::{read_metrics, Trainer};

    let dev = Device::Cpu;
    let run = |cfg: &xview::config::TrainConfig| {
        let dir = tempfile::tempdir().unwrap();
        Trainer::from_prepared(cfg.clone(), data.to_vec(), &dev).unwrap().with_output_dir(dir.path()).run().unwrap();
        let bytes = std::fs::read(dir.path().join("final.ckpt")).unwrap();
        (read_metrics(&dir.path().join("metrics.jsonl")).unwrap(), bytes)
    };
    let (a, ck_a) = run(cfg);
    let (b, ck_b) = run(cfg);

    let dir = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.total_steps = split;
    Trainer::from_prepared(first, data.to_vec(), &dev).unwrap().with_output_dir(dir.path()).run().unwrap();
    let ck = Checkpoint::load(&dir.path().join("final.ckpt"), &dev).unwrap();
    let mut resumed = Trainer::resume(&ck, Some(cfg.total_steps), data.to_vec(), &dev).unwrap().with_output_dir(dir.path());
    resumed.run().unwrap();
    let c = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    let ck_c = resumed.checkpoint();

    DeterminismReport {
        runs_identical: a == b && ck_a == ck_b,
        resume_identical: a == c && ck_c.to_bytes().unwrap() == ck_a,
        steps: a.len(),
    }
}
