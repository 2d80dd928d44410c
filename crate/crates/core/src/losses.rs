//! Training objectives: adversarial, reconstruction and ranking losses, plus
//! in-batch triplet construction and hard-negative selection.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{distance, pairwise_distances, Descriptor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cgan: f64,
    pub lambda_l1: f64,
    pub lambda_ret: f64,
    /// Scale inside the soft-margin ranking loss.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cgan: 1.0,
            lambda_l1: 100.0,
            lambda_ret: 1000.0,
            alpha: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cgan, self.lambda_l1, self.lambda_ret, self.alpha];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Form of the generator's adversarial term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// Minimize `-log D(fake)`.
    #[default]
    NonSaturating,
    /// Minimize `log(1 - D(fake))` literally. Negative-valued.
    Saturating,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Elementwise `log(1 + e^x)` on a tensor, stable for large `|x|`.
pub fn softplus_tensor(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

fn ensure_finite(context: &str, t: &Tensor) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{context} contains non-finite values")))
    }
}

/// Patch-averaged `-log σ(real) - log(1 - σ(fake))`; the critic minimizes it.
pub fn cgan_loss_discriminator(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    ensure_finite("real logits", real_logits)?;
    ensure_finite("fake logits", fake_logits)?;
    let real = softplus_tensor(&real_logits.neg()?)?.mean_all()?;
    let fake = softplus_tensor(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

/// Patch-averaged generator adversarial loss.
pub fn cgan_loss_generator(fake_logits: &Tensor, form: AdversarialForm) -> Result<Tensor> {
    ensure_finite("fake logits", fake_logits)?;
    match form {
        AdversarialForm::NonSaturating => Ok(softplus_tensor(&fake_logits.neg()?)?.mean_all()?),
        AdversarialForm::Saturating => Ok(softplus_tensor(fake_logits)?.mean_all()?.neg()?),
    }
}

/// Mean absolute difference.
pub fn l1_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    if generated.dims() != target.dims() {
        return Err(Error::shape("l1 loss", target.dims(), generated.dims()));
    }
    Ok((generated - target)?.abs()?.mean_all()?)
}

/// `log(1 + exp(alpha · (d_pos - d_neg)))`.
pub fn soft_margin_triplet(d_pos: f64, d_neg: f64, alpha: f64) -> f64 {
    softplus(alpha * (d_pos - d_neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSide {
    Street,
    Satellite,
}

/// Indices into the batch's street and satellite descriptor lists. A
/// street-anchored triplet has satellite positive and negative, and vice versa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor_side: AnchorSide,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    /// Per-triplet loss; empty until evaluated.
    pub losses: Vec<f64>,
}

/// Number of triplets formed from a batch of `b` aligned pairs.
pub const fn exhaustive_triplet_count(b: usize) -> usize {
    2 * b * b.saturating_sub(1)
}

impl TripletBatch {
    /// Every `(i, j)` with `i != j`, street-anchored first, each block in
    /// row-major `(i, j)` order.
    pub fn exhaustive(batch_size: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "exhaustive triplets need at least 2 pairs, got {batch_size}"
            )));
        }
        let mut triplets = Vec::with_capacity(exhaustive_triplet_count(batch_size));
        for side in [AnchorSide::Street, AnchorSide::Satellite] {
            for i in 0..batch_size {
                for j in (0..batch_size).filter(|&j| j != i) {
                    triplets.push(Triplet {
                        anchor_side: side,
                        anchor: i,
                        positive: i,
                        negative: j,
                    });
                }
            }
        }
        Ok(Self {
            triplets,
            losses: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Fills `losses` from explicit descriptor lists.
    pub fn evaluate(&mut self, street: &[Descriptor], sat: &[Descriptor], alpha: f64) -> Result<()> {
        let mut losses = Vec::with_capacity(self.triplets.len());
        for t in &self.triplets {
            let (anchor, pos, neg) = match t.anchor_side {
                AnchorSide::Street => (&street[t.anchor], &sat[t.positive], &sat[t.negative]),
                AnchorSide::Satellite => (&sat[t.anchor], &street[t.positive], &street[t.negative]),
            };
            losses.push(soft_margin_triplet(distance(anchor, pos)?, distance(anchor, neg)?, alpha));
        }
        self.losses = losses;
        Ok(())
    }

    pub fn mean_loss(&self) -> Option<f64> {
        (!self.losses.is_empty()).then(|| self.losses.iter().sum::<f64>() / self.losses.len() as f64)
    }
}

/// Builds and evaluates every triplet of an aligned batch.
pub fn build_exhaustive_triplets(street: &[Descriptor], sat: &[Descriptor], alpha: f64) -> Result<TripletBatch> {
    if street.len() != sat.len() {
        return Err(Error::shape("triplet lists", street.len(), sat.len()));
    }
    let mut batch = TripletBatch::exhaustive(street.len())?;
    batch.evaluate(street, sat, alpha)?;
    Ok(batch)
}

fn keep_count(n: usize, keep_fraction: f64) -> Result<usize> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    // Guard against products like 0.1 * 30 = 3.0000000000000004.
    let k = (keep_fraction * n as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1.min(n), n))
}

/// Indices of the `ceil(keep_fraction · n)` largest losses, ties going to the
/// lower index, returned in ascending index order.
pub fn select_hardest(losses: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    let keep = keep_count(losses.len(), keep_fraction)?;
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Keeps the highest-loss triplets; the batch must have been evaluated.
pub fn hard_negative_filter(batch: &TripletBatch, keep_fraction: f64) -> Result<TripletBatch> {
    if batch.losses.len() != batch.triplets.len() {
        return Err(Error::InvalidArgument("triplet batch has not been evaluated".into()));
    }
    let kept = select_hardest(&batch.losses, keep_fraction)?;
    Ok(TripletBatch {
        triplets: kept.iter().map(|&i| batch.triplets[i]).collect(),
        losses: kept.iter().map(|&i| batch.losses[i]).collect(),
    })
}

/// Differentiable ranking loss over all in-batch triplets.
///
/// `street` and `sat` are aligned `(B, D)` descriptor matrices. With
/// `keep_fraction`, only the hardest triplets contribute. Returns the mean
/// loss and the number of triplets it averages.
pub fn retrieval_loss(street: &Tensor, sat: &Tensor, alpha: f64, keep_fraction: Option<f64>) -> Result<(Tensor, usize)> {
    let (b, _) = street.dims2()?;
    if sat.dims() != street.dims() {
        return Err(Error::shape("retrieval loss", street.dims(), sat.dims()));
    }
    let batch = TripletBatch::exhaustive(b)?;
    let dist = pairwise_distances(street, sat)?.flatten_all()?;
    let (pos, neg): (Vec<u32>, Vec<u32>) = batch
        .triplets
        .iter()
        .map(|t| {
            let (i, j) = (t.anchor, t.negative);
            let neg = match t.anchor_side {
                AnchorSide::Street => i * b + j,
                AnchorSide::Satellite => j * b + i,
            };
            ((i * b + i) as u32, neg as u32)
        })
        .unzip();
    let dev = street.device();
    let pos = Tensor::from_vec(pos, batch.len(), dev)?;
    let neg = Tensor::from_vec(neg, batch.len(), dev)?;
    let margin = (dist.index_select(&pos, 0)? - dist.index_select(&neg, 0)?)?;
    let losses = softplus_tensor(&margin.affine(alpha, 0.0)?)?;
    let losses = match keep_fraction {
        Some(f) if f < 1.0 => {
            let values = losses.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let kept: Vec<u32> = select_hardest(&values, f)?.into_iter().map(|i| i as u32).collect();
            let n = kept.len();
            losses.index_select(&Tensor::from_vec(kept, n, dev)?, 0)?
        }
        _ => losses,
    };
    let kept = losses.dim(0)?;
    Ok((losses.mean_all()?, kept))
}

/// Unweighted component values of the composite objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub cgan: f64,
    pub l1: f64,
    pub ret: f64,
}

/// Weighted sum of the three terms, plus the unweighted terms by name.
pub fn composite_loss(c: LossComponents, w: &LossWeights) -> (f64, BTreeMap<&'static str, f64>) {
    let total = w.lambda_cgan * c.cgan + w.lambda_l1 * c.l1 + w.lambda_ret * c.ret;
    let breakdown = BTreeMap::from([("cgan", c.cgan), ("l1", c.l1), ("ret", c.ret)]);
    (total, breakdown)
}
