//! Contrastive and classification losses.
//!
//! Every contrastive term is an NT-Xent pair distance
//!
//! ```text
//! d(a, p; K) = -log( e^{sim(a,p)/τ} / (e^{sim(a,p)/τ} + Σ_{n∈K} e^{sim(a,n)/τ}) )
//! ```
//!
//! with cosine similarity `sim`. In [`DenominatorMode::PaperLiteral`] the
//! positive term is left out of the denominator.
//!
//! - Cross-view (CVC), three views: anchored pairs (T→S), (T→F), (S→F); the
//!   negatives of sample i are the three views of every other sample,
//!   3(N−1) in total. Two views use (a→b) and (b→a) with 2(N−1) negatives.
//!   `cvc.symmetric` adds the reversed three-view pairs.
//! - Cross-model (CMC): anchor is the backbone feature z_i, positive each view
//!   z_i^v, negatives the original and all views of every other sample,
//!   (V+1)(N−1) in total.
//! - Two-view InfoNCE: (a→b) only, negatives z_j^b for j ≠ i.
//!
//! Each loss is the mean over samples and anchored pairs. The scalar
//! functions ([`cosine_similarity`], [`ntxent_distance`]) operate on plain
//! vectors; the batched functions operate on candle tensors and are
//! differentiable.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 0.1;

/// Added to similarity logits that are excluded from a denominator.
const MASKED: f64 = -1e30;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical guard: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Positive included in the denominator.
    #[default]
    Ntxent,
    /// Denominator sums negatives only.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvcConfig {
    #[serde(default)]
    pub symmetric: bool,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub denominator_mode: DenominatorMode,
    #[serde(default)]
    pub cvc: CvcConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            gamma: DEFAULT_GAMMA,
            denominator_mode: DenominatorMode::Ntxent,
            cvc: CvcConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::Usage(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::Usage(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `uᵀv / (‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(LossError::Usage(format!(
            "vector lengths differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(LossError::Numerical(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// NT-Xent distance of one anchored pair against `negatives`.
pub fn ntxent_distance(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
    mode: DenominatorMode,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(LossError::Usage(format!("tau must be positive, got {tau}")));
    }
    let pos = cosine_similarity(anchor, positive)? / tau;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    match mode {
        DenominatorMode::Ntxent => logits.push(pos),
        DenominatorMode::PaperLiteral if negatives.is_empty() => {
            return Err(LossError::Usage(
                "paper-literal denominator needs at least one negative".into(),
            ));
        }
        DenominatorMode::PaperLiteral => {}
    }
    for n in negatives {
        logits.push(cosine_similarity(anchor, n)? / tau);
    }
    Ok(log_sum_exp(&logits) - pos)
}

/// Features of one batch: backbone features of the originals and projected
/// features of each augmented view, all `[N, d_f]`.
#[derive(Debug, Clone)]
pub struct ViewFeatures {
    pub z_orig: Tensor,
    pub views: Vec<Tensor>,
}

impl ViewFeatures {
    pub fn new(z_orig: Tensor, views: Vec<Tensor>) -> Result<Self> {
        let dims = z_orig.dims().to_vec();
        if dims.len() != 2 {
            return Err(LossError::Usage(format!(
                "features must be [N, d], got {dims:?}"
            )));
        }
        if views.is_empty() {
            return Err(LossError::Usage("at least one view required".into()));
        }
        for (i, v) in views.iter().enumerate() {
            if v.dims() != dims.as_slice() {
                return Err(LossError::Usage(format!(
                    "view {i} has shape {:?}, expected {dims:?}",
                    v.dims()
                )));
            }
        }
        Ok(Self { z_orig, views })
    }

    pub fn n_samples(&self) -> usize {
        self.z_orig.dims()[0]
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }
}

fn normalize_rows(z: &Tensor) -> Result<Tensor> {
    let norm = z
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .sqrt()?
        .maximum(NORM_FLOOR)?;
    Ok(z.broadcast_div(&norm)?)
}

/// Additive mask `[N, blocks·N]` excluding every bank row owned by the anchor.
fn own_sample_mask(n: usize, blocks: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; n * n * blocks];
    for i in 0..n {
        for b in 0..blocks {
            m[i * n * blocks + b * n + i] = MASKED;
        }
    }
    Ok(Tensor::from_vec(m, (n, n * blocks), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per-anchor distances `[N]` for normalized anchors/positives against a
/// normalized bank, where `mask` removes each anchor's own bank rows.
fn anchored_distances(
    anchor: &Tensor,
    positive: &Tensor,
    bank: &Tensor,
    mask: &Tensor,
    tau: f64,
    mode: DenominatorMode,
) -> Result<Tensor> {
    let pos = ((anchor * positive)?.sum_keepdim(D::Minus1)? / tau)?;
    let neg = ((anchor.matmul(&bank.t()?)? / tau)? + mask)?;
    let logits = match mode {
        DenominatorMode::Ntxent => Tensor::cat(&[&pos, &neg], 1)?,
        DenominatorMode::PaperLiteral => neg,
    };
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits
        .broadcast_sub(&max)?
        .exp()?
        .sum_keepdim(D::Minus1)?
        .log()?
        + max)?;
    Ok((lse - pos)?.squeeze(1)?)
}

fn require_pairs(n: usize) -> Result<()> {
    if n < 2 {
        return Err(LossError::Usage(format!(
            "contrastive losses need at least 2 samples for negatives, got {n}"
        )));
    }
    Ok(())
}

/// Ordered (anchor view, positive view) pairs used by the cross-view loss.
pub fn cross_view_pairs(n_views: usize, symmetric: bool) -> Result<Vec<(usize, usize)>> {
    match n_views {
        2 => Ok(vec![(0, 1), (1, 0)]),
        3 => {
            let mut pairs = vec![(0, 1), (0, 2), (1, 2)];
            if symmetric {
                pairs.extend([(1, 0), (2, 0), (2, 1)]);
            }
            Ok(pairs)
        }
        v => Err(LossError::Usage(format!(
            "cross-view loss defined for 2 or 3 views, got {v}"
        ))),
    }
}

/// Cross-view contrastive loss (scalar tensor).
pub fn cross_view_loss(features: &ViewFeatures, config: &LossConfig) -> Result<Tensor> {
    let n = features.n_samples();
    require_pairs(n)?;
    let pairs = cross_view_pairs(features.n_views(), config.cvc.symmetric)?;
    let views = features
        .views
        .iter()
        .map(normalize_rows)
        .collect::<Result<Vec<_>>>()?;
    let bank = Tensor::cat(&views, 0)?;
    let mask = own_sample_mask(n, views.len(), bank.dtype())?;
    let mut total: Option<Tensor> = None;
    for &(a, p) in &pairs {
        let d = anchored_distances(
            &views[a],
            &views[p],
            &bank,
            &mask,
            config.tau,
            config.denominator_mode,
        )?
        .sum_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    let total = total.expect("at least one pair");
    Ok((total / (n * pairs.len()) as f64)?)
}

/// Cross-model contrastive loss (scalar tensor).
pub fn cross_model_loss(features: &ViewFeatures, config: &LossConfig) -> Result<Tensor> {
    let n = features.n_samples();
    require_pairs(n)?;
    let anchor = normalize_rows(&features.z_orig)?;
    let views = features
        .views
        .iter()
        .map(normalize_rows)
        .collect::<Result<Vec<_>>>()?;
    let mut bank_parts = vec![anchor.clone()];
    bank_parts.extend(views.iter().cloned());
    let bank = Tensor::cat(&bank_parts, 0)?;
    let mask = own_sample_mask(n, bank_parts.len(), bank.dtype())?;
    let mut total: Option<Tensor> = None;
    for v in &views {
        let d = anchored_distances(
            &anchor,
            v,
            &bank,
            &mask,
            config.tau,
            config.denominator_mode,
        )?
        .sum_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    let total = total.expect("at least one view");
    Ok((total / (n * views.len()) as f64)?)
}

/// Two-view SimCLR loss: NT-Xent in both directions with 2(N−1) negatives.
pub fn simclr_loss(a: &Tensor, b: &Tensor, config: &LossConfig) -> Result<Tensor> {
    let features = ViewFeatures::new(a.clone(), vec![a.clone(), b.clone()])?;
    cross_view_loss(&features, config)
}

/// Two-view in-batch InfoNCE: anchor a_i, positive b_i, negatives b_j (j ≠ i).
pub fn infonce_loss(a: &Tensor, b: &Tensor, config: &LossConfig) -> Result<Tensor> {
    let features = ViewFeatures::new(a.clone(), vec![b.clone()])?;
    let n = features.n_samples();
    require_pairs(n)?;
    let a = normalize_rows(a)?;
    let b = normalize_rows(b)?;
    let mask = own_sample_mask(n, 1, b.dtype())?;
    let d = anchored_distances(&a, &b, &b, &mask, config.tau, config.denominator_mode)?;
    Ok(d.mean_all()?)
}

/// Mean cross-entropy of `logits` `[N, K]` against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(LossError::Usage(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(LossError::Usage(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let idx = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        (n, 1),
        &Device::Cpu,
    )?;
    let picked = shifted.gather(&idx, 1)?;
    Ok((lse - picked)?.mean_all()?)
}

/// Loss value with its components as plain numbers.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub ce: f64,
    pub cvc: f64,
    pub cmc: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `CE + λ·CVC + γ·CMC`.
pub fn total_loss(
    logits: &Tensor,
    labels: &[usize],
    features: &ViewFeatures,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    let ce = cross_entropy(logits, labels)?;
    let cvc = cross_view_loss(features, config)?;
    let cmc = cross_model_loss(features, config)?;
    let total = ((&ce + (&cvc * config.lambda)?)? + (&cmc * config.gamma)?)?;
    Ok(LossBreakdown {
        ce: scalar(&ce)?,
        cvc: scalar(&cvc)?,
        cmc: scalar(&cmc)?,
        total,
    })
}
