//! Trainable components: backbone E, classifier F, Transformer encoder G and
//! projector P.
//!
//! E maps `[N, C, T]` trials to `[N, d_f]` features, F maps features to class
//! logits, and P∘flatten∘G maps trials to `[N, d_f]` projections comparable
//! with E's features. d_f is derived from the backbone's pooling chain at
//! build time. Predictions use F(E(x)) only; G and P exist for the
//! contrastive terms during training.

mod backbones;
mod batch_norm;
mod checkpoint;
mod encoder;
mod layers;
mod matmul;
mod pool;
mod row_ops;
mod temporal_conv;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbones::{Backbone, BackboneKind};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use encoder::{Encoder, Projector, ENCODER_DROPOUT};
pub use layers::{Linear, Mode, VarStore};
pub use temporal_conv::temporal_conv;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model build error: {0}")]
    Build(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

/// Floating-point width of parameters and activations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

fn default_layers() -> usize {
    2
}

fn default_heads() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone_kind: BackboneKind,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub n_classes: usize,
    #[serde(default = "default_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_heads")]
    pub encoder_heads: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    pub fn new(
        backbone_kind: BackboneKind,
        n_channels: usize,
        n_timepoints: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            backbone_kind,
            n_channels,
            n_timepoints,
            n_classes,
            encoder_layers: default_layers(),
            encoder_heads: default_heads(),
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<usize, ModelError> {
        if self.n_channels == 0 || self.n_timepoints == 0 {
            return Err(ModelError::Build(
                "channel and time counts must be positive".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(ModelError::Build(format!(
                "at least 2 classes required, got {}",
                self.n_classes
            )));
        }
        if self.encoder_layers == 0 {
            return Err(ModelError::Build("encoder needs at least one layer".into()));
        }
        if self.encoder_heads == 0 || self.n_timepoints % self.encoder_heads != 0 {
            return Err(ModelError::Build(format!(
                "embedding width {} is not divisible into {} attention heads",
                self.n_timepoints, self.encoder_heads
            )));
        }
        self.backbone_kind.feature_dim(self.n_timepoints)
    }
}

/// The four trainable components and their shared parameter store.
#[derive(Debug)]
pub struct ModelBundle {
    config: ModelConfig,
    backbone: Backbone,
    classifier: Linear,
    encoder: Encoder,
    projector: Projector,
    feature_dim: usize,
    store: VarStore,
}

/// Builds all components from `seed`. Each component draws its initial
/// weights from its own stream, so adding or resizing one component leaves
/// the others' initialization unchanged.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle, ModelError> {
    let feature_dim = config.validate()?;
    let dtype = config.precision.dtype();
    let mut store = VarStore::default();
    let stream = |i: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i);
        rng
    };

    let mut rng = stream(0);
    let backbone = Backbone::new(
        &mut layers::Init::new(&mut rng, dtype, &mut store).scoped("backbone"),
        config.backbone_kind,
        config.n_channels,
    )?;
    let mut rng = stream(1);
    let classifier = Linear::new(
        &mut layers::Init::new(&mut rng, dtype, &mut store).scoped("classifier"),
        feature_dim,
        config.n_classes,
        true,
    )?;
    let mut rng = stream(2);
    let encoder = Encoder::new(
        &mut layers::Init::new(&mut rng, dtype, &mut store).scoped("encoder"),
        config.n_timepoints,
        config.encoder_layers,
        config.encoder_heads,
    )?;
    let mut rng = stream(3);
    let projector = Projector::new(
        &mut layers::Init::new(&mut rng, dtype, &mut store).scoped("projector"),
        config.n_channels * config.n_timepoints,
        feature_dim,
    )?;

    let bundle = ModelBundle {
        config: config.clone(),
        backbone,
        classifier,
        encoder,
        projector,
        feature_dim,
        store,
    };
    // Confirm the analytic width against an actual forward pass.
    let probe = Tensor::zeros(
        (1, config.n_channels, config.n_timepoints),
        dtype,
        &Device::Cpu,
    )?;
    let width = bundle.backbone_forward(&probe, &mut Mode::eval())?.dims()[1];
    if width != feature_dim {
        return Err(ModelError::Build(format!(
            "backbone produced {width} features, expected {feature_dim}"
        )));
    }
    Ok(bundle)
}

impl ModelBundle {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    /// Parameters of backbone and classifier (the prediction path).
    pub fn prediction_params(&self) -> Vec<&Var> {
        self.params_with_prefix(&["backbone.", "classifier."])
    }

    /// Parameters of encoder and projector.
    pub fn contrastive_params(&self) -> Vec<&Var> {
        self.params_with_prefix(&["encoder.", "projector."])
    }

    fn params_with_prefix(&self, prefixes: &[&str]) -> Vec<&Var> {
        self.store
            .params()
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, v)| v)
            .collect()
    }

    /// Converts trials to a `[N, C, T]` tensor of the model's dtype.
    pub fn input(&self, trials: ArrayView3<'_, f64>) -> Result<Tensor, ModelError> {
        let shape = trials.dim();
        let data: Vec<f64> = trials.iter().copied().collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    fn check_trials(&self, x: &Tensor) -> Result<(usize, usize, usize), ModelError> {
        let (c, t) = (self.config.n_channels, self.config.n_timepoints);
        match *x.dims() {
            [n, xc, xt] if xc == c && xt == t => Ok((n, c, t)),
            _ => Err(ModelError::Shape(format!(
                "expected trials [N, {c}, {t}], got {:?}",
                x.dims()
            ))),
        }
    }

    /// E: `[N, C, T]` → `[N, d_f]`.
    pub fn backbone_forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor, ModelError> {
        let (n, c, t) = self.check_trials(x)?;
        self.backbone.forward(&x.reshape((n, 1, c, t))?, mode)
    }

    /// G: `[N, C, T]` → `[N, C, T]`.
    pub fn encode(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor, ModelError> {
        self.check_trials(x)?;
        self.encoder.forward(x, mode)
    }

    /// P(flatten(G(x))): `[N, C, T]` → `[N, d_f]`. The encoder and projector
    /// share one mode, so dropout in G draws from its stream.
    pub fn encode_project(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor, ModelError> {
        let h = self.encode(x, mode)?;
        let flat = h.flatten_from(1)?;
        self.projector.forward(&flat, mode)
    }

    /// F: `[N, d_f]` → `[N, n_classes]` logits.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        match *features.dims() {
            [_, w] if w == self.feature_dim => self.classifier.forward(features),
            _ => Err(ModelError::Shape(format!(
                "classifier expects [N, {}], got {:?}",
                self.feature_dim,
                features.dims()
            ))),
        }
    }

    /// Evaluation-mode backbone features as `f64`, processed in chunks.
    pub fn features(
        &self,
        trials: ArrayView3<'_, f64>,
        chunk: usize,
    ) -> Result<Array2<f64>, ModelError> {
        let n = trials.dim().0;
        let mut out = Array2::zeros((n, self.feature_dim));
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let x = self.input(trials.slice(ndarray::s![start..end, .., ..]))?;
            let f = self
                .backbone_forward(&x, &mut Mode::eval())?
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?;
            for (i, row) in f.into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    out[[start + i, j]] = v;
                }
            }
            start = end;
        }
        Ok(out)
    }

    /// Evaluation-mode projected features P(G(x)) as `f64`.
    pub fn projections(&self, trials: ArrayView3<'_, f64>) -> Result<Array2<f64>, ModelError> {
        let x = self.input(trials)?;
        let z = self
            .encode_project(&x, &mut Mode::eval())?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        let d = self.feature_dim;
        let flat: Vec<f64> = z.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec((flat.len() / d.max(1), d), flat).expect("row-major features"))
    }

    /// Evaluation-mode class predictions argmax F(E(x)).
    pub fn predict(
        &self,
        trials: ArrayView3<'_, f64>,
        chunk: usize,
    ) -> Result<Vec<usize>, ModelError> {
        let n = trials.dim().0;
        let mut preds = Vec::with_capacity(n);
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let x = self.input(trials.slice(ndarray::s![start..end, .., ..]))?;
            let f = self.backbone_forward(&x, &mut Mode::eval())?;
            let p = self.classify(&f)?.argmax(1)?.to_vec1::<u32>()?;
            preds.extend(p.into_iter().map(|v| v as usize));
            start = end;
        }
        Ok(preds)
    }

    /// True when every parameter and buffer is finite.
    pub fn all_finite(&self) -> Result<bool, ModelError> {
        for (_, v) in self.store.all() {
            let vals = v
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            if vals.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny(kind: BackboneKind, c: usize, t: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(kind, c, t, 2);
        cfg.precision = Precision::F64;
        cfg
    }

    fn random_trials(n: usize, c: usize, t: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((n, c, t), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
    }

    #[test]
    fn widths_follow_backbone() {
        let b = build_model(&tiny(BackboneKind::EEGNet, 14, 1250), 0).unwrap();
        assert_eq!(b.feature_dim(), 16 * 39);
        assert_eq!(b.projector().widths(), (14 * 1250, 4 * 16 * 39, 16 * 39));
        let b = build_model(&tiny(BackboneKind::ShallowCNN, 3, 128), 0).unwrap();
        assert_eq!(b.feature_dim(), 40 * 2);
    }

    #[test]
    fn rejects_short_input_and_bad_heads() {
        assert!(matches!(
            build_model(&tiny(BackboneKind::DeepCNN, 3, 256), 0),
            Err(ModelError::Build(_))
        ));
        let mut cfg = tiny(BackboneKind::EEGNet, 3, 33 * 2 + 1);
        cfg.encoder_heads = 2;
        assert!(matches!(build_model(&cfg, 0), Err(ModelError::Build(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny(BackboneKind::EEGNet, 4, 64);
        let a = build_model(&cfg, 7).unwrap();
        let b = build_model(&cfg, 7).unwrap();
        let c = build_model(&cfg, 8).unwrap();
        let flat = |m: &ModelBundle| -> Vec<f64> {
            m.store()
                .params()
                .iter()
                .flat_map(|(_, v)| {
                    v.as_tensor()
                        .flatten_all()
                        .unwrap()
                        .to_vec1::<f64>()
                        .unwrap()
                })
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
        assert!(a.all_finite().unwrap());
    }

    #[test]
    fn encoder_preserves_shape_and_projection_width() {
        let b = build_model(&tiny(BackboneKind::EEGNet, 4, 64), 1).unwrap();
        let x = b.input(random_trials(3, 4, 64, 0).view()).unwrap();
        assert_eq!(b.encode(&x, &mut Mode::eval()).unwrap().dims(), &[3, 4, 64]);
        let z = b.encode_project(&x, &mut Mode::eval()).unwrap();
        assert_eq!(z.dims(), &[3, b.feature_dim()]);
    }

    #[test]
    fn eval_is_batch_independent_and_equivariant() {
        for kind in [BackboneKind::EEGNet, BackboneKind::ShallowCNN] {
            let b = build_model(&tiny(kind, 4, 128), 2).unwrap();
            let trials = random_trials(8, 4, 128, 1);
            let all = rows(
                &b.backbone_forward(&b.input(trials.view()).unwrap(), &mut Mode::eval())
                    .unwrap(),
            );
            let one = rows(
                &b.backbone_forward(
                    &b.input(trials.slice(ndarray::s![3..4, .., ..])).unwrap(),
                    &mut Mode::eval(),
                )
                .unwrap(),
            );
            for (x, y) in all[3].iter().zip(&one[0]) {
                assert!((x - y).abs() < 1e-6);
            }
            let perm = [5usize, 2, 7, 0, 1, 6, 3, 4];
            let permuted = trials.select(ndarray::Axis(0), &perm);
            let p = rows(
                &b.backbone_forward(&b.input(permuted.view()).unwrap(), &mut Mode::eval())
                    .unwrap(),
            );
            for (i, &src) in perm.iter().enumerate() {
                for (x, y) in p[i].iter().zip(&all[src]) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
            let zp = rows(
                &b.encode_project(&b.input(permuted.view()).unwrap(), &mut Mode::eval())
                    .unwrap(),
            );
            let za = rows(
                &b.encode_project(&b.input(trials.view()).unwrap(), &mut Mode::eval())
                    .unwrap(),
            );
            for (i, &src) in perm.iter().enumerate() {
                for (x, y) in zp[i].iter().zip(&za[src]) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_finite_features() {
        for kind in [BackboneKind::EEGNet, BackboneKind::ShallowCNN] {
            let b = build_model(&tiny(kind, 3, 128), 0).unwrap();
            let f = b.features(Array3::zeros((2, 3, 128)).view(), 8).unwrap();
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let b = build_model(&tiny(BackboneKind::EEGNet, 4, 64), 0).unwrap();
        let x = b.input(random_trials(2, 3, 64, 0).view()).unwrap();
        assert!(matches!(
            b.backbone_forward(&x, &mut Mode::eval()),
            Err(ModelError::Shape(_))
        ));
        assert!(matches!(
            b.encode_project(&x, &mut Mode::eval()),
            Err(ModelError::Shape(_))
        ));
        let f = Tensor::zeros((2, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(b.classify(&f), Err(ModelError::Shape(_))));
    }

    #[test]
    fn classifier_is_affine() {
        let b = build_model(&tiny(BackboneKind::EEGNet, 4, 64), 0).unwrap();
        let d = b.feature_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..3 * d).map(|_| rng.random::<f64>()).collect();
        let f = Tensor::from_vec(f, (3, d), &Device::Cpu).unwrap();
        let bias = b
            .classifier()
            .bias()
            .unwrap()
            .as_tensor()
            .to_vec1::<f64>()
            .unwrap();
        let l1 = rows(&b.classify(&f).unwrap());
        let l2 = rows(&b.classify(&(&f * 2.0).unwrap()).unwrap());
        for (r1, r2) in l1.iter().zip(&l2) {
            assert_eq!(r1.len(), 2);
            for k in 0..2 {
                assert!((2.0 * (r1[k] - bias[k]) - (r2[k] - bias[k])).abs() < 1e-12);
            }
        }
        let w = b.classifier().weight();
        w.set(&w.as_tensor().zeros_like().unwrap()).unwrap();
        for row in rows(&b.classify(&f).unwrap()) {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn deep_has_most_parameters() {
        let count = |kind| {
            let b = build_model(&tiny(kind, 22, 1000), 0).unwrap();
            b.store()
                .params()
                .iter()
                .filter(|(n, _)| n.starts_with("backbone."))
                .map(|(_, v)| v.elem_count())
                .sum::<usize>()
        };
        let deep = count(BackboneKind::DeepCNN);
        assert!(deep > count(BackboneKind::ShallowCNN));
        assert!(deep > count(BackboneKind::EEGNet));
    }

    /// Central differences on a handful of entries of every encoder and
    /// projector parameter; the analytic gradient must be nonzero where the
    /// finite difference is.
    #[test]
    fn encoder_projector_gradients_are_nonzero() {
        let b = build_model(&tiny(BackboneKind::EEGNet, 3, 32), 4).unwrap();
        let x = b.input(random_trials(4, 3, 32, 5).view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe: Vec<f64> = (0..4 * b.feature_dim())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let probe = Tensor::from_vec(probe, (4, b.feature_dim()), &Device::Cpu).unwrap();
        let scalar = |b: &ModelBundle| {
            (b.encode_project(&x, &mut Mode::train_no_dropout()).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        let grads = scalar(&b).backward().unwrap();
        for (name, var) in b
            .store()
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("encoder.") || n.starts_with("projector."))
        {
            let g = grads
                .get(var.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            // Batch normalization cancels the first projector bias exactly.
            if name == "projector.fc1.bias" {
                assert!(g.iter().all(|v| v.abs() < 1e-9), "{name}");
                continue;
            }
            let orig = var
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let mut max_fd: f64 = 0.0;
            for idx in 0..orig.len().min(4) {
                let eps = 1e-6;
                let mut shifted = orig.clone();
                shifted[idx] += eps;
                var.set(&Tensor::from_vec(shifted.clone(), var.shape(), &Device::Cpu).unwrap())
                    .unwrap();
                let up = scalar(&b).to_scalar::<f64>().unwrap();
                shifted[idx] -= 2.0 * eps;
                var.set(&Tensor::from_vec(shifted, var.shape(), &Device::Cpu).unwrap())
                    .unwrap();
                let down = scalar(&b).to_scalar::<f64>().unwrap();
                var.set(&Tensor::from_vec(orig.clone(), var.shape(), &Device::Cpu).unwrap())
                    .unwrap();
                let fd = (up - down) / (2.0 * eps);
                assert!(
                    (fd - g[idx]).abs() <= 1e-4 * fd.abs().max(g[idx].abs()) + 1e-7,
                    "{name}[{idx}]: fd {fd} vs {}",
                    g[idx]
                );
                max_fd = max_fd.max(fd.abs());
            }
            assert!(max_fd > 0.0, "{name} has no effect");
            assert!(g.iter().any(|v| *v != 0.0), "{name}");
        }
    }
}
