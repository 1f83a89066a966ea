//! Linear probing of frozen encoder features.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{contract_err, input_err, Error, Result};
use crate::model::{I2pMae, TokenGroups};
use crate::rng::seeded;

const STD_FLOOR: f64 = 1e-8;

/// How final-stage token features are pooled into one descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DescriptorMode {
    Max,
    Ave,
    #[default]
    Concat,
}

impl DescriptorMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Max => "max",
            Self::Ave => "ave",
            Self::Concat => "max+ave",
        }
    }

    pub fn width(self, channels: usize) -> usize {
        match self {
            Self::Concat => 2 * channels,
            _ => channels,
        }
    }
}

impl fmt::Display for DescriptorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DescriptorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "ave" => Ok(Self::Ave),
            "max+ave" | "concat" => Ok(Self::Concat),
            _ => Err(input_err!("unknown descriptor mode '{s}'")),
        }
    }
}

/// Global descriptor of one unmasked sample.
pub fn extract_global(
    model: &I2pMae,
    tokens: &TokenGroups,
    mode: DescriptorMode,
) -> Result<Vec<f64>> {
    let f = model.encode_all(tokens)?;
    let (rows, c) = f.dims2()?;
    let mut max = vec![f64::NEG_INFINITY; c];
    let mut ave = vec![0.0; c];
    for r in 0..rows {
        for (j, v) in f.row(r).iter().enumerate() {
            max[j] = max[j].max(*v);
            ave[j] += v / rows as f64;
        }
    }
    Ok(match mode {
        DescriptorMode::Max => max,
        DescriptorMode::Ave => ave,
        DescriptorMode::Concat => {
            max.extend(ave);
            max
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    /// Row-major `labels.len() x dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub mode: DescriptorMode,
}

impl FeatureBank {
    pub fn new(dim: usize, mode: DescriptorMode) -> Self {
        FeatureBank {
            features: Vec::new(),
            labels: Vec::new(),
            dim,
            mode,
        }
    }

    pub fn push(&mut self, descriptor: &[f64], label: usize) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::dim(
                "FeatureBank::push",
                &[descriptor.len()],
                &[self.dim],
            ));
        }
        if descriptor.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(alloc::format!(
                "non-finite descriptor for label {label}"
            )));
        }
        self.features.extend_from_slice(descriptor);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-dimension affine standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(bank: &FeatureBank) -> Self {
        let n = bank.len().max(1) as f64;
        let mut mean = vec![0.0; bank.dim];
        for i in 0..bank.len() {
            mean.iter_mut()
                .zip(bank.row(i))
                .for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; bank.dim];
        for i in 0..bank.len() {
            for ((v, x), m) in var.iter_mut().zip(bank.row(i)).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| libm::sqrt(v).max(STD_FLOOR))
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    /// Initial step; decays as `eta0 / (1 + eta0 * lambda * t)`.
    pub eta0: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-3,
            epochs: 50,
            eta0: 0.1,
            seed: 0,
        }
    }
}

/// One-vs-rest linear classifier on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub classes: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub standardizer: Standardizer,
}

impl LinearSvm {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardizer.apply(x);
        let dim = z.len();
        (0..self.classes)
            .map(|c| dot(&self.weights[c * dim..(c + 1) * dim], &z) + self.bias[c])
            .collect()
    }

    /// Highest-scoring class; ties go to the lower label.
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for (c, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = c;
            }
        }
        best
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L2-regularized hinge loss minimized per class by seeded stochastic
/// subgradient descent.
pub fn train_linear_svm(bank: &FeatureBank, cfg: &SvmConfig) -> Result<LinearSvm> {
    let classes = bank.labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    bank.labels.iter().for_each(|&l| counts[l] += 1);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(input_err!("linear probe needs at least two classes"));
    }
    if !(cfg.lambda > 0.0 && cfg.eta0 > 0.0) {
        return Err(contract_err!("svm needs positive lambda and eta0"));
    }
    let standardizer = Standardizer::fit(bank);
    let z: Vec<Vec<f64>> = (0..bank.len())
        .map(|i| standardizer.apply(bank.row(i)))
        .collect();
    let dim = bank.dim;
    let mut weights = vec![0.0; classes * dim];
    let mut bias = vec![0.0; classes];
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..bank.len()).collect();
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = cfg.eta0 / (1.0 + cfg.eta0 * cfg.lambda * t as f64);
            let shrink = 1.0 - eta * cfg.lambda;
            for c in 0..classes {
                let w = &mut weights[c * dim..(c + 1) * dim];
                let y = if bank.labels[i] == c { 1.0 } else { -1.0 };
                let margin = y * (dot(w, &z[i]) + bias[c]);
                w.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    w.iter_mut().zip(&z[i]).for_each(|(v, x)| *v += eta * y * x);
                    bias[c] += eta * y;
                }
            }
        }
    }
    Ok(LinearSvm {
        classes,
        weights,
        bias,
        standardizer,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `None` for classes absent from the test split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub config_id: String,
    pub seed: u64,
}

pub fn evaluate(svm: &LinearSvm, test: &FeatureBank, config_id: &str, seed: u64) -> ProbeResult {
    let mut hit = vec![0usize; svm.classes];
    let mut seen = vec![0usize; svm.classes];
    let mut correct = 0;
    for i in 0..test.len() {
        let y = test.labels[i];
        let ok = svm.predict(test.row(i)) == y;
        if y < svm.classes {
            seen[y] += 1;
            hit[y] += ok as usize;
        }
        correct += ok as usize;
    }
    ProbeResult {
        accuracy: if test.is_empty() {
            0.0
        } else {
            correct as f64 / test.len() as f64
        },
        per_class_accuracy: hit
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
        config_id: config_id.into(),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{generate_shape, ShapeClass, ShapeSpec};
    use crate::model::{group_tokens, ModelConfig};
    use rand::Rng as _;

    fn bank(rows: &[(&[f64], usize)]) -> FeatureBank {
        let mut b = FeatureBank::new(rows[0].0.len(), DescriptorMode::Max);
        for (x, y) in rows {
            b.push(x, *y).unwrap();
        }
        b
    }

    fn train_acc(b: &FeatureBank, cfg: &SvmConfig) -> f64 {
        evaluate(&train_linear_svm(b, cfg).unwrap(), b, "t", 0).accuracy
    }

    #[test]
    fn separable_toy_is_learned() {
        let mut rng = seeded(1);
        let mut b = FeatureBank::new(2, DescriptorMode::Ave);
        for i in 0..40 {
            let side = if i % 2 == 0 { -1.0 } else { 1.0 };
            let x = side * (1.0 + rng.random::<f64>());
            b.push(&[x, rng.random::<f64>() * 4.0 - 2.0], (side > 0.0) as usize)
                .unwrap();
        }
        assert_eq!(train_acc(&b, &SvmConfig::default()), 1.0);
        let a = train_linear_svm(&b, &SvmConfig::default()).unwrap();
        assert_eq!(a, train_linear_svm(&b, &SvmConfig::default()).unwrap());
    }

    #[test]
    fn huge_lambda_predicts_the_majority() {
        let mut rows = Vec::new();
        let mut rng = seeded(2);
        let xs: Vec<[f64; 2]> = (0..20).map(|_| [rng.random(), rng.random()]).collect();
        for (i, x) in xs.iter().enumerate() {
            rows.push((
                &x[..],
                if i < 10 {
                    0
                } else if i < 15 {
                    1
                } else {
                    2
                },
            ));
        }
        let b = bank(&rows);
        let svm = train_linear_svm(
            &b,
            &SvmConfig {
                lambda: 1e6,
                ..SvmConfig::default()
            },
        )
        .unwrap();
        assert!(svm.weights.iter().all(|w| w.abs() < 1e-5));
        assert!((0..b.len()).all(|i| svm.predict(b.row(i)) == 0));
        assert_eq!(evaluate(&svm, &b, "t", 0).accuracy, 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        let b = bank(&[(&[1.0], 0), (&[2.0], 0)]);
        assert!(matches!(
            train_linear_svm(&b, &SvmConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn close_to_best_linear_separator() {
        // 20 overlapping 2D points; the oracle scans directions and offsets.
        let mut rng = seeded(5);
        let mut rows: Vec<([f64; 2], usize)> = Vec::new();
        for i in 0..20 {
            let y = i % 2;
            let c = if y == 0 { -0.6 } else { 0.6 };
            rows.push((
                [
                    c + rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 2.0 - 1.0,
                ],
                y,
            ));
        }
        let b = bank(&rows.iter().map(|(x, y)| (&x[..], *y)).collect::<Vec<_>>());
        let mut best = usize::MAX;
        for a in 0..360 {
            let th = a as f64 * core::f64::consts::PI / 180.0;
            let (u, v) = (libm::cos(th), libm::sin(th));
            let mut proj: Vec<f64> = rows.iter().map(|(x, _)| u * x[0] + v * x[1]).collect();
            proj.sort_by(f64::total_cmp);
            let mut cuts = vec![proj[0] - 1.0];
            cuts.extend(proj.windows(2).map(|w| (w[0] + w[1]) / 2.0));
            cuts.push(proj[19] + 1.0);
            for t in cuts {
                let err = rows
                    .iter()
                    .filter(|(x, y)| ((u * x[0] + v * x[1] > t) as usize) != *y)
                    .count();
                best = best.min(err);
            }
        }
        let svm_err = 20 - libm::round(20.0 * train_acc(&b, &SvmConfig::default())) as usize;
        assert!(svm_err <= best + 1, "svm {svm_err}, oracle {best}");
    }

    #[test]
    fn standardization_uses_only_the_fitted_rows() {
        let train = bank(&[(&[0.0, 1.0], 0), (&[2.0, 1.0], 1)]);
        let s = Standardizer::fit(&train);
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.std, vec![1.0, STD_FLOOR]);
        let svm = train_linear_svm(&train, &SvmConfig::default()).unwrap();
        assert_eq!(svm.standardizer, s);
        let all = bank(&[(&[0.0, 1.0], 0), (&[2.0, 1.0], 1), (&[10.0, 3.0], 1)]);
        assert_ne!(Standardizer::fit(&all), s);
    }

    #[test]
    fn descriptor_modes() {
        let cfg = ModelConfig {
            n_points: 64,
            tokens: 8,
            k: 4,
            channels: 8,
            heads: 2,
            encoder_stages: vec![1, 1],
            decoder_stages: vec![1],
            hierarchical: true,
            mlp_ratio: 2,
            target_width: 4,
        };
        let model = I2pMae::new(cfg.clone(), 0).unwrap();
        let cloud = generate_shape(&ShapeSpec {
            class: ShapeClass::Cube,
            n_points: 64,
            seed: 0,
            jitter: 0.0,
            random_pose: false,
        })
        .unwrap();
        let t = group_tokens(&cloud, 8, 4, 0).unwrap();
        let cat = extract_global(&model, &t, DescriptorMode::Concat).unwrap();
        assert_eq!(cat.len(), 16);
        assert_eq!(
            &cat[..8],
            extract_global(&model, &t, DescriptorMode::Max)
                .unwrap()
                .as_slice()
        );
        assert_eq!(
            &cat[8..],
            extract_global(&model, &t, DescriptorMode::Ave)
                .unwrap()
                .as_slice()
        );
        assert_eq!(
            cat,
            extract_global(&model, &t, DescriptorMode::Concat).unwrap()
        );

        // A single final-stage token: the mean is that token.
        let one = I2pMae::new(
            ModelConfig {
                tokens: 1,
                encoder_stages: vec![0],
                ..cfg
            },
            0,
        )
        .unwrap();
        let t1 = group_tokens(&cloud, 1, 4, 0).unwrap();
        let tok = one.encode_all(&t1).unwrap();
        assert_eq!(
            extract_global(&one, &t1, DescriptorMode::Ave).unwrap(),
            tok.row(0)
        );
    }

    #[test]
    fn mode_names() {
        for m in [
            DescriptorMode::Max,
            DescriptorMode::Ave,
            DescriptorMode::Concat,
        ] {
            assert_eq!(m.name().parse::<DescriptorMode>().unwrap(), m);
        }
        assert_eq!(DescriptorMode::Concat.width(384), 768);
    }
}
