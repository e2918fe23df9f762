//! Quantitative evaluation: Fréchet distance between Gaussian feature
//! fits, classification metrics, multi-run aggregation, and the
//! expert-classifier realism check.
//!
//! Feature extraction is pluggable. The default extractor is 8x8
//! average-pooled pixels (fully self-contained); a trained expert
//! classifier's penultimate layer is the alternative. FID values are only
//! comparable under a fixed extractor.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::selection::LabeledDataset;

/// Batched image-to-feature map.
pub trait Featurizer {
    fn features(&mut self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>>;
    fn name(&self) -> &'static str;
}

/// 8x8 block-averaged pixels (64 features); image sides must divide by 8.
pub struct PixelFeaturizer;

impl Featurizer for PixelFeaturizer {
    fn features(&mut self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|img| {
                let s = img.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                if h % 8 != 0 || w % 8 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "pixel featurizer needs sides divisible by 8, got {h}x{w}"
                    )));
                }
                let (bh, bw) = (h / 8, w / 8);
                let mut out = vec![0f64; 64];
                for by in 0..8 {
                    for bx in 0..8 {
                        let mut acc = 0f64;
                        for y in 0..bh {
                            for x in 0..bw {
                                acc += img.data()[(by * bh + y) * w + bx * bw + x] as f64;
                            }
                        }
                        out[by * 8 + bx] = acc / (bh * bw) as f64;
                    }
                }
                Ok(out)
            })
            .collect()
    }

    fn name(&self) -> &'static str {
        "pixels8"
    }
}

/// Mean vector and unbiased covariance of a feature sample.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major `dim x dim`, symmetric.
    pub sigma: Vec<f64>,
    pub dim: usize,
    pub n: usize,
}

/// Fit mean and unbiased (n-1) covariance to feature vectors.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples for covariance, got {n}"
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidArgument("ragged feature vectors".into()));
    }
    let mut mu = vec![0f64; dim];
    for f in features {
        for (m, &v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut sigma = vec![0f64; dim * dim];
    for f in features {
        for i in 0..dim {
            let di = f[i] - mu[i];
            for j in i..dim {
                sigma[i * dim + j] += di * (f[j] - mu[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = sigma[i * dim + j] / denom;
            sigma[i * dim + j] = v;
            sigma[j * dim + i] = v;
        }
    }
    Ok(GaussianStats { mu, sigma, dim, n })
}

/// Featurize a dataset's images and fit Gaussian statistics.
pub fn feature_stats(
    images: &LabeledDataset,
    featurizer: &mut dyn Featurizer,
) -> Result<GaussianStats> {
    let refs: Vec<&Tensor<f32>> = images.records().iter().map(|r| &r.pixels).collect();
    if refs.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 images".into()));
    }
    gaussian_stats(&featurizer.features(&refs)?)
}

fn check_symmetric(sigma: &[f64], dim: usize) -> Result<()> {
    for i in 0..dim {
        for j in (i + 1)..dim {
            if (sigma[i * dim + j] - sigma[j * dim + i]).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "covariance asymmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues are
/// clamped at zero before the square root.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussians:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, computed through the
/// symmetric product `S1^(1/2) S2 S1^(1/2)` so the eigenvalues are real.
/// Clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch {} vs {}",
            a.dim, b.dim
        )));
    }
    check_symmetric(&a.sigma, a.dim)?;
    check_symmetric(&b.sigma, b.dim)?;
    let d = a.dim;
    let s1 = DMatrix::from_row_slice(d, d, &a.sigma);
    let s2 = DMatrix::from_row_slice(d, d, &b.sigma);

    let mean_term: f64 = a
        .mu
        .iter()
        .zip(&b.mu)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let s1h = sym_sqrt(&s1);
    let inner = &s1h * &s2 * &s1h;
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let eig = inner_sym.symmetric_eigen();
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let dist = mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
    Ok(dist.max(0.0))
}

/// Standard confusion-matrix metrics for a binary problem. Ratios with a
/// zero denominator report 0 with the corresponding `*_defined` flag
/// cleared. Macro-averaged variants treat each class as positive in turn.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub positive_class: usize,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64, bool, bool, bool) {
    let precision_defined = tp + fp > 0;
    let recall_defined = tp + fn_ > 0;
    let precision = if precision_defined {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if recall_defined {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1_defined = precision + recall > 0.0;
    let f1 = if f1_defined {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1, precision_defined, recall_defined, f1_defined)
}

pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    positive_class: usize,
) -> Result<ClassificationMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation".into()));
    }
    if positive_class > 1
        || predictions.iter().chain(labels).any(|&c| c > 1)
    {
        return Err(Error::InvalidArgument("labels must be binary (0/1)".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive_class, l == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / predictions.len() as f64;
    let (precision, recall, f1, precision_defined, recall_defined, f1_defined) = prf(tp, fp, fn_);
    // macro: flip the positive class (for binary, tn/fn/fp swap roles)
    let (p2, r2, f2, ..) = prf(tn, fn_, fp);
    Ok(ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
        macro_precision: (precision + p2) / 2.0,
        macro_recall: (recall + r2) / 2.0,
        macro_f1: (f1 + f2) / 2.0,
        tp,
        fp,
        fn_,
        tn,
        positive_class,
        precision_defined,
        recall_defined,
        f1_defined,
    })
}

/// Values from repeated runs with their mean and sample (n-1) standard
/// deviation.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn run_stats(values: &[f64]) -> Result<RunAggregate> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 run values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(RunAggregate {
        values: values.to_vec(),
        mean,
        std: var.sqrt(),
    })
}

/// Render an aggregate the way the result tables do: mean to 2 decimals,
/// std to 3.
pub fn format_aggregate(agg: &RunAggregate) -> String {
    format!("{:.2} \u{00b1} {:.3}", agg.mean, agg.std)
}

/// Models that can assign class labels to images.
pub trait LabelPredictor {
    fn predict(&mut self, images: &[&Tensor<f32>]) -> Result<Vec<usize>>;
}

/// Fraction of synthetic images the expert classifies as their intended
/// class. The expert must have been trained on real data only.
pub fn expert_agreement(
    expert: &mut dyn LabelPredictor,
    synthetic: &LabeledDataset,
    intended_class: usize,
) -> Result<f64> {
    if synthetic.is_empty() {
        return Err(Error::InvalidArgument("empty synthetic set".into()));
    }
    let refs: Vec<&Tensor<f32>> = synthetic.records().iter().map(|r| &r.pixels).collect();
    let preds = expert.predict(&refs)?;
    let hits = preds.iter().filter(|&&p| p == intended_class).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::derive_stream;

    #[test]
    fn gaussian_stats_worked_examples() {
        // two scalar features {0, 2}: mu = 1, sigma = 2 (n-1 divisor)
        let st = gaussian_stats(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(st.mu, vec![1.0]);
        assert_eq!(st.sigma, vec![2.0]);
        // identical samples: zero covariance
        let st = gaussian_stats(&vec![vec![1.0, -1.0]; 5]).unwrap();
        assert!(st.sigma.iter().all(|&v| v == 0.0));
        // fewer than two samples rejected
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn gaussian_stats_permutation_invariant() {
        let mut rng = derive_stream(31, 0);
        let feats: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.next_normal_f64()).collect())
            .collect();
        let mut shuffled = feats.clone();
        let mut order: Vec<usize> = (0..20).collect();
        rng.shuffle(&mut order);
        shuffled = order.iter().map(|&i| shuffled[i].clone()).collect();
        let a = gaussian_stats(&feats).unwrap();
        let b = gaussian_stats(&shuffled).unwrap();
        for (x, y) in a.mu.iter().zip(&b.mu) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.sigma.iter().zip(&b.sigma) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn diag_stats(mu: Vec<f64>, diag: Vec<f64>) -> GaussianStats {
        let dim = mu.len();
        let mut sigma = vec![0.0; dim * dim];
        for (i, &d) in diag.iter().enumerate() {
            sigma[i * dim + i] = d;
        }
        GaussianStats { mu, sigma, dim, n: 100 }
    }

    #[test]
    fn frechet_worked_examples() {
        // identical stats: 0
        let a = diag_stats(vec![0.3, -0.7], vec![1.2, 0.4]);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        // equal covariances, mu shifted by (1, 0): 1.0
        let b = diag_stats(vec![1.3, -0.7], vec![1.2, 0.4]);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        // mu equal, S1 = I, S2 = diag(4,1): Tr(diag(5,2) - 2 diag(2,1)) = 1
        let c = diag_stats(vec![0.0, 0.0], vec![1.0, 1.0]);
        let d = diag_stats(vec![0.0, 0.0], vec![4.0, 1.0]);
        assert!((frechet_distance(&c, &d).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frechet_matches_diagonal_closed_form_and_symmetry() {
        let mut rng = derive_stream(32, 0);
        for _ in 0..20 {
            let dim = 2 + rng.next_usize(4);
            let mu1: Vec<f64> = (0..dim).map(|_| rng.next_normal_f64()).collect();
            let mu2: Vec<f64> = (0..dim).map(|_| rng.next_normal_f64()).collect();
            let d1: Vec<f64> = (0..dim).map(|_| rng.next_range(0.1, 3.0)).collect();
            let d2: Vec<f64> = (0..dim).map(|_| rng.next_range(0.1, 3.0)).collect();
            let a = diag_stats(mu1.clone(), d1.clone());
            let b = diag_stats(mu2.clone(), d2.clone());
            let got = frechet_distance(&a, &b).unwrap();
            let expected: f64 = mu1
                .iter()
                .zip(&mu2)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                + d1.iter()
                    .zip(&d2)
                    .map(|(x, y)| (x.sqrt() - y.sqrt()) * (x.sqrt() - y.sqrt()))
                    .sum::<f64>();
            assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
            let rev = frechet_distance(&b, &a).unwrap();
            assert!((got - rev).abs() < 1e-6);
        }
    }

    #[test]
    fn frechet_rejects_mismatch_and_asymmetry() {
        let a = diag_stats(vec![0.0], vec![1.0]);
        let b = diag_stats(vec![0.0, 0.0], vec![1.0, 1.0]);
        assert!(frechet_distance(&a, &b).is_err());
        let mut bad = diag_stats(vec![0.0, 0.0], vec![1.0, 1.0]);
        bad.sigma[1] = 0.5; // asymmetric beyond tolerance
        let c = diag_stats(vec![0.0, 0.0], vec![1.0, 1.0]);
        assert!(frechet_distance(&bad, &c).is_err());
    }

    #[test]
    fn classification_worked_example() {
        // TP=8, FP=2, FN=1, TN=9
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..8 {
            preds.push(1);
            labels.push(1);
        }
        for _ in 0..2 {
            preds.push(1);
            labels.push(0);
        }
        preds.push(0);
        labels.push(1);
        for _ in 0..9 {
            preds.push(0);
            labels.push(0);
        }
        let m = classification_metrics(&preds, &labels, 1).unwrap();
        assert!((m.accuracy - 0.85).abs() < 1e-12);
        assert!((m.precision - 0.8).abs() < 1e-12);
        assert!((m.recall - 0.88889).abs() < 1e-5);
        assert!((m.f1 - 0.84211).abs() < 1e-5);
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (8, 2, 1, 9));
    }

    #[test]
    fn perfect_and_degenerate_predictors() {
        let m = classification_metrics(&[1, 0, 1], &[1, 0, 1], 1).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        // all-negative predictor with positives present
        let m = classification_metrics(&[0, 0, 0], &[1, 0, 1], 1).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
        assert!(!m.precision_defined);
        assert!(m.recall_defined);
    }

    #[test]
    fn matches_brute_force_confusion_oracle() {
        let mut rng = derive_stream(33, 0);
        for _ in 0..100 {
            let n = 2 + rng.next_usize(50);
            let preds: Vec<usize> = (0..n).map(|_| rng.next_usize(2)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.next_usize(2)).collect();
            let m = classification_metrics(&preds, &labels, 1).unwrap();
            // oracle: count every cell independently
            let count = |pv: usize, lv: usize| {
                preds
                    .iter()
                    .zip(&labels)
                    .filter(|&(&p, &l)| p == pv && l == lv)
                    .count()
            };
            assert_eq!(m.tp, count(1, 1));
            assert_eq!(m.fp, count(1, 0));
            assert_eq!(m.fn_, count(0, 1));
            assert_eq!(m.tn, count(0, 0));
            assert_eq!(m.tp + m.fp + m.fn_ + m.tn, n);
            let acc = (m.tp + m.tn) as f64 / n as f64;
            assert!((m.accuracy - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn run_stats_worked_example() {
        let agg = run_stats(&[0.90, 0.92, 0.91, 0.93, 0.89]).unwrap();
        assert!((agg.mean - 0.91).abs() < 1e-12);
        assert!((agg.std - 0.01581).abs() < 1e-5);
        assert_eq!(format_aggregate(&agg), "0.91 \u{00b1} 0.016");
        // constant list: std 0
        let agg = run_stats(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(agg.std, 0.0);
        // permutation invariance
        let a = run_stats(&[0.1, 0.2, 0.3]).unwrap();
        let b = run_stats(&[0.3, 0.1, 0.2]).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-15);
        assert!((a.std - b.std).abs() < 1e-15);
        assert!(run_stats(&[1.0]).is_err());
    }

    struct ConstPredictor(usize);
    impl LabelPredictor for ConstPredictor {
        fn predict(&mut self, images: &[&Tensor<f32>]) -> Result<Vec<usize>> {
            Ok(vec![self.0; images.len()])
        }
    }

    #[test]
    fn expert_agreement_extremes() {
        use crate::selection::{Provenance, Record};
        let mut ds = LabeledDataset::new(vec!["a".into(), "b".into()], Provenance::SyntheticDdpm, 16, 16);
        for i in 0..5 {
            ds.push(Record {
                id: format!("s{i}"),
                class: 1,
                pixels: Tensor::zeros(vec![1, 16, 16]),
            })
            .unwrap();
        }
        assert_eq!(expert_agreement(&mut ConstPredictor(1), &ds, 1).unwrap(), 1.0);
        assert_eq!(expert_agreement(&mut ConstPredictor(0), &ds, 1).unwrap(), 0.0);
    }

    #[test]
    fn pixel_featurizer_dims() {
        let img = Tensor::<f32>::full(vec![1, 32, 32], 0.5);
        let feats = PixelFeaturizer.features(&[&img]).unwrap();
        assert_eq!(feats[0].len(), 64);
        assert!(feats[0].iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let odd = Tensor::<f32>::zeros(vec![1, 12, 12]);
        assert!(PixelFeaturizer.features(&[&odd]).is_err());
    }
}
