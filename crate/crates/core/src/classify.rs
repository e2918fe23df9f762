//! Classification models and the train/evaluate protocol: the custom CNN,
//! an untrained VGG16, and the five-run evaluation loop over scenario
//! datasets.
//!
//! Architectures are described before they are allocated, so parameter
//! accounting (including the reference-size tables) costs nothing.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, ClassificationMetrics, Featurizer, LabelPredictor};
use crate::nn::{BatchNormSpec, Conv2dSpec, LinearSpec};
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::eval::{evaluate_graph, EvalOptions, Inputs};
use crate::numerics::grad::backpropagate;
use crate::numerics::graph::{Graph, NodeId, Op};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::{derive_stream, RngStream};
use crate::numerics::tensor::Tensor;
use crate::selection::LabeledDataset;

pub const INPUT_CHANNELS: usize = 3;
const DROPOUT_P: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    CustomCnn,
    Vgg16,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::CustomCnn => "custom_cnn",
            ModelKind::Vgg16 => "vgg16",
        })
    }
}

#[derive(Debug, Clone)]
enum ArchLayer {
    Conv(Conv2dSpec),
    BatchNorm(BatchNormSpec),
    Relu,
    MaxPool,
    Flatten,
    Dense(LinearSpec),
    /// Inverted dropout; the mask arrives as a bound input.
    Dropout { input_name: String, dim: usize },
}

/// Per-layer line of the architecture summary (counted, not allocated).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub non_trainable: usize,
}

#[derive(Debug, Clone)]
pub struct ModelArch {
    pub kind: ModelKind,
    pub input_size: usize,
    layers: Vec<ArchLayer>,
    /// Parameter count of the convolutional backbone (VGG16 reporting).
    backbone_params: usize,
}

/// Custom CNN of the reference table: three `conv3x3 + batch-norm +
/// max-pool` blocks (64/128/256 filters) into dense 256/128/2 with
/// dropout 0.5 after each hidden dense layer.
pub fn build_custom_cnn(input_size: usize) -> Result<ModelArch> {
    if input_size % 8 != 0 || input_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "custom CNN input size must divide by 8, got {input_size}"
        )));
    }
    let mut layers = Vec::new();
    let mut ch = INPUT_CHANNELS;
    for (i, &filters) in [64usize, 128, 256].iter().enumerate() {
        layers.push(ArchLayer::Conv(Conv2dSpec::new(
            format!("conv2d_{}", i + 1),
            ch,
            filters,
            3,
            1,
        )));
        layers.push(ArchLayer::BatchNorm(BatchNormSpec::new(
            format!("batch_normalization_{}", i + 1),
            filters,
        )));
        layers.push(ArchLayer::Relu);
        layers.push(ArchLayer::MaxPool);
        ch = filters;
    }
    layers.push(ArchLayer::Flatten);
    let flat = (input_size / 8) * (input_size / 8) * 256;
    layers.push(ArchLayer::Dense(LinearSpec::new("dense_1", flat, 256)));
    layers.push(ArchLayer::Relu);
    layers.push(ArchLayer::Dropout {
        input_name: "dropout_1".into(),
        dim: 256,
    });
    layers.push(ArchLayer::Dense(LinearSpec::new("dense_2", 256, 128)));
    layers.push(ArchLayer::Relu);
    layers.push(ArchLayer::Dropout {
        input_name: "dropout_2".into(),
        dim: 128,
    });
    layers.push(ArchLayer::Dense(LinearSpec::new("dense_3", 128, 2)));
    Ok(ModelArch {
        kind: ModelKind::CustomCnn,
        input_size,
        layers,
        backbone_params: 0,
    })
}

/// Standard 13-conv VGG16 backbone plus the head
/// `flatten -> dense 512 -> dropout -> dense 2`. The backbone can be
/// filled from an external checkpoint; none ships with the artifact.
pub fn build_vgg16(input_size: usize) -> Result<ModelArch> {
    if input_size % 32 != 0 || input_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "VGG16 input size must divide by 32, got {input_size}"
        )));
    }
    const PLAN: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
    let mut layers = Vec::new();
    let mut ch = INPUT_CHANNELS;
    let mut conv_idx = 0usize;
    let mut backbone_params = 0usize;
    for block in PLAN {
        for &filters in block {
            conv_idx += 1;
            let spec = Conv2dSpec::new(format!("backbone.conv{conv_idx}"), ch, filters, 3, 1);
            backbone_params += spec.param_count();
            layers.push(ArchLayer::Conv(spec));
            layers.push(ArchLayer::Relu);
            ch = filters;
        }
        layers.push(ArchLayer::MaxPool);
    }
    layers.push(ArchLayer::Flatten);
    let flat = (input_size / 32) * (input_size / 32) * 512;
    layers.push(ArchLayer::Dense(LinearSpec::new("head.dense", flat, 512)));
    layers.push(ArchLayer::Relu);
    layers.push(ArchLayer::Dropout {
        input_name: "dropout_1".into(),
        dim: 512,
    });
    layers.push(ArchLayer::Dense(LinearSpec::new("head.dense_1", 512, 2)));
    Ok(ModelArch {
        kind: ModelKind::Vgg16,
        input_size,
        layers,
        backbone_params,
    })
}

pub fn build_model(kind: ModelKind, input_size: usize) -> Result<ModelArch> {
    match kind {
        ModelKind::CustomCnn => build_custom_cnn(input_size),
        ModelKind::Vgg16 => build_vgg16(input_size),
    }
}

impl ModelArch {
    /// Per-layer summary at this input size (parameter-bearing and shape
    /// changing layers only, matching model-summary conventions).
    pub fn summary(&self) -> Vec<LayerSummary> {
        let mut out = Vec::new();
        let mut side = self.input_size;
        let mut ch = INPUT_CHANNELS;
        let mut flat = 0usize;
        for layer in &self.layers {
            match layer {
                ArchLayer::Conv(c) => {
                    ch = c.out_ch;
                    out.push(LayerSummary {
                        name: c.name.clone(),
                        output_shape: vec![side, side, ch],
                        params: c.param_count(),
                        non_trainable: 0,
                    });
                }
                ArchLayer::BatchNorm(b) => out.push(LayerSummary {
                    name: b.name.clone(),
                    output_shape: vec![side, side, ch],
                    params: b.param_count(),
                    non_trainable: b.non_trainable_count(),
                }),
                ArchLayer::MaxPool => {
                    side /= 2;
                    out.push(LayerSummary {
                        name: "max_pooling2d".into(),
                        output_shape: vec![side, side, ch],
                        params: 0,
                        non_trainable: 0,
                    });
                }
                ArchLayer::Flatten => {
                    flat = side * side * ch;
                    out.push(LayerSummary {
                        name: "flatten".into(),
                        output_shape: vec![flat],
                        params: 0,
                        non_trainable: 0,
                    });
                }
                ArchLayer::Dense(d) => {
                    flat = d.out_dim;
                    out.push(LayerSummary {
                        name: d.name.clone(),
                        output_shape: vec![flat],
                        params: d.param_count(),
                        non_trainable: 0,
                    });
                }
                ArchLayer::Dropout { input_name, .. } => out.push(LayerSummary {
                    name: input_name.clone(),
                    output_shape: vec![flat],
                    params: 0,
                    non_trainable: 0,
                }),
                ArchLayer::Relu => {}
            }
        }
        out
    }

    pub fn total_params(&self) -> usize {
        self.summary().iter().map(|l| l.params).sum()
    }

    pub fn non_trainable_params(&self) -> usize {
        self.summary().iter().map(|l| l.non_trainable).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.total_params() - self.non_trainable_params()
    }

    /// Convolutional backbone parameter count (VGG16 reporting).
    pub fn backbone_params(&self) -> usize {
        self.backbone_params
    }

    pub fn register(&self, store: &mut ParamStore<f32>, rng: &mut RngStream) {
        for layer in &self.layers {
            match layer {
                ArchLayer::Conv(c) => c.register(store, rng),
                ArchLayer::BatchNorm(b) => b.register(store),
                ArchLayer::Dense(d) => d.register(store, rng),
                _ => {}
            }
        }
    }

    /// Emit the network; returns `(logits, penultimate)` node ids.
    fn emit(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let mut penultimate = x;
        let n_dense = self
            .layers
            .iter()
            .filter(|l| matches!(l, ArchLayer::Dense(_)))
            .count();
        let mut dense_seen = 0usize;
        for layer in &self.layers {
            h = match layer {
                ArchLayer::Conv(c) => c.emit(g, h)?,
                ArchLayer::BatchNorm(b) => b.emit(g, h)?,
                ArchLayer::Relu => g.push(Op::Relu, &[h])?,
                ArchLayer::MaxPool => g.push(Op::MaxPool2x2, &[h])?,
                ArchLayer::Flatten => g.push(Op::Flatten, &[h])?,
                ArchLayer::Dense(d) => {
                    dense_seen += 1;
                    if dense_seen == n_dense {
                        penultimate = h;
                    }
                    d.emit(g, h)?
                }
                ArchLayer::Dropout { input_name, dim } => {
                    let batch = g.shape(h)[0];
                    let mask = g.input(input_name, vec![batch, *dim])?;
                    g.push(Op::Mul, &[h, mask])?
                }
            };
        }
        Ok((h, penultimate))
    }

    fn dropout_names_dims(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                ArchLayer::Dropout { input_name, dim } => Some((input_name.clone(), *dim)),
                _ => None,
            })
            .collect()
    }

    /// Load backbone weights by name from checkpoint entries (external
    /// pretrained weights; optional).
    pub fn load_backbone(
        &self,
        store: &mut ParamStore<f32>,
        entries: &[(String, Tensor<f32>)],
    ) -> Result<usize> {
        let mut loaded = 0usize;
        for (name, tensor) in entries {
            if !name.starts_with("backbone.") {
                continue;
            }
            let dst = store.get_mut(name)?;
            if dst.shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint entry `{name}` has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(tensor.data());
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Training hyper-parameters for one classifier.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainProtocol {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub runs: usize,
}

impl Default for TrainProtocol {
    fn default() -> Self {
        TrainProtocol {
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            runs: 5,
        }
    }
}

impl TrainProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.runs < 2 || self.lr <= 0.0 {
            return Err(Error::InvalidArgument(
                "protocol needs epochs >= 1, batch_size >= 1, runs >= 2, lr > 0".into(),
            ));
        }
        Ok(())
    }

    /// Reference epoch counts: custom CNN 20, untrained VGG16 10.
    pub fn default_for(kind: ModelKind) -> Self {
        TrainProtocol {
            epochs: match kind {
                ModelKind::CustomCnn => 20,
                ModelKind::Vgg16 => 10,
            },
            ..Default::default()
        }
    }
}

/// A trained classifier ready for prediction and feature extraction.
pub struct TrainedClassifier {
    pub arch: ModelArch,
    pub store: ParamStore<f32>,
    graphs: HashMap<usize, ClassifierGraph>,
}

struct ClassifierGraph {
    graph: Graph,
    loss: NodeId,
    logits: NodeId,
    penultimate: NodeId,
}

fn classifier_graph(arch: &ModelArch, batch: usize) -> Result<ClassifierGraph> {
    let mut g = Graph::new();
    let x = g.input(
        "x",
        vec![batch, INPUT_CHANNELS, arch.input_size, arch.input_size],
    )?;
    let (logits, penultimate) = arch.emit(&mut g, x)?;
    let labels = g.input("labels", vec![batch])?;
    let loss = g.push(Op::SoftmaxCrossEntropy, &[logits, labels])?;
    g.mark_output("logits", logits);
    g.mark_output("loss", loss);
    Ok(ClassifierGraph {
        graph: g,
        loss,
        logits,
        penultimate,
    })
}

/// Replicate single-channel images across the three input channels.
fn batch_tensor(images: &[&Tensor<f32>], input_size: usize) -> Result<Tensor<f32>> {
    let b = images.len();
    let plane = input_size * input_size;
    let mut out = Tensor::zeros(vec![b, INPUT_CHANNELS, input_size, input_size]);
    for (i, img) in images.iter().enumerate() {
        if img.shape() != [1, input_size, input_size] {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match classifier input {input_size}",
                img.shape()
            )));
        }
        for c in 0..INPUT_CHANNELS {
            out.data_mut()[(i * INPUT_CHANNELS + c) * plane..(i * INPUT_CHANNELS + c + 1) * plane]
                .copy_from_slice(img.data());
        }
    }
    Ok(out)
}

fn ones_masks(arch: &ModelArch, batch: usize, inputs: &mut Inputs<f32>) {
    for (name, dim) in arch.dropout_names_dims() {
        inputs.set(&name, Tensor::ones(vec![batch, dim]));
    }
}

fn sampled_masks(arch: &ModelArch, batch: usize, rng: &mut RngStream, inputs: &mut Inputs<f32>) {
    let keep = 1.0 - DROPOUT_P;
    let scale = (1.0 / keep) as f32;
    for (name, dim) in arch.dropout_names_dims() {
        let mut mask = Tensor::zeros(vec![batch, dim]);
        for v in mask.data_mut() {
            *v = if rng.next_f64() < keep { scale } else { 0.0 };
        }
        inputs.set(&name, mask);
    }
}

impl TrainedClassifier {
    pub fn new(arch: ModelArch, store: ParamStore<f32>) -> Self {
        TrainedClassifier {
            arch,
            store,
            graphs: HashMap::new(),
        }
    }

    fn graph_for(&mut self, batch: usize) -> Result<&ClassifierGraph> {
        if !self.graphs.contains_key(&batch) {
            self.graphs
                .insert(batch, classifier_graph(&self.arch, batch)?);
        }
        Ok(&self.graphs[&batch])
    }

    fn forward_eval(&mut self, images: &[&Tensor<f32>]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let mut preds = Vec::with_capacity(images.len());
        let mut feats = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = batch_tensor(chunk, self.arch.input_size)?;
            let cg = {
                // touch the cache first so the borrow below is immutable
                self.graph_for(chunk.len())?;
                &self.graphs[&chunk.len()]
            };
            let mut inputs = Inputs::new();
            inputs.set("x", x);
            inputs.set("labels", Tensor::zeros(vec![chunk.len()]));
            ones_masks(&self.arch, chunk.len(), &mut inputs);
            let vals =
                evaluate_graph(&cg.graph, &mut self.store, &inputs, &EvalOptions::inference())?;
            let logits = vals.node(cg.logits);
            let penult = vals.node(cg.penultimate);
            let k = logits.shape()[1];
            let pdim = penult.numel() / chunk.len();
            for i in 0..chunk.len() {
                let row = &logits.data()[i * k..(i + 1) * k];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap();
                preds.push(argmax);
                feats.push(
                    penult.data()[i * pdim..(i + 1) * pdim]
                        .iter()
                        .map(|&v| v as f64)
                        .collect(),
                );
            }
        }
        Ok((preds, feats))
    }

    pub fn predict(&mut self, images: &[&Tensor<f32>]) -> Result<Vec<usize>> {
        Ok(self.forward_eval(images)?.0)
    }

    /// Activations feeding the final dense layer (the "penultimate"
    /// features used by the expert FID extractor).
    pub fn penultimate_features(&mut self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_eval(images)?.1)
    }
}

impl LabelPredictor for TrainedClassifier {
    fn predict(&mut self, images: &[&Tensor<f32>]) -> Result<Vec<usize>> {
        TrainedClassifier::predict(self, images)
    }
}

/// Expert-penultimate feature extractor for FID.
pub struct ExpertFeaturizer<'a> {
    pub expert: &'a mut TrainedClassifier,
}

impl Featurizer for ExpertFeaturizer<'_> {
    fn features(&mut self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        self.expert.penultimate_features(images)
    }

    fn name(&self) -> &'static str {
        "expert-penultimate"
    }
}

/// Per-epoch mean training loss, returned alongside the trained model.
pub struct FitResult {
    pub model: TrainedClassifier,
    pub epoch_losses: Vec<f64>,
}

/// Train one model instance on `train` from the given stream.
pub fn fit_classifier(
    kind: ModelKind,
    input_size: usize,
    train: &LabeledDataset,
    protocol: &TrainProtocol,
    rng: &mut RngStream,
) -> Result<FitResult> {
    protocol.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let arch = build_model(kind, input_size)?;
    let mut store = ParamStore::new();
    arch.register(&mut store, rng);
    let mut adam = Adam::new(&store, AdamConfig::default());
    let lr = protocol.lr as f32;

    let mut graphs: HashMap<usize, ClassifierGraph> = HashMap::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(protocol.epochs);
    for _epoch in 0..protocol.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0f64;
        let mut batches = 0usize;
        for batch_idx in order.chunks(protocol.batch_size) {
            let imgs: Vec<&Tensor<f32>> = batch_idx
                .iter()
                .map(|&i| &train.records()[i].pixels)
                .collect();
            let labels: Vec<f32> = batch_idx
                .iter()
                .map(|&i| train.records()[i].class as f32)
                .collect();
            let b = imgs.len();
            if !graphs.contains_key(&b) {
                graphs.insert(b, classifier_graph(&arch, b)?);
            }
            let cg = &graphs[&b];
            let mut inputs = Inputs::new();
            inputs.set("x", batch_tensor(&imgs, input_size)?);
            inputs.set("labels", Tensor::from_vec(vec![b], labels));
            sampled_masks(&arch, b, rng, &mut inputs);
            let vals = evaluate_graph(&cg.graph, &mut store, &inputs, &EvalOptions::training())?;
            let loss = vals.scalar(cg.loss);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("classifier loss ({kind})"),
                });
            }
            backpropagate(&cg.graph, &vals, cg.loss, &mut store)?;
            adam.step(&mut store, lr)?;
            loss_sum += loss as f64;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok(FitResult {
        model: TrainedClassifier::new(arch, store),
        epoch_losses,
    })
}

/// Evaluate on several test sets: metric values are averaged across the
/// sets (confusion counts are summed for reference).
pub fn evaluate_on_test_sets(
    model: &mut TrainedClassifier,
    test_sets: &[LabeledDataset],
    positive_class: usize,
) -> Result<ClassificationMetrics> {
    if test_sets.is_empty() || test_sets.iter().any(|t| t.is_empty()) {
        return Err(Error::Dataset("empty test set".into()));
    }
    let mut per_set = Vec::with_capacity(test_sets.len());
    for set in test_sets {
        let refs: Vec<&Tensor<f32>> = set.records().iter().map(|r| &r.pixels).collect();
        let preds = model.predict(&refs)?;
        let labels: Vec<usize> = set.records().iter().map(|r| r.class).collect();
        per_set.push(classification_metrics(&preds, &labels, positive_class)?);
    }
    let n = per_set.len() as f64;
    let avg = |f: fn(&ClassificationMetrics) -> f64| per_set.iter().map(f).sum::<f64>() / n;
    let mut out = per_set[0];
    out.accuracy = avg(|m| m.accuracy);
    out.precision = avg(|m| m.precision);
    out.recall = avg(|m| m.recall);
    out.f1 = avg(|m| m.f1);
    out.macro_precision = avg(|m| m.macro_precision);
    out.macro_recall = avg(|m| m.macro_recall);
    out.macro_f1 = avg(|m| m.macro_f1);
    out.tp = per_set.iter().map(|m| m.tp).sum();
    out.fp = per_set.iter().map(|m| m.fp).sum();
    out.fn_ = per_set.iter().map(|m| m.fn_).sum();
    out.tn = per_set.iter().map(|m| m.tn).sum();
    out.precision_defined = per_set.iter().all(|m| m.precision_defined);
    out.recall_defined = per_set.iter().all(|m| m.recall_defined);
    out.f1_defined = per_set.iter().all(|m| m.f1_defined);
    Ok(out)
}

/// The five-run protocol: run `i` initializes from
/// `derive_stream(master_seed, i)`, trains with per-run shuffling, and is
/// scored on the test sets (averaged when there are several).
pub fn train_and_evaluate(
    kind: ModelKind,
    input_size: usize,
    train: &LabeledDataset,
    test_sets: &[LabeledDataset],
    protocol: &TrainProtocol,
    positive_class: usize,
    master_seed: u64,
) -> Result<Vec<ClassificationMetrics>> {
    protocol.validate()?;
    if test_sets.is_empty() {
        return Err(Error::Dataset("need at least one test set".into()));
    }
    let mut out = Vec::with_capacity(protocol.runs);
    for run in 0..protocol.runs {
        let mut rng = derive_stream(master_seed, run as u64);
        let fit = fit_classifier(kind, input_size, train, protocol, &mut rng)?;
        let mut model = fit.model;
        out.push(evaluate_on_test_sets(&mut model, test_sets, positive_class)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{Provenance, Record};

    #[test]
    fn custom_cnn_reference_counts_match_table() {
        let arch = build_custom_cnn(128).unwrap();
        let summary = arch.summary();
        let by_name: HashMap<&str, usize> = summary
            .iter()
            .map(|l| (l.name.as_str(), l.params))
            .collect();
        assert_eq!(by_name["conv2d_1"], 1_792);
        assert_eq!(by_name["batch_normalization_1"], 256);
        assert_eq!(by_name["conv2d_2"], 73_856);
        assert_eq!(by_name["batch_normalization_2"], 512);
        assert_eq!(by_name["conv2d_3"], 295_168);
        assert_eq!(by_name["batch_normalization_3"], 1_024);
        assert_eq!(by_name["dense_1"], 16_777_472);
        assert_eq!(by_name["dense_2"], 32_896);
        assert_eq!(by_name["dense_3"], 258);
        assert_eq!(arch.total_params(), 17_183_234);
        assert_eq!(arch.trainable_params(), 17_182_338);
        assert_eq!(arch.non_trainable_params(), 896);
        // flatten row confirms geometry: 16x16x256
        let flat = summary.iter().find(|l| l.name == "flatten").unwrap();
        assert_eq!(flat.output_shape, vec![65_536]);
    }

    #[test]
    fn custom_cnn_desk_size_counts() {
        let arch = build_custom_cnn(32).unwrap();
        let summary = arch.summary();
        let flat = summary.iter().find(|l| l.name == "flatten").unwrap();
        assert_eq!(flat.output_shape, vec![4 * 4 * 256]);
        let dense1 = summary.iter().find(|l| l.name == "dense_1").unwrap();
        assert_eq!(dense1.params, 4_096 * 256 + 256);
        assert!(build_custom_cnn(20).is_err());
    }

    #[test]
    fn vgg16_reference_counts_match_table() {
        let arch = build_vgg16(224).unwrap();
        assert_eq!(arch.backbone_params(), 14_714_688);
        let summary = arch.summary();
        let flat = summary.iter().find(|l| l.name == "flatten").unwrap();
        assert_eq!(flat.output_shape, vec![7 * 7 * 512]);
        let dense = summary.iter().find(|l| l.name == "head.dense").unwrap();
        assert_eq!(dense.params, 12_845_568);
        let dense1 = summary.iter().find(|l| l.name == "head.dense_1").unwrap();
        assert_eq!(dense1.params, 1_026);
        assert_eq!(arch.total_params(), 27_561_282);
        // untrained VGG16: everything trainable
        assert_eq!(arch.non_trainable_params(), 0);
    }

    #[test]
    fn backbone_checkpoint_loading() {
        let arch = build_vgg16(32).unwrap();
        let mut store = ParamStore::new();
        let mut rng = derive_stream(55, 0);
        arch.register(&mut store, &mut rng);

        let marker = Tensor::full(vec![64, 3, 3, 3], 0.125);
        let entries = vec![
            ("backbone.conv1.w".to_string(), marker.clone()),
            ("head.dense.w".to_string(), Tensor::zeros(vec![512, 512])), // ignored: not backbone
        ];
        let loaded = arch.load_backbone(&mut store, &entries).unwrap();
        assert_eq!(loaded, 1);
        assert_eq!(store.get("backbone.conv1.w").unwrap().data()[0], 0.125);

        // shape mismatch rejected
        let bad = vec![("backbone.conv2.w".to_string(), Tensor::zeros(vec![2, 2]))];
        assert!(arch.load_backbone(&mut store, &bad).is_err());
    }

    #[test]
    fn vgg16_desk_size_counts() {
        let arch = build_vgg16(32).unwrap();
        let summary = arch.summary();
        let flat = summary.iter().find(|l| l.name == "flatten").unwrap();
        assert_eq!(flat.output_shape, vec![512]);
        let dense = summary.iter().find(|l| l.name == "head.dense").unwrap();
        assert_eq!(dense.params, 512 * 512 + 512);
        assert!(build_vgg16(48).is_err());
    }

    /// Separable toy set with spatial structure (batch-norm needs real
    /// per-channel variance): class 0 varies vertically, class 1
    /// horizontally.
    fn separable_toy(n_per_class: usize, size: usize) -> LabeledDataset {
        let mut ds = LabeledDataset::new(
            vec!["vertical".into(), "horizontal".into()],
            Provenance::Train,
            size,
            size,
        );
        let mut rng = derive_stream(99, 0);
        let tau = std::f32::consts::TAU;
        for c in 0..2 {
            for i in 0..n_per_class {
                let mut img = Tensor::zeros(vec![1, size, size]);
                for y in 0..size {
                    for x in 0..size {
                        let phase = if c == 0 { y } else { x } as f32;
                        img.data_mut()[y * size + x] = 0.6 * (tau * phase / size as f32).sin()
                            + 0.08 * rng.next_normal_f64() as f32;
                    }
                }
                ds.push(Record {
                    id: format!("toy{c}_{i}"),
                    class: c,
                    pixels: img,
                })
                .unwrap();
            }
        }
        ds
    }

    #[test]
    fn cnn_overfits_separable_toy_set() {
        let ds = separable_toy(4, 16);
        let protocol = TrainProtocol {
            epochs: 50,
            batch_size: 4,
            lr: 1e-3,
            runs: 2,
        };
        let mut rng = derive_stream(100, 0);
        let fit = fit_classifier(ModelKind::CustomCnn, 16, &ds, &protocol, &mut rng).unwrap();
        let mut model = fit.model;
        let m = evaluate_on_test_sets(&mut model, &[ds.clone()], 1).unwrap();
        assert_eq!(m.accuracy, 1.0, "training accuracy after overfit");
    }

    /// Epoch-averaged loss trends down over the first epochs (one
    /// non-monotone step allowed).
    #[test]
    fn loss_decreases_early_for_both_models() {
        let ds = separable_toy(8, 32);
        for (kind, epochs) in [(ModelKind::CustomCnn, 5), (ModelKind::Vgg16, 5)] {
            let protocol = TrainProtocol {
                epochs,
                batch_size: 8,
                lr: 1e-4,
                runs: 2,
            };
            let mut rng = derive_stream(101, 0);
            let fit = fit_classifier(kind, 32, &ds, &protocol, &mut rng).unwrap();
            let losses = &fit.epoch_losses;
            let violations = losses
                .windows(2)
                .filter(|w| w[1] >= w[0])
                .count();
            assert!(
                violations <= 1,
                "{kind}: loss not trending down: {losses:?}"
            );
        }
    }

    #[test]
    fn five_run_protocol_returns_one_record_per_run_deterministically() {
        let ds = separable_toy(3, 16);
        let protocol = TrainProtocol {
            epochs: 2,
            batch_size: 3,
            lr: 1e-3,
            runs: 5,
        };
        let run = || {
            train_and_evaluate(
                ModelKind::CustomCnn,
                16,
                &ds,
                std::slice::from_ref(&ds),
                &protocol,
                1,
                4242,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.accuracy, y.accuracy);
            assert_eq!(x.f1, y.f1);
        }
    }

    #[test]
    fn dropout_only_in_training() {
        // two eval passes agree bitwise (masks are ones at eval)
        let ds = separable_toy(2, 16);
        let protocol = TrainProtocol {
            epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            runs: 2,
        };
        let mut rng = derive_stream(103, 0);
        let fit = fit_classifier(ModelKind::CustomCnn, 16, &ds, &protocol, &mut rng).unwrap();
        let mut model = fit.model;
        let refs: Vec<&Tensor<f32>> = ds.records().iter().map(|r| &r.pixels).collect();
        let a = model.predict(&refs).unwrap();
        let b = model.predict(&refs).unwrap();
        assert_eq!(a, b);
    }
}
