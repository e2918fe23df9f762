//! Dataset construction: random and farthest-point (greedy-K) subset
//! selection, the small/imbalanced scenario builders, and synthetic-mix
//! assembly.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Original,
    Train,
    Test,
    SyntheticDdpm,
    SyntheticPggan,
    Mixed,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::Original => "original",
            Provenance::Train => "train",
            Provenance::Test => "test",
            Provenance::SyntheticDdpm => "synthetic-ddpm",
            Provenance::SyntheticPggan => "synthetic-pggan",
            Provenance::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

/// One labeled image: single-channel pixels in `[-1, 1]`, shape `[1,H,W]`.
#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    /// Index into the dataset's `class_names`.
    pub class: usize,
    pub pixels: Tensor<f32>,
}

/// Ordered collection of labeled images with uniform geometry.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    records: Vec<Record>,
    class_names: Vec<String>,
    provenance: Provenance,
    height: usize,
    width: usize,
}

impl LabeledDataset {
    pub fn new(class_names: Vec<String>, provenance: Provenance, height: usize, width: usize) -> Self {
        LabeledDataset {
            records: Vec::new(),
            class_names,
            provenance,
            height,
            width,
        }
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.class >= self.class_names.len() {
            return Err(Error::Dataset(format!(
                "record `{}` has class index {} but only {} classes exist",
                record.id,
                record.class,
                self.class_names.len()
            )));
        }
        if record.pixels.shape() != [1, self.height, self.width] {
            return Err(Error::Dataset(format!(
                "record `{}` has shape {:?}, dataset is {}x{}",
                record.id,
                record.pixels.shape(),
                self.height,
                self.width
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices per class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_names.len()];
        for (i, r) in self.records.iter().enumerate() {
            by_class[r.class].push(i);
        }
        by_class
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.indices_by_class().iter().map(Vec::len).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Verify id uniqueness (an invariant for every persisted dataset).
    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate image id `{}`", r.id)));
            }
        }
        Ok(())
    }

    /// Subset by record indices, preserving the given order.
    pub fn subset(&self, indices: &[usize], provenance: Provenance) -> LabeledDataset {
        let mut out = LabeledDataset::new(
            self.class_names.clone(),
            provenance,
            self.height,
            self.width,
        );
        for &i in indices {
            out.records.push(self.records[i].clone());
        }
        out
    }
}

/// `kind` selects between the paper's two scarcity regimes; counts are the
/// paper-scale defaults and `desk_factor` scales all of them down
/// uniformly so the full protocol runs in minutes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub sampling: SamplingMethod,
    pub n_small_per_class: usize,
    pub n_major: usize,
    pub n_minor: usize,
    pub test_sets: usize,
    pub n_major_test: usize,
    pub n_minor_test: usize,
    pub desk_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Small,
    Imbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    Random,
    GreedyK,
}

impl std::fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMethod::Random => "random",
            SamplingMethod::GreedyK => "greedy_k",
        })
    }
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            kind: ScenarioKind::Small,
            sampling: SamplingMethod::Random,
            n_small_per_class: 200,
            n_major: 1500,
            n_minor: 200,
            test_sets: 3,
            n_major_test: 300,
            n_minor_test: 100,
            desk_factor: 1.0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.desk_factor <= 0.0 {
            return Err(Error::InvalidArgument("desk_factor must be positive".into()));
        }
        if self.test_sets == 0 {
            return Err(Error::InvalidArgument("test_sets must be at least 1".into()));
        }
        Ok(())
    }

    fn scaled(&self, n: usize) -> usize {
        ((n as f64 * self.desk_factor).round() as usize).max(1)
    }

    pub fn train_counts(&self, n_classes: usize, minority: usize) -> Vec<usize> {
        match self.kind {
            ScenarioKind::Small => vec![self.scaled(self.n_small_per_class); n_classes],
            ScenarioKind::Imbalanced => (0..n_classes)
                .map(|c| {
                    if c == minority {
                        self.scaled(self.n_minor)
                    } else {
                        self.scaled(self.n_major)
                    }
                })
                .collect(),
        }
    }

    pub fn test_counts(&self, n_classes: usize, minority: usize) -> Vec<usize> {
        (0..n_classes)
            .map(|c| {
                if c == minority {
                    self.scaled(self.n_minor_test)
                } else {
                    self.scaled(self.n_major_test)
                }
            })
            .collect()
    }
}

/// Scenario output: one training set and one or more test sets.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub train: LabeledDataset,
    pub test_sets: Vec<LabeledDataset>,
}

/// Uniform per-class selection without replacement. The remainder keeps
/// dataset order; the selection order follows the draw order.
pub fn random_split(
    dataset: &LabeledDataset,
    per_class_counts: &[usize],
    rng: &mut RngStream,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let by_class = dataset.indices_by_class();
    if per_class_counts.len() != by_class.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} per-class counts, got {}",
            by_class.len(),
            per_class_counts.len()
        )));
    }
    let mut selected_idx = Vec::new();
    let mut selected_set = HashSet::new();
    for (class, &count) in per_class_counts.iter().enumerate() {
        let pool = &by_class[class];
        if count > pool.len() {
            return Err(Error::Dataset(format!(
                "cannot select {count} of {} available `{}` records",
                pool.len(),
                dataset.class_names()[class]
            )));
        }
        for pick in rng.sample_indices(pool.len(), count) {
            selected_idx.push(pool[pick]);
            selected_set.insert(pool[pick]);
        }
    }
    let remainder_idx: Vec<usize> = (0..dataset.len())
        .filter(|i| !selected_set.contains(i))
        .collect();
    Ok((
        dataset.subset(&selected_idx, Provenance::Train),
        dataset.subset(&remainder_idx, dataset.provenance()),
    ))
}

/// Squared Euclidean distance over flattened pixels, accumulated in f64.
fn dist2(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn dist2_to_point(a: &Tensor<f32>, point: &[f64]) -> f64 {
    a.data()
        .iter()
        .zip(point)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// Farthest-point traversal over one index pool. Seed: maximum distance to
/// the pool centroid; then each pick maximizes its minimum distance to the
/// selected set. Ties resolve to the lowest index.
fn farthest_point(dataset: &LabeledDataset, pool: &[usize], k: usize) -> Vec<usize> {
    let n = pool.len();
    let dim = dataset.records()[pool[0]].pixels.numel();
    let mut centroid = vec![0.0f64; dim];
    for &i in pool {
        for (c, &p) in centroid.iter_mut().zip(dataset.records()[i].pixels.data()) {
            *c += p as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);

    let mut seed = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (j, &i) in pool.iter().enumerate() {
        let d = dist2_to_point(&dataset.records()[i].pixels, &centroid);
        if d > best {
            best = d;
            seed = j;
        }
    }

    let mut taken = vec![false; n];
    taken[seed] = true;
    let mut selected = vec![pool[seed]];
    let mut min_d: Vec<f64> = pool
        .iter()
        .map(|&i| dist2(&dataset.records()[i].pixels, &dataset.records()[pool[seed]].pixels))
        .collect();
    while selected.len() < k {
        let mut pick = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            if !taken[j] && min_d[j] > best {
                best = min_d[j];
                pick = j;
            }
        }
        taken[pick] = true;
        selected.push(pool[pick]);
        let newest = pool[pick];
        for (j, &i) in pool.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = dist2(&dataset.records()[i].pixels, &dataset.records()[newest].pixels);
            if d < min_d[j] {
                min_d[j] = d;
            }
        }
    }
    selected
}

/// Greedy-K (farthest-point) selection of `k` record indices over the
/// whole dataset, pixel-space Euclidean distance.
pub fn greedy_k_select(dataset: &LabeledDataset, k: usize) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("greedy_k_select on empty dataset".into()));
    }
    if k == 0 || k > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range 1..={}",
            dataset.len()
        )));
    }
    let pool: Vec<usize> = (0..dataset.len()).collect();
    Ok(farthest_point(dataset, &pool, k))
}

/// Greedy-K applied independently within each class.
pub fn greedy_k_select_per_class(
    dataset: &LabeledDataset,
    per_class_counts: &[usize],
) -> Result<Vec<usize>> {
    let by_class = dataset.indices_by_class();
    if per_class_counts.len() != by_class.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} per-class counts, got {}",
            by_class.len(),
            per_class_counts.len()
        )));
    }
    let mut selected = Vec::new();
    for (class, &count) in per_class_counts.iter().enumerate() {
        let pool = &by_class[class];
        if count > pool.len() {
            return Err(Error::Dataset(format!(
                "cannot select {count} of {} available `{}` records",
                pool.len(),
                dataset.class_names()[class]
            )));
        }
        if count > 0 {
            selected.extend(farthest_point(dataset, pool, count));
        }
    }
    Ok(selected)
}

/// Build the scenario's train set and its (disjoint) test sets.
///
/// Small: balanced train, one test set = the full remainder. Imbalanced:
/// skewed train and `test_sets` pairwise-disjoint test sets drawn at the
/// scaled `(n_major_test, n_minor_test)` shape; consumers average metrics
/// over them.
pub fn build_scenario(
    dataset: &LabeledDataset,
    spec: &ScenarioSpec,
    rng: &mut RngStream,
) -> Result<Scenario> {
    spec.validate()?;
    let n_classes = dataset.class_names().len();
    if n_classes < 2 {
        return Err(Error::Dataset("scenario needs at least two classes".into()));
    }
    let minority = minority_class(dataset);
    let train_counts = spec.train_counts(n_classes, minority);

    let (train, remainder) = match spec.sampling {
        SamplingMethod::Random => random_split(dataset, &train_counts, rng)?,
        SamplingMethod::GreedyK => {
            let selected = greedy_k_select_per_class(dataset, &train_counts)?;
            let set: HashSet<usize> = selected.iter().copied().collect();
            let remainder_idx: Vec<usize> =
                (0..dataset.len()).filter(|i| !set.contains(i)).collect();
            (
                dataset.subset(&selected, Provenance::Train),
                dataset.subset(&remainder_idx, dataset.provenance()),
            )
        }
    };

    let test_sets = match spec.kind {
        ScenarioKind::Small => {
            vec![remainder.subset(&(0..remainder.len()).collect::<Vec<_>>(), Provenance::Test)]
        }
        ScenarioKind::Imbalanced => {
            let test_counts = spec.test_counts(n_classes, minority);
            let mut sets = Vec::with_capacity(spec.test_sets);
            let mut pool = remainder;
            for _ in 0..spec.test_sets {
                let (set, rest) = random_split(&pool, &test_counts, rng)?;
                sets.push(set.with_provenance(Provenance::Test));
                pool = rest;
            }
            sets
        }
    };

    Ok(Scenario { train, test_sets })
}

/// The class with the fewest records (PNEUMONIA analog); ties resolve to
/// the highest class index so a balanced corpus treats `class_1` as the
/// minority.
pub fn minority_class(dataset: &LabeledDataset) -> usize {
    let counts = dataset.class_counts();
    let mut best = 0usize;
    for (c, &n) in counts.iter().enumerate() {
        if n <= counts[best] {
            best = c;
        }
    }
    best
}

/// Concatenate synthetic images onto a training set. `add_counts[i]` picks
/// the first `n` records from `synthetic[i]`.
pub fn mix_with_synthetic(
    train: &LabeledDataset,
    synthetic: &[&LabeledDataset],
    add_counts: &[usize],
) -> Result<LabeledDataset> {
    let mut out = train.clone().with_provenance(Provenance::Mixed);
    for (set, &count) in synthetic.iter().zip(add_counts) {
        if count == 0 {
            continue;
        }
        if set.height() != train.height() || set.width() != train.width() {
            return Err(Error::Dataset(format!(
                "synthetic geometry {}x{} does not match train {}x{}",
                set.height(),
                set.width(),
                train.height(),
                train.width()
            )));
        }
        if count > set.len() {
            return Err(Error::Dataset(format!(
                "requested {count} synthetic images, only {} available",
                set.len()
            )));
        }
        for r in &set.records()[..count] {
            let class = train
                .class_names()
                .iter()
                .position(|c| c == &set.class_names()[r.class])
                .ok_or_else(|| {
                    Error::Dataset(format!(
                        "synthetic class `{}` unknown to train set",
                        set.class_names()[r.class]
                    ))
                })?;
            out.push(Record {
                id: r.id.clone(),
                class,
                pixels: r.pixels.clone(),
            })?;
        }
    }
    out.check_unique_ids()?;
    Ok(out)
}

/// Newline-delimited ids, for audit files.
pub fn write_id_list(dataset: &LabeledDataset, path: &std::path::Path) -> Result<()> {
    let mut text = String::new();
    for id in dataset.ids() {
        text.push_str(id);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
