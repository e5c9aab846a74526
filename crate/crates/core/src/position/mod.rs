//! Bounding-box prediction for a target object from its modified relationships.
//!
//! Each incident triplet is encoded as the concatenation of the subject and
//! object category embeddings, the predicate embedding, the reference box and
//! a flag telling whether the target is the subject. A recurrent cell reads
//! the triplets in order and a small fully connected head maps the final
//! hidden state to four box coordinates.

mod model;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use model::{Dense, EncodedStep, Net};

use crate::bbox::BBox;
use crate::nn::{Adam, HasParams, Param};
use crate::scenegraph::{extract_modified_triplets, GraphError, SceneGraph, Triplet};

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_TRIPLETS: usize = 5;
pub const CHECKPOINT_FORMAT: &str = "sgedit-position";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PositionError {
    #[error("empty triplet list")]
    EmptyTriplets,
    #[error("{got} triplets exceed the configured maximum {max}")]
    TooManyTriplets { got: usize, max: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}: {loss}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset line {line}: {message}")]
    DatasetLine { line: usize, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionConfig {
    /// `false` drops both category embeddings from the input (CLEVR mode).
    pub use_category_embeddings: bool,
    pub d_obj: usize,
    pub d_pred: usize,
    pub d_h: usize,
    pub hidden: Vec<usize>,
    pub max_triplets: usize,
}

impl Default for PositionConfig {
    fn default() -> Self {
        PositionConfig {
            use_category_embeddings: true,
            d_obj: 32,
            d_pred: 16,
            d_h: 128,
            hidden: vec![64, 64],
            max_triplets: DEFAULT_MAX_TRIPLETS,
        }
    }
}

impl PositionConfig {
    pub fn clevr() -> Self {
        PositionConfig {
            use_category_embeddings: false,
            ..Default::default()
        }
    }
}

/// Token tables; index 0 is always the shared unknown token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
}

impl Vocabulary {
    pub fn new(categories: impl IntoIterator<Item = String>, predicates: impl IntoIterator<Item = String>) -> Self {
        let table = |items: BTreeSet<String>| {
            std::iter::once(UNKNOWN_TOKEN.to_string())
                .chain(items.into_iter().filter(|s| s != UNKNOWN_TOKEN))
                .collect()
        };
        Vocabulary {
            categories: table(categories.into_iter().collect()),
            predicates: table(predicates.into_iter().collect()),
        }
    }

    pub fn from_examples(examples: &[TrainingExample]) -> Self {
        let ts = examples.iter().flat_map(|e| &e.triplets);
        Vocabulary::new(
            ts.clone()
                .flat_map(|t| [t.subject_category.clone(), t.object_category.clone()]),
            ts.map(|t| t.predicate.clone()),
        )
    }

    fn index(table: &[String], token: &str) -> usize {
        table.iter().position(|s| s == token).unwrap_or(0)
    }

    pub fn category(&self, token: &str) -> usize {
        Self::index(&self.categories, token)
    }

    pub fn predicate(&self, token: &str) -> usize {
        Self::index(&self.predicates, token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub triplets: Vec<Triplet>,
    pub target_bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct PositionModel {
    pub config: PositionConfig,
    pub vocab: Vocabulary,
    net: Net,
}

impl PositionModel {
    pub fn new(config: PositionConfig, vocab: Vocabulary, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cats = if config.use_category_embeddings { 2 * config.d_obj } else { 0 };
        let d_in = cats + config.d_pred + 5;
        let categories = Param::uniform(vocab.categories.len() * config.d_obj, 0.5, &mut rng);
        let predicates = Param::uniform(vocab.predicates.len() * config.d_pred, 0.5, &mut rng);
        let lstm = Dense::new(d_in + config.d_h, 4 * config.d_h, &mut rng);
        let mut hidden = Vec::new();
        let mut width = config.d_h;
        for &h in &config.hidden {
            hidden.push(Dense::new(width, h, &mut rng));
            width = h;
        }
        let head = Dense::new(width, 4, &mut rng);
        let net = Net {
            use_categories: config.use_category_embeddings,
            d_obj: config.d_obj,
            d_pred: config.d_pred,
            d_h: config.d_h,
            categories,
            predicates,
            lstm,
            hidden,
            head,
        };
        PositionModel { config, vocab, net }
    }

    pub fn input_len(&self) -> usize {
        self.net.input_len()
    }

    fn encode_step(&self, t: &Triplet, rng: Option<(&mut ChaCha8Rng, f64)>) -> EncodedStep {
        let mut s = self.vocab.category(&t.subject_category);
        let mut o = self.vocab.category(&t.object_category);
        let mut p = self.vocab.predicate(&t.predicate);
        if let Some((rng, rate)) = rng {
            if rate > 0.0 {
                for tok in [&mut s, &mut o, &mut p] {
                    if rng.gen_bool(rate) {
                        *tok = 0;
                    }
                }
            }
        }
        self.net.encode(s, o, p, t.reference_bbox.to_array(), t.target_is_subject)
    }

    /// The input vector for one triplet.
    pub fn encode_triplet(&self, t: &Triplet) -> Vec<f64> {
        self.encode_step(t, None).x
    }

    /// Tokens of `triplets` missing from the vocabulary (encoded as unknown).
    pub fn unknown_tokens(&self, triplets: &[Triplet]) -> Vec<String> {
        let mut out = BTreeSet::new();
        for t in triplets {
            for c in [&t.subject_category, &t.object_category] {
                if self.vocab.category(c) == 0 {
                    out.insert(c.clone());
                }
            }
            if self.vocab.predicate(&t.predicate) == 0 {
                out.insert(t.predicate.clone());
            }
        }
        out.into_iter().collect()
    }

    fn check_len(&self, triplets: &[Triplet]) -> Result<(), PositionError> {
        if triplets.is_empty() {
            return Err(PositionError::EmptyTriplets);
        }
        if triplets.len() > self.config.max_triplets {
            return Err(PositionError::TooManyTriplets {
                got: triplets.len(),
                max: self.config.max_triplets,
            });
        }
        Ok(())
    }

    /// Head output before clamping.
    pub fn raw_output(&self, triplets: &[Triplet]) -> Result<[f64; 4], PositionError> {
        self.check_len(triplets)?;
        let seq: Vec<EncodedStep> = triplets.iter().map(|t| self.encode_step(t, None)).collect();
        let (out, _) = self.net.forward(&[seq]);
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Predicted box, clamped to the unit square with ordered corners.
    pub fn predict(&self, triplets: &[Triplet]) -> Result<BBox, PositionError> {
        Ok(BBox::clamped_ordered(self.raw_output(triplets)?))
    }

    fn zero_grad(&mut self) {
        self.net.visit_params(&mut |p| p.zero_grad());
    }

    /// Mean squared error over a batch (averaged over coordinates and examples)
    /// with parameter gradients accumulated.
    fn batch_loss_grad(&mut self, batch: &[&TrainingExample], mut dropout: Option<(&mut ChaCha8Rng, f64)>) -> f64 {
        let seqs: Vec<Vec<EncodedStep>> = batch
            .iter()
            .map(|e| {
                e.triplets
                    .iter()
                    .map(|t| self.encode_step(t, dropout.as_mut().map(|(r, p)| (&mut **r, *p))))
                    .collect()
            })
            .collect();
        let (out, cache) = self.net.forward(&seqs);
        let n = (4 * batch.len()) as f64;
        let mut dout = vec![0.0; out.len()];
        let mut loss = 0.0;
        for (b, e) in batch.iter().enumerate() {
            for (k, target) in e.target_bbox.to_array().iter().enumerate() {
                let d = out[b * 4 + k] - target;
                loss += d * d / n;
                dout[b * 4 + k] = 2.0 * d / n;
            }
        }
        self.net.backward(&cache, &dout);
        loss
    }

    /// MSE on a dataset without touching gradients' effect on parameters.
    pub fn mse(&self, dataset: &[TrainingExample]) -> Result<f64, PositionError> {
        if dataset.is_empty() {
            return Err(PositionError::EmptyDataset);
        }
        let mut total = 0.0;
        for e in dataset {
            let out = self.raw_output(&e.triplets)?;
            for (o, t) in out.iter().zip(e.target_bbox.to_array()) {
                total += (o - t) * (o - t);
            }
        }
        Ok(total / (4 * dataset.len()) as f64)
    }

    /// Flat copy of all parameters, in a fixed order.
    pub fn parameters(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.net.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn named_params(&mut self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let mut names = param_names(&self.config).into_iter();
        self.net.visit_params(&mut |p| out.push((names.next().expect("name per param"), p.value.clone())));
        out
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocabulary: self.vocab.clone(),
            params: self.named_params().into_iter().collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, PositionError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(PositionError::Checkpoint(format!(
                "unsupported format {} v{}",
                ck.format, ck.version
            )));
        }
        let mut model = PositionModel::new(ck.config.clone(), ck.vocabulary.clone(), 0);
        let names = param_names(&ck.config);
        let mut i = 0;
        let mut err = None;
        model.net.visit_params(&mut |p| {
            let name = &names[i];
            i += 1;
            match ck.params.get(name) {
                Some(v) if v.len() == p.value.len() => p.value.clone_from(v),
                Some(v) => {
                    err.get_or_insert(format!("{name}: expected {} values, found {}", p.value.len(), v.len()));
                }
                None => {
                    err.get_or_insert(format!("missing parameter {name}"));
                }
            }
        });
        if ck.params.len() != names.len() {
            err.get_or_insert(format!("expected {} parameters, found {}", names.len(), ck.params.len()));
        }
        match err {
            Some(e) => Err(PositionError::Checkpoint(e)),
            None => Ok(model),
        }
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<(), PositionError> {
        let text = serde_json::to_string(&self.to_checkpoint()).map_err(|e| PositionError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PositionError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| PositionError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ck)
    }
}

fn param_names(config: &PositionConfig) -> Vec<String> {
    let mut names = vec![
        "category_embedding".to_string(),
        "predicate_embedding".to_string(),
        "lstm.weight".to_string(),
        "lstm.bias".to_string(),
    ];
    for i in 0..config.hidden.len() {
        names.push(format!("fc{i}.weight"));
        names.push(format!("fc{i}.bias"));
    }
    names.push("head.weight".to_string());
    names.push("head.bias".to_string());
    names
}

/// Self-describing model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: PositionConfig,
    pub vocabulary: Vocabulary,
    pub params: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability of replacing each token with the unknown token while training.
    pub unknown_dropout: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            batch: 64,
            learning_rate: 1e-3,
            seed: 0,
            unknown_dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Fits the model to the targets with Adam on the mean squared error of the
/// raw head output. Deterministic for a given seed.
pub fn train(
    model: &mut PositionModel,
    dataset: &[TrainingExample],
    opts: &TrainOptions,
) -> Result<TrainReport, PositionError> {
    if dataset.is_empty() {
        return Err(PositionError::EmptyDataset);
    }
    for e in dataset {
        model.check_len(&e.triplets)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(opts.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    let batch_size = opts.batch.max(1);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            model.zero_grad();
            let loss = model.batch_loss_grad(&batch, Some((&mut rng, opts.unknown_dropout)));
            if !loss.is_finite() {
                return Err(PositionError::NonFinite {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            opt.step(&mut model.net);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
    }
    Ok(TrainReport { loss_curve: curve })
}

/// Per-corner mean absolute error in pixels at `resolution`, summarized as
/// the mean over the four corners and their standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_pixels: f64,
    pub std_pixels: f64,
    pub per_corner: [f64; 4],
    pub resolution: usize,
    pub examples: usize,
    /// Fraction of examples whose predicted center satisfies every triplet.
    pub relation_satisfaction: f64,
}

pub fn evaluate(model: &PositionModel, dataset: &[TrainingExample], resolution: usize) -> Result<EvalReport, PositionError> {
    if dataset.is_empty() {
        return Err(PositionError::EmptyDataset);
    }
    let mut per = [0.0; 4];
    let mut satisfied = 0usize;
    for e in dataset {
        let p = model.predict(&e.triplets)?;
        for ((acc, a), b) in per.iter_mut().zip(p.to_array()).zip(e.target_bbox.to_array()) {
            *acc += (a - b).abs() * resolution as f64;
        }
        satisfied += usize::from(relations_satisfied(p, &e.triplets));
    }
    let n = dataset.len() as f64;
    let per_corner = per.map(|v| v / n);
    let mean = per_corner.iter().sum::<f64>() / 4.0;
    let var = per_corner.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    Ok(EvalReport {
        mae_pixels: mean,
        std_pixels: var.sqrt(),
        per_corner,
        resolution,
        examples: dataset.len(),
        relation_satisfaction: satisfied as f64 / n,
    })
}

/// Every spatial triplet holds for the predicted center; triplets with other
/// predicates are ignored.
pub fn relations_satisfied(predicted: BBox, triplets: &[Triplet]) -> bool {
    triplets.iter().all(|t| {
        crate::synth::relation_holds(&t.predicate, predicted, t.reference_bbox, t.target_is_subject).unwrap_or(true)
    })
}

/// One example per pair; pairs whose target has no incident edge are skipped and counted.
pub fn build_dataset(
    pairs: &[(SceneGraph, SceneGraph, String)],
    max_triplets: usize,
) -> Result<(Vec<TrainingExample>, usize), PositionError> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (original, modified, target) in pairs {
        match extract_modified_triplets(original, modified, target, max_triplets) {
            Ok(triplets) => {
                let target_bbox = modified
                    .node(target)
                    .map(|n| n.bbox)
                    .ok_or_else(|| GraphError::NodeNotFound(target.clone()))?;
                out.push(TrainingExample { triplets, target_bbox });
            }
            Err(GraphError::NoIncidentEdges(_)) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((out, skipped))
}

pub fn write_jsonl<W: Write>(examples: &[TrainingExample], mut out: W) -> Result<(), PositionError> {
    for e in examples {
        let line = serde_json::to_string(e).map_err(|err| PositionError::Checkpoint(err.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TrainingExample>, PositionError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: TrainingExample = serde_json::from_str(&line).map_err(|err| PositionError::DatasetLine {
            line: i + 1,
            message: err.to_string(),
        })?;
        if e.triplets.is_empty() {
            return Err(PositionError::DatasetLine {
                line: i + 1,
                message: "example has no triplets".into(),
            });
        }
        out.push(e);
    }
    Ok(out)
}
