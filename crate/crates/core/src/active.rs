//! Pool-based active learning: informativeness measures, committees and the
//! cumulative retraining protocol.
//!
//! Every score is oriented so that a higher value marks a more informative
//! sample.

use std::fmt;
use std::str::FromStr;

use drivestyle_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    build_model, model_input, train, Architecture, ImageTransform, Model, ModelSpec, TrainConfig,
};
use crate::recurrence::{channel_epsilons, EPSILON_STD_FRACTION};
use crate::seeds::{self, tag};
use crate::signal::{fit_scaler, Window};

/// Clamp applied to member probabilities inside KL terms.
pub const KL_CLAMP: f64 = 1e-12;
/// Recorded learning-curve points per run.
pub const ITERATIONS: usize = 14;
/// Members of a dropout committee.
pub const DROPOUT_COMMITTEE_SIZE: usize = 5;
/// Architectures of the heterogeneous committee.
pub const HETEROGENEOUS_MEMBERS: [Architecture; 3] = [
    Architecture::Cnn1d,
    Architecture::Lstm,
    Architecture::CnnLstm,
];

fn rows(posteriors: &Tensor) -> Result<std::slice::ChunksExact<'_, f64>> {
    if posteriors.rank() != 2 {
        return Err(Error::Config(format!(
            "posteriors must be a [samples, classes] matrix, got {:?}",
            posteriors.shape()
        )));
    }
    Ok(posteriors.data().chunks_exact(posteriors.shape()[1].max(1)))
}

/// `1 − max_y P(y|x)`.
pub fn least_confidence_scores(posteriors: &Tensor) -> Result<Vec<f64>> {
    Ok(rows(posteriors)?
        .map(|r| 1.0 - r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// `−(P(ŷ₁|x) − P(ŷ₂|x))` for the two most probable classes.
pub fn margin_scores(posteriors: &Tensor) -> Result<Vec<f64>> {
    if posteriors.rank() == 2 && posteriors.shape()[1] < 2 {
        return Err(Error::Config("margin needs at least two classes".into()));
    }
    Ok(rows(posteriors)?
        .map(|r| {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &p in r {
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            -(first - second)
        })
        .collect())
}

fn entropy(dist: impl Iterator<Item = f64>) -> f64 {
    -dist.filter(|p| *p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `−Σ_y P(y|x) ln P(y|x)` with `0 · ln 0 = 0`.
pub fn entropy_scores(posteriors: &Tensor) -> Result<Vec<f64>> {
    Ok(rows(posteriors)?
        .map(|r| entropy(r.iter().copied()))
        .collect())
}

fn check_members(members: &[Tensor]) -> Result<(usize, usize)> {
    if members.len() < 2 {
        return Err(Error::Config(format!(
            "a committee needs at least two members, got {}",
            members.len()
        )));
    }
    let shape = members[0].shape();
    if shape.len() != 2 {
        return Err(Error::Config(format!(
            "posteriors must be a [samples, classes] matrix, got {shape:?}"
        )));
    }
    if let Some(bad) = members.iter().find(|m| m.shape() != shape) {
        return Err(Error::Config(format!(
            "committee posteriors disagree in shape: {shape:?} vs {:?}",
            bad.shape()
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Entropy of the members' hard votes.
pub fn vote_entropy_scores(members: &[Tensor]) -> Result<Vec<f64>> {
    let (m, k) = check_members(members)?;
    let n = members.len() as f64;
    Ok((0..m)
        .map(|i| {
            let mut votes = vec![0usize; k];
            for member in members {
                votes[argmax(&member.data()[i * k..(i + 1) * k])] += 1;
            }
            entropy(votes.iter().map(|&v| v as f64 / n))
        })
        .collect())
}

/// Mean KL divergence of each member from the consensus (member mean).
pub fn kl_disagreement_scores(members: &[Tensor]) -> Result<Vec<f64>> {
    let (m, k) = check_members(members)?;
    let n = members.len() as f64;
    Ok((0..m)
        .map(|i| {
            let row = |member: &Tensor| -> Vec<f64> {
                member.data()[i * k..(i + 1) * k]
                    .iter()
                    .map(|p| p.max(KL_CLAMP))
                    .collect()
            };
            let clamped: Vec<Vec<f64>> = members.iter().map(row).collect();
            let consensus: Vec<f64> = (0..k)
                .map(|y| clamped.iter().map(|r| r[y]).sum::<f64>() / n)
                .collect();
            let total: f64 = members
                .iter()
                .zip(&clamped)
                .map(|(member, c)| {
                    let raw = &member.data()[i * k..(i + 1) * k];
                    (0..k)
                        .filter(|&y| raw[y] > 0.0)
                        .map(|y| c[y] * (c[y] / consensus[y]).ln())
                        .sum::<f64>()
                })
                .sum();
            (total / n).max(0.0)
        })
        .collect())
}

/// The `n` ids with the highest scores; equal scores go to the lower id.
pub fn select_batch(scores: &[f64], ids: &[usize], n: usize) -> Result<Vec<usize>> {
    if scores.len() != ids.len() {
        return Err(Error::Dimension {
            what: "selection scores",
            expected: ids.len(),
            actual: scores.len(),
        });
    }
    if n > ids.len() {
        return Err(Error::Config(format!(
            "cannot select {n} samples from a pool of {}",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    Ok(order[..n].iter().map(|&i| ids[i]).collect())
}

/// A set of models whose disagreement scores unlabeled samples.
#[derive(Clone, Debug)]
pub enum Committee {
    /// Independently trained models of different architectures.
    Heterogeneous(Vec<Model>),
    /// One parent evaluated with dropout active, once per member seed.
    Dropout { parent: Box<Model>, seeds: Vec<u64> },
}

impl Committee {
    pub fn heterogeneous(members: Vec<Model>) -> Result<Self> {
        let archs: Vec<Architecture> = members.iter().map(|m| m.spec.architecture).collect();
        if archs != HETEROGENEOUS_MEMBERS {
            return Err(Error::Config(format!(
                "heterogeneous committee must be {HETEROGENEOUS_MEMBERS:?}, got {archs:?}"
            )));
        }
        Ok(Committee::Heterogeneous(members))
    }

    pub fn len(&self) -> usize {
        match self {
            Committee::Heterogeneous(m) => m.len(),
            Committee::Dropout { seeds, .. } => seeds.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Member posteriors on the inputs of each member. Heterogeneous
    /// members all read `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        match self {
            Committee::Heterogeneous(members) => {
                members.iter().map(|m| m.predict_proba(x)).collect()
            }
            Committee::Dropout { parent, seeds } => seeds
                .iter()
                .map(|&s| parent.predict_proba_dropout(x, &mut seeds::rng(s, &[])))
                .collect(),
        }
    }
}

/// Committee of `k` dropout masks over `parent`, one fixed seed per member.
pub fn make_dropout_committee(parent: &Model, k: usize, member_seeds: &[u64]) -> Result<Committee> {
    if parent.spec.dropout_rate.is_none() {
        return Err(Error::Config(format!(
            "{} has no dropout layer for a dropout committee",
            parent.spec.architecture
        )));
    }
    if member_seeds.len() != k || k < 2 {
        return Err(Error::Config(format!(
            "dropout committee of {k} members needs {k} ≥ 2 seeds, got {}",
            member_seeds.len()
        )));
    }
    Ok(Committee::Dropout {
        parent: Box::new(parent.clone()),
        seeds: member_seeds.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "lc")]
    LeastConfidence,
    #[serde(rename = "margin")]
    Margin,
    #[serde(rename = "entropy")]
    Entropy,
    #[serde(rename = "qbc-vote")]
    QbcVote,
    #[serde(rename = "qbc-kl")]
    QbcKl,
    #[serde(rename = "add-vote")]
    AddVote,
    #[serde(rename = "add-kl")]
    AddKl,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Random,
        Strategy::LeastConfidence,
        Strategy::Margin,
        Strategy::Entropy,
        Strategy::QbcVote,
        Strategy::QbcKl,
        Strategy::AddVote,
        Strategy::AddKl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::LeastConfidence => "lc",
            Strategy::Margin => "margin",
            Strategy::Entropy => "entropy",
            Strategy::QbcVote => "qbc-vote",
            Strategy::QbcKl => "qbc-kl",
            Strategy::AddVote => "add-vote",
            Strategy::AddKl => "add-kl",
        }
    }

    fn is_heterogeneous(self) -> bool {
        matches!(self, Strategy::QbcVote | Strategy::QbcKl)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Split sizes of the protocol for a dataset of `n` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSizes {
    pub total: usize,
    pub test: usize,
    pub initial: usize,
    pub batch: usize,
}

impl ProtocolSizes {
    /// Test 20%, initial labeled 10%, batches of 5%.
    pub fn for_pool(total: usize) -> Result<Self> {
        let sizes = Self {
            total,
            test: total / 5,
            initial: total / 10,
            batch: total / 20,
        };
        if sizes.batch == 0 || sizes.test == 0 {
            return Err(Error::Config(format!(
                "{total} windows are too few for {ITERATIONS} increments of 5%"
            )));
        }
        Ok(sizes)
    }

    /// Labeled count after `iteration` batches.
    pub fn labeled_after(&self, iteration: usize) -> usize {
        self.initial + iteration * self.batch
    }

    pub fn labeled_fraction(&self, iteration: usize) -> f64 {
        self.labeled_after(iteration) as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlConfig {
    pub strategy: Strategy,
    pub architecture: Architecture,
    pub seed: u64,
    pub train: TrainConfig,
    /// Parameter budget applied to every model, if any.
    pub budget: Option<usize>,
    pub dropout_rate: Option<f64>,
    /// Side of the recurrence-plot images for image models.
    pub image_side: Option<usize>,
}

impl Default for AlConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Random,
            architecture: Architecture::Cnn1d,
            seed: 0,
            train: TrainConfig::default(),
            budget: None,
            dropout_rate: Some(crate::models::DEFAULT_DROPOUT),
            image_side: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub labeled_count: usize,
    pub labeled_fraction: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub strategy: Strategy,
    pub model: Architecture,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
    /// Dataset indices of the fixed test set.
    pub test_ids: Vec<usize>,
    /// Dataset indices of the initial labeled set.
    pub initial_ids: Vec<usize>,
    /// Indices labeled at each iteration, in selection order.
    pub batches: Vec<Vec<usize>>,
}

/// Scaled model inputs for the whole dataset.
struct Inputs {
    sequences: Tensor,
    images: Option<Tensor>,
}

impl Inputs {
    fn for_arch(&self, arch: Architecture) -> &Tensor {
        match (&self.images, arch.uses_images()) {
            (Some(images), true) => images,
            _ => &self.sequences,
        }
    }
}

struct Runner<'a> {
    config: &'a AlConfig,
    inputs: Inputs,
    labels: Vec<usize>,
    time_steps: usize,
    channels: usize,
    image_side: usize,
}

impl Runner<'_> {
    fn spec(&self, arch: Architecture) -> ModelSpec {
        let mut spec = if arch.uses_images() {
            ModelSpec::new(arch, self.image_side, 1)
        } else {
            ModelSpec::new(arch, self.time_steps, self.channels)
        };
        spec.dropout_rate = self.config.dropout_rate;
        spec.budget = self.config.budget;
        spec
    }

    /// Trains a fresh model on `labeled`; `stream` separates committee
    /// members (0 is the target model, shared by all strategies).
    fn fit(
        &self,
        arch: Architecture,
        labeled: &[usize],
        iteration: usize,
        stream: u64,
    ) -> Result<Model> {
        let seed = self.config.seed;
        let path = [iteration as u64, stream];
        let mut model = build_model(
            &self.spec(arch),
            seeds::derive(seed, &[&[tag::INIT][..], &path].concat()),
        )?;
        let cfg = TrainConfig {
            seed: seeds::derive(seed, &[&[tag::TRAIN][..], &path].concat()),
            ..self.config.train.clone()
        };
        let x = self.inputs.for_arch(arch).select_rows(labeled);
        let y: Vec<usize> = labeled.iter().map(|&i| self.labels[i]).collect();
        train(&mut model, &x, &y, &cfg)?;
        Ok(model)
    }

    fn accuracy(&self, model: &Model, ids: &[usize]) -> Result<f64> {
        let x = self
            .inputs
            .for_arch(model.spec.architecture)
            .select_rows(ids);
        let p = model.predict_proba(&x)?;
        let k = p.shape()[1];
        let correct = p
            .data()
            .chunks_exact(k)
            .zip(ids)
            .filter(|(row, &i)| argmax(row) == self.labels[i])
            .count();
        Ok(correct as f64 / ids.len() as f64)
    }
}

/// Runs one learning curve on `windows` (absent front distances filled,
/// annotation labels set).
///
/// Iteration 0 trains on a random 10% of the data; each of the
/// [`ITERATIONS`] following iterations scores the unlabeled pool, labels a
/// 5% batch, retrains from fresh weights on the grown labeled set and
/// records test accuracy on the fixed 20% test set. Splits, initial weights
/// and training seeds depend only on `(seed, iteration)`, so strategies
/// sharing a seed differ only in what they select.
pub fn run_al_experiment(windows: &[Window], config: &AlConfig) -> Result<LearningCurve> {
    let sizes = ProtocolSizes::for_pool(windows.len())?;
    let labels = windows
        .iter()
        .map(|w| {
            w.label
                .map(|l| l.index())
                .ok_or_else(|| Error::Data(format!("window {} has no label", w.id())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut seeds::rng(config.seed, &[tag::SPLIT]));
    let mut test_ids = order[..sizes.test].to_vec();
    test_ids.sort_unstable();
    let pool = &order[sizes.test..];
    let mut labeled = pool[..sizes.initial].to_vec();
    labeled.sort_unstable();
    let initial_ids = labeled.clone();
    let mut unlabeled = pool[sizes.initial..].to_vec();
    unlabeled.sort_unstable();

    let pool_windows: Vec<Window> = pool.iter().map(|&i| windows[i].clone()).collect();
    let scaler = fit_scaler(&pool_windows)?;
    let scaled = scaler.apply(windows)?;
    let first = &windows[0];
    let image_side = config.image_side.unwrap_or(first.length);
    let needs_images = config.architecture.uses_images();
    let images = if needs_images {
        let pool_scaled: Vec<Window> = pool.iter().map(|&i| scaled[i].clone()).collect();
        let transform = ImageTransform {
            epsilons: channel_epsilons(&pool_scaled, EPSILON_STD_FRACTION)?,
            side: image_side,
        };
        Some(transform.apply(&scaled)?)
    } else {
        None
    };
    let runner = Runner {
        config,
        inputs: Inputs {
            sequences: model_input(&scaled, None)?,
            images,
        },
        labels,
        time_steps: first.length,
        channels: first.channel_names.len(),
        image_side,
    };

    let mut points = Vec::with_capacity(ITERATIONS);
    let mut batches = Vec::with_capacity(ITERATIONS);
    for iteration in 0..=ITERATIONS {
        let target = runner.fit(config.architecture, &labeled, iteration, 0)?;
        let committee = if config.strategy.is_heterogeneous() && iteration < ITERATIONS {
            let members = HETEROGENEOUS_MEMBERS
                .iter()
                .enumerate()
                .map(|(j, &arch)| {
                    if arch == config.architecture {
                        Ok(target.clone())
                    } else {
                        runner.fit(arch, &labeled, iteration, j as u64 + 1)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Committee::heterogeneous(members)?)
        } else {
            None
        };
        if iteration > 0 {
            points.push(CurvePoint {
                iteration,
                labeled_count: labeled.len(),
                labeled_fraction: sizes.labeled_fraction(iteration),
                test_accuracy: runner.accuracy(&target, &test_ids)?,
            });
        }
        if iteration == ITERATIONS {
            break;
        }
        let scores = score_pool(
            &runner,
            config,
            iteration,
            &target,
            committee.as_ref(),
            &unlabeled,
        )?;
        let batch = select_batch(&scores, &unlabeled, sizes.batch)?;
        unlabeled.retain(|i| !batch.contains(i));
        labeled.extend_from_slice(&batch);
        labeled.sort_unstable();
        batches.push(batch);
    }
    Ok(LearningCurve {
        strategy: config.strategy,
        model: config.architecture,
        seed: config.seed,
        points,
        test_ids,
        initial_ids,
        batches,
    })
}

fn score_pool(
    runner: &Runner<'_>,
    config: &AlConfig,
    iteration: usize,
    target: &Model,
    committee: Option<&Committee>,
    unlabeled: &[usize],
) -> Result<Vec<f64>> {
    let x_target = runner
        .inputs
        .for_arch(config.architecture)
        .select_rows(unlabeled);
    Ok(match config.strategy {
        Strategy::Random => {
            let mut rng = seeds::rng(config.seed, &[tag::SELECT, iteration as u64]);
            unlabeled.iter().map(|_| rng.random::<f64>()).collect()
        }
        Strategy::LeastConfidence => least_confidence_scores(&target.predict_proba(&x_target)?)?,
        Strategy::Margin => margin_scores(&target.predict_proba(&x_target)?)?,
        Strategy::Entropy => entropy_scores(&target.predict_proba(&x_target)?)?,
        Strategy::QbcVote | Strategy::QbcKl => {
            let committee = committee.expect("committee trained for QBC strategies");
            let x = runner.inputs.sequences.select_rows(unlabeled);
            let members = committee.predict(&x)?;
            if config.strategy == Strategy::QbcVote {
                vote_entropy_scores(&members)?
            } else {
                kl_disagreement_scores(&members)?
            }
        }
        Strategy::AddVote | Strategy::AddKl => {
            let member_seeds: Vec<u64> = (0..DROPOUT_COMMITTEE_SIZE as u64)
                .map(|j| seeds::derive(config.seed, &[tag::COMMITTEE, iteration as u64, j]))
                .collect();
            let committee = make_dropout_committee(target, DROPOUT_COMMITTEE_SIZE, &member_seeds)?;
            let members = committee.predict(&x_target)?;
            if config.strategy == Strategy::AddVote {
                vote_entropy_scores(&members)?
            } else {
                kl_disagreement_scores(&members)?
            }
        }
    })
}
