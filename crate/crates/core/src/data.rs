//! Synthetic sequence-classification corpus: generation, speaker-disjoint
//! splitting, non-overlapping frame stacking and worker sharding.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// Unique within the generated corpus; survives splitting and sharding.
    pub id: usize,
    pub speaker: usize,
    /// Row-major `[frames × dim]`.
    pub frames: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dim: usize,
    pub num_classes: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::len).sum()
    }

    pub fn speakers(&self) -> BTreeSet<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }

    /// Stack every utterance; utterances left with no frames are dropped.
    pub fn stacked(&self, k: usize) -> Result<Corpus> {
        let mut utterances = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let (frames, labels) = stack_frames(&u.frames, self.dim, &u.labels, k)?;
            if !labels.is_empty() {
                utterances.push(Utterance {
                    id: u.id,
                    speaker: u.speaker,
                    frames,
                    labels,
                });
            }
        }
        Ok(Corpus {
            dim: self.dim * k,
            num_classes: self.num_classes,
            utterances,
        })
    }

    /// All utterances as one batch, one sequence per utterance.
    pub fn to_batch(&self) -> Result<Batch> {
        batch_of(self.dim, self.utterances.iter())
    }

    fn subset(&self, utterances: Vec<Utterance>) -> Corpus {
        Corpus {
            dim: self.dim,
            num_classes: self.num_classes,
            utterances,
        }
    }
}

/// Concatenate utterances into a batch with one sequence each.
pub fn batch_of<'a>(dim: usize, utterances: impl IntoIterator<Item = &'a Utterance>) -> Result<Batch> {
    Batch::from_sequences(
        dim,
        utterances
            .into_iter()
            .map(|u| (u.frames.as_slice(), u.labels.as_slice())),
    )
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub frames_per_utterance: usize,
    pub base_dim: usize,
    pub num_classes: usize,
    /// Probability that the label changes between consecutive frames.
    pub label_change_prob: f64,
    /// Standard deviation of the per-class mean vectors.
    pub class_spread: f64,
    /// Standard deviation of the per-speaker offset vectors.
    pub speaker_spread: f64,
    /// Standard deviation of per-frame noise.
    pub frame_noise: f64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_speakers", self.num_speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("frames_per_utterance", self.frames_per_utterance),
            ("base_dim", self.base_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((key, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*key, "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.label_change_prob) {
            return Err(Error::config("label_change_prob", "must lie in [0, 1]"));
        }
        for (key, v) in [
            ("class_spread", self.class_spread),
            ("speaker_spread", self.speaker_spread),
            ("frame_noise", self.frame_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

/// Frames are `class mean + speaker offset + noise`, all Gaussian; labels
/// follow a sticky Markov chain with uniform stationary distribution.
pub fn generate_corpus(spec: &CorpusSpec, rng: &mut Rng) -> Result<Corpus> {
    spec.validate()?;
    let d = spec.base_dim;
    let k = spec.num_classes;
    let class_means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| spec.class_spread * rng.normal()).collect())
        .collect();

    let mut utterances = Vec::with_capacity(spec.num_speakers * spec.utterances_per_speaker);
    for speaker in 0..spec.num_speakers {
        let offset: Vec<f64> = (0..d).map(|_| spec.speaker_spread * rng.normal()).collect();
        for _ in 0..spec.utterances_per_speaker {
            let t_len = spec.frames_per_utterance;
            let mut labels = Vec::with_capacity(t_len);
            let mut frames = Vec::with_capacity(t_len * d);
            let mut label = rng.below(k);
            for t in 0..t_len {
                if t > 0 && k > 1 && rng.uniform() < spec.label_change_prob {
                    // uniform over the other k-1 classes
                    let step = 1 + rng.below(k - 1);
                    label = (label + step) % k;
                }
                labels.push(label);
                for j in 0..d {
                    frames.push(class_means[label][j] + offset[j] + spec.frame_noise * rng.normal());
                }
            }
            utterances.push(Utterance {
                id: utterances.len(),
                speaker,
                frames,
                labels,
            });
        }
    }
    Ok(Corpus {
        dim: d,
        num_classes: k,
        utterances,
    })
}

/// Train/validation/test fractions; splits are made by speaker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let spec = SplitSpec { train, val, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("train_fraction", self.train), ("val_fraction", self.val), ("test_fraction", self.test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::config("train_fraction", "split fractions must sum to 1"));
        }
        Ok(())
    }

    /// Speaker counts per split: train and validation round half up, test
    /// takes the rest.
    pub fn speaker_counts(&self, speakers: usize) -> (usize, usize, usize) {
        let round = |f: f64| ((f * speakers as f64) + 0.5 + 1e-9).floor() as usize;
        let train = round(self.train).min(speakers);
        let val = round(self.val).min(speakers - train);
        (train, val, speakers - train - val)
    }
}

/// Speaker-disjoint split. Speakers are shuffled with `rng` and assigned in
/// order to train, validation and test.
pub fn split_by_speaker(corpus: &Corpus, spec: &SplitSpec, rng: &mut Rng) -> Result<(Corpus, Corpus, Corpus)> {
    spec.validate()?;
    let mut speakers: Vec<usize> = corpus.speakers().into_iter().collect();
    if speakers.len() < 3 {
        return Err(Error::Argument(format!(
            "speaker split needs at least 3 speakers, corpus has {}",
            speakers.len()
        )));
    }
    rng.shuffle(&mut speakers);
    let (n_train, n_val, _) = spec.speaker_counts(speakers.len());
    let train_set: BTreeSet<usize> = speakers[..n_train].iter().copied().collect();
    let val_set: BTreeSet<usize> = speakers[n_train..n_train + n_val].iter().copied().collect();

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for u in &corpus.utterances {
        let dst = if train_set.contains(&u.speaker) {
            &mut train
        } else if val_set.contains(&u.speaker) {
            &mut val
        } else {
            &mut test
        };
        dst.push(u.clone());
    }
    Ok((corpus.subset(train), corpus.subset(val), corpus.subset(test)))
}

/// Concatenates `k` consecutive frames into one super-frame without overlap.
/// Trailing frames that do not fill a group are dropped; each super-frame
/// takes the label of the last frame in its group.
pub fn stack_frames(frames: &[f64], dim: usize, labels: &[usize], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::Argument("stacking factor must be at least 1".into()));
    }
    if frames.len() != labels.len() * dim {
        return Err(Error::dim("stack_frames", labels.len() * dim, frames.len()));
    }
    let groups = labels.len() / k;
    let stacked = frames[..groups * k * dim].to_vec();
    let super_labels = (0..groups).map(|g| labels[g * k + k - 1]).collect();
    Ok((stacked, super_labels))
}

/// Shuffle with `rng`, then deal utterances round-robin onto `n` shards.
pub fn shard_dataset(split: &Corpus, n: usize, rng: &mut Rng) -> Result<Vec<Corpus>> {
    if n == 0 {
        return Err(Error::Argument("cannot shard onto zero workers".into()));
    }
    let mut order: Vec<usize> = (0..split.utterances.len()).collect();
    rng.shuffle(&mut order);
    let mut shards = vec![Vec::new(); n];
    for (i, idx) in order.into_iter().enumerate() {
        shards[i % n].push(split.utterances[idx].clone());
    }
    Ok(shards.into_iter().map(|u| split.subset(u)).collect())
}
