//! Training windows over scene sequences.

use occdrive_core::{ControlSignal, OccupancyGrid, SceneSequence};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WorldError};

/// Forecast window: current frame `t` of sequence `seq`, `steps` future frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub seq: usize,
    pub t: usize,
    pub steps: usize,
}

impl Window {
    /// Frame indices of the `k + 1` conditioning frames, oldest first, padded
    /// by repeating frame 0 when fewer exist.
    pub fn history_indices(&self, k: usize) -> Vec<usize> {
        (0..=k).map(|j| (self.t + j).saturating_sub(k)).collect()
    }

    pub fn history<'a>(&self, seqs: &'a [SceneSequence], k: usize) -> Vec<&'a OccupancyGrid> {
        self.history_indices(k).into_iter().map(|i| &seqs[self.seq].frames[i]).collect()
    }

    pub fn control<'a>(&self, seqs: &'a [SceneSequence], step: usize) -> &'a ControlSignal {
        &seqs[self.seq].controls[self.t + step]
    }

    pub fn target<'a>(&self, seqs: &'a [SceneSequence], step: usize) -> &'a OccupancyGrid {
        &seqs[self.seq].frames[self.t + step + 1]
    }
}

/// Every window with `min_t <= t` that has `steps` future frames.
pub fn windows(seqs: &[SceneSequence], steps: usize, min_t: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (s, seq) in seqs.iter().enumerate() {
        let n = seq.frames.len();
        for t in min_t..n.saturating_sub(steps) {
            out.push(Window { seq: s, t, steps });
        }
    }
    out
}

/// All frames as `(sequence, frame)` pairs.
pub fn frame_refs(seqs: &[SceneSequence]) -> Vec<(usize, usize)> {
    seqs.iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.frames.len()).map(move |f| (s, f)))
        .collect()
}

/// Shuffled minibatches of `items`.
pub fn batches<T: Clone>(items: &[T], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// All sequences share grid dims and waypoint count.
pub fn check_dataset(seqs: &[SceneSequence]) -> Result<[usize; 3]> {
    let first = seqs.first().ok_or_else(|| WorldError::Empty("dataset has no sequences".into()))?;
    let dims = first.dims().ok_or_else(|| WorldError::Empty("sequence has no frames".into()))?;
    let wp = first.controls.first().map(|c| c.waypoints.len());
    for s in seqs {
        if s.dims() != Some(dims) {
            return Err(WorldError::Shape(format!("sequence dims {:?} vs {:?}", s.dims(), dims)));
        }
        if s.controls.iter().any(|c| Some(c.waypoints.len()) != wp) {
            return Err(WorldError::Shape("waypoint counts differ across the dataset".into()));
        }
    }
    Ok(dims)
}
