//! Pseudo self-supervised feature sequences and their K-Means refinement.
//!
//! [`FeatureSynth`] stands in for a pretrained speech encoder: each frame is a
//! phoneme-specific base vector plus a per-speaker offset plus small noise.
//! Refinement snaps every frame to its nearest K-Means centroid, which erases
//! the speaker offset whenever clusters follow phonemes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Lloyd iterations per restart before giving up on convergence.
pub const MAX_LLOYD_ITERS: usize = 300;

const SPEAKER_SALT: u64 = 0x5bea_ce00;
const NOMINAL_FRAME_RATE_HZ: f64 = 50.0;

/// `T2×D` frames of real-valued features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub frames: Array,
    pub frame_rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(frames: Array) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(Error::shape(format!(
                "feature frames must be T×D, got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        Ok(Self {
            frames,
            frame_rate_hz: NOMINAL_FRAME_RATE_HZ,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// K-Means centroids with the within-cluster SSE at fit time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Array,
    pub k: usize,
    pub inertia: f64,
}

impl Codebook {
    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Array, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = sq_dist(centroids.row(j), x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its nearest centroid.
pub fn sse(points: &Array, centroids: &Array) -> f64 {
    (0..points.rows())
        .map(|i| nearest(centroids, points.row(i)).1)
        .sum()
}

/// k-means++ seeding: the first centre uniformly, the rest with probability
/// proportional to squared distance from the closest chosen centre.
fn kmeans_plus_plus(points: &Array, k: usize, rng: &mut ChaCha8Rng) -> Array {
    let (n, d) = (points.rows(), points.cols());
    let mut centres: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centres.extend_from_slice(points.row(first));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(first)))
        .collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // Floating-point leftovers can fall past the end; take the last
            // point with non-zero weight.
            if dist[chosen] == 0.0 {
                chosen = dist.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centres.extend_from_slice(points.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    Array::from_parts(vec![k, d], centres)
}

/// Outcome of one Lloyd run.
#[derive(Clone, Debug)]
pub struct LloydRun {
    pub centroids: Array,
    pub assignment: Vec<usize>,
    /// SSE after each assignment step.
    pub sse_history: Vec<f64>,
}

/// Lloyd iterations from the given initial centroids.
///
/// An emptied cluster is reseeded to the point farthest from its assigned
/// centroid.
pub fn lloyd(points: &Array, init: Array, max_iters: usize) -> LloydRun {
    let (n, d) = (points.rows(), points.cols());
    let k = init.rows();
    let mut centroids = init;
    let mut assignment = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    for _ in 0..max_iters {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (j, dist) = nearest(&centroids, points.row(i));
            dists[i] = dist;
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        sse_history.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignment[i];
            counts[j] += 1;
            for (s, x) in sums[j * d..(j + 1) * d].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("points nonempty");
                centroids.row_mut(j).copy_from_slice(points.row(far));
                dists[far] = 0.0;
                // Force a reassignment pass.
                assignment[far] = usize::MAX;
            } else {
                let c = counts[j] as f64;
                for (dst, s) in centroids
                    .row_mut(j)
                    .iter_mut()
                    .zip(&sums[j * d..(j + 1) * d])
                {
                    *dst = s / c;
                }
            }
        }
    }
    LloydRun {
        centroids,
        assignment,
        sse_history,
    }
}

/// Fits `k` centroids with k-means++ seeding and Lloyd iterations, keeping the
/// restart with the lowest SSE (ties: lowest restart index).
pub fn kmeans_fit(points: &Array, k: usize, restarts: usize, seed: u64) -> Result<Codebook> {
    if points.ndim() != 2 {
        return Err(Error::shape(format!(
            "k-means points must be N×D, got {:?}",
            points.shape()
        )));
    }
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::config(format!(
            "k-means needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    if restarts == 0 {
        return Err(Error::config("k-means needs at least one restart"));
    }
    let mut best: Option<(f64, Array)> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let init = kmeans_plus_plus(points, k, &mut rng);
        let run = lloyd(points, init, MAX_LLOYD_ITERS);
        let score = sse(points, &run.centroids);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, run.centroids));
        }
    }
    let (inertia, centroids) = best.expect("at least one restart");
    Ok(Codebook {
        centroids,
        k,
        inertia,
    })
}

/// Replaces every frame by its nearest centroid.
pub fn refine(features: &FeatureSequence, codebook: &Codebook) -> Result<FeatureSequence> {
    if features.dim() != codebook.dim() {
        return Err(Error::shape(format!(
            "feature dim {} against codebook dim {}",
            features.dim(),
            codebook.dim()
        )));
    }
    let mut out = features.frames.clone();
    for t in 0..out.rows() {
        let j = codebook.nearest(features.frames.row(t));
        out.row_mut(t).copy_from_slice(codebook.centroids.row(j));
    }
    Ok(FeatureSequence {
        frames: out,
        frame_rate_hz: features.frame_rate_hz,
    })
}

/// Deterministic feature generator standing in for a pretrained encoder.
#[derive(Clone, Debug)]
pub struct FeatureSynth {
    pub dim: usize,
    pub inventory: usize,
    pub base: Array,
    pub speaker_scale: f64,
    pub noise_scale: f64,
}

impl FeatureSynth {
    pub fn new(dim: usize, inventory: usize, base_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        Self {
            dim,
            inventory,
            base: Array::randn(&[inventory, dim], 1.0, &mut rng),
            speaker_scale: 0.15,
            noise_scale: 0.05,
        }
    }

    /// Smallest distance between two phoneme base vectors.
    pub fn min_phoneme_spacing(&self) -> f64 {
        let mut m = f64::INFINITY;
        for a in 0..self.inventory {
            for b in a + 1..self.inventory {
                m = m.min(sq_dist(self.base.row(a), self.base.row(b)).sqrt());
            }
        }
        m
    }

    pub fn speaker_offset(&self, speaker_id: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            SPEAKER_SALT ^ speaker_id.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        Array::randn(&[self.dim], self.speaker_scale, &mut rng).into_data()
    }

    /// `T1·frames_per_phoneme` frames: base(phoneme) + speaker offset + noise.
    pub fn synth_features(
        &self,
        phonemes: &[usize],
        speaker_id: u64,
        frames_per_phoneme: usize,
        seed: u64,
    ) -> Result<FeatureSequence> {
        if frames_per_phoneme == 0 {
            return Err(Error::config("frames_per_phoneme must be at least 1"));
        }
        if phonemes.is_empty() {
            return Err(Error::shape("empty phoneme sequence"));
        }
        if let Some(&bad) = phonemes.iter().find(|&&p| p >= self.inventory) {
            return Err(Error::Vocabulary(format!(
                "phoneme {bad} outside inventory of {}",
                self.inventory
            )));
        }
        let offset = self.speaker_offset(speaker_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t2 = phonemes.len() * frames_per_phoneme;
        let noise = Array::randn(&[t2, self.dim], self.noise_scale, &mut rng);
        let mut data = Vec::with_capacity(t2 * self.dim);
        for (t, &p) in phonemes
            .iter()
            .flat_map(|p| std::iter::repeat_n(p, frames_per_phoneme))
            .enumerate()
        {
            for j in 0..self.dim {
                data.push(self.base.get2(p, j) + offset[j] + noise.get2(t, j));
            }
        }
        FeatureSequence::new(Array::from_parts(vec![t2, self.dim], data))
    }
}
