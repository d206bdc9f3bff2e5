//! Motion tokens: fixed-interval motion segments clustered into a discrete
//! vocabulary by greedy disk cover under the average-corner distance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::{normalize_angle, Scalar};
use crate::scene::{oriented_box_corners, AgentTrack, BoxDims, Category, Pose2, Vec2};

pub const VOCAB_VERSION: u32 = 1;

/// Largest sample pool the greedy cover runs on; larger corpora are
/// subsampled (seeded) for candidate selection and bisection.
pub const DEFAULT_POOL_CAP: usize = 1500;

/// Fraction of samples the bisected radius must cover.
pub const COVERAGE_TARGET: f64 = 0.99;

const EPS_RESOLUTION: f64 = 0.01;

/// One interval of motion expressed in the frame of its start pose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment<T> {
    pub dx: T,
    pub dy: T,
    pub dheading: T,
}

impl<T: Scalar> MotionSegment<T> {
    pub fn new(dx: T, dy: T, dheading: T) -> Self {
        Self {
            dx,
            dy,
            dheading: normalize_angle(dheading),
        }
    }

    pub fn between(from: &Pose2<T>, to: &Pose2<T>) -> Self {
        let local = from.to_local(to.position());
        Self::new(local.x, local.y, to.heading - from.heading)
    }

    /// Pose reached by executing this segment from `start`.
    pub fn apply(&self, start: &Pose2<T>) -> Pose2<T> {
        let p = start.to_world(Vec2::new(self.dx, self.dy));
        Pose2::new(p.x, p.y, start.heading + self.dheading)
    }

    pub fn end_pose(&self) -> Pose2<T> {
        self.apply(&Pose2::identity())
    }
}

/// Mean distance between corresponding box corners at the two segments' end
/// poses, both anchored at the identity pose.
pub fn corner_distance<T: Scalar>(a: &MotionSegment<T>, b: &MotionSegment<T>, dims: &BoxDims<T>) -> T {
    let ca = oriented_box_corners(&a.end_pose(), dims);
    let cb = oriented_box_corners(&b.end_pose(), dims);
    corner_set_distance(&ca, &cb)
}

fn corner_set_distance<T: Scalar>(a: &[Vec2<T>; 4], b: &[Vec2<T>; 4]) -> T {
    (a[0].dist(b[0]) + a[1].dist(b[1]) + a[2].dist(b[2]) + a[3].dist(b[3])) * T::lit(0.25)
}

/// Segments between consecutive poses; empty for fewer than two poses.
pub fn segment_poses<T: Scalar>(poses: &[Pose2<T>]) -> Vec<MotionSegment<T>> {
    poses
        .windows(2)
        .map(|w| MotionSegment::between(&w[0], &w[1]))
        .collect()
}

/// Splits a track (history then future) into per-interval segments.
///
/// `dt` documents the sampling interval the poses are assumed to follow;
/// the segmentation itself is purely geometric.
pub fn segment_trajectory<T: Scalar>(track: &AgentTrack<T>, _dt: T) -> Vec<MotionSegment<T>> {
    segment_poses(&track.full_path())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionToken<T> {
    pub id: usize,
    pub segment: MotionSegment<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary<T: Scalar> {
    pub category: Category,
    pub dt: T,
    pub ref_dims: BoxDims<T>,
    pub eps: T,
    tokens: Vec<MotionToken<T>>,
    corners: Vec<[Vec2<T>; 4]>,
}

impl<T: Scalar> Vocabulary<T> {
    pub fn from_segments(
        category: Category,
        dt: T,
        ref_dims: BoxDims<T>,
        eps: T,
        segments: Vec<MotionSegment<T>>,
    ) -> Result<Self> {
        if segments.is_empty() {
            return Err(invalid("vocabulary needs at least one token"));
        }
        let tokens: Vec<_> = segments
            .into_iter()
            .enumerate()
            .map(|(id, segment)| MotionToken { id, segment })
            .collect();
        let corners = tokens
            .iter()
            .map(|t| oriented_box_corners(&t.segment.end_pose(), &ref_dims))
            .collect();
        Ok(Self {
            category,
            dt,
            ref_dims,
            eps,
            tokens,
            corners,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[MotionToken<T>] {
        &self.tokens
    }

    pub fn segment(&self, id: usize) -> Result<&MotionSegment<T>> {
        self.tokens
            .get(id)
            .map(|t| &t.segment)
            .ok_or_else(|| invalid(format!("token id {id} out of range (vocabulary has {})", self.len())))
    }

    /// Nearest token by corner distance (smaller id wins ties) and its distance.
    pub fn nearest(&self, seg: &MotionSegment<T>) -> (usize, T) {
        let c = oriented_box_corners(&seg.end_pose(), &self.ref_dims);
        let mut best = (0, T::infinity());
        for (id, tc) in self.corners.iter().enumerate() {
            let d = corner_set_distance(&c, tc);
            if d < best.1 {
                best = (id, d);
            }
        }
        best
    }

    /// Id of a token that does not move, if the vocabulary has one.
    pub fn stationary_token(&self) -> Option<usize> {
        let zero = MotionSegment::default();
        let (id, d) = self.nearest(&zero);
        (d <= self.eps).then_some(id)
    }
}

/// Greedy maximum-coverage disk cover over a precomputed distance matrix.
struct DiskCover {
    n: usize,
    words: usize,
    dist: Vec<f64>,
}

impl DiskCover {
    fn new<T: Scalar>(corners: &[[Vec2<T>; 4]]) -> Self {
        let n = corners.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = corner_set_distance(&corners[i], &corners[j]).as_f64();
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        Self {
            n,
            words: n.div_ceil(64),
            dist,
        }
    }

    fn max_dist(&self) -> f64 {
        self.dist.iter().cloned().fold(0.0, f64::max)
    }

    /// Chosen centers (sample indices) and the number of samples covered.
    fn greedy(&self, eps: f64, k: usize) -> (Vec<usize>, usize) {
        let (n, w) = (self.n, self.words);
        let mut nb = vec![0u64; n * w];
        for i in 0..n {
            let row = &self.dist[i * n..(i + 1) * n];
            for (j, &d) in row.iter().enumerate() {
                if d <= eps {
                    nb[i * w + j / 64] |= 1 << (j % 64);
                }
            }
        }
        let mut uncovered = vec![!0u64; w];
        if n % 64 != 0 {
            uncovered[w - 1] = (1u64 << (n % 64)) - 1;
        }
        let mut centers = Vec::new();
        let mut covered = 0;
        while centers.len() < k && covered < n {
            let mut best = (0, 0u32);
            for i in 0..n {
                let gain: u32 = nb[i * w..(i + 1) * w]
                    .iter()
                    .zip(&uncovered)
                    .map(|(a, b)| (a & b).count_ones())
                    .sum();
                if gain > best.1 {
                    best = (i, gain);
                }
            }
            if best.1 == 0 {
                break;
            }
            centers.push(best.0);
            covered += best.1 as usize;
            for (u, m) in uncovered.iter_mut().zip(&nb[best.0 * w..(best.0 + 1) * w]) {
                *u &= !m;
            }
        }
        (centers, covered)
    }
}

/// Builds a vocabulary of at most `k` tokens whose disks of radius `eps`
/// (smallest radius, to 1 cm, for which the greedy cover reaches 99%)
/// cover the training segments. Deterministic for fixed inputs and seed.
pub fn build_vocabulary<T: Scalar>(
    category: Category,
    dt: T,
    segments: &[MotionSegment<T>],
    k: usize,
    dims: &BoxDims<T>,
    seed: u64,
) -> Result<Vocabulary<T>> {
    build_vocabulary_with_pool(category, dt, segments, k, dims, seed, DEFAULT_POOL_CAP)
}

pub fn build_vocabulary_with_pool<T: Scalar>(
    category: Category,
    dt: T,
    segments: &[MotionSegment<T>],
    k: usize,
    dims: &BoxDims<T>,
    seed: u64,
    pool_cap: usize,
) -> Result<Vocabulary<T>> {
    if k < 1 {
        return Err(invalid("vocabulary size K must be at least 1"));
    }
    if segments.is_empty() {
        return Err(invalid("cannot build a vocabulary from zero segments"));
    }
    let all_corners: Vec<_> = segments
        .iter()
        .map(|s| oriented_box_corners(&s.end_pose(), dims))
        .collect();

    let mut pool: Vec<usize> = (0..segments.len()).collect();
    if pool.len() > pool_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pool.shuffle(&mut rng);
        pool.truncate(pool_cap);
        pool.sort_unstable();
    }
    let pool_corners: Vec<_> = pool.iter().map(|&i| all_corners[i]).collect();
    let cover = DiskCover::new(&pool_corners);
    let need = (COVERAGE_TARGET * pool.len() as f64).ceil() as usize;

    let mut lo = 0.0;
    let mut hi = cover.max_dist();
    if cover.greedy(0.0, k).1 >= need {
        hi = 0.0;
    }
    while hi - lo > EPS_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        if cover.greedy(mid, k).1 >= need {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (centers, _) = cover.greedy(hi, k);
    let token_segments: Vec<_> = centers.iter().map(|&c| segments[pool[c]]).collect();

    // Widen the radius if the subsampled pool under-represents the corpus.
    let mut eps = hi;
    if pool.len() < segments.len() {
        let mut nearest: Vec<f64> = all_corners
            .iter()
            .map(|c| {
                centers
                    .iter()
                    .map(|&t| corner_set_distance(c, &pool_corners[t]).as_f64())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        nearest.sort_by(|a, b| a.total_cmp(b));
        let idx = ((COVERAGE_TARGET * segments.len() as f64).ceil() as usize).max(1) - 1;
        let q = nearest[idx.min(nearest.len() - 1)];
        if q > eps {
            eps = (q / EPS_RESOLUTION).ceil() * EPS_RESOLUTION;
        }
    }
    Vocabulary::from_segments(category, dt, *dims, T::lit(eps), token_segments)
}

/// Maps every segment of the track to its nearest token.
pub fn encode<T: Scalar>(track: &AgentTrack<T>, vocab: &Vocabulary<T>) -> Result<Vec<usize>> {
    encode_poses(&track.full_path(), vocab)
}

pub fn encode_poses<T: Scalar>(poses: &[Pose2<T>], vocab: &Vocabulary<T>) -> Result<Vec<usize>> {
    if vocab.is_empty() {
        return Err(invalid("empty vocabulary"));
    }
    Ok(segment_poses(poses)
        .iter()
        .map(|s| vocab.nearest(s).0)
        .collect())
}

/// Closed-loop encoding: each token is chosen from the previously decoded
/// pose toward the next target pose, so quantization error does not
/// accumulate along the track. Returns the ids and the decoded poses.
pub fn encode_tracking<T: Scalar>(
    start: &Pose2<T>,
    targets: &[Pose2<T>],
    vocab: &Vocabulary<T>,
) -> Result<(Vec<usize>, Vec<Pose2<T>>)> {
    if vocab.is_empty() {
        return Err(invalid("empty vocabulary"));
    }
    let mut cur = *start;
    let mut ids = Vec::with_capacity(targets.len());
    let mut poses = Vec::with_capacity(targets.len());
    for target in targets {
        let (id, _) = vocab.nearest(&MotionSegment::between(&cur, target));
        cur = vocab.tokens[id].segment.apply(&cur);
        ids.push(id);
        poses.push(cur);
    }
    Ok((ids, poses))
}

/// Chains token segments from `start`; the output excludes `start`.
pub fn decode<T: Scalar>(start: &Pose2<T>, ids: &[usize], vocab: &Vocabulary<T>) -> Result<Vec<Pose2<T>>> {
    let mut cur = *start;
    ids.iter()
        .map(|&id| {
            cur = vocab.segment(id)?.apply(&cur);
            Ok(cur)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct VocabularyDoc<T: Scalar> {
    version: u32,
    category: Category,
    dt: T,
    ref_dims: BoxDims<T>,
    eps: T,
    tokens: Vec<TokenDoc<T>>,
}

#[derive(Serialize, Deserialize)]
struct TokenDoc<T> {
    id: usize,
    dx: T,
    dy: T,
    dheading: T,
}

impl<T: Scalar> Serialize for Vocabulary<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VocabularyDoc {
            version: VOCAB_VERSION,
            category: self.category,
            dt: self.dt,
            ref_dims: self.ref_dims,
            eps: self.eps,
            tokens: self
                .tokens
                .iter()
                .map(|t| TokenDoc {
                    id: t.id,
                    dx: t.segment.dx,
                    dy: t.segment.dy,
                    dheading: t.segment.dheading,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for Vocabulary<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = VocabularyDoc::<T>::deserialize(d)?;
        if doc.version != VOCAB_VERSION {
            return Err(D::Error::custom(Error::Version {
                kind: "vocabulary",
                found: doc.version,
                expected: VOCAB_VERSION,
            }));
        }
        if doc.tokens.iter().enumerate().any(|(i, t)| t.id != i) {
            return Err(D::Error::custom("token ids must be dense and ordered"));
        }
        let segs = doc
            .tokens
            .iter()
            .map(|t| MotionSegment::new(t.dx, t.dy, t.dheading))
            .collect();
        Vocabulary::from_segments(doc.category, doc.dt, doc.ref_dims, doc.eps, segs)
            .map_err(D::Error::custom)
    }
}

/// One vocabulary per agent category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct VocabSet<T: Scalar> {
    pub vehicle: Vocabulary<T>,
    pub pedestrian: Vocabulary<T>,
    pub cyclist: Vocabulary<T>,
}

impl<T: Scalar> VocabSet<T> {
    pub fn get(&self, c: Category) -> &Vocabulary<T> {
        match c {
            Category::Vehicle => &self.vehicle,
            Category::Pedestrian => &self.pedestrian,
            Category::Cyclist => &self.cyclist,
        }
    }

    pub fn max_len(&self) -> usize {
        Category::ALL.iter().map(|&c| self.get(c).len()).max().unwrap()
    }

    /// Builds per-category vocabularies from all tracks (ego included with
    /// vehicles), using per-category mean box dims for the corner distance.
    /// A category with no observed motion gets a single stationary token.
    pub fn build<'a, I>(tracks: I, dt: T, k: usize, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a AgentTrack<T>>,
    {
        let mut segs: [Vec<MotionSegment<T>>; 3] = Default::default();
        let mut dims_sum = [(T::zero(), T::zero(), 0usize); 3];
        for tr in tracks {
            let ci = tr.category.index();
            segs[ci].extend(segment_trajectory(tr, dt));
            dims_sum[ci].0 += tr.dims.length;
            dims_sum[ci].1 += tr.dims.width;
            dims_sum[ci].2 += 1;
        }
        let mut built = Vec::with_capacity(3);
        for c in Category::ALL {
            let ci = c.index();
            let (l, w, n) = dims_sum[ci];
            let dims = if n > 0 {
                let n = T::lit(n as f64);
                BoxDims::new(l / n, w / n)?
            } else {
                default_dims(c)
            };
            let v = if segs[ci].is_empty() {
                Vocabulary::from_segments(c, dt, dims, T::zero(), vec![MotionSegment::default()])?
            } else {
                build_vocabulary(c, dt, &segs[ci], k, &dims, seed.wrapping_add(ci as u64))?
            };
            built.push(v);
        }
        let cyclist = built.pop().unwrap();
        let pedestrian = built.pop().unwrap();
        let vehicle = built.pop().unwrap();
        Ok(Self {
            vehicle,
            pedestrian,
            cyclist,
        })
    }
}

pub fn default_dims<T: Scalar>(c: Category) -> BoxDims<T> {
    let (l, w) = match c {
        Category::Vehicle => (4.6, 1.9),
        Category::Pedestrian => (0.6, 0.6),
        Category::Cyclist => (1.8, 0.7),
    };
    BoxDims {
        length: T::lit(l),
        width: T::lit(w),
    }
}
