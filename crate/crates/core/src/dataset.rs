//! Binary trajectory files, training-pair sampling and target encoding.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PDER"  version:u32  n_trajectories:u32
//! per trajectory: N:u32 T:u32 L:f64 dt_record:f64 nu:f64 then T*N f32 (time-major)
//! ```

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::ks::{mix_seed, Trajectory};
use crate::operator::ConditioningSet;

pub const DATASET_MAGIC: [u8; 4] = *b"PDER";
pub const DATASET_VERSION: u32 = 1;

/// Below this prediction step (seconds) the network models the residual.
pub const RESIDUAL_THRESHOLD_SECONDS: f64 = 2.0;

pub fn write_dataset<W: Write>(writer: &mut W, trajectories: &[Trajectory]) -> Result<()> {
    let n_traj = u32::try_from(trajectories.len()).map_err(|_| FormatError::Header("too many trajectories".into()))?;
    writer.write_all(&DATASET_MAGIC)?;
    writer.write_all(&DATASET_VERSION.to_le_bytes())?;
    writer.write_all(&n_traj.to_le_bytes())?;
    for (i, traj) in trajectories.iter().enumerate() {
        if traj.states().iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(format!("trajectory {i}")).into());
        }
        let n =
            u32::try_from(traj.n_points).map_err(|_| FormatError::Header(format!("trajectory {i}: N too large")))?;
        let t =
            u32::try_from(traj.n_frames()).map_err(|_| FormatError::Header(format!("trajectory {i}: T too large")))?;
        writer.write_all(&n.to_le_bytes())?;
        writer.write_all(&t.to_le_bytes())?;
        writer.write_all(&traj.length.to_le_bytes())?;
        writer.write_all(&traj.dt_record.to_le_bytes())?;
        writer.write_all(&traj.nu.to_le_bytes())?;
        let mut payload = Vec::with_capacity(traj.states().len() * 4);
        for v in traj.states() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&payload)?;
    }
    writer.flush()?;
    Ok(())
}

/// Cursor over an in-memory file image.
struct Bytes<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Bytes<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < len {
            return Err(FormatError::LengthMismatch(format!(
                "{what}: need {len} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_dataset<R: Read>(reader: &mut R) -> Result<Vec<Trajectory>> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    let mut bytes = Bytes { buf: &buf, pos: 0 };
    let magic: [u8; 4] = bytes.take(4, "magic")?.try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(FormatError::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = bytes.u32("version")?;
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let n_traj = bytes.u32("trajectory count")? as usize;
    let mut out = Vec::with_capacity(n_traj.min(1 << 16));
    for i in 0..n_traj {
        let what = format!("trajectory {i} header");
        let n = bytes.u32(&what)? as usize;
        let t = bytes.u32(&what)? as usize;
        let length = bytes.f64(&what)?;
        let dt_record = bytes.f64(&what)?;
        let nu = bytes.f64(&what)?;
        if n == 0 || t == 0 {
            return Err(FormatError::Header(format!("trajectory {i}: N={n}, T={t}")).into());
        }
        if ![length, dt_record, nu].iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(FormatError::Header(format!("trajectory {i}: L={length}, dt={dt_record}, nu={nu}")).into());
        }
        let count = n
            .checked_mul(t)
            .ok_or_else(|| FormatError::Header(format!("trajectory {i}: T*N overflows")))?;
        let raw = bytes.take(count * 4, &format!("trajectory {i} payload (T*N = {count})"))?;
        let states: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(format!("trajectory {i}, frame {}, point {}", pos / n, pos % n)).into());
        }
        out.push(Trajectory::new(length, nu, dt_record, n, states)?);
    }
    if bytes.pos != buf.len() {
        return Err(FormatError::LengthMismatch(format!(
            "{} trailing bytes after {n_traj} trajectories",
            buf.len() - bytes.pos
        ))
        .into());
    }
    Ok(out)
}

/// One training example: target frame `t` of trajectory `traj`; inputs are
/// frames `t - stride`, `t - 2 stride`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub traj: usize,
    pub t: usize,
}

/// Draws `pairs_per_traj` target frames uniformly (with replacement) from
/// each trajectory and shuffles the result. Deterministic in `(seed, epoch)`.
pub fn sample_pairs(
    trajectories: &[Trajectory],
    stride: usize,
    history: usize,
    pairs_per_traj: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PairIndex>> {
    sample_pairs_with_lookahead(trajectories, stride, history, 0, pairs_per_traj, seed, epoch)
}

/// As [`sample_pairs`], additionally reserving `extra_steps` earlier strides
/// before the first input frame (used for unrolled training).
pub fn sample_pairs_with_lookahead(
    trajectories: &[Trajectory],
    stride: usize,
    history: usize,
    extra_steps: usize,
    pairs_per_traj: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PairIndex>> {
    if stride == 0 || history == 0 {
        return Err(Error::Parameter("stride and history must be positive".into()));
    }
    let first = stride * (history + extra_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch, 0x5041_4952));
    let mut pairs = Vec::with_capacity(trajectories.len() * pairs_per_traj);
    for (i, traj) in trajectories.iter().enumerate() {
        let frames = traj.n_frames();
        if frames <= first {
            return Err(Error::Sampling(format!(
                "trajectory {i} has {frames} frames, needs more than {first} for stride {stride}"
            )));
        }
        for _ in 0..pairs_per_traj {
            pairs.push(PairIndex {
                traj: i,
                t: rng.random_range(first..frames),
            });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Inputs, targets and conditioning for a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `B x history x N`, most recent frame first.
    pub inputs: Vec<f32>,
    /// `B x N`
    pub targets: Vec<f32>,
    pub conditioning: Vec<ConditioningSet>,
    pub stride: usize,
    pub history: usize,
    pub n_points: usize,
}

impl SampleBatch {
    pub fn gather(trajectories: &[Trajectory], pairs: &[PairIndex], stride: usize, history: usize) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Sampling("empty batch".into()))?;
        let n = trajectories
            .get(first.traj)
            .ok_or_else(|| Error::Sampling(format!("no trajectory {}", first.traj)))?
            .n_points;
        let mut batch = SampleBatch {
            inputs: Vec::with_capacity(pairs.len() * history * n),
            targets: Vec::with_capacity(pairs.len() * n),
            conditioning: Vec::with_capacity(pairs.len()),
            stride,
            history,
            n_points: n,
        };
        for pair in pairs {
            let traj = trajectories
                .get(pair.traj)
                .ok_or_else(|| Error::Sampling(format!("no trajectory {}", pair.traj)))?;
            if traj.n_points != n {
                return Err(Error::Shape(format!(
                    "batch mixes grids of {n} and {} points",
                    traj.n_points
                )));
            }
            if pair.t < stride * history || pair.t >= traj.n_frames() {
                return Err(Error::Sampling(format!(
                    "frame {} of trajectory {} has no valid input",
                    pair.t, pair.traj
                )));
            }
            for h in 1..=history {
                batch.inputs.extend_from_slice(traj.frame(pair.t - h * stride));
            }
            batch.targets.extend_from_slice(traj.frame(pair.t));
            batch.conditioning.push(conditioning_for(traj, stride));
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.conditioning.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditioning.is_empty()
    }

    /// History frames of sample `b`.
    pub fn input(&self, b: usize) -> &[f32] {
        let w = self.history * self.n_points;
        &self.inputs[b * w..(b + 1) * w]
    }

    /// Most recent input frame of sample `b`.
    pub fn last_input(&self, b: usize) -> &[f32] {
        &self.input(b)[..self.n_points]
    }

    pub fn target(&self, b: usize) -> &[f32] {
        &self.targets[b * self.n_points..(b + 1) * self.n_points]
    }
}

pub fn conditioning_for(traj: &Trajectory, stride: usize) -> ConditioningSet {
    ConditioningSet::new(stride as f64 * traj.dt_record, traj.dx(), traj.nu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualNormalizer {
    pub output_factor: f64,
}

impl Default for ResidualNormalizer {
    fn default() -> Self {
        Self { output_factor: 0.3 }
    }
}

impl ResidualNormalizer {
    pub fn new(output_factor: f64) -> Result<Self> {
        if !(output_factor.is_finite() && output_factor > 0.0) {
            return Err(Error::Parameter(format!(
                "output factor must be positive, got {output_factor}"
            )));
        }
        Ok(Self { output_factor })
    }
}

/// `(target - input) / output_factor`
pub fn to_residual(target: &[f64], input: &[f64], norm: &ResidualNormalizer) -> Vec<f64> {
    target
        .iter()
        .zip(input)
        .map(|(t, i)| (t - i) / norm.output_factor)
        .collect()
}

/// `input + output_factor * pred`
pub fn from_residual(pred: &[f64], input: &[f64], norm: &ResidualNormalizer) -> Vec<f64> {
    pred.iter()
        .zip(input)
        .map(|(p, i)| i + norm.output_factor * p)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Network predicts the scaled difference to the last input.
    Residual,
    /// Network predicts the next state itself.
    Direct,
}

impl TargetMode {
    /// Residual for prediction steps shorter than two seconds.
    pub fn for_step(dt_step: f64) -> Self {
        if dt_step < RESIDUAL_THRESHOLD_SECONDS {
            TargetMode::Residual
        } else {
            TargetMode::Direct
        }
    }
}

/// Maps states to the space the network is trained in and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetEncoding {
    pub mode: TargetMode,
    pub normalizer: ResidualNormalizer,
}

impl TargetEncoding {
    pub fn for_step(dt_step: f64, normalizer: ResidualNormalizer) -> Self {
        Self {
            mode: TargetMode::for_step(dt_step),
            normalizer,
        }
    }

    pub fn encode(&self, target: &[f64], last_input: &[f64]) -> Vec<f64> {
        match self.mode {
            TargetMode::Residual => to_residual(target, last_input, &self.normalizer),
            TargetMode::Direct => target.to_vec(),
        }
    }

    pub fn decode(&self, pred: &[f64], last_input: &[f64]) -> Vec<f64> {
        match self.mode {
            TargetMode::Residual => from_residual(pred, last_input, &self.normalizer),
            TargetMode::Direct => pred.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    const TRAJ_HEADER_BYTES: usize = 4 + 4 + 8 + 8 + 8;

    fn traj(n: usize, t: usize, offset: f32) -> Trajectory {
        let states = (0..n * t).map(|i| offset + (i as f32 * 0.37).sin()).collect();
        Trajectory::new(64.0, 1.0, 0.2, n, states).unwrap()
    }

    fn encode(trajs: &[Trajectory]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(&mut buf, trajs).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let trajs = vec![traj(8, 3, 0.0), traj(16, 5, 1.5)];
        let buf = encode(&trajs);
        assert_eq!(buf.len(), 12 + 2 * TRAJ_HEADER_BYTES + 4 * (24 + 80));
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, trajs);
        assert_eq!(encode(&back), buf);
    }

    #[test]
    fn corrupted_magic() {
        let mut buf = encode(&[traj(8, 2, 0.0)]);
        buf[0] = b'X';
        let err = read_dataset(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_or_padded_payload() {
        let buf = encode(&[traj(8, 2, 0.0)]);
        let err = read_dataset(&mut &buf[..buf.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
        let mut padded = buf.clone();
        padded.extend_from_slice(&[0; 4]);
        let err = read_dataset(&mut padded.as_slice()).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
        // header claims one more frame than is stored
        let mut wrong_t = buf;
        wrong_t[16..20].copy_from_slice(&3u32.to_le_bytes());
        let err = read_dataset(&mut wrong_t.as_slice()).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn non_finite_payload_and_version() {
        let mut buf = encode(&[traj(8, 2, 0.0)]);
        let payload = 12 + TRAJ_HEADER_BYTES;
        buf[payload..payload + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_dataset(&mut buf.as_slice()),
            Err(Error::Format(FormatError::NonFinite(_)))
        ));
        let mut buf = encode(&[traj(8, 2, 0.0)]);
        buf[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_dataset(&mut buf.as_slice()),
            Err(Error::Format(FormatError::UnsupportedVersion(9)))
        ));
    }

    #[test]
    fn only_valid_pair() {
        let trajs = vec![traj(8, 5, 0.0)];
        let pairs = sample_pairs(&trajs, 4, 1, 10, 1, 0).unwrap();
        assert!(pairs.iter().all(|p| p.t == 4));
        let batch = SampleBatch::gather(&trajs, &pairs[..1], 4, 1).unwrap();
        assert_eq!(batch.input(0), trajs[0].frame(0));
        assert_eq!(batch.target(0), trajs[0].frame(4));
        assert!((batch.conditioning[0].dt - 0.8).abs() < 1e-12);
        assert!(matches!(
            sample_pairs(&[traj(8, 4, 0.0)], 4, 1, 1, 1, 0),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn pair_count_and_determinism() {
        let trajs: Vec<_> = (0..20).map(|i| traj(8, 30, i as f32)).collect();
        let a = sample_pairs(&trajs, 4, 1, 100, 9, 3).unwrap();
        assert_eq!(a.len(), 2000);
        assert_eq!(a, sample_pairs(&trajs, 4, 1, 100, 9, 3).unwrap());
        assert_ne!(a, sample_pairs(&trajs, 4, 1, 100, 9, 4).unwrap());
    }

    #[test]
    fn sampled_frames_are_uniform() {
        let trajs = vec![traj(4, 24, 0.0)];
        let pairs = sample_pairs(&trajs, 4, 1, 100_000, 5, 0).unwrap();
        let mut counts = [0usize; 20];
        for p in &pairs {
            counts[p.t - 4] += 1;
        }
        let expected = pairs.len() as f64 / 20.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p_value = 1.0 - ChiSquared::new(19.0).unwrap().cdf(stat);
        assert!(p_value > 1e-3, "chi-square p = {p_value}");
    }

    #[test]
    fn history_frames_are_most_recent_first() {
        let trajs = vec![traj(4, 10, 0.0)];
        let batch = SampleBatch::gather(&trajs, &[PairIndex { traj: 0, t: 9 }], 2, 3).unwrap();
        assert_eq!(&batch.input(0)[..4], trajs[0].frame(7));
        assert_eq!(&batch.input(0)[4..8], trajs[0].frame(5));
        assert_eq!(&batch.input(0)[8..], trajs[0].frame(3));
        assert_eq!(batch.last_input(0), trajs[0].frame(7));
    }

    #[test]
    fn residual_arithmetic() {
        let norm = ResidualNormalizer::default();
        let input = vec![1.0, -2.0, 0.5];
        assert_eq!(to_residual(&input, &input, &norm), vec![0.0; 3]);
        let target: Vec<f64> = input.iter().map(|v| v + 0.3).collect();
        for r in to_residual(&target, &input, &norm) {
            assert!((r - 1.0).abs() < 1e-12);
        }
        let target = vec![0.123, 4.5, -7.25];
        let back = from_residual(&to_residual(&target, &input, &norm), &input, &norm);
        for (a, b) in back.iter().zip(&target) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ResidualNormalizer::new(0.0).is_err());
    }

    #[test]
    fn target_mode_threshold() {
        assert_eq!(TargetMode::for_step(0.8), TargetMode::Residual);
        assert_eq!(TargetMode::for_step(1.99), TargetMode::Residual);
        assert_eq!(TargetMode::for_step(2.0), TargetMode::Direct);
        let enc = TargetEncoding::for_step(3.2, ResidualNormalizer::default());
        assert_eq!(enc.encode(&[1.0, 2.0], &[5.0, 5.0]), vec![1.0, 2.0]);
    }
}
