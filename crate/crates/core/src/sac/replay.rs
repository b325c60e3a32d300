//! Ring-buffer replay memory with a bit-exact binary snapshot format.

use std::path::Path;

use rand::Rng;
use sacflow_autodiff::Tensor;

use crate::envs::Transition;
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SACF";
pub const SNAPSHOT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// A sampled minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub s: Tensor,
    pub a: Tensor,
    /// `[batch, 1]`.
    pub r: Tensor,
    pub s_next: Tensor,
    /// `[batch, 1]`, 1 for terminal transitions.
    pub done: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed-capacity ring of transitions, stored as flat records
/// `(s, a, r, s', done)`. Indices used for sampling are chronological
/// (0 is the oldest entry), so a restored snapshot samples identically.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    state_dim: usize,
    action_dim: usize,
    capacity: usize,
    records: Vec<f64>,
    len: usize,
    /// Physical slot of the next write.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(state_dim: usize, action_dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || state_dim == 0 || action_dim == 0 {
            return Err(Error::Invalid("replay capacity and dims must be positive".into()));
        }
        Ok(Self {
            state_dim,
            action_dim,
            capacity,
            records: Vec::new(),
            len: 0,
            cursor: 0,
        })
    }

    fn width(&self) -> usize {
        2 * self.state_dim + self.action_dim + 2
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.s.len() != self.state_dim || t.s_next.len() != self.state_dim || t.a.len() != self.action_dim {
            return Err(Error::Invalid(format!(
                "transition dims ({}, {}, {}) do not match buffer ({}, {})",
                t.s.len(),
                t.a.len(),
                t.s_next.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        let mut rec = Vec::with_capacity(self.width());
        rec.extend(&t.s);
        rec.extend(&t.a);
        rec.push(t.r);
        rec.extend(&t.s_next);
        rec.push(if t.done { 1.0 } else { 0.0 });
        self.push_record(&rec);
        Ok(())
    }

    fn push_record(&mut self, rec: &[f64]) {
        let w = self.width();
        if self.records.len() < self.capacity * w {
            self.records.extend_from_slice(rec);
        } else {
            self.records[self.cursor * w..(self.cursor + 1) * w].copy_from_slice(rec);
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    fn physical(&self, logical: usize) -> usize {
        if self.len < self.capacity {
            logical
        } else {
            (self.cursor + logical) % self.capacity
        }
    }

    fn record(&self, logical: usize) -> &[f64] {
        let w = self.width();
        let p = self.physical(logical);
        &self.records[p * w..(p + 1) * w]
    }

    /// Transition by chronological index (0 = oldest).
    pub fn get(&self, logical: usize) -> Option<Transition> {
        (logical < self.len).then(|| self.decode(self.record(logical)))
    }

    fn decode(&self, rec: &[f64]) -> Transition {
        let (sd, ad) = (self.state_dim, self.action_dim);
        Transition {
            s: rec[..sd].to_vec(),
            a: rec[sd..sd + ad].to_vec(),
            r: rec[sd + ad],
            s_next: rec[sd + ad + 1..2 * sd + ad + 1].to_vec(),
            done: rec[2 * sd + ad + 1] != 0.0,
        }
    }

    /// Chronological indices drawn uniformly with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if batch == 0 || self.len < batch {
            return Err(Error::NotEnoughData {
                have: self.len,
                need: batch.max(1),
            });
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.len)).collect())
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let n = indices.len();
        let (mut s, mut a, mut r, mut s2, mut d) = (
            Vec::with_capacity(n * sd),
            Vec::with_capacity(n * ad),
            Vec::with_capacity(n),
            Vec::with_capacity(n * sd),
            Vec::with_capacity(n),
        );
        for &i in indices {
            let rec = self.record(i);
            s.extend_from_slice(&rec[..sd]);
            a.extend_from_slice(&rec[sd..sd + ad]);
            r.push(rec[sd + ad]);
            s2.extend_from_slice(&rec[sd + ad + 1..2 * sd + ad + 1]);
            d.push(rec[2 * sd + ad + 1]);
        }
        Batch {
            s: Tensor::matrix(n, sd, s).expect("shape"),
            a: Tensor::matrix(n, ad, a).expect("shape"),
            r: Tensor::matrix(n, 1, r).expect("shape"),
            s_next: Tensor::matrix(n, sd, s2).expect("shape"),
            done: Tensor::matrix(n, 1, d).expect("shape"),
        }
    }

    /// Uniform minibatch; fails while fewer than `batch` transitions are stored.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Batch> {
        let idx = self.sample_indices(batch, rng)?;
        Ok(self.gather(&idx))
    }

    /// Header `SACF`, version, state dim, action dim, count, then every
    /// record oldest first as little-endian `f64`s.
    pub fn snapshot(&self) -> Vec<u8> {
        let w = self.width();
        let mut out = Vec::with_capacity(HEADER_LEN + self.len * w * 8);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.state_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.action_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len as u64).to_le_bytes());
        for i in 0..self.len {
            for x in self.record(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn restore(bytes: &[u8], capacity: usize) -> Result<Self> {
        let bad = |m: String| Error::format("replay snapshot", m);
        if bytes.len() < HEADER_LEN || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("missing SACF header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != SNAPSHOT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let (sd, ad) = (u32_at(8) as usize, u32_at(12) as usize);
        let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let mut buf = Self::new(sd, ad, capacity)?;
        let w = buf.width();
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * w * 8 {
            return Err(bad(format!(
                "{count} records of {w} floats need {} bytes, found {}",
                count * w * 8,
                body.len()
            )));
        }
        if count > capacity {
            return Err(bad(format!("{count} records exceed capacity {capacity}")));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        for rec in values.chunks_exact(w) {
            buf.push_record(rec);
        }
        Ok(buf)
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.snapshot()).map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: &Path, capacity: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::restore(&bytes, capacity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(i: usize) -> Transition {
        let x = i as f64;
        Transition {
            s: vec![x, -x],
            a: vec![x / 10.0],
            r: x * 0.5,
            s_next: vec![x + 1.0, 1.0 / (x + 1.0)],
            done: i.is_multiple_of(3),
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = ReplayBuffer::new(2, 1, 4).unwrap();
        for i in 0..6 {
            b.push(&tr(i)).unwrap();
        }
        assert_eq!(b.len(), 4);
        let kept: Vec<_> = (0..4).map(|i| b.get(i).unwrap()).collect();
        assert_eq!(kept, (2..6).map(tr).collect::<Vec<_>>());
        assert!(b.get(4).is_none());
    }

    #[test]
    fn sampling_requires_enough_data() {
        let mut b = ReplayBuffer::new(2, 1, 10).unwrap();
        b.push(&tr(0)).unwrap();
        let err = b.sample(4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::NotEnoughData { have: 1, need: 4 }));
        assert!(err.to_string().contains('4'));
    }

    #[test]
    fn sampling_is_uniform() {
        let n = 20;
        let mut b = ReplayBuffer::new(2, 1, n).unwrap();
        for i in 0..n + 7 {
            b.push(&tr(i)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = vec![0usize; n];
        let draws = 100_000;
        for _ in 0..draws / n {
            for i in b.sample_indices(n, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / n as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 0.99 quantile of chi-square with 19 degrees of freedom.
        assert!(chi2 < 36.19, "chi2 = {chi2}");
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn gather_layout() {
        let mut b = ReplayBuffer::new(2, 1, 8).unwrap();
        for i in 0..3 {
            b.push(&tr(i)).unwrap();
        }
        let batch = b.gather(&[2, 0]);
        assert_eq!(batch.s.row(0), &[2.0, -2.0]);
        assert_eq!(batch.a.data(), &[0.2, 0.0]);
        assert_eq!(batch.r.data(), &[1.0, 0.0]);
        assert_eq!(batch.done.data(), &[0.0, 1.0]);
        assert_eq!(batch.s_next.row(1), &[1.0, 1.0]);
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let mut b = ReplayBuffer::new(2, 1, 5).unwrap();
        for i in 0..9 {
            let mut t = tr(i);
            t.r = (i as f64).sin() * 1e-300;
            b.push(&t).unwrap();
        }
        let bytes = b.snapshot();
        assert_eq!(&bytes[..4], b"SACF");
        let restored = ReplayBuffer::restore(&bytes, 5).unwrap();
        assert_eq!(restored.snapshot(), bytes);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = r1.clone();
        assert_eq!(b.sample(5, &mut r1).unwrap(), restored.sample(5, &mut r2).unwrap());
        assert!(ReplayBuffer::restore(&bytes[..bytes.len() - 1], 5).is_err());
        assert!(ReplayBuffer::restore(&bytes, 3).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.bin");
        b.write_snapshot(&path).unwrap();
        assert_eq!(ReplayBuffer::read_snapshot(&path, 5).unwrap().snapshot(), bytes);
    }
}
