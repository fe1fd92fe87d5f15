//! Counter-based dropout masks.
//!
//! A mask bit is a pure function of (run seed, optimizer step, call site,
//! row key, column). Row keys identify a sample and a position inside it, so
//! the same sample receives the same mask no matter how a batch is split
//! into micro-batches or in which order it is processed.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub(crate) fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |h, &p| splitmix(h ^ p))
}

/// Dropout randomness owned by a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutStream {
    pub seed: u64,
    pub step: u64,
}

impl DropoutStream {
    pub fn new(seed: u64, step: u64) -> Self {
        Self { seed, step }
    }

    /// Keep/drop decision for one element: `true` keeps it.
    #[inline]
    pub(crate) fn keep(&self, site: u64, row_key: u64, col: usize, p: f64) -> bool {
        let h = splitmix(mix(&[self.seed, self.step, site, row_key]) ^ (col as u64).wrapping_mul(GOLDEN));
        // 53 high-quality bits mapped onto [0, 1)
        let u = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        u >= p
    }
}

/// One stable key per matrix row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowKeys(pub Vec<u64>);

impl RowKeys {
    /// Keys for pooled rows: one row per sample.
    pub fn per_sample(uids: &[u64]) -> Self {
        Self(uids.iter().map(|&u| mix(&[u])).collect())
    }

    /// Keys for stacked sequences: row `t` of sample `s` gets `(uid_s, t)`.
    pub fn per_frame(uids: &[u64], lens: &[usize]) -> Self {
        let mut keys = Vec::with_capacity(lens.iter().sum());
        for (&u, &l) in uids.iter().zip(lens) {
            for t in 0..l {
                keys.push(mix(&[u, t as u64 + 1]));
            }
        }
        Self(keys)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
