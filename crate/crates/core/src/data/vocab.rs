use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const BOS_ID: usize = 2;
/// Id of raw byte 0.
pub const BYTE_OFFSET: usize = 3;
/// First sentinel id; sentinels follow the 256 byte ids.
pub const FIRST_SENTINEL: usize = BYTE_OFFSET + 256;

/// Byte vocabulary: pad, eos, bos, 256 bytes, then `sentinels` sentinel ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteVocab {
    pub sentinels: usize,
}

impl ByteVocab {
    pub fn new(sentinels: usize) -> Self {
        Self { sentinels }
    }

    pub fn size(&self) -> usize {
        FIRST_SENTINEL + self.sentinels
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize + BYTE_OFFSET).collect()
    }

    /// Bytes of every byte id; specials and sentinels are skipped.
    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().filter_map(|&i| byte_of(i)).collect()
    }

    /// Sentinel `i` (0-based); `None` once the budget is exhausted.
    pub fn sentinel(&self, i: usize) -> Option<usize> {
        (i < self.sentinels).then_some(FIRST_SENTINEL + i)
    }

    pub fn is_sentinel(&self, id: usize) -> bool {
        (FIRST_SENTINEL..self.size()).contains(&id)
    }
}

pub fn byte_of(id: usize) -> Option<u8> {
    (BYTE_OFFSET..FIRST_SENTINEL).contains(&id).then(|| (id - BYTE_OFFSET) as u8)
}

pub fn id_of(byte: u8) -> usize {
    byte as usize + BYTE_OFFSET
}
