//! Two-byte token vocabulary: ids 0..65536 are big-endian byte pairs,
//! 65536 is PAD (fills in for missing packets), 65537 is MASK (appears only
//! in in-memory pre-training batches, never in stored corpora).

pub const BYTE_PAIR_TOKENS: usize = 1 << 16;
pub const PAD: u32 = 65_536;
pub const MASK: u32 = 65_537;
pub const VOCAB_SIZE: usize = 65_538;

#[inline]
pub fn token_of(hi: u8, lo: u8) -> u32 {
    ((hi as u32) << 8) | lo as u32
}

/// The byte pair a base token encodes; `None` for PAD and MASK.
#[inline]
pub fn token_bytes(id: u32) -> Option<(u8, u8)> {
    if (id as usize) < BYTE_PAIR_TOKENS {
        Some(((id >> 8) as u8, (id & 0xFF) as u8))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn big_endian_pairing() {
        assert_eq!(token_of(0x45, 0x00), 0x4500);
        assert_eq!(token_of(0x00, 0x3C), 0x003C);
        assert_eq!(token_bytes(0x4500), Some((0x45, 0x00)));
        assert_eq!(token_bytes(PAD), None);
        assert_eq!(token_bytes(MASK), None);
    }
}
