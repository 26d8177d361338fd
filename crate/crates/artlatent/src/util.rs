//! Small shared helpers: digests, seed derivation, atomic file writes.

use std::fs;
use std::io;
use std::path::Path;

/// FNV-1a 64-bit digest. Used for content ids, store checksums and cache keys.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Combine several byte strings into one digest, length-prefixed so that
/// `("ab", "c")` and `("a", "bc")` hash differently.
pub fn fnv1a64_parts(parts: &[&[u8]]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for part in parts {
        for &b in (part.len() as u64).to_le_bytes().iter() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        for &b in *part {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// SplitMix64 step; a cheap counter-based bit mixer.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Counter-based uniform generator: maps (key, counter) to f32 in [-1, 1).
pub fn counter_uniform(key: u64, counter: u64) -> f32 {
    let z = splitmix64(key ^ counter.wrapping_mul(0x9e3779b97f4a7c15));
    ((z >> 40) as f32) / ((1u64 << 24) as f32) * 2.0 - 1.0
}

/// Write `bytes` to `path` atomically: write a temp sibling, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp.{}.{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_value() {
        // Reference value for "a" from the FNV-1a specification.
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn parts_are_length_prefixed() {
        assert_ne!(fnv1a64_parts(&[b"ab", b"c"]), fnv1a64_parts(&[b"a", b"bc"]));
    }

    #[test]
    fn counter_uniform_in_range_and_deterministic() {
        for i in 0..1000 {
            let v = counter_uniform(42, i);
            assert!((-1.0..1.0).contains(&v));
            assert_eq!(v, counter_uniform(42, i));
        }
    }
}
