//! Fixed-layout signal frame stored in each ring slot.
//!
//! A frame is encoded as a flat array of 64-bit words so that a slot can be
//! written and read through atomics only. Readers copy the words out and
//! decode afterwards; a torn copy is detected by the slot stamp, never by
//! decoding.

use serde::{Deserialize, Serialize};

/// Maximum number of assets a single device drives.
pub const MAX_ASSETS: usize = 4;

const HEADER_WORDS: usize = 3;
const ASSET_WORDS: usize = 6;

/// Number of words in an encoded frame (without the checksum word).
pub const FRAME_WORDS: usize = HEADER_WORDS + MAX_ASSETS * ASSET_WORDS;

/// Which service's output reached the actuator in a cycle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    /// No designated output was available; the last applied value was held.
    #[default]
    Hold,
    /// The baseline service of the asset.
    A,
    /// The candidate service of the asset.
    B,
}

impl Source {
    fn code(self) -> u64 {
        match self {
            Source::Hold => 0,
            Source::A => 1,
            Source::B => 2,
        }
    }

    fn from_code(code: u64) -> Source {
        match code {
            1 => Source::A,
            2 => Source::B,
            _ => Source::Hold,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Hold => "hold",
            Source::A => "A",
            Source::B => "B",
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-asset block of a frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AssetSignals {
    /// True plant state at cycle start (simulation-side diagnostic).
    pub x: f64,
    /// Sensed measurement delivered to the controllers.
    pub y: f64,
    pub u_a: Option<f64>,
    pub u_b: Option<f64>,
    /// Output designated by the gate for this cycle.
    pub u_applied: f64,
    pub source: Source,
    /// Gate fell back to hold-last because the designated output was missing.
    pub fault: bool,
}

impl AssetSignals {
    pub fn output(&self, source: Source) -> Option<f64> {
        match source {
            Source::A => self.u_a,
            Source::B => self.u_b,
            Source::Hold => None,
        }
    }

    pub fn set_output(&mut self, source: Source, value: Option<f64>) {
        match source {
            Source::A => self.u_a = value,
            Source::B => self.u_b = value,
            Source::Hold => {}
        }
    }
}

/// One cycle's signal frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SignalFrame {
    pub cycle: u64,
    pub t_start_ns: u64,
    pub asset_count: usize,
    pub assets: [AssetSignals; MAX_ASSETS],
}

const HAS_A: u64 = 1;
const HAS_B: u64 = 1 << 1;
const FAULT: u64 = 1 << 2;

impl SignalFrame {
    pub fn new(cycle: u64, t_start_ns: u64, asset_count: usize) -> Self {
        assert!(asset_count <= MAX_ASSETS, "asset count exceeds frame layout");
        SignalFrame {
            cycle,
            t_start_ns,
            asset_count,
            assets: [AssetSignals::default(); MAX_ASSETS],
        }
    }

    pub fn asset(&self, asset: usize) -> &AssetSignals {
        &self.assets[asset]
    }

    pub fn asset_mut(&mut self, asset: usize) -> &mut AssetSignals {
        &mut self.assets[asset]
    }

    pub fn encode(&self) -> [u64; FRAME_WORDS] {
        let mut w = [0u64; FRAME_WORDS];
        w[0] = self.cycle;
        w[1] = self.t_start_ns;
        w[2] = self.asset_count as u64;
        for (i, a) in self.assets.iter().enumerate() {
            let base = HEADER_WORDS + i * ASSET_WORDS;
            let mut meta = a.source.code() << 8;
            if a.u_a.is_some() {
                meta |= HAS_A;
            }
            if a.u_b.is_some() {
                meta |= HAS_B;
            }
            if a.fault {
                meta |= FAULT;
            }
            w[base] = a.x.to_bits();
            w[base + 1] = a.y.to_bits();
            w[base + 2] = a.u_a.unwrap_or(0.0).to_bits();
            w[base + 3] = a.u_b.unwrap_or(0.0).to_bits();
            w[base + 4] = a.u_applied.to_bits();
            w[base + 5] = meta;
        }
        w
    }

    /// Decodes any word pattern; garbage in yields a well-formed (if
    /// meaningless) frame.
    pub fn decode(w: &[u64; FRAME_WORDS]) -> Self {
        let mut f = SignalFrame {
            cycle: w[0],
            t_start_ns: w[1],
            asset_count: (w[2] as usize).min(MAX_ASSETS),
            assets: [AssetSignals::default(); MAX_ASSETS],
        };
        for (i, a) in f.assets.iter_mut().enumerate() {
            let base = HEADER_WORDS + i * ASSET_WORDS;
            let meta = w[base + 5];
            a.x = f64::from_bits(w[base]);
            a.y = f64::from_bits(w[base + 1]);
            a.u_a = (meta & HAS_A != 0).then(|| f64::from_bits(w[base + 2]));
            a.u_b = (meta & HAS_B != 0).then(|| f64::from_bits(w[base + 3]));
            a.u_applied = f64::from_bits(w[base + 4]);
            a.fault = meta & FAULT != 0;
            a.source = Source::from_code((meta >> 8) & 0xff);
        }
        f
    }
}

/// Integrity word over an encoded frame (FNV-1a over the word bytes).
pub fn checksum(words: &[u64; FRAME_WORDS]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn asset_strategy() -> impl Strategy<Value = AssetSignals> {
        (
            any::<f64>(),
            any::<f64>(),
            proptest::option::of(any::<f64>()),
            proptest::option::of(any::<f64>()),
            any::<f64>(),
            0u8..3,
            any::<bool>(),
        )
            .prop_map(|(x, y, u_a, u_b, u_applied, s, fault)| AssetSignals {
                x,
                y,
                u_a,
                u_b,
                u_applied,
                source: Source::from_code(u64::from(s)),
                fault,
            })
    }

    proptest! {
        #[test]
        fn encode_decode_preserves_bits(
            cycle in any::<u64>(),
            t in any::<u64>(),
            n in 0usize..=MAX_ASSETS,
            assets in proptest::array::uniform4(asset_strategy()),
        ) {
            let frame = SignalFrame { cycle, t_start_ns: t, asset_count: n, assets };
            let words = frame.encode();
            prop_assert_eq!(SignalFrame::decode(&words).encode(), words);
        }
    }

    #[test]
    fn checksum_sensitive_to_single_word() {
        let f = SignalFrame::new(7, 7_000, 1);
        let mut w = f.encode();
        let c = checksum(&w);
        w[HEADER_WORDS + 1] ^= 1;
        assert_ne!(c, checksum(&w));
    }
}
