//! AVFS: binary container for audio-visual feature sequences.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AVFS"
//! 4       4     version (u32, currently 1)
//! 8       4     d_a (u32)
//! 12      4     d_v (u32)
//! 16      4     clips L (u32)
//! 20      4     n_sequences (u32)
//! 24      4     flags (u32): bit 0 labels present, bit 1 masks present
//! 28      ...   n_sequences records
//! ```
//!
//! Each record holds `Xa` (`d_a * L` f64, column-major), `Xv` (`d_v * L` f64,
//! column-major), then if flagged the labels (`2 * L` f64, column-major, so
//! `valence, arousal` per clip) and the masks (`2 * L` bytes, `audio, visual`
//! per clip, each 0 or 1).

use std::path::Path;

use crate::fusion::{FeatureSequence, Modality};
use crate::metrics::EmotionTrack;
use crate::numcore::Matrix;
use crate::synthdata::{CorruptionMask, LabeledSequence};

use super::IoError;

pub const MAGIC: [u8; 4] = *b"AVFS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const FLAG_LABELS: u32 = 1;
pub const FLAG_MASKS: u32 = 1 << 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AvfsRecord {
    /// `d_a x L`.
    pub xa: Matrix,
    /// `d_v x L`.
    pub xv: Matrix,
    /// `2 x L`, rows valence and arousal.
    pub labels: Option<Matrix>,
    pub mask: Option<CorruptionMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvfsFile {
    pub d_a: u32,
    pub d_v: u32,
    pub clips: u32,
    pub flags: u32,
    pub records: Vec<AvfsRecord>,
}

impl AvfsFile {
    /// Size in bytes of a file with this header.
    pub fn expected_len(d_a: u32, d_v: u32, clips: u32, n: u32, flags: u32) -> Option<u64> {
        let l = clips as u64;
        let mut per = (d_a as u64)
            .checked_add(d_v as u64)?
            .checked_mul(l)?
            .checked_mul(8)?;
        if flags & FLAG_LABELS != 0 {
            per = per.checked_add(16 * l)?;
        }
        if flags & FLAG_MASKS != 0 {
            per = per.checked_add(2 * l)?;
        }
        per.checked_mul(n as u64)?.checked_add(HEADER_LEN as u64)
    }

    pub fn from_sequences(seqs: &[LabeledSequence]) -> Result<Self, IoError> {
        let Some(first) = seqs.first() else {
            return Ok(Self {
                d_a: 0,
                d_v: 0,
                clips: 0,
                flags: FLAG_LABELS | FLAG_MASKS,
                records: Vec::new(),
            });
        };
        let dims = (first.xa.dim(), first.xv.dim(), first.clips());
        let mut records = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            let found = (s.xa.dim(), s.xv.dim(), s.clips());
            if found != dims {
                return Err(IoError::Heterogeneous {
                    index: i,
                    expected: dims,
                    found,
                });
            }
            records.push(AvfsRecord {
                xa: s.xa.features().clone(),
                xv: s.xv.features().clone(),
                labels: Some(s.labels.to_matrix()),
                mask: Some(s.mask.clone()),
            });
        }
        Ok(Self {
            d_a: to_u32(dims.0)?,
            d_v: to_u32(dims.1)?,
            clips: to_u32(dims.2)?,
            flags: FLAG_LABELS | FLAG_MASKS,
            records,
        })
    }

    /// Converts to labelled sequences; files without labels are rejected.
    pub fn into_sequences(self) -> Result<Vec<LabeledSequence>, IoError> {
        let clips = self.clips as usize;
        self.records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let labels = r.labels.ok_or(IoError::MissingLabels)?;
                let labels = EmotionTrack::from_matrix(&labels)
                    .map_err(|e| IoError::Invalid(format!("sequence {i}: {e}")))?;
                let invalid =
                    |e: crate::fusion::FusionError| IoError::Invalid(format!("sequence {i}: {e}"));
                Ok(LabeledSequence {
                    xa: FeatureSequence::new(Modality::Audio, r.xa).map_err(invalid)?,
                    xv: FeatureSequence::new(Modality::Visual, r.xv).map_err(invalid)?,
                    labels,
                    mask: r.mask.unwrap_or_else(|| CorruptionMask::clean(clips)),
                })
            })
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>, IoError> {
        let n = to_u32(self.records.len())?;
        let len = Self::expected_len(self.d_a, self.d_v, self.clips, n, self.flags)
            .ok_or_else(|| IoError::Invalid("file size overflows".into()))?;
        let mut out = Vec::with_capacity(len as usize);
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, self.d_a, self.d_v, self.clips, n, self.flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let l = self.clips as usize;
        for (i, r) in self.records.iter().enumerate() {
            let shape_err =
                |what: &str| IoError::Invalid(format!("record {i}: {what} has the wrong shape"));
            if r.xa.shape() != (self.d_a as usize, l) {
                return Err(shape_err("Xa"));
            }
            if r.xv.shape() != (self.d_v as usize, l) {
                return Err(shape_err("Xv"));
            }
            put_reals(&mut out, &r.xa.to_col_major());
            put_reals(&mut out, &r.xv.to_col_major());
            if self.flags & FLAG_LABELS != 0 {
                let labels = r.labels.as_ref().ok_or(IoError::MissingLabels)?;
                if labels.shape() != (2, l) {
                    return Err(shape_err("labels"));
                }
                put_reals(&mut out, &labels.to_col_major());
            }
            if self.flags & FLAG_MASKS != 0 {
                let mask = r.mask.as_ref().ok_or_else(|| {
                    IoError::Invalid(format!("record {i}: mask flagged but absent"))
                })?;
                if mask.audio.len() != l || mask.visual.len() != l {
                    return Err(shape_err("mask"));
                }
                for c in 0..l {
                    out.push(mask.audio[c] as u8);
                    out.push(mask.visual[c] as u8);
                }
            }
        }
        debug_assert_eq!(out.len() as u64, len);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, IoError> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(IoError::NotAvfs);
        }
        if bytes.len() < HEADER_LEN {
            return Err(IoError::Corrupt {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(IoError::Version(version));
        }
        let (d_a, d_v, clips, n, flags) = (word(1), word(2), word(3), word(4), word(5));
        if flags & !(FLAG_LABELS | FLAG_MASKS) != 0 {
            return Err(IoError::Invalid(format!("unknown flag bits {flags:#x}")));
        }
        let expected = Self::expected_len(d_a, d_v, clips, n, flags)
            .ok_or_else(|| IoError::Invalid("header describes an impossibly large file".into()))?;
        if expected != bytes.len() as u64 {
            return Err(IoError::Corrupt {
                expected,
                actual: bytes.len() as u64,
            });
        }

        let (da, dv, l) = (d_a as usize, d_v as usize, clips as usize);
        let mut cursor = HEADER_LEN;
        let take_reals = |count: usize, cursor: &mut usize| -> Vec<f64> {
            let out = bytes[*cursor..*cursor + 8 * count]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *cursor += 8 * count;
            out
        };
        let mut records = Vec::with_capacity(n as usize);
        for i in 0..n as usize {
            let xa =
                Matrix::from_col_major(da, l, &take_reals(da * l, &mut cursor)).expect("sized");
            let xv =
                Matrix::from_col_major(dv, l, &take_reals(dv * l, &mut cursor)).expect("sized");
            let labels = (flags & FLAG_LABELS != 0).then(|| {
                Matrix::from_col_major(2, l, &take_reals(2 * l, &mut cursor)).expect("sized")
            });
            let mask = if flags & FLAG_MASKS != 0 {
                let raw = &bytes[cursor..cursor + 2 * l];
                cursor += 2 * l;
                let flag = |b: u8| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(IoError::Invalid(format!(
                        "record {i}: mask byte {other} is not 0 or 1"
                    ))),
                };
                let mut mask = CorruptionMask::clean(l);
                for c in 0..l {
                    mask.audio[c] = flag(raw[2 * c])?;
                    mask.visual[c] = flag(raw[2 * c + 1])?;
                }
                Some(mask)
            } else {
                None
            };
            records.push(AvfsRecord {
                xa,
                xv,
                labels,
                mask,
            });
        }
        Ok(Self {
            d_a,
            d_v,
            clips,
            flags,
            records,
        })
    }
}

fn put_reals(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(v: usize) -> Result<u32, IoError> {
    u32::try_from(v)
        .map_err(|_| IoError::Invalid(format!("{v} does not fit in a u32 header field")))
}

/// Writes labelled sequences with both labels and masks present.
pub fn write_avfs(path: &Path, seqs: &[LabeledSequence]) -> Result<(), IoError> {
    let bytes = AvfsFile::from_sequences(seqs)?.encode()?;
    std::fs::write(path, bytes).map_err(|e| IoError::fs(path, e))
}

/// Reads a labelled AVFS file. Nothing is returned unless the whole file
/// validates.
pub fn read_avfs(path: &Path) -> Result<Vec<LabeledSequence>, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::fs(path, e))?;
    AvfsFile::decode(&bytes)?.into_sequences()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GeneratorConfig};

    fn sample() -> Vec<LabeledSequence> {
        generate(&GeneratorConfig {
            d_a: 3,
            d_v: 2,
            clips: 4,
            n_train: 3,
            n_val: 0,
            ..GeneratorConfig::default()
        })
        .unwrap()
        .train
    }

    #[test]
    fn empty_file_is_header_only() {
        let bytes = AvfsFile::from_sequences(&[]).unwrap().encode().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[..4], b"AVFS");
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0);
        assert!(AvfsFile::decode(&bytes)
            .unwrap()
            .into_sequences()
            .unwrap()
            .is_empty());
    }

    #[test]
    fn size_formula() {
        let seqs = sample();
        let bytes = AvfsFile::from_sequences(&seqs).unwrap().encode().unwrap();
        let (n, da, dv, l) = (3, 3, 2, 4);
        assert_eq!(
            bytes.len(),
            28 + n * (8 * (da + dv) * l + 8 * 2 * l + 2 * l)
        );
    }

    #[test]
    fn header_layout() {
        let bytes = AvfsFile::from_sequences(&sample())
            .unwrap()
            .encode()
            .unwrap();
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!(
            [word(0), word(1), word(2), word(3), word(4), word(5)],
            [1, 3, 2, 4, 3, 3]
        );
        // first value is Xa[0][0] of sequence 0, then Xa[1][0] (column-major)
        let seqs = sample();
        let first = f64::from_le_bytes(bytes[28..36].try_into().unwrap());
        let second = f64::from_le_bytes(bytes[36..44].try_into().unwrap());
        assert_eq!(first.to_bits(), seqs[0].xa.features().get(0, 0).to_bits());
        assert_eq!(second.to_bits(), seqs[0].xa.features().get(1, 0).to_bits());
    }

    #[test]
    fn decode_errors() {
        let bytes = AvfsFile::from_sequences(&sample())
            .unwrap()
            .encode()
            .unwrap();
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            AvfsFile::decode(truncated),
            Err(IoError::Corrupt { expected, actual }) if expected == actual + 1
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            AvfsFile::decode(&bad_magic),
            Err(IoError::NotAvfs)
        ));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            AvfsFile::decode(&bad_version),
            Err(IoError::Version(9))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            AvfsFile::decode(&extra),
            Err(IoError::Corrupt { .. })
        ));
        let mut bad_mask = bytes.clone();
        let last = bad_mask.len() - 1;
        bad_mask[last] = 7;
        assert!(matches!(
            AvfsFile::decode(&bad_mask),
            Err(IoError::Invalid(_))
        ));
        assert!(matches!(
            AvfsFile::decode(&bytes[..10]),
            Err(IoError::Corrupt { .. })
        ));
    }

    #[test]
    fn heterogeneous_dims_rejected() {
        let mut seqs = sample();
        let other = generate(&GeneratorConfig {
            d_a: 5,
            d_v: 2,
            clips: 4,
            n_train: 1,
            n_val: 0,
            ..GeneratorConfig::default()
        })
        .unwrap()
        .train;
        seqs.extend(other);
        assert!(matches!(
            AvfsFile::from_sequences(&seqs),
            Err(IoError::Heterogeneous { index: 3, .. })
        ));
    }

    #[test]
    fn unlabeled_file_decodes_but_is_not_a_labeled_set() {
        let mut file = AvfsFile::from_sequences(&sample()).unwrap();
        file.flags = 0;
        for r in &mut file.records {
            r.labels = None;
            r.mask = None;
        }
        let bytes = file.encode().unwrap();
        assert_eq!(bytes.len(), 28 + 3 * 8 * 5 * 4);
        let back = AvfsFile::decode(&bytes).unwrap();
        assert_eq!(back, file);
        assert!(matches!(back.into_sequences(), Err(IoError::MissingLabels)));
    }
}
