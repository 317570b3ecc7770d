//! Per-sample pruning decision logs and their distribution statistics.
//!
//! Binary log layout (little-endian):
//!
//! ```text
//! "PNDL" | version: u32 | split: u8 | checkpoint sha-256: [u8; 32]
//! | samples: u64 | layers: u32
//! per layer:  layer_id: u32 | channels: u32 | name_len: u32 | name
//! | records: u64
//! per record: sample_id: u32 | layer_id: u32 | packed bits (ceil(channels / 8) bytes, LSB first)
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::cost::csv_err;
use crate::data::Split;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PNDL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub layer_id: usize,
    pub name: String,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionRecord {
    pub sample_id: usize,
    pub layer_id: usize,
    pub bits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneDecisionLog {
    pub split: Split,
    /// Hex SHA-256 of the evaluated checkpoint.
    pub checkpoint_hash: String,
    /// Size of the evaluated split; sample ids run over `0..num_samples`.
    pub num_samples: usize,
    pub layers: Vec<LayerInfo>,
    pub records: Vec<DecisionRecord>,
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl PruneDecisionLog {
    pub fn new(split: Split, checkpoint_hash: String, layers: Vec<LayerInfo>) -> Self {
        Self {
            split,
            checkpoint_hash,
            num_samples: 0,
            layers,
            records: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.push(match self.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        let mut hash = [0u8; 32];
        if let Ok(bytes) = hex::decode(&self.checkpoint_hash) {
            let n = bytes.len().min(32);
            hash[..n].copy_from_slice(&bytes[..n]);
        }
        out.extend_from_slice(&hash);
        out.write_u64::<LittleEndian>(self.num_samples as u64).unwrap();
        out.write_u32::<LittleEndian>(self.layers.len() as u32).unwrap();
        for l in &self.layers {
            out.write_u32::<LittleEndian>(l.layer_id as u32).unwrap();
            out.write_u32::<LittleEndian>(l.channels as u32).unwrap();
            out.write_u32::<LittleEndian>(l.name.len() as u32).unwrap();
            out.extend_from_slice(l.name.as_bytes());
        }
        out.write_u64::<LittleEndian>(self.records.len() as u64).unwrap();
        for r in &self.records {
            out.write_u32::<LittleEndian>(r.sample_id as u32).unwrap();
            out.write_u32::<LittleEndian>(r.layer_id as u32).unwrap();
            let mut packed = vec![0u8; r.bits.len().div_ceil(8)];
            for (i, _) in r.bits.iter().enumerate().filter(|(_, &b)| b) {
                packed[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&packed);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let short = |_| corrupt(path, "unexpected end of decision log");
        let mut r = bytes;
        if r.len() < 4 || &r[..4] != MAGIC {
            return Err(corrupt(path, "not a decision log (bad magic)"));
        }
        r = &r[4..];
        let version = r.read_u32::<LittleEndian>().map_err(short)?;
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported decision log version {version}")));
        }
        let split = match r.read_u8().map_err(short)? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(corrupt(path, format!("unknown split tag {other}"))),
        };
        if r.len() < 32 {
            return Err(corrupt(path, "unexpected end of decision log"));
        }
        let checkpoint_hash = hex::encode(&r[..32]);
        r = &r[32..];
        let num_samples = r.read_u64::<LittleEndian>().map_err(short)? as usize;
        let n_layers = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let layer_id = r.read_u32::<LittleEndian>().map_err(short)? as usize;
            let channels = r.read_u32::<LittleEndian>().map_err(short)? as usize;
            let len = r.read_u32::<LittleEndian>().map_err(short)? as usize;
            if r.len() < len {
                return Err(corrupt(path, "unexpected end of decision log"));
            }
            let name = String::from_utf8_lossy(&r[..len]).into_owned();
            r = &r[len..];
            layers.push(LayerInfo { layer_id, name, channels });
        }
        let widths: HashMap<usize, usize> = layers.iter().map(|l| (l.layer_id, l.channels)).collect();
        let n_records = r.read_u64::<LittleEndian>().map_err(short)? as usize;
        let mut records = Vec::new();
        for _ in 0..n_records {
            let sample_id = r.read_u32::<LittleEndian>().map_err(short)? as usize;
            let layer_id = r.read_u32::<LittleEndian>().map_err(short)? as usize;
            let c = *widths
                .get(&layer_id)
                .ok_or_else(|| corrupt(path, format!("record for undeclared layer {layer_id}")))?;
            let n = c.div_ceil(8);
            if r.len() < n {
                return Err(corrupt(path, "unexpected end of decision log"));
            }
            let bits = (0..c).map(|i| r[i / 8] >> (i % 8) & 1 == 1).collect();
            r = &r[n..];
            records.push(DecisionRecord {
                sample_id,
                layer_id,
                bits,
            });
        }
        if !r.is_empty() {
            return Err(corrupt(path, format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            split,
            checkpoint_hash,
            num_samples,
            layers,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?, path)
    }

    /// One row per record: `sample_id,layer_id,layer,decisions` with the
    /// decisions as a `0`/`1` string in channel order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let names: HashMap<usize, &str> = self.layers.iter().map(|l| (l.layer_id, l.name.as_str())).collect();
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sample_id", "layer_id", "layer", "decisions"]).map_err(csv_err)?;
        for r in &self.records {
            let bits: String = r.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
            out.write_record([
                r.sample_id.to_string(),
                r.layer_id.to_string(),
                names.get(&r.layer_id).copied().unwrap_or("").to_string(),
                bits,
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelCategory {
    NeverPruned,
    SampleDependent,
    AlwaysPruned,
}

impl ChannelCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelCategory::NeverPruned => "never_pruned",
            ChannelCategory::SampleDependent => "sample_dependent",
            ChannelCategory::AlwaysPruned => "always_pruned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAnalysis {
    pub layer_id: usize,
    pub name: String,
    pub categories: Vec<ChannelCategory>,
    /// `histogram[k]` = number of samples with exactly `k` active channels.
    pub active_histogram: Vec<usize>,
}

impl LayerAnalysis {
    pub fn count(&self, c: ChannelCategory) -> usize {
        self.categories.iter().filter(|&&x| x == c).count()
    }

    /// Max minus min active-channel count over samples.
    pub fn active_spread(&self) -> usize {
        let present: Vec<usize> = (0..self.active_histogram.len())
            .filter(|&k| self.active_histogram[k] > 0)
            .collect();
        match (present.first(), present.last()) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0,
        }
    }

    pub fn mean_active_fraction(&self) -> f64 {
        let samples: usize = self.active_histogram.iter().sum();
        let channels = self.categories.len();
        if samples == 0 || channels == 0 {
            return 0.0;
        }
        let active: usize = self.active_histogram.iter().enumerate().map(|(k, n)| k * n).sum();
        active as f64 / (samples * channels) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionAnalysis {
    pub num_samples: usize,
    pub layers: Vec<LayerAnalysis>,
}

/// Categorizes every channel and histograms per-sample active counts.
///
/// The log must hold exactly one record per `(sample, layer)` for every
/// sample of the split.
pub fn analyze_decisions(log: &PruneDecisionLog) -> Result<DecisionAnalysis> {
    if log.num_samples == 0 {
        return Err(Error::Coverage("log covers no samples".into()));
    }
    let index: HashMap<usize, usize> = log.layers.iter().enumerate().map(|(i, l)| (l.layer_id, i)).collect();
    if index.len() != log.layers.len() {
        return Err(Error::Coverage("duplicate layer ids in the layer table".into()));
    }
    let mut seen = vec![vec![false; log.num_samples]; log.layers.len()];
    let mut ones: Vec<Vec<usize>> = log.layers.iter().map(|l| vec![0; l.channels]).collect();
    let mut hist: Vec<Vec<usize>> = log.layers.iter().map(|l| vec![0; l.channels + 1]).collect();
    for r in &log.records {
        let &li = index
            .get(&r.layer_id)
            .ok_or_else(|| Error::Coverage(format!("record for unknown layer {}", r.layer_id)))?;
        if r.sample_id >= log.num_samples {
            return Err(Error::Coverage(format!(
                "sample {} outside the split of {}",
                r.sample_id, log.num_samples
            )));
        }
        if r.bits.len() != log.layers[li].channels {
            return Err(Error::Coverage(format!(
                "sample {} layer {} has {} decisions, expected {}",
                r.sample_id,
                r.layer_id,
                r.bits.len(),
                log.layers[li].channels
            )));
        }
        if std::mem::replace(&mut seen[li][r.sample_id], true) {
            return Err(Error::Coverage(format!(
                "duplicate record for sample {} layer {}",
                r.sample_id, r.layer_id
            )));
        }
        let mut active = 0;
        for (c, _) in r.bits.iter().enumerate().filter(|(_, &b)| b) {
            ones[li][c] += 1;
            active += 1;
        }
        hist[li][active] += 1;
    }
    for (li, s) in seen.iter().enumerate() {
        if let Some(missing) = s.iter().position(|&x| !x) {
            return Err(Error::Coverage(format!(
                "no record for sample {missing} in layer {}",
                log.layers[li].layer_id
            )));
        }
    }
    let layers = log
        .layers
        .iter()
        .zip(ones)
        .zip(hist)
        .map(|((l, ones), active_histogram)| LayerAnalysis {
            layer_id: l.layer_id,
            name: l.name.clone(),
            categories: ones
                .into_iter()
                .map(|n| match n {
                    0 => ChannelCategory::AlwaysPruned,
                    n if n == log.num_samples => ChannelCategory::NeverPruned,
                    _ => ChannelCategory::SampleDependent,
                })
                .collect(),
            active_histogram,
        })
        .collect();
    Ok(DecisionAnalysis {
        num_samples: log.num_samples,
        layers,
    })
}

impl DecisionAnalysis {
    /// `layer_id,layer,channels,never_pruned,sample_dependent,always_pruned`.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "layer_id",
            "layer",
            "channels",
            "never_pruned",
            "sample_dependent",
            "always_pruned",
        ])
        .map_err(csv_err)?;
        for l in &self.layers {
            out.write_record([
                l.layer_id.to_string(),
                l.name.clone(),
                l.categories.len().to_string(),
                l.count(ChannelCategory::NeverPruned).to_string(),
                l.count(ChannelCategory::SampleDependent).to_string(),
                l.count(ChannelCategory::AlwaysPruned).to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// `layer_id,layer,channel,category`.
    pub fn write_categories_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer_id", "layer", "channel", "category"]).map_err(csv_err)?;
        for l in &self.layers {
            for (c, cat) in l.categories.iter().enumerate() {
                out.write_record([l.layer_id.to_string(), l.name.clone(), c.to_string(), cat.as_str().into()])
                    .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// `layer_id,layer,active_channels,samples`, one row per possible count.
    pub fn write_histogram_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer_id", "layer", "active_channels", "samples"]).map_err(csv_err)?;
        for l in &self.layers {
            for (k, n) in l.active_histogram.iter().enumerate() {
                out.write_record([l.layer_id.to_string(), l.name.clone(), k.to_string(), n.to_string()])
                    .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(bits: &[&[bool]]) -> PruneDecisionLog {
        let mut log = PruneDecisionLog::new(
            Split::Test,
            "ab".repeat(32),
            vec![LayerInfo {
                layer_id: 3,
                name: "layer3".into(),
                channels: bits[0].len(),
            }],
        );
        log.num_samples = bits.len();
        for (i, b) in bits.iter().enumerate() {
            log.records.push(DecisionRecord {
                sample_id: i,
                layer_id: 3,
                bits: b.to_vec(),
            });
        }
        log
    }

    #[test]
    fn categories() {
        let a = analyze_decisions(&log(&[&[true, true, false], &[false, true, false]])).unwrap();
        let l = &a.layers[0];
        assert_eq!(
            l.categories,
            vec![
                ChannelCategory::SampleDependent,
                ChannelCategory::NeverPruned,
                ChannelCategory::AlwaysPruned
            ]
        );
        assert_eq!(l.active_histogram, vec![0, 1, 1, 0]);
        assert_eq!(l.active_spread(), 1);

        let all = analyze_decisions(&log(&[&[true; 4], &[true; 4]])).unwrap();
        assert_eq!(all.layers[0].count(ChannelCategory::NeverPruned), 4);
        assert_eq!(all.layers[0].active_spread(), 0);
    }

    #[test]
    fn coverage_errors() {
        let mut l = log(&[&[true], &[false]]);
        l.num_samples = 3;
        assert!(matches!(analyze_decisions(&l), Err(Error::Coverage(_))));
        let mut l = log(&[&[true], &[false]]);
        l.records[1].sample_id = 0;
        assert!(matches!(analyze_decisions(&l), Err(Error::Coverage(_))));
        let mut l = log(&[&[true, false]]);
        l.records[0].bits.pop();
        assert!(matches!(analyze_decisions(&l), Err(Error::Coverage(_))));
    }

    #[test]
    fn binary_round_trip() {
        let l = log(&[
            &[true, false, true, true, false, false, true, false, true],
            &[false; 9],
        ]);
        let bytes = l.encode();
        assert_eq!(PruneDecisionLog::decode(&bytes, Path::new("x")).unwrap(), l);
        assert!(PruneDecisionLog::decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut csv = Vec::new();
        l.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().nth(1), Some("0,3,layer3,101100101"));
    }
}
