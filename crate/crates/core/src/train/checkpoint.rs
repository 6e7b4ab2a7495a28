//! Binary checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! "ASAP" | version u32
//! net:   stage channels 4×u32 | blocks u32 | fpn width u32 | classes u32
//!        | attention u8 (0 none, 1 vertical, 2 horizontal) | fusion u8
//! step u64 | rng seed [u8; 32] | rng stream u64 | rng word position u128
//! params u32, then per parameter:
//!        name (u32 length + UTF-8) | kind u8 | element type u8 (1 = f64)
//!        | rank u32 | dims u64×rank | values f64×n | momentum f64×n
//! stats u32, then per batch norm:
//!        name | channels u32 | momentum f64 | updates u64
//!        | mean f64×c | var f64×c
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{Result, SgdState, TrainError, TrainState};
use crate::network::{
    AsapNet, BackboneConfig, FusionMode, NetConfig, ParamId, ParamKind, PoolAxis,
};
use crate::nn::RunningStats;
use rand::SeedableRng;

pub const MAGIC: &[u8; 4] = b"ASAP";
pub const FORMAT_VERSION: u32 = 1;
const F64: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.0.extend(x.to_le_bytes()));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TrainError::Checkpoint("name is not UTF-8".into()))
    }
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(FORMAT_VERSION as usize);
    let cfg = &state.net.config;
    cfg.backbone.stage_channels.iter().for_each(|&c| w.u32(c));
    w.u32(cfg.backbone.blocks_per_stage);
    w.u32(cfg.fpn_width);
    w.u32(cfg.n_classes);
    w.u8(match cfg.attention {
        None => 0,
        Some(PoolAxis::Vertical) => 1,
        Some(PoolAxis::Horizontal) => 2,
    });
    w.u8(match cfg.fusion {
        FusionMode::Both => 0,
        FusionMode::LayerOnly => 1,
        FusionMode::InstanceOnly => 2,
        FusionMode::Plain => 3,
    });
    w.u64(state.step);
    w.0.extend(state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend(state.rng.get_word_pos().to_le_bytes());

    let entries = state.net.params.entries();
    w.u32(entries.len());
    for (e, v) in entries.iter().zip(&state.sgd.velocity) {
        w.str(&e.name);
        w.u8(e.kind.code());
        w.u8(F64);
        w.u32(e.tensor.rank());
        e.tensor.dims().iter().for_each(|&d| w.u64(d as u64));
        w.f64s(e.tensor.data());
        w.f64s(v);
    }
    let stats = &state.net.stats;
    w.u32(stats.stats.len());
    for (name, s) in stats.names.iter().zip(&stats.stats) {
        w.str(name);
        w.u32(s.mean.len());
        w.f64s(&[s.momentum]);
        w.u64(s.updates);
        w.f64s(&s.mean);
        w.f64s(&s.var);
    }
    w.0
}

fn read_config(r: &mut Reader<'_>) -> Result<NetConfig> {
    let mut stage_channels = [0; 4];
    for c in &mut stage_channels {
        *c = r.u32()?;
    }
    let blocks_per_stage = r.u32()?;
    let fpn_width = r.u32()?;
    let n_classes = r.u32()?;
    let attention = match r.u8()? {
        0 => None,
        1 => Some(PoolAxis::Vertical),
        2 => Some(PoolAxis::Horizontal),
        a => return Err(bad(format!("attention code {a}"))),
    };
    let fusion = match r.u8()? {
        0 => FusionMode::Both,
        1 => FusionMode::LayerOnly,
        2 => FusionMode::InstanceOnly,
        3 => FusionMode::Plain,
        f => return Err(bad(format!("fusion code {f}"))),
    };
    Ok(NetConfig {
        backbone: BackboneConfig {
            stage_channels,
            blocks_per_stage,
        },
        fpn_width,
        n_classes,
        attention,
        fusion,
    })
}

/// Rebuilds the network from the stored config, then overwrites every
/// parameter, momentum buffer and running statistic. Names, kinds and
/// shapes must match the rebuilt network exactly.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config = read_config(&mut r)?;
    let step = r.u64()?;
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut net = AsapNet::new(config, 0)?;
    let n = r.u32()?;
    if n != net.params.len() {
        return Err(bad(format!("{n} parameters, network has {}", net.params.len())));
    }
    let mut velocity = Vec::with_capacity(n);
    for i in 0..n {
        let name = r.str()?;
        let kind = ParamKind::from_code(r.u8()?).ok_or_else(|| bad(format!("{name}: unknown kind")))?;
        if r.u8()? != F64 {
            return Err(bad(format!("{name}: unsupported element type")));
        }
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let entry = &net.params.entries()[i];
        if entry.name != name || entry.kind != kind || entry.tensor.dims() != dims.as_slice() {
            return Err(bad(format!(
                "entry {i} is {name} {kind:?} {dims:?}, network expects {} {:?} {:?}",
                entry.name,
                entry.kind,
                entry.tensor.dims()
            )));
        }
        let numel = entry.tensor.numel();
        let values = r.f64s(numel)?;
        net.params.set_values(ParamId(i), values)?;
        velocity.push(r.f64s(numel)?);
    }
    let ns = r.u32()?;
    if ns != net.stats.stats.len() {
        return Err(bad(format!("{ns} batch norms, network has {}", net.stats.stats.len())));
    }
    for i in 0..ns {
        let name = r.str()?;
        let channels = r.u32()?;
        if net.stats.names[i] != name || net.stats.stats[i].mean.len() != channels {
            return Err(bad(format!("batch norm {i} is {name} with {channels} channels")));
        }
        let momentum = r.f64()?;
        let updates = r.u64()?;
        let mean = r.f64s(channels)?;
        let var = r.f64s(channels)?;
        net.stats.stats[i] = RunningStats {
            mean,
            var,
            momentum,
            updates,
        };
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(TrainState {
        net,
        sgd: SgdState { velocity },
        step,
        rng,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(state))?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            backbone: BackboneConfig {
                stage_channels: [4, 4, 8, 8],
                blocks_per_stage: 1,
            },
            fpn_width: 8,
            ..NetConfig::default()
        }
    }

    #[test]
    fn header_fields() {
        let st = TrainState::new(small(), 3).unwrap();
        let bytes = encode_checkpoint(&st);
        assert_eq!(&bytes[..4], b"ASAP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let st = TrainState::new(small(), 3).unwrap();
        let bytes = encode_checkpoint(&st);
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(decode_checkpoint(&wrong_magic).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
