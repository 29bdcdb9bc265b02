//! Binary checkpoints: magic, a version byte, then tagged little-endian sections.
//!
//! ```text
//! "DCLTCKPT" version:u8
//! ( tag:[u8;4] len:u64 payload )*      tags: GRID MLP_ ADAM META
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::hash_encoding::{HashGrid, HashGridConfig, Indexing};
use crate::radiance_field::{FieldConfig, FieldNetwork};
use crate::trainer::AdamState;
use crate::volume_renderer::RadianceModel;

pub const MAGIC: &[u8; 8] = b"DCLTCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of completed iterations.
    pub iteration: usize,
    pub model: RadianceModel<f32>,
    pub adam: AdamState,
    /// Training configuration as JSON, kept for provenance.
    pub config_json: String,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.bytes(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self) -> std::result::Result<Vec<f32>, String> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn section(&mut self, tag: &[u8; 4]) -> std::result::Result<Reader<'a>, String> {
        let found = self.take(4)?;
        if found != tag {
            return Err(format!("expected section {:?}, found {:?}", String::from_utf8_lossy(tag), String::from_utf8_lossy(found)));
        }
        Ok(Reader { buf: self.bytes()?, pos: 0 })
    }
}

fn write_net(w: &mut Writer, net: &FieldNetwork<f32>) {
    for s in net.param_slices() {
        w.f32s(s);
    }
}

fn read_net_into(r: &mut Reader, net: &mut FieldNetwork<f32>) -> std::result::Result<(), String> {
    for s in net.param_slices_mut() {
        let v = r.f32s()?;
        if v.len() != s.len() {
            return Err(format!("layer holds {} values, expected {}", v.len(), s.len()));
        }
        s.copy_from_slice(&v);
    }
    Ok(())
}

fn read_tables(r: &mut Reader, levels: usize, len: usize) -> std::result::Result<Vec<Vec<f32>>, String> {
    (0..levels)
        .map(|_| {
            let t = r.f32s()?;
            if t.len() != len {
                return Err(format!("table holds {} values, expected {len}", t.len()));
            }
            Ok(t)
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Writer::default();
        out.0.extend_from_slice(MAGIC);
        out.u8(VERSION);

        let grid = &self.model.grid;
        let c = grid.config;
        let mut g = Writer::default();
        for v in [c.levels as u32, c.log2_table_size, c.features as u32, c.coarsest, c.finest] {
            g.u32(v);
        }
        g.u8(match grid.indexing {
            Indexing::Auto => 0,
            Indexing::Hashed => 1,
        });
        for t in &grid.tables {
            g.f32s(t);
        }
        out.section(b"GRID", g);

        let net = &self.model.net;
        let mut m = Writer::default();
        for v in [net.feature_dim, net.config.hidden, net.config.hidden_layers, net.config.geo_features] {
            m.u32(v as u32);
        }
        write_net(&mut m, net);
        out.section(b"MLP_", m);

        let mut a = Writer::default();
        a.u64(self.adam.step);
        a.u64(self.iteration as u64);
        for t in self.adam.grid_m.iter().chain(&self.adam.grid_v) {
            a.f32s(t);
        }
        write_net(&mut a, &self.adam.net_m);
        write_net(&mut a, &self.adam.net_v);
        out.section(b"ADAM", a);

        let mut meta = Writer::default();
        for v in self.model.aabb.min.0.iter().chain(&self.model.aabb.max.0) {
            meta.f64(*v);
        }
        meta.bytes(self.config_json.as_bytes());
        out.section(b"META", meta);
        out.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        if buf.len() < MAGIC.len() + 1 || &buf[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let found = buf[MAGIC.len()];
        if found != VERSION {
            return Err(Error::CheckpointVersion { found, expected: VERSION });
        }
        let mut r = Reader { buf, pos: MAGIC.len() + 1 };
        Self::parse(&mut r).map_err(bad)
    }

    fn parse(r: &mut Reader) -> std::result::Result<Self, String> {
        let mut g = r.section(b"GRID")?;
        let config = HashGridConfig {
            levels: g.u32()? as usize,
            log2_table_size: g.u32()?,
            features: g.u32()? as usize,
            coarsest: g.u32()?,
            finest: g.u32()?,
        };
        let indexing = match g.u8()? {
            0 => Indexing::Auto,
            1 => Indexing::Hashed,
            k => return Err(format!("unknown indexing mode {k}")),
        };
        let mut grid = HashGrid::<f32>::zeros(config).map_err(|e| e.to_string())?.with_indexing(indexing);
        let table_len = config.table_size() * config.features;
        grid.tables = read_tables(&mut g, config.levels, table_len)?;

        let mut m = r.section(b"MLP_")?;
        let feature_dim = m.u32()? as usize;
        let fc = FieldConfig { hidden: m.u32()? as usize, hidden_layers: m.u32()? as usize, geo_features: m.u32()? as usize };
        let mut net = FieldNetwork::<f32>::zeros(feature_dim, fc);
        read_net_into(&mut m, &mut net)?;

        let mut a = r.section(b"ADAM")?;
        let step = a.u64()?;
        let iteration = a.u64()? as usize;
        let grid_m = read_tables(&mut a, config.levels, table_len)?;
        let grid_v = read_tables(&mut a, config.levels, table_len)?;
        let mut net_m = net.zeros_like();
        let mut net_v = net.zeros_like();
        read_net_into(&mut a, &mut net_m)?;
        read_net_into(&mut a, &mut net_v)?;

        let mut meta = r.section(b"META")?;
        let mut corners = [0.0; 6];
        for c in &mut corners {
            *c = meta.f64()?;
        }
        let config_json = String::from_utf8(meta.bytes()?.to_vec()).map_err(|e| e.to_string())?;
        if r.pos != r.buf.len() {
            return Err(format!("{} trailing bytes", r.buf.len() - r.pos));
        }
        let aabb = Aabb { min: Vec3([corners[0], corners[1], corners[2]]), max: Vec3([corners[3], corners[4], corners[5]]) };
        let model = RadianceModel::new(grid, net, aabb).map_err(|e| e.to_string())?;
        Ok(Checkpoint { iteration, model, adam: AdamState { step, grid_m, grid_v, net_m, net_v }, config_json })
    }

    /// Writes through a temporary sibling and renames, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
