//! Binary checkpoints: config echo, both students' parameters and
//! normalization buffers, both optimizer states, and the augmentation
//! stream position. All numeric payloads are little-endian f64 bit
//! patterns, so save -> load -> save is byte-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::objective::OptimizerState;
use crate::students::BnBuffer;

const MAGIC: &[u8; 4] = b"CTRK";
const VERSION: u16 = 1;

/// Serializable snapshot of one student.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentState {
    /// (name, shape, data) per parameter, in declaration order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub buffers: Vec<BnBuffer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub config: RunConfig,
    pub epoch_done: usize,
    pub global_iter: u64,
    pub aug_seed: u64,
    pub aug_word_pos: u128,
    pub cnn: StudentState,
    pub transformer: StudentState,
    pub opt_cnn: OptimizerState,
    pub opt_transformer: OptimizerState,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u32(vs.len() as u32);
        for v in vs {
            self.f64(*v);
        }
    }
    fn string(&mut self, s: &str) {
        let b = s.as_bytes();
        self.u32(b.len() as u32);
        self.bytes(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("non-utf8 string in checkpoint".into()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_student(w: &mut Writer, s: &StudentState) {
    w.u32(s.params.len() as u32);
    for (name, shape, data) in &s.params {
        w.string(name);
        w.u32(shape.len() as u32);
        for d in shape {
            w.u32(*d as u32);
        }
        w.f64s(data);
    }
    w.u32(s.buffers.len() as u32);
    for b in &s.buffers {
        w.string(&b.name);
        w.f64s(&b.running_mean);
        w.f64s(&b.running_var);
    }
}

fn read_student(r: &mut Reader) -> Result<StudentState> {
    let np = r.u32()? as usize;
    let mut params = Vec::with_capacity(np);
    for _ in 0..np {
        let name = r.string()?;
        let nd = r.u32()? as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(r.u32()? as usize);
        }
        let data = r.f64s()?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!("parameter {name} shape/data mismatch")));
        }
        params.push((name, shape, data));
    }
    let nb = r.u32()? as usize;
    let mut buffers = Vec::with_capacity(nb);
    for _ in 0..nb {
        let name = r.string()?;
        let running_mean = r.f64s()?;
        let running_var = r.f64s()?;
        buffers.push(BnBuffer { name, running_mean, running_var });
    }
    Ok(StudentState { params, buffers })
}

fn write_opt(w: &mut Writer, o: &OptimizerState) {
    w.u64(o.step);
    w.f64(o.base_lr);
    w.f64(o.weight_decay);
    w.f64(o.beta1);
    w.f64(o.beta2);
    w.f64(o.eps_opt);
    w.u32(o.m.len() as u32);
    for m in &o.m {
        w.f64s(m);
    }
    for v in &o.v {
        w.f64s(v);
    }
}

fn read_opt(r: &mut Reader) -> Result<OptimizerState> {
    let step = r.u64()?;
    let base_lr = r.f64()?;
    let weight_decay = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps_opt = r.f64()?;
    let n = r.u32()? as usize;
    let mut m = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.f64s()?);
    }
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(r.f64s()?);
    }
    Ok(OptimizerState { base_lr, weight_decay, beta1, beta2, eps_opt, step, m, v })
}

pub fn encode(ckpt: &CheckpointRecord) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.string(&ckpt.config.to_text());
    w.u32(ckpt.epoch_done as u32);
    w.u64(ckpt.global_iter);
    w.u64(ckpt.aug_seed);
    w.u128(ckpt.aug_word_pos);
    write_student(&mut w, &ckpt.cnn);
    write_student(&mut w, &ckpt.transformer);
    write_opt(&mut w, &ckpt.opt_cnn);
    write_opt(&mut w, &ckpt.opt_transformer);
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointRecord> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config = RunConfig::from_text(&r.string()?)?;
    let epoch_done = r.u32()? as usize;
    let global_iter = r.u64()?;
    let aug_seed = r.u64()?;
    let aug_word_pos = r.u128()?;
    let cnn = read_student(&mut r)?;
    let transformer = read_student(&mut r)?;
    let opt_cnn = read_opt(&mut r)?;
    let opt_transformer = read_opt(&mut r)?;
    if !r.done() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(CheckpointRecord {
        config,
        epoch_done,
        global_iter,
        aug_seed,
        aug_word_pos,
        cnn,
        transformer,
        opt_cnn,
        opt_transformer,
    })
}

pub fn save_checkpoint(ckpt: &CheckpointRecord, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
