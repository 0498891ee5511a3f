//! Binary checkpoint: text header lines followed by raw little-endian f64
//! payloads.
//!
//! ```text
//! CKPT v1
//! meta <n_bytes>
//! <n_bytes of UTF-8 metadata>
//! params <count>
//! param <name> <init> <ndim> <dims...>
//! <8 * numel bytes>
//! ...
//! optim <0|1>
//! step <n>                      (when optim 1)
//! <beta1, beta2, eps as 24 bytes>
//! <m then v for each param>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{AdamState, Init, ParamStore, Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata (the model and PE configuration as JSON).
    pub meta: String,
    pub params: ParamStore,
    pub optim: Option<AdamState>,
}

fn init_token(init: Init) -> String {
    match init {
        Init::Zeros => "zeros".into(),
        Init::Ones => "ones".into(),
        Init::XavierUniform => "xavier".into(),
        Init::Normal { std } => format!("normal:{:016x}", std.to_bits()),
    }
}

fn parse_init(tok: &str) -> Option<Init> {
    Some(match tok {
        "zeros" => Init::Zeros,
        "ones" => Init::Ones,
        "xavier" => Init::XavierUniform,
        _ => Init::Normal {
            std: f64::from_bits(u64::from_str_radix(tok.strip_prefix("normal:")?, 16).ok()?),
        },
    })
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"CKPT v1\n");
    out.extend_from_slice(format!("meta {}\n", ckpt.meta.len()).as_bytes());
    out.extend_from_slice(ckpt.meta.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("params {}\n", ckpt.params.len()).as_bytes());
    for (_, p) in ckpt.params.iter() {
        let mut line = format!("param {} {} {}", p.name, init_token(p.init), p.value.shape().len());
        for d in p.value.shape() {
            line.push_str(&format!(" {d}"));
        }
        line.push('\n');
        out.extend_from_slice(line.as_bytes());
        put_f64s(&mut out, p.value.data());
    }
    match &ckpt.optim {
        None => out.extend_from_slice(b"optim 0\n"),
        Some(s) => {
            out.extend_from_slice(format!("optim 1\nstep {}\n", s.step).as_bytes());
            put_f64s(&mut out, &[s.beta1, s.beta2, s.eps]);
            for (m, v) in s.m.iter().zip(&s.v) {
                put_f64s(&mut out, m);
                put_f64s(&mut out, v);
            }
        }
    }
    out
}

struct Cursor<R> {
    inner: R,
    pos: usize,
}

impl<R: BufRead> Cursor<R> {
    fn line(&mut self) -> Result<String> {
        let start = self.pos;
        let mut buf = Vec::new();
        let n = self
            .inner
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::format(start, e.to_string()))?;
        self.pos += n;
        if buf.pop() != Some(b'\n') {
            return Err(Error::format(start, "unexpected end of checkpoint"));
        }
        String::from_utf8(buf).map_err(|_| Error::format(start, "header line is not UTF-8"))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.pos, "truncated checkpoint payload"))?;
        self.pos += n;
        Ok(buf)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .bytes(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn expect_kv(&mut self, key: &str) -> Result<(usize, Vec<String>)> {
        let at = self.pos;
        let line = self.line()?;
        let mut toks = line.split(' ');
        if toks.next() != Some(key) {
            return Err(Error::format(at, format!("expected `{key}` line, found `{line}`")));
        }
        Ok((at, toks.map(String::from).collect()))
    }
}

fn num(at: usize, tok: Option<&String>) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(at, "expected a number"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor {
        inner: BufReader::new(bytes),
        pos: 0,
    };
    if c.line()? != "CKPT v1" {
        return Err(Error::format(0, "missing `CKPT v1` header"));
    }
    let (at, toks) = c.expect_kv("meta")?;
    let meta_len = num(at, toks.first())?;
    let meta = String::from_utf8(c.bytes(meta_len)?)
        .map_err(|_| Error::format(at, "metadata is not UTF-8"))?;
    c.bytes(1)?;
    let (at, toks) = c.expect_kv("params")?;
    let count = num(at, toks.first())?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let (at, toks) = c.expect_kv("param")?;
        if toks.len() < 3 {
            return Err(Error::format(at, "param line needs name, init and rank"));
        }
        let init = parse_init(&toks[1]).ok_or_else(|| Error::format(at, "bad init token"))?;
        let ndim = num(at, toks.get(2))?;
        let shape: Vec<usize> = (0..ndim).map(|i| num(at, toks.get(3 + i))).collect::<Result<_>>()?;
        let n = shape.iter().product();
        let value = Tensor::new(shape, c.f64s(n)?)?;
        params.params.push(Parameter {
            name: toks[0].clone(),
            value,
            init,
        });
    }
    let (at, toks) = c.expect_kv("optim")?;
    let optim = match num(at, toks.first())? {
        0 => None,
        1 => {
            let (at, toks) = c.expect_kv("step")?;
            let step = num(at, toks.first())? as u64;
            let hyper = c.f64s(3)?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (_, p) in params.iter() {
                m.push(c.f64s(p.value.len())?);
                v.push(c.f64s(p.value.len())?);
            }
            Some(AdamState {
                beta1: hyper[0],
                beta2: hyper[1],
                eps: hyper[2],
                step,
                m,
                v,
            })
        }
        _ => return Err(Error::format(at, "optim flag must be 0 or 1")),
    };
    let mut rest = Vec::new();
    c.inner.read_to_end(&mut rest).ok();
    if !rest.is_empty() {
        return Err(Error::format(c.pos, "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { meta, params, optim })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(ckpt))
        .map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{adam_step, ParamGrads};
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.add("embed.table", &[5, 3], Init::Normal { std: 0.02 }, &mut rng).unwrap();
        store.add("ln.gain", &[3], Init::Ones, &mut rng).unwrap();
        store.add("w", &[3, 4], Init::XavierUniform, &mut rng).unwrap();
        store.add("scalar", &[], Init::Zeros, &mut rng).unwrap();
        let mut adam = AdamState::new(&store);
        let mut g = ParamGrads::zeros(&store);
        g.0[2][1] = 0.25;
        adam_step(&mut store, &g, &mut adam, 1e-3).unwrap();
        let ckpt = Checkpoint {
            meta: "{\"variant\":\"NoPE\"}\nsecond line".into(),
            params: store,
            optim: Some(adam),
        };
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);

        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"CKPT v2\n").is_err());
    }
}
