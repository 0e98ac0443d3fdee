//! Versioned binary container shared by model files.
//!
//! Layout, all integers little-endian:
//! 5-byte magic, `u32` length + UTF-8 `key=value` lines, `u32` list count
//! then per list `name` and `u32` count of strings, `u32` tensor count then
//! per tensor `name`, `u32` ndim, `u64` dims and raw `f64` data.
//! Strings are `u32` byte length followed by the bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub lists: Vec<(String, Vec<String>)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.what, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.what, "invalid UTF-8"))
    }
}

impl Container {
    pub fn to_bytes(&self, magic: &[u8; 5]) -> Vec<u8> {
        let mut out = magic.to_vec();
        let text: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut out, &text);
        put_u32(&mut out, self.lists.len());
        for (name, items) in &self.lists {
            put_str(&mut out, name);
            put_u32(&mut out, items.len());
            for s in items {
                put_str(&mut out, s);
            }
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 5], what: &'static str) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, what };
        if r.take(5)? != magic {
            return Err(Error::format(
                what,
                format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
            ));
        }
        let mut meta = Vec::new();
        for line in r.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(what, format!("header line `{line}` lacks `=`")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let n_lists = r.u32()?;
        let mut lists = Vec::with_capacity(n_lists);
        for _ in 0..n_lists {
            let name = r.string()?;
            let n = r.u32()?;
            let items = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
            lists.push((name, items));
        }
        let n_tensors = r.u32()?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string()?;
            let ndim = r.u32()?;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(what, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(what, format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(what, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, lists, tensors })
    }

    pub fn save(&self, path: &Path, magic: &[u8; 5]) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes(magic)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: &[u8; 5], what: &'static str) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic, what)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse<T: FromStr>(&self, key: &str, what: &'static str) -> Result<T> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::format(what, format!("missing header key `{key}`")))?;
        v.parse()
            .map_err(|_| Error::format(what, format!("header key `{key}` has bad value `{v}`")))
    }

    pub fn list(&self, name: &str) -> Option<&[String]> {
        self.lists.iter().find(|(n, _)| n == name).map(|(_, l)| l.as_slice())
    }
}
