//! Text-header + little-endian `f64` container used for model checkpoints
//! and baseline model files.
//!
//! ```text
//! TWEETAFFECT <kind> 1
//! meta <key> <value>
//! token <count> <surface>
//! tensor <name> <d1>x<d2>...
//! data
//! <raw little-endian f64 arrays, in manifest order>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::Tensor;

const MAGIC: &str = "TWEETAFFECT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tokens: Vec<(String, u64)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::invalid(format!("{} file is missing {key:?}", self.kind)))?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("{} file has a bad {key:?}: {raw:?}", self.kind)))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC} {} {FORMAT_VERSION}", self.kind)?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} {v}")?;
        }
        for (t, c) in &self.tokens {
            writeln!(w, "token {c} {t}")?;
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "tensor {name} {}", if dims.is_empty() { "scalar".into() } else { dims.join("x") })?;
        }
        writeln!(w, "data")?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read<R: Read>(reader: R, what: &str) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let mut line = String::new();
        let mut lineno = 0;
        let mut next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<usize> {
            line.clear();
            lineno += 1;
            let n = r.read_line(line).map_err(|e| Error::io(what, e))?;
            if n == 0 {
                return Err(Error::parse(what, lineno, "unexpected end of header"));
            }
            while line.ends_with('\n') || line.ends_with('\r') {
                line.pop();
            }
            Ok(lineno)
        };

        let n = next_line(&mut r, &mut line)?;
        let head: Vec<&str> = line.split(' ').collect();
        let kind = match head[..] {
            [MAGIC, kind, version] => {
                if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                    return Err(Error::parse(what, n, format!("unsupported format version {version}")));
                }
                kind.to_string()
            }
            _ => return Err(Error::parse(what, n, "not a model file")),
        };
        let mut out = Container::new(kind);
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let n = next_line(&mut r, &mut line)?;
            if line == "data" {
                break;
            }
            let (tag, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match tag {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    out.meta.push((k.to_string(), v.to_string()));
                }
                "token" => {
                    let (c, t) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::parse(what, n, "expected token <count> <surface>"))?;
                    let c = c.parse().map_err(|_| Error::parse(what, n, format!("bad count {c:?}")))?;
                    out.tokens.push((t.to_string(), c));
                }
                "tensor" => {
                    let (name, dims) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::parse(what, n, "expected tensor <name> <shape>"))?;
                    let shape = if dims == "scalar" {
                        vec![]
                    } else {
                        dims.split('x')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| Error::parse(what, n, format!("bad shape {dims:?}")))?
                    };
                    manifest.push((name.to_string(), shape));
                }
                _ => return Err(Error::parse(what, n, format!("unexpected header line {line:?}"))),
            }
        }
        let mut buf = [0u8; 8];
        for (name, shape) in manifest {
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::invalid(format!("{what}: data for tensor {name:?} is truncated")))?;
                data.push(f64::from_le_bytes(buf));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{what}: tensor {name:?} contains non-finite values")));
            }
            out.tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(what, e))?;
        if !rest.is_empty() {
            return Err(Error::invalid(format!("{what}: {} trailing bytes after tensor data", rest.len())));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Container::read(file, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.set("alpha", 0.5);
        c.set("head", "ordinal 4");
        c.tokens.push(("héllo".into(), 3));
        c.tokens.push(("😂".into(), 1));
        c.tensors.push(("w".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 1e-300, 3.0]).unwrap()));
        c.tensors.push(("s".into(), Tensor::scalar(7.0)));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let back = Container::read(&buf[..], "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.require::<f64>("alpha").unwrap(), 0.5);
        assert!(back.require::<usize>("missing").is_err());
    }

    #[test]
    fn truncated_data_is_rejected() {
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Container::read(&buf[..], "mem").is_err());
        let mut extra = Vec::new();
        sample().write(&mut extra).unwrap();
        extra.push(0);
        assert!(Container::read(&extra[..], "mem").is_err());
    }

    #[test]
    fn bad_magic() {
        assert!(Container::read(&b"hello\ndata\n"[..], "mem").is_err());
        assert!(Container::read(&b"TWEETAFFECT x 9\ndata\n"[..], "mem").is_err());
    }
}
