//! Self-describing weight container.
//!
//! Layout: a UTF-8 text header terminated by the line `[data]`, followed by
//! every weight as little-endian `f32` in declaration order.
//!
//! ```text
//! cigmo-checkpoint
//! format_version = 1
//! step = 1200
//! [meta]
//! categories = 3
//! [nets]
//! categorizer = input 1024 | dense 1024 256 | relu | dense 256 3 | linear
//! [params]
//! categorizer.0.weight 1 256,1024
//! [data]
//! <binary>
//! ```

use std::io::{BufRead, Read, Write};

use super::error::{NnError, Result};
use super::params::ParamStore;
use super::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &str = "cigmo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    /// Free-form key/value block (model configuration, kind tags, fingerprints).
    pub meta: Vec<(String, String)>,
    /// Net name and its [`NetSpec`](super::NetSpec) text form.
    pub nets: Vec<(String, String)>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        Self {
            step: store.step(),
            meta: Vec::new(),
            nets: Vec::new(),
            params: store
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    shape: p.shape.clone(),
                    values: p.value.iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copy weight values into a store that already declares the same weights.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint holds {} weights, model declares {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store
                .lookup(&rec.name)
                .ok_or_else(|| NnError::Checkpoint(format!("model has no weight `{}`", rec.name)))?;
            if store.param(id).shape != rec.shape {
                return Err(NnError::Checkpoint(format!(
                    "weight `{}`: checkpoint shape {:?}, model shape {:?}",
                    rec.name,
                    rec.shape,
                    store.param(id).shape
                )));
            }
            let dst = store.value_mut(id);
            for (d, &v) in dst.iter_mut().zip(&rec.values) {
                *d = T::of(v as f64);
            }
        }
        store.set_step(self.step);
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::new();
        header.push_str(CHECKPOINT_MAGIC);
        header.push('\n');
        header.push_str(&format!("format_version = {CHECKPOINT_VERSION}\nstep = {}\n[meta]\n", self.step));
        for (k, v) in &self.meta {
            check_token(k)?;
            check_value(v)?;
            header.push_str(&format!("{k} = {v}\n"));
        }
        header.push_str("[nets]\n");
        for (k, v) in &self.nets {
            check_token(k)?;
            check_value(v)?;
            header.push_str(&format!("{k} = {v}\n"));
        }
        header.push_str("[params]\n");
        for p in &self.params {
            check_token(&p.name)?;
            let dims: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("{} {} {}\n", p.name, u8::from(p.trainable), dims.join(",")));
        }
        header.push_str("[data]\n");
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::new();
        for p in &self.params {
            for v in &p.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut std::io::BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(NnError::Checkpoint("truncated header".into()));
            }
            Ok(line.trim_end_matches('\n').to_owned())
        };
        if next_line(&mut r)? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("not a checkpoint file".into()));
        }
        let version = next_line(&mut r)?;
        match split_kv(&version) {
            Some(("format_version", v)) if v == CHECKPOINT_VERSION.to_string() => {}
            Some(("format_version", v)) => {
                return Err(NnError::Checkpoint(format!(
                    "format_version {v} unsupported (expected {CHECKPOINT_VERSION})"
                )))
            }
            _ => return Err(NnError::Checkpoint("missing format_version".into())),
        }
        let step = match split_kv(&next_line(&mut r)?) {
            Some(("step", v)) => v.parse().map_err(|_| NnError::Checkpoint(format!("bad step `{v}`")))?,
            _ => return Err(NnError::Checkpoint("missing step".into())),
        };
        if next_line(&mut r)? != "[meta]" {
            return Err(NnError::Checkpoint("missing [meta] section".into()));
        }
        let mut ckpt = Checkpoint { step, ..Default::default() };
        let mut section = "meta";
        loop {
            let l = next_line(&mut r)?;
            match l.as_str() {
                "[nets]" => section = "nets",
                "[params]" => section = "params",
                "[data]" => break,
                _ => match section {
                    "meta" | "nets" => {
                        let (k, v) = split_kv(&l).ok_or_else(|| NnError::Checkpoint(format!("bad line `{l}`")))?;
                        let entry = (k.to_owned(), v.to_owned());
                        if section == "meta" {
                            ckpt.meta.push(entry);
                        } else {
                            ckpt.nets.push(entry);
                        }
                    }
                    _ => {
                        let toks: Vec<&str> = l.split(' ').collect();
                        let [name, trainable, dims] = toks.as_slice() else {
                            return Err(NnError::Checkpoint(format!("bad weight line `{l}`")));
                        };
                        let shape = dims
                            .split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| NnError::Checkpoint(format!("bad shape for `{name}`")))?;
                        ckpt.params.push(ParamRecord {
                            name: (*name).to_owned(),
                            trainable: *trainable == "1",
                            shape,
                            values: Vec::new(),
                        });
                    }
                },
            }
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let needed: usize = ckpt.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>() * 4;
        if blob.len() != needed {
            return Err(NnError::Checkpoint(format!(
                "weight blob holds {} bytes, header declares {needed}",
                blob.len()
            )));
        }
        let mut chunks = blob.chunks_exact(4);
        for p in &mut ckpt.params {
            let n: usize = p.shape.iter().product();
            p.values = chunks
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
        }
        Ok(ckpt)
    }
}

fn split_kv(line: &str) -> Option<(&str, &str)> {
    line.split_once(" = ")
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.contains(char::is_whitespace) || s.contains('=') {
        return Err(NnError::Checkpoint(format!("invalid key `{s}`")));
    }
    Ok(())
}

fn check_value(s: &str) -> Result<()> {
    if s.contains('\n') {
        return Err(NnError::Checkpoint("values must be single-line".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Net, SeededRng};

    #[test]
    fn store_survives_write_and_read() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeededRng::new(1);
        let net = Net::new("enc", "input 6 | dense 6 4 | batchnorm | relu | dense 4 2 | linear".parse().unwrap(), &mut store, &mut rng)
            .unwrap();
        store.set_step(17);
        let mut ckpt = Checkpoint::from_store(&store);
        ckpt.meta.push(("categories".into(), "3".into()));
        ckpt.nets.push(("enc".into(), net.spec().to_string()));
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.meta("categories"), Some("3"));

        let mut fresh = ParamStore::<f32>::new();
        Net::<f32>::new("enc", net.spec().clone(), &mut fresh, &mut SeededRng::new(2)).unwrap();
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh.flat_values(), store.flat_values());
        assert_eq!(fresh.step(), 17);
    }

    #[test]
    fn truncated_blob_and_bad_version_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", &[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let mut bytes = Vec::new();
        Checkpoint::from_store(&store).write_to(&mut bytes).unwrap();
        let cut = &bytes[..bytes.len() - 2];
        assert!(Checkpoint::read_from(cut).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("format_version = 1", "format_version = 9");
        let err = Checkpoint::read_from(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("format_version"));
    }
}
