//! Checkpoint files: `PMOE1`, the full run config, a blank line, `step N`,
//! `tensors N`, then per tensor a little-endian record
//! `u32 name_len, name, u32 rank, u64 dims.., f64 data..`.

use std::path::Path;

use crate::blocks::Model;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::classifier::DESCRIPTOR_DIM;
use crate::train::DatasetClassifier;

const MAGIC: &str = "PMOE1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub model: Model,
    pub classifier: Option<DatasetClassifier>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= self.buf.len() / 8)
            .ok_or_else(|| Error::Format(format!("tensor {name} is larger than the file")))?;
        let bytes = self.take(numel * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn line<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &buf[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header is truncated".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("length matches")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC}\n{}\nstep {}\n", self.config.to_text(), self.step).into_bytes();
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (n, s) in &self.model.buffers {
            tensors.push((format!("buffer/{n}/mean"), vec_tensor(&s.mean)));
            tensors.push((format!("buffer/{n}/var"), vec_tensor(&s.var)));
        }
        if let Some(c) = &self.classifier {
            tensors.push(("classifier/mean".into(), vec_tensor(&c.mean)));
            tensors.push(("classifier/std".into(), vec_tensor(&c.std)));
            tensors.push(("classifier/weights".into(), c.weights.clone()));
            tensors.push(("classifier/bias".into(), vec_tensor(&c.bias)));
            tensors.push((
                "classifier/meta".into(),
                vec_tensor(&[c.iterations as f64, c.final_grad_norm]),
            ));
        }
        out.extend(format!("tensors {}\n", tensors.len()).into_bytes());
        for (n, t) in &tensors {
            put_tensor(&mut out, n, t);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if line(buf, &mut pos)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut text = String::new();
        loop {
            let l = line(buf, &mut pos)?;
            if l.is_empty() {
                break;
            }
            text.push_str(l);
            text.push('\n');
        }
        let config = RunConfig::parse(&text)?;
        let count = |l: &str, key: &str| -> Result<usize> {
            l.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("expected `{key} N`, got {l:?}")))
        };
        let step = count(line(buf, &mut pos)?, "step ")?;
        let n = count(line(buf, &mut pos)?, "tensors ")?;
        let mut r = Reader { buf, pos };
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            tensors.push(r.tensor()?);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }

        let specs = config.datasets()?;
        let names: Vec<String> = specs.iter().filter(|s| !s.held_out).map(|s| s.name.clone()).collect();
        let mut model = Model::new(config.network(names.len())?, config.seed()?)?;
        let mut loaded = ParamStore::new();
        let mut classifier: Option<DatasetClassifier> = None;
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("buffer/") {
                let (buf_name, field) = rest
                    .rsplit_once('/')
                    .ok_or_else(|| Error::Format(format!("bad buffer entry {name}")))?;
                let stats = model
                    .buffers
                    .get_mut(buf_name)
                    .ok_or_else(|| Error::Config(format!("checkpoint buffer {buf_name} is not in the model")))?;
                let dst = match field {
                    "mean" => &mut stats.mean,
                    "var" => &mut stats.var,
                    _ => return Err(Error::Format(format!("bad buffer entry {name}"))),
                };
                if dst.len() != t.numel() {
                    return Err(Error::Config(format!("buffer {name} has {} values, model expects {}", t.numel(), dst.len())));
                }
                dst.copy_from_slice(t.data());
            } else if let Some(field) = name.strip_prefix("classifier/") {
                let c = classifier.get_or_insert_with(|| DatasetClassifier {
                    names: names.clone(),
                    mean: [0.0; DESCRIPTOR_DIM],
                    std: [1.0; DESCRIPTOR_DIM],
                    weights: Tensor::zeros(&[DESCRIPTOR_DIM, names.len()]),
                    bias: vec![0.0; names.len()],
                    iterations: 0,
                    final_grad_norm: 0.0,
                });
                let bad = || Error::Format(format!("classifier entry {name} has the wrong size"));
                match field {
                    "mean" => c.mean = t.data().try_into().map_err(|_| bad())?,
                    "std" => c.std = t.data().try_into().map_err(|_| bad())?,
                    "weights" if t.shape() == [DESCRIPTOR_DIM, names.len()] => c.weights = t,
                    "bias" if t.numel() == names.len() => c.bias = t.into_data(),
                    "meta" if t.numel() == 2 => {
                        c.iterations = t.data()[0] as usize;
                        c.final_grad_norm = t.data()[1];
                    }
                    _ => return Err(bad()),
                }
            } else {
                loaded.insert(&name, t)?;
            }
        }
        if loaded.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, config builds {}",
                loaded.len(),
                model.params.len()
            )));
        }
        for i in 0..model.params.len() {
            let (name, want_shape) = {
                let (n, t) = model.params.iter().nth(i).expect("in range");
                (n.to_string(), t.shape().to_vec())
            };
            let t = loaded
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != want_shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {want_shape:?}",
                    t.shape()
                )));
            }
            *model.params.at_mut(i) = t.clone();
        }
        Ok(Checkpoint {
            config,
            step,
            model,
            classifier,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
