//! Weight file: one line of compact JSON header, a `\n`, then the tensor
//! payload as little-endian IEEE-754 `f64`. Tensor offsets in the header are
//! byte offsets from the start of the payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Model, ModelSpec, Weights};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "crossdraft-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn write_model<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let named = model.weights().named_tensors();
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len() as u64;
            entry
        })
        .collect();
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        spec: *model.spec(),
        tensors,
    };
    let json = serde_json::to_string(&header)
        .map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    let io = |e| Error::io("writing weights", e);
    out.write_all(json.as_bytes()).map_err(io)?;
    out.write_all(b"\n").map_err(io)?;
    for (_, t) in named {
        for v in t.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_model(model, BufWriter::new(f))
}

pub fn read_model<R: Read>(input: R) -> Result<Model> {
    let mut reader = BufReader::new(input);
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io("reading weight header", e))?;
    if line.last() != Some(&b'\n') {
        bail!(Format, "missing header terminator");
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        bail!(
            Format,
            "unsupported format {} v{}",
            header.format,
            header.version
        );
    }
    let spec = header.spec;
    spec.validate()?;
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io("reading weight payload", e))?;

    let expected = Weights::expected_shapes(&spec);
    if header.tensors.len() != expected.len() {
        bail!(
            Format,
            "{} tensors in file, {} expected",
            header.tensors.len(),
            expected.len()
        );
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name {
            bail!(Format, "tensor {} where {name} was expected", entry.name);
        }
        if &entry.shape != shape {
            bail!(
                Dimension,
                "{name}: file shape {:?}, spec requires {shape:?}",
                entry.shape
            );
        }
        let n: usize = shape.iter().product();
        let start = usize::try_from(entry.offset)
            .map_err(|_| Error::Format(format!("{name}: offset overflow")))?;
        let end = start + 8 * n;
        if end > payload.len() {
            bail!(Format, "{name}: payload truncated");
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }

    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("count checked above");
    let embed = next();
    let layers = (0..spec.n_layers)
        .map(|_| LayerWeights {
            attn_norm: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            mlp_norm: next(),
            w_in: next(),
            w_out: next(),
        })
        .collect();
    let final_norm = next();
    let unembed = next();
    Model::new(
        spec,
        Weights {
            embed,
            layers,
            final_norm,
            unembed,
        },
    )
}

pub fn load_model(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_model(f)
}
