//! GSEG model files: `"GSEG"` magic, a little-endian u32 format version,
//! the embedded architecture config, then one table entry per tensor
//! (name length, name, rank, dims — u32 each — and raw little-endian f32
//! data), parameters first and running buffers after, in registry order.
//! Values are truncated to 32 bits on save even when training ran at 64.

use std::path::Path;

use crate::config::{parse_config_str, render_net_config};
use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::scalar::Scalar;
use crate::segnet::{NamedTensor, SegNet};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GSEG";
pub const FORMAT_VERSION: u32 = 1;

fn push_tensor<F: Scalar>(out: &mut Vec<u8>, entry: &NamedTensor<F>) {
    out.extend((entry.name.len() as u32).to_le_bytes());
    out.extend(entry.name.as_bytes());
    out.extend((entry.tensor.rank() as u32).to_le_bytes());
    for &d in entry.tensor.dims() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in entry.tensor.data() {
        out.extend((v.as_f64() as f32).to_le_bytes());
    }
}

pub fn save_model<F: Scalar>(net: &SegNet<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg_text = render_net_config(net.config());
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((cfg_text.len() as u32).to_le_bytes());
    out.extend(cfg_text.as_bytes());
    for entry in net.params().iter().chain(net.buffers()) {
        push_tensor(&mut out, entry);
    }
    atomic_write(path, &out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_entry<F: Scalar>(r: &mut Reader) -> Result<(String, Tensor<F>)> {
    let name_len = r.u32("tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
        .map_err(|_| Error::format(r.path, "tensor name is not UTF-8"))?
        .to_string();
    let rank = r.u32("tensor rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let d = r.u32("tensor dim")? as usize;
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::format(r.path, format!("tensor {name} dims overflow")))?;
        dims.push(d);
    }
    let raw = r.take(4 * len, "tensor data")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| F::of_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok((name, Tensor::from_vec(&dims, data)?))
}

pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<SegNet<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            path,
            format!("magic mismatch: expected GSEG, found {magic:?}"),
        ));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config block")?)
        .map_err(|_| Error::format(path, "config block is not UTF-8"))?;
    let cfg = parse_config_str(cfg_text)
        .map_err(|e| Error::format(path, format!("embedded config: {e}")))?
        .net;

    let mut entries = Vec::new();
    while !r.done() {
        entries.push(read_entry::<F>(&mut r)?);
    }

    // any seed works here: every value is overwritten below
    let mut net = SegNet::build(&cfg, 0)?;
    let want = net.params().len() + net.buffers().len();
    if entries.len() != want {
        return Err(Error::format(
            path,
            format!(
                "tensor count mismatch: file has {}, config wants {want}",
                entries.len()
            ),
        ));
    }
    let n_params = net.params().len();
    let (param_entries, buffer_entries) = entries.split_at(n_params);
    fill(path, net.params_mut(), param_entries)?;
    fill(path, net.buffers_mut(), buffer_entries)?;
    Ok(net)
}

fn fill<F: Scalar>(
    path: &Path,
    slots: &mut [NamedTensor<F>],
    entries: &[(String, Tensor<F>)],
) -> Result<()> {
    for (slot, (name, tensor)) in slots.iter_mut().zip(entries) {
        if slot.name != *name {
            return Err(Error::format(
                path,
                format!("tensor name mismatch: expected {}, found {name}", slot.name),
            ));
        }
        if slot.tensor.dims() != tensor.dims() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name} has shape {:?}, config wants {:?}",
                    tensor.dims(),
                    slot.tensor.dims()
                ),
            ));
        }
        slot.tensor = tensor.clone();
    }
    Ok(())
}
