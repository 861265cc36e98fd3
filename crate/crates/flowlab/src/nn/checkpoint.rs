//! Versioned binary checkpoints for [`Mlp`] parameters.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "FLAB" | version u32 | role u8 | activation u8 | conditioning u8 |
//! embed_width u32 | aux f64 | layer_count u32 | widths (layer_count+1) u32 |
//! per layer: weight blob (in·out f64), bias blob (out f64)
//! ```
//!
//! `role` and `aux` are opaque to this module; the sampling layer uses them
//! to record what the network predicts and its preconditioning scale.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::mlp::{Activation, Conditioning, Mlp};
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FLAB";
const VERSION: u32 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), detail: detail.into() }
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Silu => 0,
        Activation::Linear => 1,
    }
}

fn activation_from(tag: u8, path: &Path) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Silu),
        1 => Ok(Activation::Linear),
        t => Err(format_err(path, format!("unknown activation tag {t}"))),
    }
}

fn conditioning_tag(c: Conditioning) -> u8 {
    match c {
        Conditioning::LogSigma => 0,
        Conditioning::Time => 1,
        Conditioning::Unconditioned => 2,
    }
}

fn conditioning_from(tag: u8, path: &Path) -> Result<Conditioning> {
    match tag {
        0 => Ok(Conditioning::LogSigma),
        1 => Ok(Conditioning::Time),
        2 => Ok(Conditioning::Unconditioned),
        t => Err(format_err(path, format!("unknown conditioning tag {t}"))),
    }
}

pub fn save_mlp(path: &Path, net: &Mlp, role: u8, aux: f64) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[role, activation_tag(net.activation()), conditioning_tag(net.conditioning())])?;
    w.write_all(&(net.embed_width() as u32).to_le_bytes())?;
    w.write_all(&aux.to_le_bytes())?;
    let widths = net.widths();
    w.write_all(&(net.layer_count() as u32).to_le_bytes())?;
    for width in &widths {
        w.write_all(&(*width as u32).to_le_bytes())?;
    }
    for p in net.params() {
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<(Mlp, u8, f64)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let mut tags = [0u8; 3];
    read_exact(&mut r, &mut tags, path, "tags")?;
    let role = tags[0];
    let activation = activation_from(tags[1], path)?;
    let conditioning = conditioning_from(tags[2], path)?;
    let embed_width = read_u32(&mut r, path, "embed width")? as usize;
    let aux = f64::from_le_bytes(read_bytes::<8>(&mut r, path, "aux scalar")?);

    let layer_count = read_u32(&mut r, path, "layer count")? as usize;
    if layer_count == 0 || layer_count > 1024 {
        return Err(format_err(path, format!("implausible layer count {layer_count}")));
    }
    let mut widths = Vec::with_capacity(layer_count + 1);
    for i in 0..=layer_count {
        let width = read_u32(&mut r, path, "width")? as usize;
        if width == 0 {
            return Err(format_err(path, format!("zero width at position {i}")));
        }
        widths.push(width);
    }
    if widths[0] <= embed_width {
        return Err(format_err(path, "input width does not cover the embedding"));
    }

    let mut tensors = Vec::with_capacity(2 * layer_count);
    for layer in 0..layer_count {
        let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
        tensors.push(read_tensor(&mut r, fan_in, fan_out, path)?);
        tensors.push(read_tensor(&mut r, 1, fan_out, path)?);
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => {}
        _ => return Err(format_err(path, "trailing bytes after parameter blobs")),
    }

    // Rebuild a net of the right geometry, then overwrite its parameters.
    let data_width = widths[0] - embed_width;
    let hidden = &widths[1..layer_count];
    let mut scratch_rng = crate::dist::Rng::seed_from(0);
    let mut net = Mlp::new(
        data_width,
        hidden,
        widths[layer_count],
        activation,
        conditioning,
        embed_width,
        &mut scratch_rng,
    )
    .map_err(|e| format_err(path, format!("stored geometry invalid: {e}")))?;
    net.set_params(&tensors)
        .map_err(|e| format_err(path, format!("parameter blob mismatch: {e}")))?;
    Ok((net, role, aux))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| format_err(path, format!("truncated while reading {what}")))
}

fn read_bytes<const N: usize>(r: &mut impl Read, path: &Path, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, path, what)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes::<4>(r, path, what)?))
}

fn read_tensor(r: &mut impl Read, rows: usize, cols: usize, path: &Path) -> Result<Tensor> {
    let mut data = vec![0.0; rows * cols];
    for v in &mut data {
        *v = f64::from_le_bytes(read_bytes::<8>(r, path, "parameter blob")?);
    }
    Tensor::from_vec(rows, cols, data)
        .map_err(|e| format_err(path, format!("blob shape: {e}")))
}
