//! Binary tensor files.
//!
//! Layout, all little-endian: the 6-byte magic `SGADv1`, a `u32` tensor
//! count, then per tensor a `u32` rank, `rank` `u32` dimensions and the
//! row-major `f64` payload.
//!
//! A parameter file starts with a configuration vector
//! `[dim, blocks, heads, ffn_mult, pe_hidden, use_pe, normalize_distances, l2_normalize]`
//! followed by the tensors of [`NetworkParams::named_tensors`] in order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};

use crate::attention::{NetworkConfig, NetworkParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"SGADv1";
const CONFIG_LEN: usize = 8;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "tensor file",
        reason: reason.into(),
    }
}

pub fn write_tensors<W: Write>(mut out: W, tensors: &[ArrayViewD<'_, f64>]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|e| format_err(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<ArrayD<f64>>> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic).map_err(|_| format_err("missing magic"))?;
    if &magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let count = read_u32(&mut input)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let rank = read_u32(&mut input)? as usize;
        if rank > 8 {
            return Err(format_err(format!("unsupported rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 8];
        input.read_exact(&mut bytes).map_err(|_| format_err("truncated payload"))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push(ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| format_err(e.to_string()))?);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(format_err("trailing bytes"));
    }
    Ok(out)
}

/// Writes a single matrix file.
pub fn save_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, &[m.view().into_dyn()])?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut tensors = read_tensors(fs::read(path)?.as_slice())?;
    if tensors.len() != 1 {
        return Err(format_err(format!("expected one tensor, found {}", tensors.len())));
    }
    tensors
        .pop()
        .expect("one tensor")
        .into_dimensionality()
        .map_err(|_| format_err("expected a matrix"))
}

fn config_vector(cfg: &NetworkConfig) -> ArrayD<f64> {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    ArrayD::from_shape_vec(
        IxDyn(&[CONFIG_LEN]),
        vec![
            cfg.dim as f64,
            cfg.blocks as f64,
            cfg.heads as f64,
            cfg.ffn_mult as f64,
            cfg.pe_hidden as f64,
            flag(cfg.use_pe),
            flag(cfg.normalize_distances),
            flag(cfg.l2_normalize),
        ],
    )
    .expect("config vector shape")
}

fn parse_config(v: &ArrayD<f64>) -> Result<NetworkConfig> {
    if v.shape() != [CONFIG_LEN] {
        return Err(format_err("first tensor is not a configuration vector"));
    }
    let v: Vec<f64> = v.iter().copied().collect();
    if v.iter().any(|x| !(x.fract() == 0.0 && *x >= 0.0)) {
        return Err(format_err("configuration entries must be non-negative integers"));
    }
    let cfg = NetworkConfig {
        dim: v[0] as usize,
        blocks: v[1] as usize,
        heads: v[2] as usize,
        ffn_mult: v[3] as usize,
        pe_hidden: v[4] as usize,
        use_pe: v[5] != 0.0,
        normalize_distances: v[6] != 0.0,
        l2_normalize: v[7] != 0.0,
        seed: 0,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_params<W: Write>(out: W, params: &NetworkParams) -> Result<()> {
    let cfg = config_vector(&params.config);
    let mut views = vec![cfg.view()];
    views.extend(params.named_tensors().into_iter().map(|(_, t)| t));
    write_tensors(out, &views)
}

pub fn read_params<R: Read>(input: R) -> Result<NetworkParams> {
    let tensors = read_tensors(input)?;
    let (first, rest) = tensors.split_first().ok_or_else(|| format_err("empty parameter file"))?;
    let mut params = NetworkParams::zeros(parse_config(first)?);
    let expected = params.named_tensors().len();
    if rest.len() != expected {
        return Err(format_err(format!("expected {expected} parameter tensors, found {}", rest.len())));
    }
    for (mut dst, src) in params.tensors_mut().into_iter().zip(rest) {
        if dst.shape() != src.shape() {
            return Err(format_err(format!(
                "parameter shape {:?} does not match {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.assign(src);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("loaded parameters".into()));
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &NetworkParams) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    read_params(fs::read(path)?.as_slice())
}
