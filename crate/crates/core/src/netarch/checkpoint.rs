//! Versioned binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  b"UWMCKPT\0"
//! version    u32
//! variant    u8       0 = Uwm, 1 = ActionOnly, 2 = SharedTimestep, 3 = Regression
//! config     u32 x 15 H, W, C, h_o, h_a, d_a, n_c, p_h, p_w, p_t,
//!                     embed_dim, depth, num_heads, num_registers,
//!                     timestep_embed_dim
//!            f64      mlp_ratio
//! n_params   u32
//! per param: u32 name_len, name bytes (utf-8),
//!            u32 ndim, u64 x ndim dims,
//!            f64 x numel payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::netarch::{NetVariant, UwmConfig, UwmNet};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UWMCKPT\0";

fn variant_tag(v: NetVariant) -> u8 {
    match v {
        NetVariant::Uwm => 0,
        NetVariant::ActionOnly => 1,
        NetVariant::SharedTimestep => 2,
        NetVariant::Regression => 3,
    }
}

fn variant_from_tag(t: u8) -> Result<NetVariant> {
    Ok(match t {
        0 => NetVariant::Uwm,
        1 => NetVariant::ActionOnly,
        2 => NetVariant::SharedTimestep,
        3 => NetVariant::Regression,
        _ => return Err(CoreError::Checkpoint(format!("unknown variant tag {t}"))),
    })
}

fn config_fields(cfg: &UwmConfig) -> [u32; 15] {
    let (h, w, c) = cfg.image_hwc;
    let (ph, pw, pt) = cfg.patch;
    [
        h as u32,
        w as u32,
        c as u32,
        cfg.obs_history as u32,
        cfg.action_horizon as u32,
        cfg.action_dim as u32,
        cfg.num_views as u32,
        ph as u32,
        pw as u32,
        pt as u32,
        cfg.embed_dim as u32,
        cfg.depth as u32,
        cfg.num_heads as u32,
        cfg.num_registers as u32,
        cfg.timestep_embed_dim as u32,
    ]
}

pub fn save_checkpoint(net: &UwmNet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[variant_tag(net.variant)])?;
    for f in config_fields(&net.cfg) {
        w.write_all(&f.to_le_bytes())?;
    }
    w.write_all(&net.cfg.mlp_ratio.to_le_bytes())?;
    w.write_all(&(net.params.len() as u32).to_le_bytes())?;
    for p in &net.params.entries {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.shape.len() as u32).to_le_bytes())?;
        for &d in &p.value.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &p.value.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<UwmNet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let variant = variant_from_tag(tag[0])?;
    let mut f = [0u32; 15];
    for slot in f.iter_mut() {
        *slot = read_u32(&mut r)?;
    }
    let mlp_ratio = read_f64(&mut r)?;
    let cfg = UwmConfig {
        image_hwc: (f[0] as usize, f[1] as usize, f[2] as usize),
        obs_history: f[3] as usize,
        action_horizon: f[4] as usize,
        action_dim: f[5] as usize,
        num_views: f[6] as usize,
        patch: (f[7] as usize, f[8] as usize, f[9] as usize),
        embed_dim: f[10] as usize,
        depth: f[11] as usize,
        num_heads: f[12] as usize,
        mlp_ratio,
        num_registers: f[13] as usize,
        timestep_embed_dim: f[14] as usize,
    };
    let n_params = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| CoreError::Checkpoint(format!("bad parameter name: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(read_f64(&mut r)?);
        }
        params.add(name, Tensor::new(data, shape)?);
    }
    // Structural check against a freshly built net.
    let fresh = UwmNet::new(cfg, variant, 0)?;
    if fresh.params.len() != params.len() {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint has {} parameters, config implies {}",
            params.len(),
            fresh.params.len()
        )));
    }
    for (a, b) in fresh.params.entries.iter().zip(&params.entries) {
        if a.name != b.name || a.value.shape != b.value.shape {
            return Err(CoreError::Checkpoint(format!(
                "parameter mismatch: expected {} {:?}, found {} {:?}",
                a.name, a.value.shape, b.name, b.value.shape
            )));
        }
    }
    let mut net = fresh;
    net.params = params;
    Ok(net)
}
