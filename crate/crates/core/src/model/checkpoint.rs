//! Binary checkpoint container.
//!
//! Layout (little endian): magic `XEEGCKPT`, `u32` version, `u32` length +
//! config JSON, `u32` tensor count, then per tensor: `u16` name length,
//! name, `u8` frozen flag, `u8` rank, `u32` dims, `f32` values.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::config::ModelConfig;
use super::params::{ModelParams, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::signal_io::Label;

const MAGIC: &[u8; 8] = b"XEEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A model configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, frozen: bool, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(frozen as u8);
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(config: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(config)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let ids = params.present_ids();
    buf.extend_from_slice(&(ids.len() as u32 + 2).to_le_bytes());
    for id in ids {
        let t = params.get(id).expect("present");
        put_tensor(&mut buf, id.name(), params.is_frozen(id), &t.shape, &t.data);
    }
    let f2 = params.bn_running_mean.len();
    put_tensor(&mut buf, "bn_running_mean", true, &[f2], &params.bn_running_mean);
    put_tensor(&mut buf, "bn_running_var", true, &[f2], &params.bn_running_var);
    Ok(buf)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Data(format!("corrupt checkpoint: {}", msg.into()))
}

fn read_exact<const N: usize>(cur: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    cur.read_exact(&mut b).map_err(|_| corrupt("unexpected end of data"))?;
    Ok(b)
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(cur)?))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    if &read_exact::<8>(&mut cur)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut cur)?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut cur)? as usize;
    let mut json = vec![0u8; len];
    cur.read_exact(&mut json).map_err(|_| corrupt("truncated config"))?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    config.validate()?;
    let mut params = super::params::build_model(
        &ModelConfig { init_predesigned: false, ..config.clone() },
        None,
        0,
    )?;
    params.first_frozen = config.first_frozen;

    let count = read_u32(&mut cur)?;
    let mut seen = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact::<2>(&mut cur)?) as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let [_frozen, rank] = read_exact::<2>(&mut cur)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u32(&mut cur)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes(read_exact::<4>(&mut cur)?) as f64);
        }
        match name.as_str() {
            "bn_running_mean" | "bn_running_var" => {
                let dst = if name == "bn_running_mean" { &mut params.bn_running_mean } else { &mut params.bn_running_var };
                if data.len() != dst.len() {
                    return Err(corrupt(format!("{name} has {} values", data.len())));
                }
                *dst = data;
            }
            _ => {
                let id = ParamId::from_name(&name).ok_or_else(|| corrupt(format!("unknown tensor {name:?}")))?;
                let slot = params
                    .get_mut(id)
                    .ok_or_else(|| corrupt(format!("tensor {name} not used by this config")))?;
                if slot.shape != shape {
                    return Err(corrupt(format!("{name} has shape {shape:?}, expected {:?}", slot.shape)));
                }
                *slot = Tensor { shape, data };
            }
        }
        seen.push(name);
    }
    for id in params.present_ids() {
        if !seen.iter().any(|s| s == id.name()) {
            return Err(corrupt(format!("missing tensor {id}")));
        }
    }
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(config, params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn class_name(c: usize, n_classes: usize) -> String {
    match Label::from_index(c) {
        Some(l) if n_classes == Label::COUNT => l.name().to_string(),
        _ => format!("class{c}"),
    }
}

/// Dense weights as CSV: one row per class, one column per feature.
pub fn dense_weights_csv(config: &ModelConfig, params: &ModelParams) -> String {
    let names = config.feature_names();
    let mut s = format!("class,{}\n", names.join(","));
    for c in 0..config.n_classes {
        let row: Vec<String> = params.dense_w.row(c).iter().map(|v| format!("{v}")).collect();
        s.push_str(&format!("{},{}\n", class_name(c, config.n_classes), row.join(",")));
    }
    s
}

/// Spatial kernels as CSV: one row per kernel (band), one column per channel.
pub fn spatial_weights_csv(config: &ModelConfig, params: &ModelParams, channel_names: &[String]) -> String {
    let c = config.channels;
    let cols: Vec<String> = if channel_names.len() == c {
        channel_names.to_vec()
    } else {
        crate::signal_io::default_channel_names(c)
    };
    let mut s = format!("kernel,{}\n", cols.join(","));
    let kernels = config.kernel_names();
    let k = &params.spatial_kernels.data;
    let rows: Vec<(String, &[f64])> = if config.depthwise {
        (0..config.f1).map(|p| (kernels[p].clone(), &k[p * c..(p + 1) * c])).collect()
    } else {
        (0..config.f2)
            .flat_map(|q| {
                let kernels = &kernels;
                (0..config.f1).map(move |p| {
                    let o = (q * config.f1 + p) * c;
                    (format!("s{q:02}/{}", kernels[p]), &k[o..o + c])
                })
            })
            .collect()
    };
    for (name, row) in rows {
        let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&format!("{name},{}\n", vals.join(",")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_with_default_bank, Preset};

    fn round32(t: &Tensor) -> Vec<f64> {
        t.data.iter().map(|&v| v as f32 as f64).collect()
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        for preset in [Preset::XEegNet, Preset::ShallowNet, Preset::Shn6(28)] {
            let cfg = preset.config();
            let mut p = build_with_default_bank(&cfg, 2).unwrap();
            p.bn_running_mean[0] = 0.25;
            let ck = decode(&encode(&cfg, &p).unwrap()).unwrap();
            assert_eq!(ck.config, cfg);
            for id in p.present_ids() {
                assert_eq!(ck.params.get(id).unwrap().data, round32(p.get(id).unwrap()), "{id}");
            }
            assert_eq!(ck.params.bn_running_mean[0], 0.25);
            assert_eq!(ck.params.trainable_ids(), p.trainable_ids());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = Preset::XEegNet.config();
        let p = build_with_default_bank(&cfg, 2).unwrap();
        let bytes = encode(&cfg, &p).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(decode(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 9;
        assert!(decode(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn csv_exports_have_expected_shape() {
        let cfg = Preset::XEegNet.config();
        let p = build_with_default_bank(&cfg, 2).unwrap();
        let dense = dense_weights_csv(&cfg, &p);
        let lines: Vec<&str> = dense.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("class,delta,theta"));
        assert!(lines[1].starts_with("CTL,"));
        let spatial = spatial_weights_csv(&cfg, &p, &[]);
        let lines: Vec<&str> = spatial.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0].split(',').count(), 20);
        assert!(lines[7].starts_with("gamma,"));
    }
}
