//! Binary model archives: config header plus named parameter tensors.
//!
//! Layout (all integers little-endian):
//! `FMCKPT01 | dtype u8 | header_len u32 | header JSON | 6 sections`.
//! Sections follow in fixed order (gen, critic, then Adam first/second
//! moments for each) as `count u32` followed by `count` tensors, each
//! `name_len u16 | name | ndim u8 | dims u64* | data`. Moment tensors reuse
//! the parameter names of their bank, in bank order, which makes the file
//! self-describing and lets the loader verify alignment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::graph::{Dtype, Real};
use crate::nn::ParamBank;
use crate::stego::ModelConfig;

const MAGIC: &[u8; 8] = b"FMCKPT01";
const MAX_DIMS: usize = 8;
const MAX_ELEMS: u64 = 1 << 30;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: ModelConfig,
    master_seed: u64,
    step: u64,
    opt_gen_t: u64,
    opt_critic_t: u64,
}

/// Everything needed to resume training bit-exactly or to run inference.
pub struct CheckpointData<F: Real> {
    pub config: ModelConfig,
    pub master_seed: u64,
    pub step: u64,
    pub gen: ParamBank<F>,
    pub critic: ParamBank<F>,
    pub opt_gen_t: u64,
    pub opt_gen_m: Vec<ArrayD<F>>,
    pub opt_gen_v: Vec<ArrayD<F>>,
    pub opt_critic_t: u64,
    pub opt_critic_m: Vec<ArrayD<F>>,
    pub opt_critic_v: Vec<ArrayD<F>>,
}

fn write_tensor<F: Real, W: Write>(w: &mut W, name: &str, arr: &ArrayD<F>) -> std::io::Result<()> {
    let bytes = name.as_bytes();
    w.write_u16::<LE>(bytes.len() as u16)?;
    w.write_all(bytes)?;
    w.write_u8(arr.ndim() as u8)?;
    for &d in arr.shape() {
        w.write_u64::<LE>(d as u64)?;
    }
    match F::DTYPE {
        Dtype::F32 => {
            for &x in arr.iter() {
                w.write_f32::<LE>(x.to_f64() as f32)?;
            }
        }
        Dtype::F64 => {
            for &x in arr.iter() {
                w.write_f64::<LE>(x.to_f64())?;
            }
        }
    }
    Ok(())
}

fn read_tensor<F: Real, R: Read>(r: &mut R) -> Result<(String, ArrayD<F>)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let name_len = r.read_u16::<LE>().map_err(|_| bad("truncated tensor name length"))? as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf).map_err(|_| bad("truncated tensor name"))?;
    let name = String::from_utf8(name_buf).map_err(|_| bad("tensor name is not utf-8"))?;
    let ndim = r.read_u8().map_err(|_| bad("truncated tensor rank"))? as usize;
    if ndim > MAX_DIMS {
        return Err(Error::Checkpoint(format!("tensor {name} has rank {ndim} > {MAX_DIMS}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut elems: u64 = 1;
    for _ in 0..ndim {
        let d = r.read_u64::<LE>().map_err(|_| bad("truncated tensor dims"))?;
        elems = elems.saturating_mul(d.max(1));
        dims.push(d as usize);
    }
    if elems > MAX_ELEMS {
        return Err(Error::Checkpoint(format!("tensor {name} is implausibly large")));
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    match F::DTYPE {
        Dtype::F32 => {
            for _ in 0..n {
                data.push(F::from_f64(r.read_f32::<LE>().map_err(|_| bad("truncated tensor data"))? as f64));
            }
        }
        Dtype::F64 => {
            for _ in 0..n {
                data.push(F::from_f64(r.read_f64::<LE>().map_err(|_| bad("truncated tensor data"))?));
            }
        }
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|_| Error::Checkpoint(format!("tensor {name} shape/data mismatch")))?;
    Ok((name, arr))
}

fn write_section<F: Real, W: Write>(w: &mut W, tensors: &[(&str, &ArrayD<F>)]) -> std::io::Result<()> {
    w.write_u32::<LE>(tensors.len() as u32)?;
    for (name, arr) in tensors {
        write_tensor(w, name, arr)?;
    }
    Ok(())
}

fn read_section<F: Real, R: Read>(r: &mut R) -> Result<Vec<(String, ArrayD<F>)>> {
    let count = r
        .read_u32::<LE>()
        .map_err(|_| Error::Checkpoint("truncated section header".into()))? as usize;
    if count > 100_000 {
        return Err(Error::Checkpoint("implausible tensor count".into()));
    }
    (0..count).map(|_| read_tensor(r)).collect()
}

pub fn save<F: Real>(path: &Path, ck: &CheckpointData<F>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u8(F::DTYPE.tag()).map_err(io)?;
    let header = Header {
        config: ck.config.clone(),
        master_seed: ck.master_seed,
        step: ck.step,
        opt_gen_t: ck.opt_gen_t,
        opt_critic_t: ck.opt_critic_t,
    };
    let header_json = serde_json::to_vec(&header)?;
    w.write_u32::<LE>(header_json.len() as u32).map_err(io)?;
    w.write_all(&header_json).map_err(io)?;

    fn bank_tensors<F: Real>(bank: &ParamBank<F>) -> Vec<(&str, &ArrayD<F>)> {
        bank.iter().collect()
    }
    fn moment_tensors<'a, F: Real>(
        bank: &'a ParamBank<F>,
        moments: &'a [ArrayD<F>],
    ) -> Vec<(&'a str, &'a ArrayD<F>)> {
        bank.iter().map(|(n, _)| n).zip(moments.iter()).collect()
    }
    if ck.opt_gen_m.len() != ck.gen.len()
        || ck.opt_gen_v.len() != ck.gen.len()
        || ck.opt_critic_m.len() != ck.critic.len()
        || ck.opt_critic_v.len() != ck.critic.len()
    {
        return Err(Error::Checkpoint("optimizer state does not match parameter banks".into()));
    }
    write_section(&mut w, &bank_tensors(&ck.gen)).map_err(io)?;
    write_section(&mut w, &bank_tensors(&ck.critic)).map_err(io)?;
    write_section(&mut w, &moment_tensors(&ck.gen, &ck.opt_gen_m)).map_err(io)?;
    write_section(&mut w, &moment_tensors(&ck.gen, &ck.opt_gen_v)).map_err(io)?;
    write_section(&mut w, &moment_tensors(&ck.critic, &ck.opt_critic_m)).map_err(io)?;
    write_section(&mut w, &moment_tensors(&ck.critic, &ck.opt_critic_v)).map_err(io)?;
    w.flush().map_err(io)
}

/// Dtype recorded in the archive without loading it.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a model archive", path.display())));
    }
    let tag = r.read_u8().map_err(|e| Error::io(path, e))?;
    Dtype::from_tag(tag)
}

pub fn load<F: Real>(path: &Path) -> Result<CheckpointData<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{} is too short to be a model archive", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a model archive", path.display())));
    }
    let tag = r.read_u8().map_err(|_| Error::Checkpoint("truncated dtype".into()))?;
    let dtype = Dtype::from_tag(tag)?;
    if dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "archive holds {dtype:?} tensors, expected {:?}",
            F::DTYPE
        )));
    }
    let header_len = r
        .read_u32::<LE>()
        .map_err(|_| Error::Checkpoint("truncated header length".into()))? as usize;
    if header_len > 1 << 20 {
        return Err(Error::Checkpoint("implausible header size".into()));
    }
    let mut header_buf = vec![0u8; header_len];
    r.read_exact(&mut header_buf)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_buf)?;

    let bank_from = |tensors: Vec<(String, ArrayD<F>)>| -> Result<ParamBank<F>> {
        let mut bank = ParamBank::new();
        for (name, arr) in tensors {
            bank.add(name, arr)?;
        }
        Ok(bank)
    };
    let gen = bank_from(read_section(&mut r)?)?;
    let critic = bank_from(read_section(&mut r)?)?;

    let moments_for = |bank: &ParamBank<F>, tensors: Vec<(String, ArrayD<F>)>, what: &str| -> Result<Vec<ArrayD<F>>> {
        if tensors.len() != bank.len() {
            return Err(Error::Checkpoint(format!("{what} count does not match parameters")));
        }
        let mut out = Vec::with_capacity(tensors.len());
        for ((name, arr), (pname, pval)) in tensors.into_iter().zip(bank.iter()) {
            if name != pname {
                return Err(Error::Checkpoint(format!("{what} entry {name} out of order, expected {pname}")));
            }
            if arr.shape() != pval.shape() {
                return Err(Error::Checkpoint(format!("{what} entry {name} has wrong shape")));
            }
            out.push(arr);
        }
        Ok(out)
    };
    let opt_gen_m = moments_for(&gen, read_section(&mut r)?, "gen first moment")?;
    let opt_gen_v = moments_for(&gen, read_section(&mut r)?, "gen second moment")?;
    let opt_critic_m = moments_for(&critic, read_section(&mut r)?, "critic first moment")?;
    let opt_critic_v = moments_for(&critic, read_section(&mut r)?, "critic second moment")?;

    Ok(CheckpointData {
        config: header.config,
        master_seed: header.master_seed,
        step: header.step,
        gen,
        critic,
        opt_gen_t: header.opt_gen_t,
        opt_gen_m,
        opt_gen_v,
        opt_critic_t: header.opt_critic_t,
        opt_critic_m,
        opt_critic_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stego::ModelBundle;

    fn small_config() -> ModelConfig {
        ModelConfig {
            patch_h: 8,
            patch_w: 8,
            msg_len: 4,
            base_width: 3,
            levels: 1,
            critic_base: 3,
            critic_depth: 1,
            epsilon: 0.05,
        }
    }

    fn sample_checkpoint() -> CheckpointData<f32> {
        let bundle = ModelBundle::<f32>::init(small_config(), 5).unwrap();
        let zeros = |bank: &ParamBank<f32>| {
            bank.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect::<Vec<_>>()
        };
        CheckpointData {
            config: small_config(),
            master_seed: 42,
            step: 17,
            opt_gen_t: 17,
            opt_gen_m: zeros(&bundle.gen),
            opt_gen_v: zeros(&bundle.gen),
            opt_critic_t: 17,
            opt_critic_m: zeros(&bundle.critic),
            opt_critic_v: zeros(&bundle.critic),
            gen: bundle.gen,
            critic: bundle.critic,
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmck");
        let ck = sample_checkpoint();
        save(&path, &ck).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), Dtype::F32);
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.master_seed, 42);
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.config, ck.config);
        for ((n1, v1), (n2, v2)) in ck.gen.iter().zip(loaded.gen.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(
                v1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(ck.opt_gen_m.len(), loaded.opt_gen_m.len());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("bogus.fmck");
        std::fs::write(&bogus, b"NOTMAGIC extra").unwrap();
        assert!(load::<f32>(&bogus).is_err());

        let path = dir.path().join("model.fmck");
        save(&path, &sample_checkpoint()).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut = &full[..full.len() / 2];
        std::fs::write(&bogus, cut).unwrap();
        assert!(load::<f32>(&bogus).is_err());
    }

    #[test]
    fn rejects_wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmck");
        save(&path, &sample_checkpoint()).unwrap();
        let err = load::<f64>(&path).err().expect("f64 load of an f32 archive must fail");
        assert!(err.to_string().contains("F32"), "{err}");
    }
}
