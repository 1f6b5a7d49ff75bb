//! Training checkpoints: a single binary file carrying both models, their
//! optimizer velocities, both uncertainty banks, and enough metadata to
//! refuse resumption under a different configuration.
//!
//! Layout (all little-endian): magic `CLDC`, format version `u16`, config
//! hash `u64`, master seed `u64`, next epoch `u32`, parameter count `u64`,
//! then four f32 arrays of that count (params A, params B, velocity A,
//! velocity B), then the two banks (A then B). Each bank is: owner string
//! (`u32` length + UTF-8 bytes), `k3` `u32`, `gamma` `f64`, window count
//! `u32`, class count `u32`, then three f64 arrays of that count (`u`,
//! `accum_num`, `accum_den`).
//!
//! The optimizer step needs no RNG cursor: every random stream is keyed by
//! (epoch, step), so resuming at an epoch boundary replays exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::dus::UncertaintyBank;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CLDC";
const FORMAT_VERSION: u16 = 1;
/// Upper bound on array lengths accepted from a header, guards malformed
/// files before any allocation.
const MAX_LEN: u64 = 1 << 31;

/// Full training state between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub master_seed: u64,
    /// First epoch that has not yet run.
    pub next_epoch: u32,
    pub params_a: Vec<f32>,
    pub params_b: Vec<f32>,
    pub velocity_a: Vec<f32>,
    pub velocity_b: Vec<f32>,
    pub bank_a: UncertaintyBank,
    pub bank_b: UncertaintyBank,
}

impl Checkpoint {
    /// Internal consistency: equal array lengths, matching bank widths,
    /// finite values everywhere.
    pub fn validate(&self) -> Result<()> {
        let n = self.params_a.len();
        if self.params_b.len() != n || self.velocity_a.len() != n || self.velocity_b.len() != n {
            return Err(Error::Checkpoint(format!(
                "parameter/velocity lengths disagree: {} {} {} {}",
                n,
                self.params_b.len(),
                self.velocity_a.len(),
                self.velocity_b.len()
            )));
        }
        if self.bank_a.foreground_classes() != self.bank_b.foreground_classes() {
            return Err(Error::Checkpoint(format!(
                "bank widths disagree: {} vs {}",
                self.bank_a.foreground_classes(),
                self.bank_b.foreground_classes()
            )));
        }
        for (name, xs) in [
            ("params_a", &self.params_a),
            ("params_b", &self.params_b),
            ("velocity_a", &self.velocity_a),
            ("velocity_b", &self.velocity_b),
        ] {
            if xs.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite value in {name}")));
            }
        }
        for (name, bank) in [("bank_a", &self.bank_a), ("bank_b", &self.bank_b)] {
            let finite = bank.u.iter().chain(&bank.accum_num).chain(&bank.accum_den);
            if finite.into_iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite value in {name}")));
            }
        }
        Ok(())
    }
}

fn write_bank(out: &mut impl Write, bank: &UncertaintyBank) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(bank.owner.len() as u32)?;
    out.write_all(bank.owner.as_bytes())?;
    out.write_u32::<LittleEndian>(bank.k3)?;
    out.write_f64::<LittleEndian>(bank.gamma)?;
    out.write_u32::<LittleEndian>(bank.window_count)?;
    out.write_u32::<LittleEndian>(bank.u.len() as u32)?;
    for arr in [&bank.u, &bank.accum_num, &bank.accum_den] {
        for &v in arr {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_bank(inp: &mut impl Read) -> std::io::Result<std::result::Result<UncertaintyBank, String>> {
    let owner_len = inp.read_u32::<LittleEndian>()? as usize;
    if owner_len as u64 > MAX_LEN {
        return Ok(Err(format!("owner length {owner_len} out of range")));
    }
    let mut owner_bytes = vec![0u8; owner_len];
    inp.read_exact(&mut owner_bytes)?;
    let owner = match String::from_utf8(owner_bytes) {
        Ok(s) => s,
        Err(_) => return Ok(Err("owner is not valid UTF-8".into())),
    };
    let k3 = inp.read_u32::<LittleEndian>()?;
    let gamma = inp.read_f64::<LittleEndian>()?;
    let window_count = inp.read_u32::<LittleEndian>()?;
    let fg = inp.read_u32::<LittleEndian>()? as usize;
    if fg as u64 > MAX_LEN {
        return Ok(Err(format!("bank width {fg} out of range")));
    }
    let mut read_arr = |n: usize| -> std::io::Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(inp.read_f64::<LittleEndian>()?);
        }
        Ok(v)
    };
    let u = read_arr(fg)?;
    let accum_num = read_arr(fg)?;
    let accum_den = read_arr(fg)?;
    Ok(Ok(UncertaintyBank {
        u,
        accum_num,
        accum_den,
        window_count,
        k3,
        gamma,
        owner,
    }))
}

/// Write a checkpoint; re-readable bit-for-bit by [`load_checkpoint`].
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.validate()?;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    out.write_all(MAGIC).map_err(io_err)?;
    out.write_u16::<LittleEndian>(FORMAT_VERSION).map_err(io_err)?;
    out.write_u64::<LittleEndian>(ckpt.config_hash).map_err(io_err)?;
    out.write_u64::<LittleEndian>(ckpt.master_seed).map_err(io_err)?;
    out.write_u32::<LittleEndian>(ckpt.next_epoch).map_err(io_err)?;
    out.write_u64::<LittleEndian>(ckpt.params_a.len() as u64).map_err(io_err)?;
    for arr in [&ckpt.params_a, &ckpt.params_b, &ckpt.velocity_a, &ckpt.velocity_b] {
        for &v in arr {
            out.write_f32::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    write_bank(&mut out, &ckpt.bank_a).map_err(io_err)?;
    write_bank(&mut out, &ckpt.bank_b).map_err(io_err)?;
    out.flush().map_err(io_err)
}

/// Read and validate a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut inp = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, not a checkpoint file")));
    }
    let version = inp.read_u16::<LittleEndian>().map_err(io_err)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let config_hash = inp.read_u64::<LittleEndian>().map_err(io_err)?;
    let master_seed = inp.read_u64::<LittleEndian>().map_err(io_err)?;
    let next_epoch = inp.read_u32::<LittleEndian>().map_err(io_err)?;
    let count = inp.read_u64::<LittleEndian>().map_err(io_err)?;
    if count > MAX_LEN {
        return Err(Error::Checkpoint(format!("parameter count {count} out of range")));
    }
    let count = count as usize;
    let mut read_arr = || -> Result<Vec<f32>> {
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            v.push(inp.read_f32::<LittleEndian>().map_err(io_err)?);
        }
        Ok(v)
    };
    let params_a = read_arr()?;
    let params_b = read_arr()?;
    let velocity_a = read_arr()?;
    let velocity_b = read_arr()?;
    let mut read_bank_checked = |which: &str| -> Result<UncertaintyBank> {
        read_bank(&mut inp)
            .map_err(io_err)?
            .map_err(|detail| Error::Checkpoint(format!("{which}: {detail}")))
    };
    let bank_a = read_bank_checked("bank A")?;
    let bank_b = read_bank_checked("bank B")?;
    let mut trailing = [0u8; 1];
    match inp.read(&mut trailing).map_err(io_err)? {
        0 => {}
        _ => return Err(Error::Checkpoint("trailing bytes after bank section".into())),
    }

    let ckpt = Checkpoint {
        config_hash,
        master_seed,
        next_epoch,
        params_a,
        params_b,
        velocity_a,
        velocity_b,
        bank_a,
        bank_b,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bank_a = UncertaintyBank::new(4, 8, 0.999, "model-a", &mut rng);
        bank_a.window_count = 3;
        bank_a.accum_num = vec![0.5, 1.5, 2.5, 3.5];
        bank_a.accum_den = vec![1.0, 2.0, 3.0, 4.0];
        let bank_b = UncertaintyBank::new(4, 8, 0.999, "model-b", &mut rng);
        Checkpoint {
            config_hash: 0xdead_beef_cafe_f00d,
            master_seed: 42,
            next_epoch: 17,
            params_a: (0..50).map(|i| i as f32 * 0.25 - 3.0).collect(),
            params_b: (0..50).map(|i| (i as f32).sin()).collect(),
            velocity_a: vec![0.125; 50],
            velocity_b: vec![-0.5; 50],
            bank_a,
            bank_b,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempdir();
        let path = dir.join("state.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempdir();
        let path = dir.join("bogus.ckpt");
        std::fs::write(&path, b"VVOL junk that is long enough to read headers from").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempdir();
        let path = dir.join("state.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = tempdir();
        let path = dir.join("state.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_non_finite_state() {
        let mut ckpt = sample_checkpoint();
        ckpt.velocity_b[10] = f32::NAN;
        let dir = tempdir();
        assert!(matches!(
            save_checkpoint(&ckpt, dir.join("bad.ckpt")),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut ckpt = sample_checkpoint();
        ckpt.velocity_a.pop();
        assert!(ckpt.validate().is_err());
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "cld-ckpt-test-{}-{:x}",
            std::process::id(),
            rand::random::<u64>()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
