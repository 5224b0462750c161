//! `DBW1` weights files: magic, tensor count, then per tensor a
//! length-prefixed UTF-8 name followed by a `.dbt` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{read_exact, read_u32, Tensor};

pub const DBW_MAGIC: &[u8; 4] = b"DBW1";

pub fn write_weights<W: Write>(named: &[(String, Tensor)], mut w: W) -> Result<()> {
    w.write_all(DBW_MAGIC)?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_dbt(&mut w)?;
    }
    Ok(())
}

pub fn read_weights<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != DBW_MAGIC {
        return Err(Error::Format(format!("bad weights magic {magic:?}")));
    }
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        out.push((name, Tensor::read_dbt(&mut r)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(&model.named_params(), &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    Model::from_params(read_weights(&bytes[..])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelSpec};

    fn encoded(model: &Model) -> Vec<u8> {
        let mut buf = Vec::new();
        write_weights(&model.named_params(), &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::init(ModelSpec::new(Arch::ResCnn), 11).unwrap();
        let named = read_weights(&encoded(&m)[..]).unwrap();
        assert_eq!(named, m.named_params());
        assert_eq!(Model::from_params(named).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let m = Model::init(ModelSpec::new(Arch::PlainCnn), 1).unwrap();
        let buf = encoded(&m);
        for cut in [2, 9, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(read_weights(&buf[..cut]), Err(Error::Format(_))), "cut at {cut}");
        }
    }

    #[test]
    fn cross_architecture_load_is_shape_error() {
        let res = Model::init(ModelSpec::new(Arch::ResCnn), 1).unwrap();
        let mut plain = Model::init(ModelSpec::new(Arch::PlainCnn), 1).unwrap();
        assert!(matches!(plain.graph.set_params(res.named_params()), Err(Error::Shape(_))));
    }
}
