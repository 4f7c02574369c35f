//! Binary parameter serialization shared by every trainable component.
//!
//! Parameters are stored as named f32 records in module visit order. The
//! format is deterministic byte-for-byte: writing, reading back, and
//! writing again produces identical files, which is what makes checkpoint
//! round-trip and training resumption exactly reproducible.

use crate::error::{Error, Result};
use crate::nn::{Module, ParamVisitor};
use ndarray::{ArrayViewMutD, NdFloat};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DSRIPAR1";

/// One named tensor in a parameter payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

struct Export {
    records: Vec<ParamRecord>,
}

impl<F: NdFloat> ParamVisitor<F> for Export {
    fn visit(&mut self, name: &str, v: &mut ArrayViewMutD<F>, _g: &mut ArrayViewMutD<F>) {
        self.records.push(ParamRecord {
            name: name.to_string(),
            shape: v.shape().to_vec(),
            data: v.iter().map(|x| x.to_f64().unwrap() as f32).collect(),
        });
    }
}

/// Snapshot all parameters of a module tree. Values are stored as f32
/// regardless of the module's float type.
pub fn export_params<F: NdFloat>(m: &mut dyn Module<F>) -> Vec<ParamRecord> {
    let mut e = Export { records: Vec::new() };
    m.visit_params("", &mut e);
    e.records
}

struct Import<'a> {
    records: &'a [ParamRecord],
    next: usize,
    error: Option<Error>,
}

impl<F: NdFloat> ParamVisitor<F> for Import<'_> {
    fn visit(&mut self, name: &str, v: &mut ArrayViewMutD<F>, _g: &mut ArrayViewMutD<F>) {
        if self.error.is_some() {
            return;
        }
        let Some(rec) = self.records.get(self.next) else {
            self.error = Some(Error::Data(format!(
                "parameter payload ended early: no record for '{name}'"
            )));
            return;
        };
        self.next += 1;
        if rec.name != name || rec.shape != v.shape() {
            self.error = Some(Error::Data(format!(
                "parameter mismatch: module expects '{}' {:?}, payload has '{}' {:?}",
                name,
                v.shape(),
                rec.name,
                rec.shape
            )));
            return;
        }
        for (slot, &x) in v.iter_mut().zip(rec.data.iter()) {
            *slot = F::from(x).unwrap();
        }
    }
}

/// Load a parameter payload into a module tree. Record names and shapes
/// must match the module's visit order exactly.
pub fn import_params<F: NdFloat>(m: &mut dyn Module<F>, records: &[ParamRecord]) -> Result<()> {
    let mut i = Import {
        records,
        next: 0,
        error: None,
    };
    m.visit_params("", &mut i);
    if let Some(e) = i.error {
        return Err(e);
    }
    if i.next != records.len() {
        return Err(Error::Data(format!(
            "parameter payload has {} extra record(s) the module does not expect",
            records.len() - i.next
        )));
    }
    Ok(())
}

pub fn write_records(path: &Path, records: &[ParamRecord]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        let name = rec.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
        for &d in &rec.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let expect: usize = rec.shape.iter().product();
        assert_eq!(rec.data.len(), expect, "record data matches its shape");
        for &x in &rec.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ParamRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::parse(path, "truncated parameter payload"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::parse(path, "not a parameter payload (bad magic)"));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::parse(path, "record name is not UTF-8"))?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut pos, len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(ParamRecord { name, shape, data });
    }
    if pos != bytes.len() {
        return Err(Error::parse(path, "trailing bytes after parameter payload"));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::stream;

    #[test]
    fn records_round_trip_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream(71, &[1]);
        let mut lin = Linear::<f32>::new(3, 4, &mut rng);
        let records = export_params(&mut lin);
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        write_records(&p1, &records).unwrap();
        let loaded = read_records(&p1).unwrap();
        write_records(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(records, loaded);
    }

    #[test]
    fn import_restores_exported_values() {
        let mut rng = stream(71, &[2]);
        let mut a = Linear::<f32>::new(3, 4, &mut rng);
        let mut b = Linear::<f32>::new(3, 4, &mut rng);
        let records = export_params(&mut a);
        import_params(&mut b, &records).unwrap();
        assert_eq!(export_params(&mut b), records);
    }

    #[test]
    fn import_rejects_mismatched_payloads() {
        let mut rng = stream(71, &[3]);
        let mut a = Linear::<f32>::new(3, 4, &mut rng);
        let mut b = Linear::<f32>::new(4, 3, &mut rng);
        let records = export_params(&mut a);
        assert!(import_params(&mut b, &records).is_err());

        let mut short = records.clone();
        short.pop();
        let mut c = Linear::<f32>::new(3, 4, &mut rng);
        assert!(import_params(&mut c, &short).is_err());
    }

    #[test]
    fn reader_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream(71, &[4]);
        let mut lin = Linear::<f32>::new(2, 2, &mut rng);
        let p = dir.path().join("p.bin");
        write_records(&p, &export_params(&mut lin)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_records(&p).is_err());
    }
}
