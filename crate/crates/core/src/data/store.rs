//! "GLRE" embedding store.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    4 bytes  "GLRE"
//! version  u32      1
//! n_images u64
//! n_layers u8
//! h_p      u16
//! w_p      u16
//! d_layer  u32
//! then per image:
//!   image_id u64
//!   per layer: cls (d_layer f32), patches (h_p*w_p*d_layer f32, row-major)
//! ```
//!
//! Values are f32 on disk and widened to f64 in memory, so a read-then-write
//! round trip is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{EmbeddingRecord, LayerEmbedding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GLRE";
pub const VERSION: u32 = 1;

const HEADER_LEN: u64 = 4 + 4 + 8 + 1 + 2 + 2 + 4;

fn record_bytes(n_layers: usize, h: usize, w: usize, d: usize) -> u64 {
    8 + (n_layers as u64) * ((1 + (h as u64) * (w as u64)) * (d as u64)) * 4
}

pub fn write_store(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::data("refusing to write an empty embedding store"));
    }
    for r in records {
        r.validate()?;
    }
    let (h, w) = records[0].grid();
    let (l, d) = (records[0].n_layers(), records[0].d_layer());
    if records.iter().any(|r| r.grid() != (h, w) || r.n_layers() != l || r.d_layer() != d) {
        return Err(Error::data("inhomogeneous records"));
    }
    if l > u8::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize || d > u32::MAX as usize {
        return Err(Error::data("extents exceed store header limits"));
    }

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    out.write_all(&(l as u8).to_le_bytes())?;
    out.write_all(&(h as u16).to_le_bytes())?;
    out.write_all(&(w as u16).to_le_bytes())?;
    out.write_all(&(d as u32).to_le_bytes())?;
    for r in records {
        out.write_all(&r.image_id.to_le_bytes())?;
        for layer in &r.layers {
            for &v in layer.cls.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
            for &v in layer.patches.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected \"GLRE\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut reader)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported store version {version}")));
    }
    let n_images = read_u64(&mut reader)? as usize;
    let n_layers = read_u8(&mut reader)? as usize;
    let h = read_u16(&mut reader)? as usize;
    let w = read_u16(&mut reader)? as usize;
    let d = read_u32(&mut reader)? as usize;
    if n_layers == 0 || h == 0 || w == 0 || d == 0 {
        return Err(Error::format("zero extent in store header"));
    }

    // Validate the payload length before allocating anything sized from it.
    let expected = HEADER_LEN + n_images as u64 * record_bytes(n_layers, h, w, d);
    if file_len < expected {
        return Err(Error::format(format!(
            "truncated store: {file_len} bytes, header declares {expected}"
        )));
    }
    if file_len > expected {
        return Err(Error::format(format!(
            "trailing data: {file_len} bytes, header declares {expected}"
        )));
    }

    let mut records = Vec::with_capacity(n_images);
    let mut buf = vec![0u8; (1 + h * w) * d * 4];
    for _ in 0..n_images {
        let image_id = read_u64(&mut reader)?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            read_exact(&mut reader, &mut buf, "layer payload")?;
            let floats: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let cls = Tensor::new(vec![d], floats[..d].to_vec())?;
            let patches = Tensor::new(vec![h, w, d], floats[d..].to_vec())?;
            layers.push(LayerEmbedding { cls, patches });
        }
        records.push(EmbeddingRecord { image_id, layers });
    }
    Ok(records)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format(format!("short read in {what}: {e}")))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, "header")?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, "header")?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "header")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "header")?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn f32_record(id: u64, seed: u64) -> EmbeddingRecord {
        // values quantized to f32 so the round trip is exact
        let mut rng = substream(seed, "store-test", id);
        let quant = |t: Tensor| t.map(|v| v as f32 as f64);
        EmbeddingRecord {
            image_id: id,
            layers: (0..2)
                .map(|_| LayerEmbedding {
                    cls: quant(Tensor::randn(vec![3], &mut rng)),
                    patches: quant(Tensor::randn(vec![2, 4, 3], &mut rng)),
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = std::env::temp_dir().join("glori-store-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.glre");
        let p2 = dir.join("b.glre");
        let records: Vec<EmbeddingRecord> = (0..3).map(|i| f32_record(i, 9)).collect();
        write_store(&p1, &records).unwrap();
        let loaded = read_store(&p1).unwrap();
        assert_eq!(loaded, records);
        write_store(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_and_truncation_are_detected() {
        let dir = std::env::temp_dir().join("glori-store-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.glre");
        let records = vec![f32_record(0, 10)];
        write_store(&path, &records).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad_magic = dir.join("bad-magic.glre");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&bad_magic, &corrupted).unwrap();
        assert!(matches!(read_store(&bad_magic), Err(Error::Format(_))));

        let short = dir.join("short.glre");
        std::fs::write(&short, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_store(&short), Err(Error::Format(_))));

        let long = dir.join("long.glre");
        let mut f = std::fs::File::create(&long).unwrap();
        f.write_all(&bytes).unwrap();
        f.write_all(&[0u8; 3]).unwrap();
        drop(f);
        assert!(matches!(read_store(&long), Err(Error::Format(_))));
    }
}
