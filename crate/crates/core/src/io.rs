//! Dataset files.
//!
//! EMB1 binary layout, little-endian:
//!
//! ```text
//! "EMB1" | u32 count | u32 dim | count x (u32 identity, u8 modality, u8 camera, [u8; 2] pad, dim x f32)
//! ```
//!
//! Modality codes are 0 = RGB and 1 = IR. The CSV form has the header
//! `identity,modality,camera,f0,...,f{d-1}` with modality written as `RGB`/`IR`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{EmbeddingDataset, EmbeddingRecord, Modality};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";

pub fn write_emb<W: Write>(mut w: W, dataset: &EmbeddingDataset) -> Result<()> {
    let count = u32::try_from(dataset.len())
        .map_err(|_| Error::Input("too many records for EMB1".into()))?;
    let dim = u32::try_from(dataset.dim())
        .map_err(|_| Error::Input("dimension too large for EMB1".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 + 4 * dataset.dim());
    for r in dataset.records() {
        buf.clear();
        buf.extend_from_slice(&r.identity.to_le_bytes());
        buf.push(r.modality.code());
        buf.push(r.camera);
        buf.extend_from_slice(&[0, 0]);
        for &v in &r.vector {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Input(format!("value {v} does not fit in f32")));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated EMB1 file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_emb<R: Read>(mut r: R) -> Result<EmbeddingDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("missing EMB1 header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut head = [0u8; 8];
    let mut body = vec![0u8; 4 * dim];
    for i in 0..count {
        r.read_exact(&mut head)
            .and_then(|_| r.read_exact(&mut body))
            .map_err(|_| Error::Format(format!("truncated EMB1 file at record {i}")))?;
        let identity = u32::from_le_bytes([head[0], head[1], head[2], head[3]]);
        let modality = Modality::from_code(head[4])?;
        let vector = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        records.push(EmbeddingRecord::new(identity, modality, head[5], vector));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after EMB1 records".into()));
    }
    EmbeddingDataset::new(dim, records)
}

pub fn write_csv<W: Write>(w: W, dataset: &EmbeddingDataset) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["identity".to_string(), "modality".into(), "camera".into()];
    header.extend((0..dataset.dim()).map(|k| format!("f{k}")));
    out.write_record(&header)?;
    for r in dataset.records() {
        let mut row = vec![
            r.identity.to_string(),
            r.modality.to_string(),
            r.camera.to_string(),
        ];
        row.extend(r.vector.iter().map(|&v| (v as f32).to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<EmbeddingDataset> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.len() < 4
        || &header[0] != "identity"
        || &header[1] != "modality"
        || &header[2] != "camera"
    {
        return Err(Error::Format(
            "CSV header must start with identity,modality,camera and have >= 1 feature".into(),
        ));
    }
    let dim = header.len() - 3;
    let mut records = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let field = |k: usize| row.get(k).unwrap_or("").trim().to_string();
        let bad = |what: &str| Error::Format(format!("row {}: bad {what}", line + 1));
        let identity = field(0).parse::<u32>().map_err(|_| bad("identity"))?;
        let modality = field(1).parse::<Modality>()?;
        let camera = field(2).parse::<u8>().map_err(|_| bad("camera"))?;
        let vector = (0..dim)
            .map(|k| field(3 + k).parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        records.push(EmbeddingRecord::new(identity, modality, camera, vector));
    }
    EmbeddingDataset::new(dim, records)
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false)
}

/// Loads EMB1, or CSV when the extension is `.csv`.
pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let f = BufReader::new(File::open(path)?);
    if is_csv(path) {
        read_csv(f)
    } else {
        read_emb(f)
    }
}

pub fn save_dataset(path: &Path, dataset: &EmbeddingDataset) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    if is_csv(path) {
        write_csv(f, dataset)
    } else {
        write_emb(f, dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> EmbeddingDataset {
        EmbeddingDataset::new(
            3,
            vec![
                EmbeddingRecord::new(7, Modality::Rgb, 1, vec![0.1, -2.5, 3.0]),
                EmbeddingRecord::new(9, Modality::Ir, 6, vec![1e-3, 4.0, -0.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn emb_layout() {
        let mut buf = Vec::new();
        write_emb(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..4], b"EMB1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 12 + 2 * (8 + 12));
        // second record header
        let off = 12 + 20;
        assert_eq!(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()), 9);
        assert_eq!(&buf[off + 4..off + 8], &[1, 6, 0, 0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_emb(&b"EMB2"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_emb(&mut buf, &sample()).unwrap();
        buf.pop();
        assert!(matches!(read_emb(&buf[..]), Err(Error::Format(_))));
        buf.push(0);
        buf.push(0);
        assert!(matches!(read_emb(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn csv_header_and_values() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("identity,modality,camera,f0,f1,f2\n7,RGB,1,"));
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.record(1).modality, Modality::Ir);
        assert_eq!(back.record(1).camera, 6);
    }

    proptest! {
        #[test]
        fn emb_rewrite_is_byte_identical(
            vals in proptest::collection::vec(-1e6f64..1e6, 4 * 5),
            ids in proptest::collection::vec(0u32..1000, 4),
        ) {
            let records = (0..4).map(|i| EmbeddingRecord::new(
                ids[i],
                if i % 2 == 0 { Modality::Rgb } else { Modality::Ir },
                (i + 1) as u8,
                vals[i * 5..(i + 1) * 5].to_vec(),
            )).collect();
            let ds = EmbeddingDataset::new(5, records).unwrap();
            let mut first = Vec::new();
            write_emb(&mut first, &ds).unwrap();
            let back = read_emb(&first[..]).unwrap();
            let mut second = Vec::new();
            write_emb(&mut second, &back).unwrap();
            prop_assert_eq!(first, second);

            let mut csv_buf = Vec::new();
            write_csv(&mut csv_buf, &back).unwrap();
            let from_csv = read_csv(&csv_buf[..]).unwrap();
            for (a, b) in back.records().iter().zip(from_csv.records()) {
                prop_assert_eq!(a.identity, b.identity);
                for (x, y) in a.vector.iter().zip(&b.vector) {
                    prop_assert_eq!(*x as f32, *y as f32);
                }
            }
        }
    }
}
