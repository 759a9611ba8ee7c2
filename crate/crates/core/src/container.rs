//! Binary container shared by checkpoints and embedding files.
//!
//! Layout: 8-byte little-endian header length, UTF-8 JSON header of that
//! many bytes, then a blob of little-endian `f32` values. Manifest offsets
//! are byte offsets into the blob.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Location of one named array inside the blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub fn write<H: Serialize>(path: &Path, header: &H, blob: &[f32]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(&mut f, header, blob)?;
    f.flush()?;
    Ok(())
}

pub fn write_to<H: Serialize>(w: &mut impl Write, header: &H, blob: &[f32]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for x in blob {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    if bytes.len() < 8 {
        return Err(Error::Data(
            "container truncated before header length".into(),
        ));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < len {
        return Err(Error::Data("container truncated inside header".into()));
    }
    let header: H = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Data(format!("container header: {e}")))?;
    let raw = &body[len..];
    if raw.len() % 4 != 0 {
        return Err(Error::Data(
            "container blob is not a whole number of f32 values".into(),
        ));
    }
    let blob = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, blob))
}

/// Slice one manifest entry out of the blob.
pub fn slice<'a>(blob: &'a [f32], entry: &ManifestEntry) -> Result<&'a [f32]> {
    let n: usize = entry.shape.iter().product();
    if entry.offset % 4 != 0 {
        return Err(Error::Data(format!(
            "{}: misaligned offset {}",
            entry.name, entry.offset
        )));
    }
    let start = entry.offset / 4;
    blob.get(start..start + n)
        .ok_or_else(|| Error::Data(format!("{}: extends past end of blob", entry.name)))
}

/// Header of an embedding matrix file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub format_version: u32,
    pub rows: usize,
    pub dim: usize,
    pub normalized: bool,
}

pub fn write_embeddings(path: &Path, emb: &crate::Tensor, normalized: bool) -> Result<()> {
    let (rows, dim) = emb.as_matrix();
    let header = EmbeddingHeader {
        format_version: FORMAT_VERSION,
        rows,
        dim,
        normalized,
    };
    write(path, &header, emb.data())
}

pub fn read_embeddings(path: &Path) -> Result<(crate::Tensor, EmbeddingHeader)> {
    let (header, blob): (EmbeddingHeader, Vec<f32>) = read(path)?;
    if blob.len() != header.rows * header.dim {
        return Err(Error::Data(format!(
            "{}: header declares {}×{} values, blob has {}",
            path.display(),
            header.rows,
            header.dim,
            blob.len()
        )));
    }
    let t = crate::Tensor::new([header.rows, header.dim], blob)?;
    Ok((t, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        let t = crate::Tensor::from_rows(&[vec![1.0, -2.5], vec![0.25, 3.0]]);
        write_embeddings(&p, &t, false).unwrap();
        let (back, h) = read_embeddings(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!((h.rows, h.dim, h.normalized), (2, 2, false));
    }

    #[test]
    fn truncated_files_are_data_errors() {
        assert!(matches!(
            parse::<EmbeddingHeader>(&[1, 2]),
            Err(Error::Data(_))
        ));
        let mut bytes = Vec::new();
        write_to(
            &mut bytes,
            &EmbeddingHeader {
                format_version: 1,
                rows: 1,
                dim: 1,
                normalized: true,
            },
            &[1.0],
        )
        .unwrap();
        bytes.pop();
        assert!(matches!(
            parse::<EmbeddingHeader>(&bytes),
            Err(Error::Data(_))
        ));
    }
}
