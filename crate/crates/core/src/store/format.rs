//! `RELC` table file: magic, u32 version, u32 d, u64 N, then per id a u16
//! byte length and UTF-8 bytes, then N·d little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::EmbeddingTable;
use crate::error::{RelicError, Result};
use crate::neural::Tensor;

pub const TABLE_MAGIC: &[u8; 4] = b"RELC";
pub const TABLE_VERSION: u32 = 1;

pub fn write_table<W: Write>(mut w: W, table: &EmbeddingTable) -> Result<()> {
    let io = |e: std::io::Error| RelicError::Format(format!("writing table: {e}"));
    let mut head = Vec::with_capacity(20);
    head.extend_from_slice(TABLE_MAGIC);
    head.extend_from_slice(&TABLE_VERSION.to_le_bytes());
    head.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    head.extend_from_slice(&(table.len() as u64).to_le_bytes());
    w.write_all(&head).map_err(io)?;
    for id in table.ids() {
        let b = id.as_bytes();
        let len = u16::try_from(b.len())
            .map_err(|_| RelicError::InvalidArgument(format!("entity id of {} bytes is too long", b.len())))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(b).map_err(io)?;
    }
    let mut buf = Vec::with_capacity(table.vectors().len() * 4);
    for v in table.vectors().values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

fn take<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| RelicError::Format(format!("truncated table file while reading {what}")))?;
    Ok(buf)
}

pub fn read_table<R: Read>(mut r: R) -> Result<EmbeddingTable> {
    let head = take(&mut r, 20, "header")?;
    if &head[..4] != TABLE_MAGIC {
        return Err(RelicError::Format(format!("bad table magic {:?}", &head[..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != TABLE_VERSION {
        return Err(RelicError::Format(format!("unsupported table version {version}")));
    }
    let d = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = take(&mut r, 2, "id length")?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let id = String::from_utf8(take(&mut r, len, "id")?)
            .map_err(|_| RelicError::Format("entity id is not UTF-8".into()))?;
        ids.push(id);
    }
    let payload = take(&mut r, n * d * 4, "vectors")?;
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| RelicError::Format(e.to_string()))? != 0 {
        return Err(RelicError::Format("trailing bytes after table payload".into()));
    }
    EmbeddingTable::from_parts(ids, Tensor::from_vec(&[n, d], values)?)
}

pub fn save_table(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| RelicError::io(path, e))?;
    write_table(BufWriter::new(f), table)
}

pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    let f = File::open(path).map_err(|e| RelicError::io(path, e))?;
    read_table(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::RngState;
    use crate::store::new_table;

    #[test]
    fn round_trip_is_bit_exact() {
        let ids: Vec<String> = ["Q1", "Zürich", "e3", "x", "long_id_0005"].iter().map(|s| s.to_string()).collect();
        let mut t = new_table(ids, 3, &mut RngState::new(9)).unwrap();
        t.row_mut(2)[1] = f32::MIN_POSITIVE / 2.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.relc");
        save_table(&t, &path).unwrap();
        let back = load_table(&path).unwrap();
        assert_eq!(back.ids(), t.ids());
        let bits = |t: &EmbeddingTable| t.vectors().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));

        // header 20, ids 2+2 + 2+7 + 2+2 + 2+1 + 2+12, payload 5·3·4
        let id_block = 4 + 9 + 4 + 3 + 14;
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 20 + id_block + 60);
    }

    #[test]
    fn rejects_corruption() {
        let t = new_table(vec!["a".into(), "b".into()], 2, &mut RngState::new(0)).unwrap();
        let mut buf = Vec::new();
        write_table(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(read_table(&bad[..]), Err(RelicError::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_table(&bad[..]).is_err());
        assert!(read_table(&buf[..buf.len() - 3]).is_err());
        assert!(read_table(&buf[..10]).is_err());
    }
}
