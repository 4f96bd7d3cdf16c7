//! Length-prefixed, checksummed append-only record log.
//!
//! Each entry is `u32 LE length | payload | u32 LE crc32(payload)`. On open
//! the log is scanned front to back; the first entry that is short or fails
//! its checksum marks the end of the acknowledged prefix and the file is
//! truncated there, which discards a torn tail write.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

const HEADER_LEN: usize = 4;
const TRAILER_LEN: usize = 4;
/// Upper bound on a single record; anything larger is treated as corruption.
pub const MAX_RECORD_LEN: usize = 64 * 1024 * 1024;

pub struct RecordLog {
    file: File,
    sync_writes: bool,
}

pub struct Recovered {
    pub records: Vec<Vec<u8>>,
    /// Bytes dropped from the tail because they did not form a complete record.
    pub truncated_bytes: u64,
}

impl RecordLog {
    /// Opens (creating if needed) the log at `path` and returns every intact record.
    pub fn open(path: &Path, sync_writes: bool) -> io::Result<(Self, Recovered)> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut buf = Vec::new();
        file.seek(SeekFrom::Start(0))?;
        file.read_to_end(&mut buf)?;

        let (records, valid_len) = scan(&buf);
        let truncated_bytes = buf.len() as u64 - valid_len as u64;
        if truncated_bytes > 0 {
            tracing::warn!(
                path = %path.display(),
                truncated_bytes,
                "discarding incomplete tail of chunk log"
            );
            file.set_len(valid_len as u64)?;
            file.sync_all()?;
        }
        Ok((
            Self { file, sync_writes },
            Recovered {
                records,
                truncated_bytes,
            },
        ))
    }

    pub fn append(&mut self, payload: &[u8]) -> io::Result<()> {
        if payload.len() > MAX_RECORD_LEN {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "record exceeds maximum length",
            ));
        }
        let mut frame = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
        frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        frame.extend_from_slice(payload);
        frame.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        self.file.write_all(&frame)?;
        if self.sync_writes {
            self.file.sync_data()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.file.flush()?;
        self.file.sync_data()
    }
}

/// Returns the intact records and the byte length of the valid prefix.
fn scan(buf: &[u8]) -> (Vec<Vec<u8>>, usize) {
    let mut records = Vec::new();
    let mut pos = 0usize;
    loop {
        if buf.len() - pos < HEADER_LEN {
            break;
        }
        let len = u32::from_le_bytes(buf[pos..pos + HEADER_LEN].try_into().unwrap()) as usize;
        if len > MAX_RECORD_LEN || buf.len() - pos - HEADER_LEN < len + TRAILER_LEN {
            break;
        }
        let body = &buf[pos + HEADER_LEN..pos + HEADER_LEN + len];
        let crc_at = pos + HEADER_LEN + len;
        let crc = u32::from_le_bytes(buf[crc_at..crc_at + TRAILER_LEN].try_into().unwrap());
        if crc != crc32fast::hash(body) {
            break;
        }
        records.push(body.to_vec());
        pos = crc_at + TRAILER_LEN;
    }
    (records, pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_discarded_and_log_stays_appendable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log");
        {
            let (mut log, rec) = RecordLog::open(&path, false).unwrap();
            assert!(rec.records.is_empty());
            log.append(b"one").unwrap();
            log.append(b"two").unwrap();
        }
        // half-written third record
        {
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(&10u32.to_le_bytes()).unwrap();
            f.write_all(b"thr").unwrap();
        }
        let (mut log, rec) = RecordLog::open(&path, false).unwrap();
        assert_eq!(rec.records, vec![b"one".to_vec(), b"two".to_vec()]);
        assert_eq!(rec.truncated_bytes, 7);
        log.append(b"three").unwrap();
        drop(log);
        let (_, rec) = RecordLog::open(&path, false).unwrap();
        assert_eq!(rec.records.len(), 3);
        assert_eq!(rec.records[2], b"three");
    }

    #[test]
    fn checksum_mismatch_ends_the_valid_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log");
        {
            let (mut log, _) = RecordLog::open(&path, false).unwrap();
            log.append(b"alpha").unwrap();
            log.append(b"beta").unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 6;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let (_, rec) = RecordLog::open(&path, false).unwrap();
        assert_eq!(rec.records, vec![b"alpha".to_vec()]);
    }
}
