//! `.vlpcap` capture files: `"VLPC"`, a version byte, then records of
//! `[u64 LE timestamp µs][u16 LE length][payload]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Result, VelodyneError};

pub const MAGIC: &[u8; 4] = b"VLPC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub timestamp_us: u64,
    pub payload: Vec<u8>,
}

pub struct CaptureWriter<W: Write> {
    inner: W,
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        inner.write_all(MAGIC)?;
        inner.write_all(&[VERSION])?;
        Ok(CaptureWriter { inner })
    }

    pub fn write(&mut self, timestamp_us: u64, payload: &[u8]) -> Result<()> {
        let len = u16::try_from(payload.len())
            .map_err(|_| VelodyneError::Capture(format!("{}-byte payload is too long", payload.len())))?;
        self.inner.write_all(&timestamp_us.to_le_bytes())?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(payload)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct CaptureReader<R: Read> {
    inner: R,
    done: bool,
}

impl<R: Read> CaptureReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut head = [0u8; 5];
        inner
            .read_exact(&mut head)
            .map_err(|_| VelodyneError::Capture("file too short for a capture header".into()))?;
        if &head[..4] != MAGIC {
            return Err(VelodyneError::Capture("bad magic, not a .vlpcap file".into()));
        }
        if head[4] != VERSION {
            return Err(VelodyneError::Capture(format!("unsupported version {}", head[4])));
        }
        Ok(CaptureReader { inner, done: false })
    }

    fn read_record(&mut self) -> Result<Option<Record>> {
        let mut ts = [0u8; 8];
        // A clean end of file is only allowed on a record boundary.
        let mut got = 0;
        while got < ts.len() {
            match self.inner.read(&mut ts[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(VelodyneError::Capture("truncated record header".into())),
                Ok(k) => got += k,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let mut len = [0u8; 2];
        self.inner
            .read_exact(&mut len)
            .map_err(|_| VelodyneError::Capture("truncated record header".into()))?;
        let mut payload = vec![0u8; u16::from_le_bytes(len) as usize];
        self.inner
            .read_exact(&mut payload)
            .map_err(|_| VelodyneError::Capture("truncated record payload".into()))?;
        Ok(Some(Record { timestamp_us: u64::from_le_bytes(ts), payload }))
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = self.read_record().transpose();
        if !matches!(r, Some(Ok(_))) {
            self.done = true;
        }
        r
    }
}

pub fn read_capture(path: &Path) -> Result<Vec<Record>> {
    CaptureReader::new(BufReader::new(File::open(path)?))?.collect()
}

pub fn write_capture(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = CaptureWriter::new(BufWriter::new(File::create(path)?))?;
    for r in records {
        w.write(r.timestamp_us, &r.payload)?;
    }
    w.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        let mut w = CaptureWriter::new(Vec::new()).unwrap();
        w.write(5, &[1, 2, 3]).unwrap();
        w.write(u64::MAX, &[]).unwrap();
        let bytes = w.finish().unwrap();
        assert_eq!(&bytes[..5], b"VLPC\x01");
        let recs: Vec<Record> = CaptureReader::new(&bytes[..]).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(
            recs,
            vec![Record { timestamp_us: 5, payload: vec![1, 2, 3] }, Record { timestamp_us: u64::MAX, payload: vec![] }]
        );
    }

    #[test]
    fn header_errors() {
        assert!(CaptureReader::new(&b"PCAP\x01"[..]).is_err());
        assert!(CaptureReader::new(&b"VLPC\x02"[..]).is_err());
        assert!(CaptureReader::new(&b"VL"[..]).is_err());
    }

    #[test]
    fn truncated_record_is_an_error() {
        let mut w = CaptureWriter::new(Vec::new()).unwrap();
        w.write(1, &[9; 10]).unwrap();
        let mut bytes = w.finish().unwrap();
        bytes.pop();
        let mut r = CaptureReader::new(&bytes[..]).unwrap();
        assert!(matches!(r.next(), Some(Err(VelodyneError::Capture(_)))));
        assert!(r.next().is_none());
    }
}
