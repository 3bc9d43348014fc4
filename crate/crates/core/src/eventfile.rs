//! Binary detection-event files.
//!
//! Little-endian layout: magic `NSB1`, format version `u16`, clock tick in
//! ns `u32`, cycle length in ticks `u64`, then a `u32`-length-prefixed UTF-8
//! metadata block (the resolved configuration and seed as JSON), then
//! records of `(detector u8, cycle_id u32, timestamp_ticks u64)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::daq::DetectionEvent;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NSB1";
pub const FORMAT_VERSION: u16 = 1;
const RECORD_LEN: usize = 13;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFileHeader {
    pub version: u16,
    pub clock_tick_ns: u32,
    pub cycle_length_ticks: u64,
    pub metadata: String,
}

impl EventFileHeader {
    pub fn new(clock_tick: f64, cycle_length_ticks: u64, metadata: String) -> Result<Self> {
        let ns = clock_tick * 1e9;
        if !(ns >= 1.0 && ns <= u32::MAX as f64) || (ns - ns.round()).abs() > 1e-6 {
            return Err(Error::EventFile(format!(
                "clock tick {clock_tick} s is not a whole number of nanoseconds"
            )));
        }
        Ok(Self {
            version: FORMAT_VERSION,
            clock_tick_ns: ns.round() as u32,
            cycle_length_ticks,
            metadata,
        })
    }

    pub fn clock_tick(&self) -> f64 {
        self.clock_tick_ns as f64 * 1e-9
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = self.metadata.as_bytes();
        let len = u32::try_from(meta.len()).map_err(|_| Error::EventFile("metadata block too large".into()))?;
        w.write_all(&MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.clock_tick_ns.to_le_bytes())?;
        w.write_all(&self.cycle_length_ticks.to_le_bytes())?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(meta)?;
        Ok(())
    }
}

fn encode(e: &DetectionEvent) -> [u8; RECORD_LEN] {
    let mut b = [0u8; RECORD_LEN];
    b[0] = e.detector;
    b[1..5].copy_from_slice(&e.cycle_id.to_le_bytes());
    b[5..13].copy_from_slice(&e.timestamp_ticks.to_le_bytes());
    b
}

fn decode(b: &[u8]) -> DetectionEvent {
    DetectionEvent {
        detector: b[0],
        cycle_id: u32::from_le_bytes(b[1..5].try_into().expect("4 bytes")),
        timestamp_ticks: u64::from_le_bytes(b[5..13].try_into().expect("8 bytes")),
    }
}

/// Append-only writer; records are written in the order given.
pub struct EventWriter<W: Write> {
    inner: W,
    written: u64,
}

impl EventWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: &EventFileHeader) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> EventWriter<W> {
    pub fn new(mut inner: W, header: &EventFileHeader) -> Result<Self> {
        header.write_to(&mut inner)?;
        Ok(Self { inner, written: 0 })
    }

    pub fn write(&mut self, e: &DetectionEvent) -> Result<()> {
        self.inner.write_all(&encode(e))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFile {
    pub header: EventFileHeader,
    pub events: Vec<DetectionEvent>,
}

impl EventFile {
    /// Timestamps of one detector, checked to be non-decreasing.
    pub fn timestamps(&self, detector: u8) -> Result<Vec<u64>> {
        let t: Vec<u64> = self
            .events
            .iter()
            .filter(|e| e.detector == detector)
            .map(|e| e.timestamp_ticks)
            .collect();
        if let Some(i) = t.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::UnorderedStream { index: i + 1 });
        }
        Ok(t)
    }
}

pub fn read_events<R: Read>(mut r: R) -> Result<EventFile> {
    let mut fixed = [0u8; 22];
    r.read_exact(&mut fixed)
        .map_err(|_| Error::EventFile("file is shorter than the event-file header".into()))?;
    if fixed[..4] != MAGIC {
        return Err(Error::EventFile(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&fixed[..4]),
            "NSB1"
        )));
    }
    let version = u16::from_le_bytes([fixed[4], fixed[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::EventFile(format!(
            "unsupported format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let clock_tick_ns = u32::from_le_bytes(fixed[6..10].try_into().expect("4 bytes"));
    let cycle_length_ticks = u64::from_le_bytes(fixed[10..18].try_into().expect("8 bytes"));
    let meta_len = u32::from_le_bytes(fixed[18..22].try_into().expect("4 bytes")) as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)
        .map_err(|_| Error::EventFile("truncated metadata block".into()))?;
    let metadata =
        String::from_utf8(meta).map_err(|_| Error::EventFile("metadata block is not UTF-8".into()))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % RECORD_LEN != 0 {
        return Err(Error::EventFile(format!(
            "{} trailing bytes do not form a whole record",
            body.len() % RECORD_LEN
        )));
    }
    let events = body.chunks_exact(RECORD_LEN).map(decode).collect();
    Ok(EventFile {
        header: EventFileHeader {
            version,
            clock_tick_ns,
            cycle_length_ticks,
            metadata,
        },
        events,
    })
}

pub fn read_event_file(path: &Path) -> Result<EventFile> {
    read_events(BufReader::new(File::open(path)?))
}

pub fn write_event_file(path: &Path, header: &EventFileHeader, events: &[DetectionEvent]) -> Result<()> {
    let mut w = EventWriter::create(path, header)?;
    for e in events {
        w.write(e)?;
    }
    w.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> EventFileHeader {
        EventFileHeader::new(25e-9, 400_000_000, "{\"master_seed\":1}".into()).unwrap()
    }

    fn to_bytes(h: &EventFileHeader, ev: &[DetectionEvent]) -> Vec<u8> {
        let mut w = EventWriter::new(Vec::new(), h).unwrap();
        for e in ev {
            w.write(e).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn header_layout() {
        let b = to_bytes(&header(), &[]);
        assert_eq!(&b[..4], b"NSB1");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 25);
        assert_eq!(b.len(), 22 + 17);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let ev = [DetectionEvent { detector: 1, timestamp_ticks: 5, cycle_id: 0 }];
        let mut b = to_bytes(&header(), &ev);
        assert!(read_events(&b[..b.len() - 1]).is_err());
        b[4] = 9;
        assert!(matches!(read_events(&b[..]), Err(Error::EventFile(m)) if m.contains("version")));
        b[0] = b'X';
        assert!(matches!(read_events(&b[..]), Err(Error::EventFile(m)) if m.contains("magic")));
        assert!(read_events(&b"NS"[..]).is_err());
    }

    #[test]
    fn rejects_fractional_tick() {
        assert!(EventFileHeader::new(2.5e-9, 1, String::new()).is_err());
    }

    #[test]
    fn timestamps_must_be_ordered() {
        let f = EventFile {
            header: header(),
            events: vec![
                DetectionEvent { detector: 1, timestamp_ticks: 9, cycle_id: 0 },
                DetectionEvent { detector: 1, timestamp_ticks: 3, cycle_id: 0 },
            ],
        };
        assert!(f.timestamps(1).is_err());
        assert_eq!(f.timestamps(2).unwrap(), Vec::<u64>::new());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            recs in proptest::collection::vec((any::<u8>(), any::<u32>(), any::<u64>()), 0..200),
            meta in ".{0,64}",
        ) {
            let h = EventFileHeader::new(25e-9, 400_000_000, meta).unwrap();
            let ev: Vec<DetectionEvent> = recs
                .iter()
                .map(|&(d, c, t)| DetectionEvent { detector: d, cycle_id: c, timestamp_ticks: t })
                .collect();
            let bytes = to_bytes(&h, &ev);
            let back = read_events(&bytes[..]).unwrap();
            prop_assert_eq!(&back.header, &h);
            prop_assert_eq!(&back.events, &ev);
            prop_assert_eq!(to_bytes(&back.header, &back.events), bytes);
        }
    }
}
