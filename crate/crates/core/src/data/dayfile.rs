//! Day-file and static-map containers.
//!
//! ```text
//! magic [4] | version u32 | city u16 | year u16 | weekday u8 | T u16 | H u16 | W u16 | C u8
//! payload: T frames of H x W x C bytes (frame-major, row-major, channel-last)
//! ```
//!
//! Static maps use the same header with magic `T4CS`, `T = 1` and `C = 1`.

use std::fs::File;
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const DAY_MAGIC: &[u8; 4] = b"T4CD";
pub const STATIC_MAGIC: &[u8; 4] = b"T4CS";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const DEFAULT_TIMESTEPS: u16 = 288;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DayHeader {
    pub version: u32,
    pub city_id: u16,
    pub year: u16,
    pub day_of_week: u8,
    pub timesteps: u16,
    pub height: u16,
    pub width: u16,
    pub channels: u8,
}

impl DayHeader {
    pub fn new(city_id: u16, year: u16, day_of_week: u8, timesteps: u16, height: u16, width: u16) -> Self {
        Self {
            version: FORMAT_VERSION,
            city_id,
            year,
            day_of_week,
            timesteps,
            height,
            width,
            channels: crate::models::CHANNELS as u8,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    pub fn payload_len(&self) -> usize {
        self.timesteps as usize * self.frame_len()
    }

    fn encode(&self, magic: &[u8; 4]) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(magic);
        h[4..8].copy_from_slice(&self.version.to_le_bytes());
        h[8..10].copy_from_slice(&self.city_id.to_le_bytes());
        h[10..12].copy_from_slice(&self.year.to_le_bytes());
        h[12] = self.day_of_week;
        h[13..15].copy_from_slice(&self.timesteps.to_le_bytes());
        h[15..17].copy_from_slice(&self.height.to_le_bytes());
        h[17..19].copy_from_slice(&self.width.to_le_bytes());
        h[19] = self.channels;
        h
    }

    fn decode(bytes: &[u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        let err = |offset: u64, msg: String| Error::Parse { what, offset, msg };
        if bytes.len() < HEADER_LEN {
            return Err(err(
                bytes.len() as u64,
                format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
            ));
        }
        if &bytes[0..4] != magic {
            return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let h = Self {
            version,
            city_id: u16_at(8),
            year: u16_at(10),
            day_of_week: bytes[12],
            timesteps: u16_at(13),
            height: u16_at(15),
            width: u16_at(17),
            channels: bytes[19],
        };
        if h.day_of_week > 6 {
            return Err(err(12, format!("weekday {} out of range 0..=6", h.day_of_week)));
        }
        Ok(h)
    }
}

fn check_payload(header: &DayHeader, payload: &[u8]) -> Result<()> {
    if payload.len() != header.payload_len() {
        return Err(Error::shape(
            "day file",
            "payload bytes",
            header.payload_len(),
            payload.len(),
        ));
    }
    Ok(())
}

pub fn encode_day_file(header: &DayHeader, payload: &[u8]) -> Result<Vec<u8>> {
    check_payload(header, payload)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode(DAY_MAGIC));
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode_day_file(bytes: &[u8]) -> Result<(DayHeader, Vec<u8>)> {
    let header = DayHeader::decode(bytes, DAY_MAGIC, "day file")?;
    let have = bytes.len() - HEADER_LEN;
    if have != header.payload_len() {
        return Err(Error::Parse {
            what: "day file",
            offset: bytes.len() as u64,
            msg: format!("payload has {have} bytes, header implies {}", header.payload_len()),
        });
    }
    Ok((header, bytes[HEADER_LEN..].to_vec()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_day_file(path: &Path, header: &DayHeader, payload: &[u8]) -> Result<()> {
    write_file(path, &encode_day_file(header, payload)?)
}

/// Random-access reader over one day file. Only the header is read on open.
#[derive(Debug)]
pub struct DayFileReader {
    path: PathBuf,
    file: File,
    header: DayHeader,
}

impl DayFileReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = [0u8; HEADER_LEN];
        let n = read_prefix(&file, &mut head).map_err(|e| Error::io(path, e))?;
        let header = DayHeader::decode(&head[..n], DAY_MAGIC, "day file")?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let want = (HEADER_LEN + header.payload_len()) as u64;
        if len != want {
            return Err(Error::Parse {
                what: "day file",
                offset: len,
                msg: format!(
                    "payload has {} bytes, header implies {}",
                    len.saturating_sub(HEADER_LEN as u64),
                    header.payload_len()
                ),
            });
        }
        Ok(Self {
            path: path.to_owned(),
            file,
            header,
        })
    }

    pub fn header(&self) -> &DayHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Bytes of frames `start..start + count`.
    pub fn read_frames(&self, start: usize, count: usize) -> Result<Vec<u8>> {
        let t = self.header.timesteps as usize;
        if start + count > t {
            return Err(Error::shape("read_frames", "frame range end", t, start + count));
        }
        let fl = self.header.frame_len();
        let mut buf = vec![0u8; count * fl];
        let offset = (HEADER_LEN + start * fl) as u64;
        self.file
            .read_exact_at(&mut buf, offset)
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(buf)
    }

    pub fn read_all(&self) -> Result<Vec<u8>> {
        self.read_frames(0, self.header.timesteps as usize)
    }

    /// Asks the kernel to drop this file from the page cache, so the next
    /// read goes to storage.
    pub fn evict_all(&self) {
        evict(&self.file, 0, 0);
    }
}

fn read_prefix(file: &File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match file.read_at(&mut buf[n..], n as u64)? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// `len == 0` means "to the end of the file".
pub fn evict(file: &File, offset: u64, len: u64) {
    #[cfg(target_os = "linux")]
    {
        use std::os::unix::io::AsRawFd;
        // SAFETY: the descriptor is owned by `file` and stays open for the call.
        unsafe {
            libc::posix_fadvise(
                file.as_raw_fd(),
                offset as libc::off_t,
                len as libc::off_t,
                libc::POSIX_FADV_DONTNEED,
            );
        }
    }
    #[cfg(not(target_os = "linux"))]
    let _ = (file, offset, len);
}

/// Evicts a whole file from the page cache.
pub fn evict_path(path: &Path) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    evict(&f, 0, 0);
    Ok(())
}

pub fn read_day_file(path: &Path) -> Result<DayFileReader> {
    DayFileReader::open(path)
}

/// Road density per cell; zero on ocean and off-road cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticMap {
    pub city_id: u16,
    pub height: usize,
    pub width: usize,
    pub density: Vec<u8>,
}

impl StaticMap {
    fn header(&self) -> DayHeader {
        DayHeader {
            version: FORMAT_VERSION,
            city_id: self.city_id,
            year: 0,
            day_of_week: 0,
            timesteps: 1,
            height: self.height as u16,
            width: self.width as u16,
            channels: 1,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let h = self.header();
        check_payload(&h, &self.density)?;
        let mut out = h.encode(STATIC_MAGIC).to_vec();
        out.extend_from_slice(&self.density);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let h = DayHeader::decode(bytes, STATIC_MAGIC, "static map")?;
        let err = |offset: usize, msg: String| Error::Parse {
            what: "static map",
            offset: offset as u64,
            msg,
        };
        if h.timesteps != 1 || h.channels != 1 {
            return Err(err(
                13,
                format!("expected 1 frame of 1 channel, got T={} C={}", h.timesteps, h.channels),
            ));
        }
        if bytes.len() - HEADER_LEN != h.payload_len() {
            return Err(err(
                bytes.len(),
                format!(
                    "payload has {} bytes, header implies {}",
                    bytes.len() - HEADER_LEN,
                    h.payload_len()
                ),
            ));
        }
        Ok(Self {
            city_id: h.city_id,
            height: h.height as usize,
            width: h.width as usize,
            density: bytes[HEADER_LEN..].to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
