use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use ureq::Agent;

use crate::error::{io_at, Error, Result};

/// Random-access bytes: an in-memory buffer, a local file or an HTTP resource.
pub trait ByteSource: Sync {
    fn len(&self) -> Result<u64>;

    /// Exactly `length` bytes starting at `offset`.
    fn read_range(&self, offset: u64, length: u64) -> Result<Vec<u8>>;
}

fn short(offset: u64, requested: u64, total: u64) -> Error {
    Error::ShortRead {
        offset,
        requested,
        got: total.saturating_sub(offset).min(requested),
    }
}

fn slice_range(s: &[u8], offset: u64, length: u64) -> Result<Vec<u8>> {
    let total = s.len() as u64;
    match offset.checked_add(length) {
        Some(end) if end <= total => Ok(s[offset as usize..end as usize].to_vec()),
        _ => Err(short(offset, length, total)),
    }
}

impl ByteSource for &[u8] {
    fn len(&self) -> Result<u64> {
        Ok(<[u8]>::len(self) as u64)
    }
    fn read_range(&self, offset: u64, length: u64) -> Result<Vec<u8>> {
        slice_range(self, offset, length)
    }
}

impl ByteSource for Vec<u8> {
    fn len(&self) -> Result<u64> {
        Ok(self.as_slice().len() as u64)
    }
    fn read_range(&self, offset: u64, length: u64) -> Result<Vec<u8>> {
        slice_range(self, offset, length)
    }
}

pub struct FileSource {
    path: PathBuf,
    file: Mutex<File>,
    len: u64,
}

impl FileSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(io_at(&path))?;
        let len = file.metadata().map_err(io_at(&path))?.len();
        Ok(FileSource {
            path,
            file: Mutex::new(file),
            len,
        })
    }
}

impl ByteSource for FileSource {
    fn len(&self) -> Result<u64> {
        Ok(self.len)
    }

    fn read_range(&self, offset: u64, length: u64) -> Result<Vec<u8>> {
        if offset.checked_add(length).is_none_or(|end| end > self.len) {
            return Err(short(offset, length, self.len));
        }
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        let mut buf = vec![0u8; length as usize];
        f.seek(SeekFrom::Start(offset)).map_err(io_at(&self.path))?;
        f.read_exact(&mut buf).map_err(io_at(&self.path))?;
        Ok(buf)
    }
}

/// Agent shared by range reads and downloads: status codes are inspected by
/// the caller rather than turned into errors.
pub fn http_agent() -> Agent {
    Agent::config_builder()
        .http_status_as_error(false)
        .timeout_connect(Some(Duration::from_secs(15)))
        .timeout_recv_response(Some(Duration::from_secs(60)))
        .build()
        .into()
}

pub(crate) fn http_err(url: &str, e: impl std::fmt::Display) -> Error {
    Error::Http(format!("{url}: {e}"))
}

/// Remote file read through `Range: bytes=a-b` requests.
pub struct HttpSource {
    url: String,
    agent: Agent,
    len: OnceLock<u64>,
}

impl HttpSource {
    pub fn new(url: impl Into<String>) -> Self {
        Self::with_agent(url, http_agent())
    }

    pub fn with_agent(url: impl Into<String>, agent: Agent) -> Self {
        HttpSource {
            url: url.into(),
            agent,
            len: OnceLock::new(),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn ranged(&self, first: u64, last: u64) -> Result<(Vec<u8>, Option<u64>)> {
        let resp = self
            .agent
            .get(&self.url)
            .header("Range", format!("bytes={first}-{last}"))
            .call()
            .map_err(|e| http_err(&self.url, e))?;
        match resp.status().as_u16() {
            206 => {
                let total = resp
                    .headers()
                    .get("content-range")
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.rsplit('/').next())
                    .and_then(|v| v.trim().parse().ok());
                let body = resp
                    .into_body()
                    .with_config()
                    .limit(last - first + 2)
                    .read_to_vec()
                    .map_err(|e| http_err(&self.url, e))?;
                Ok((body, total))
            }
            416 => Err(Error::ShortRead {
                offset: first,
                requested: last - first + 1,
                got: 0,
            }),
            200 => Err(Error::RangeNotSupported(self.url.clone())),
            s => Err(http_err(&self.url, format!("status {s}"))),
        }
    }
}

impl ByteSource for HttpSource {
    fn len(&self) -> Result<u64> {
        if let Some(n) = self.len.get() {
            return Ok(*n);
        }
        let (_, total) = self.ranged(0, 0)?;
        let n = total.ok_or_else(|| http_err(&self.url, "206 response without Content-Range total"))?;
        Ok(*self.len.get_or_init(|| n))
    }

    fn read_range(&self, offset: u64, length: u64) -> Result<Vec<u8>> {
        if length == 0 {
            return Ok(Vec::new());
        }
        let last = offset
            .checked_add(length - 1)
            .ok_or_else(|| Error::InvalidArgument("range overflows u64".into()))?;
        let (mut body, total) = self.ranged(offset, last)?;
        if let Some(t) = total {
            let _ = self.len.set(t);
        }
        if (body.len() as u64) < length {
            return Err(Error::ShortRead {
                offset,
                requested: length,
                got: body.len() as u64,
            });
        }
        body.truncate(length as usize);
        Ok(body)
    }
}

/// `length` bytes of `url` from `offset`.
pub fn read_range(url: &str, offset: u64, length: u64) -> Result<Vec<u8>> {
    HttpSource::new(url).read_range(offset, length)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_ranges() {
        let v: Vec<u8> = (0..10).collect();
        assert_eq!(v.read_range(2, 3).unwrap(), vec![2, 3, 4]);
        assert_eq!(v.read_range(10, 0).unwrap(), Vec::<u8>::new());
        match v.read_range(8, 5) {
            Err(Error::ShortRead { got, .. }) => assert_eq!(got, 2),
            other => panic!("{other:?}"),
        }
        assert!(v.read_range(u64::MAX, 2).is_err());
    }

    #[test]
    fn file_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        std::fs::write(&p, b"abcdef").unwrap();
        let f = FileSource::open(&p).unwrap();
        assert_eq!(f.len().unwrap(), 6);
        assert_eq!(f.read_range(1, 2).unwrap(), b"bc");
        assert!(f.read_range(5, 2).is_err());
    }
}
