use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::source::{http_agent, http_err};
use crate::error::{io_at, Error, Result};

pub const CACHE_ENV: &str = "EMBEDHEIGHT_CACHE";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchEntry {
    pub url: String,
    pub length: u64,
    /// Lowercase hex SHA-256.
    pub sha256: String,
    pub filename: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchManifest {
    pub entries: Vec<FetchEntry>,
    pub cache_dir: PathBuf,
}

fn valid_filename(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains(['/', '\\', '\0'])
}

impl FetchManifest {
    /// One `url length sha256 filename` record per line; blank lines and
    /// `#` comments are skipped.
    pub fn parse(text: &str, cache_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Manifest { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            let [url, length, sha, filename] = f[..] else {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            };
            let length: u64 = length.parse().map_err(|_| bad(format!("bad length {length:?}")))?;
            if length == 0 {
                return Err(bad("length must be positive".into()));
            }
            if sha.len() != 64 || !sha.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(bad(format!("checksum {sha:?} is not 64 hex characters")));
            }
            if !valid_filename(filename) {
                return Err(bad(format!("bad filename {filename:?}")));
            }
            entries.push(FetchEntry {
                url: url.to_string(),
                length,
                sha256: sha.to_ascii_lowercase(),
                filename: filename.to_string(),
            });
        }
        Ok(FetchManifest {
            entries,
            cache_dir: cache_dir.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>, cache_dir: impl Into<PathBuf>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        Self::parse(&text, cache_dir)
    }

    pub fn blob_path(&self, entry: &FetchEntry) -> PathBuf {
        self.cache_dir.join("blobs").join(&entry.sha256)
    }
}

/// `EMBEDHEIGHT_CACHE` if set, else `configured`, else `$HOME/.cache/embedheight`.
pub fn resolve_cache_dir(configured: Option<&Path>) -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    if let Some(dir) = configured {
        return dir.to_path_buf();
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("embedheight")
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub workers: usize,
    /// Retries after the first attempt.
    pub retries: u32,
    /// Delay before the first retry; doubles for each later one.
    pub backoff: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        FetchOptions {
            workers: 4,
            retries: 3,
            backoff: Duration::from_secs(1),
        }
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(io_at(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_at(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn is_valid(path: &Path, entry: &FetchEntry) -> Result<bool> {
    match fs::metadata(path) {
        Ok(m) if m.is_file() && m.len() == entry.length => Ok(sha256_file(path)? == entry.sha256),
        Ok(_) => Ok(false),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::IoPath {
            path: path.to_path_buf(),
            source: e,
        }),
    }
}

fn temp_name(dir: &Path, stem: &str) -> PathBuf {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let k = COUNTER.fetch_add(1, Ordering::Relaxed);
    dir.join(format!(".{stem}.tmp-{}-{k}", std::process::id()))
}

fn download_once(agent: &ureq::Agent, entry: &FetchEntry, blob: &Path) -> Result<()> {
    let resp = agent.get(&entry.url).call().map_err(|e| http_err(&entry.url, e))?;
    let status = resp.status().as_u16();
    if status != 200 {
        return Err(http_err(&entry.url, format!("status {status}")));
    }
    let dir = blob.parent().expect("blob path has a parent");
    let tmp = temp_name(dir, &entry.sha256);
    let result = (|| {
        let mut reader = resp.into_body().into_with_config().limit(entry.length + 1).reader();
        let mut file = fs::File::create(&tmp).map_err(io_at(&tmp))?;
        let mut h = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        let mut total = 0u64;
        loop {
            let n = reader.read(&mut buf).map_err(|e| http_err(&entry.url, e))?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
            file.write_all(&buf[..n]).map_err(io_at(&tmp))?;
            total += n as u64;
        }
        file.sync_all().map_err(io_at(&tmp))?;
        if total != entry.length {
            return Err(http_err(&entry.url, format!("expected {} bytes, received {total}", entry.length)));
        }
        let actual = hex::encode(h.finalize());
        if actual != entry.sha256 {
            return Err(Error::ChecksumMismatch {
                url: entry.url.clone(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        fs::rename(&tmp, blob).map_err(io_at(blob))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Link (or copy) the blob to its manifest filename via a temp file and rename.
fn materialize(blob: &Path, target: &Path) -> Result<()> {
    let dir = target.parent().expect("target path has a parent");
    let tmp = temp_name(dir, "link");
    if fs::hard_link(blob, &tmp).is_err() {
        fs::copy(blob, &tmp).map_err(io_at(&tmp))?;
    }
    fs::rename(&tmp, target).map_err(io_at(target))
}

fn fetch_entry(agent: &ureq::Agent, manifest: &FetchManifest, entry: &FetchEntry, opts: &FetchOptions) -> Result<PathBuf> {
    let blob = manifest.blob_path(entry);
    let target = manifest.cache_dir.join(&entry.filename);
    if !is_valid(&blob, entry)? {
        let mut attempt = 0;
        loop {
            match download_once(agent, entry, &blob) {
                Ok(()) => break,
                Err(e) if attempt < opts.retries => {
                    let wait = opts.backoff * 2u32.pow(attempt);
                    log::warn!("{}: {e}; retrying in {wait:?}", entry.url);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
        log::info!("downloaded {} ({} bytes)", entry.url, entry.length);
    }
    materialize(&blob, &target)?;
    Ok(target)
}

/// Ensure every manifest entry is cached and verified; returns the
/// materialized paths in manifest order.
pub fn fetch(manifest: &FetchManifest) -> Result<Vec<PathBuf>> {
    fetch_with(manifest, &FetchOptions::default())
}

pub fn fetch_with(manifest: &FetchManifest, opts: &FetchOptions) -> Result<Vec<PathBuf>> {
    let blobs = manifest.cache_dir.join("blobs");
    fs::create_dir_all(&blobs).map_err(io_at(&blobs))?;
    let agent = http_agent();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<PathBuf>>>> =
        Mutex::new((0..manifest.entries.len()).map(|_| None).collect());
    let workers = opts.workers.clamp(1, manifest.entries.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(entry) = manifest.entries.get(i) else { break };
                let r = fetch_entry(&agent, manifest, entry, opts);
                results.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every entry visited"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHA: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

    #[test]
    fn parses_manifest() {
        let text = format!("# tiles\nhttp://x/a.tif 10 {} a.tif\n\n  http://x/b 3 {SHA} b # trailing\n", SHA.to_uppercase());
        let m = FetchManifest::parse(&text, "/c").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].sha256, SHA);
        assert_eq!(m.blob_path(&m.entries[1]), Path::new("/c/blobs").join(SHA));
    }

    #[test]
    fn rejects_bad_lines() {
        for line in [
            "http://x 10 abc a",
            &format!("http://x 0 {SHA} a"),
            &format!("http://x ten {SHA} a"),
            &format!("http://x 1 {SHA} ../a"),
            &format!("http://x 1 {SHA}"),
        ] {
            match FetchManifest::parse(line, "/c") {
                Err(Error::Manifest { line: 1, .. }) => {}
                other => panic!("{line}: {other:?}"),
            }
        }
    }

    #[test]
    fn sha_of_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e");
        fs::write(&p, b"").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), SHA);
    }
}
