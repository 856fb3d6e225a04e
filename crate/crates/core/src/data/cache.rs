use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{io_err, DataError, Result};

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("download of {url} failed: {detail}")]
    Http { url: String, detail: String },
    #[error("{file} has no download source; place it in the cache or a mirror")]
    NoSource { file: String },
    #[error("{path} not found")]
    Missing { path: String },
    #[error("could not decompress {file}: {source}")]
    Decompress { file: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Adult,
    Celeba,
}

impl DatasetName {
    pub const ALL: [DatasetName; 3] = [Self::Mnist, Self::Adult, Self::Celeba];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::Adult => "adult",
            Self::Celeba => "celeba",
        }
    }

    /// Files making up the raw dataset.
    pub fn sources(self) -> Vec<SourceFile> {
        const MNIST: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";
        const ADULT: &str = "https://archive.ics.uci.edu/ml/machine-learning-databases/adult";
        let mnist = |name: &str, sha: &str| SourceFile {
            name: name.into(),
            url: Some(format!("{MNIST}/{name}.gz")),
            sha256: Some(sha.into()),
        };
        let adult = |name: &str, sha: Option<&str>| SourceFile {
            name: name.into(),
            url: Some(format!("{ADULT}/{name}")),
            sha256: sha.map(Into::into),
        };
        match self {
            Self::Mnist => vec![
                mnist("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
                mnist("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
                mnist("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
                mnist("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
            ],
            Self::Adult => vec![
                adult("adult.data", Some("5b00264637dbfec36bdeaab5676b0b309ff9eb788d63554ca0a249491c86603d")),
                adult("adult.test", Some("a2a9044bc167a35b2361efbabec64e89d69ce82d9790d2980119aac5fd7e9c05")),
                adult("adult.names", None),
            ],
            // Distributed through a file host that needs a browser session.
            Self::Celeba => ["list_attr_celeba.txt", "img_align_celeba.zip"]
                .into_iter()
                .map(|name| SourceFile { name: name.into(), url: None, sha256: None })
                .collect(),
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DataError::UnknownDataset(s.into()))
    }
}

/// One raw file. `sha256` is of the decompressed content when known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub name: String,
    pub url: Option<String>,
    pub sha256: Option<String>,
}

/// Obtains the decompressed bytes of a raw file.
pub trait Fetcher {
    fn fetch(&self, dataset: DatasetName, file: &SourceFile) -> std::result::Result<Vec<u8>, FetchError>;
}

/// Downloads over HTTP(S), gunzipping `.gz` URLs.
#[derive(Debug, Default, Clone, Copy)]
pub struct HttpFetcher;

impl Fetcher for HttpFetcher {
    fn fetch(&self, _dataset: DatasetName, file: &SourceFile) -> std::result::Result<Vec<u8>, FetchError> {
        let url = file.url.as_deref().ok_or_else(|| FetchError::NoSource { file: file.name.clone() })?;
        let http = |detail: String| FetchError::Http { url: url.into(), detail };
        let mut response = ureq::get(url).call().map_err(|e| http(e.to_string()))?;
        let body = response.body_mut().with_config().limit(1 << 31).read_to_vec().map_err(|e| http(e.to_string()))?;
        if url.ends_with(".gz") {
            gunzip(&body, &file.name)
        } else {
            Ok(body)
        }
    }
}

/// Reads files from a local copy laid out as `<root>/<dataset>/<file>`,
/// accepting either the plain file or `<file>.gz`.
#[derive(Debug, Clone)]
pub struct MirrorFetcher {
    pub root: PathBuf,
}

impl MirrorFetcher {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl Fetcher for MirrorFetcher {
    fn fetch(&self, dataset: DatasetName, file: &SourceFile) -> std::result::Result<Vec<u8>, FetchError> {
        let plain = self.root.join(dataset.as_str()).join(&file.name);
        if let Ok(bytes) = std::fs::read(&plain) {
            return Ok(bytes);
        }
        let gz = plain.with_file_name(format!("{}.gz", file.name));
        match std::fs::read(&gz) {
            Ok(bytes) => gunzip(&bytes, &file.name),
            Err(_) => Err(FetchError::Missing { path: plain.display().to_string() }),
        }
    }
}

fn gunzip(bytes: &[u8], name: &str) -> std::result::Result<Vec<u8>, FetchError> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|source| FetchError::Decompress { file: name.into(), source })?;
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Written next to the cached files; every load re-verifies the hashes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub dataset: DatasetName,
    pub files: Vec<ManifestFile>,
}

/// A verified cache directory.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub name: DatasetName,
    pub dir: PathBuf,
    pub manifest: CacheManifest,
}

impl RawDataset {
    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

const MANIFEST: &str = "manifest.json";

/// Returns the cached raw files of `name` under `cache_dir/<name>`, fetching
/// them first if the cache is empty.
///
/// A present cache whose files do not match the manifest is reported as
/// corrupt rather than silently re-fetched.
pub fn load_dataset(name: DatasetName, cache_dir: &Path, fetcher: &dyn Fetcher) -> Result<RawDataset> {
    let dir = cache_dir.join(name.as_str());
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: CacheManifest = serde_json::from_str(&text)
            .map_err(|e| DataError::CorruptCache(format!("{}: {e}", manifest_path.display())))?;
        if manifest.dataset != name {
            return Err(DataError::CorruptCache(format!("manifest describes {}", manifest.dataset)));
        }
        for entry in &manifest.files {
            let path = dir.join(&entry.name);
            let bytes = std::fs::read(&path)
                .map_err(|e| DataError::CorruptCache(format!("{}: {e}", path.display())))?;
            let digest = sha256_hex(&bytes);
            if digest != entry.sha256 {
                return Err(DataError::CorruptCache(format!(
                    "{} has sha256 {digest}, manifest says {}",
                    entry.name, entry.sha256
                )));
            }
        }
        return Ok(RawDataset { name, dir, manifest });
    }

    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut files = Vec::new();
    for source in name.sources() {
        log::info!("fetching {name}/{}", source.name);
        let bytes = fetcher.fetch(name, &source)?;
        let digest = sha256_hex(&bytes);
        if let Some(expected) = &source.sha256 {
            if &digest != expected {
                return Err(DataError::CorruptCache(format!(
                    "fetched {} has sha256 {digest}, expected {expected}",
                    source.name
                )));
            }
        }
        let path = dir.join(&source.name);
        std::fs::write(&path, &bytes).map_err(io_err(&path))?;
        files.push(ManifestFile { name: source.name, sha256: digest, bytes: bytes.len() as u64 });
    }
    let manifest = CacheManifest { dataset: name, files };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(RawDataset { name, dir, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed;

    impl Fetcher for Fixed {
        fn fetch(&self, _: DatasetName, file: &SourceFile) -> std::result::Result<Vec<u8>, FetchError> {
            Ok(file.name.as_bytes().to_vec())
        }
    }

    #[test]
    fn names_round_trip() {
        for d in DatasetName::ALL {
            assert_eq!(d.as_str().parse::<DatasetName>().unwrap(), d);
        }
        assert!(matches!("svhn".parse::<DatasetName>(), Err(DataError::UnknownDataset(_))));
    }

    #[test]
    fn wrong_content_is_rejected_on_fetch() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(DatasetName::Mnist, dir.path(), &Fixed), Err(DataError::CorruptCache(_))));
    }

    #[test]
    fn tampered_cache_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("celeba")).unwrap();
        let raw = load_dataset(DatasetName::Celeba, dir.path(), &Fixed).unwrap();
        assert_eq!(raw.manifest.files.len(), 2);
        load_dataset(DatasetName::Celeba, dir.path(), &Fixed).unwrap();
        std::fs::write(raw.path("list_attr_celeba.txt"), b"changed").unwrap();
        assert!(matches!(load_dataset(DatasetName::Celeba, dir.path(), &Fixed), Err(DataError::CorruptCache(_))));
    }

    #[test]
    fn mirror_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mirror = MirrorFetcher::new(dir.path());
        let file = &DatasetName::Adult.sources()[0];
        assert!(matches!(mirror.fetch(DatasetName::Adult, file), Err(FetchError::Missing { .. })));
    }
}
