//! Named keypairs on disk.
//!
//! The gateway is the domain owner's testbed process, so it holds the keys
//! of the entities it drives (the owner key plus any registered device
//! keys). One JSON file per key under `<data-dir>/keys/`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use blendcac::identity::derive_address;
use blendcac::{Address, KeyPair, PublicKey};

#[derive(Debug, Serialize, Deserialize)]
struct KeyFile {
    name: String,
    address: Address,
    public_key: PublicKey,
    seed: String,
}

/// One loaded key with its metadata.
pub struct StoredKey {
    pub name: String,
    pub address: Address,
    pub keypair: KeyPair,
}

/// Directory of named key files.
pub struct Keystore {
    dir: PathBuf,
}

impl Keystore {
    pub fn open(data_dir: &Path) -> Result<Self> {
        let dir = data_dir.join("keys");
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating keystore dir {}", dir.display()))?;
        Ok(Keystore { dir })
    }

    fn path_for(&self, name: &str) -> Result<PathBuf> {
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            bail!("key names are limited to [A-Za-z0-9_-]");
        }
        Ok(self.dir.join(format!("{name}.json")))
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path_for(name).map(|p| p.exists()).unwrap_or(false)
    }

    /// Generates and stores a fresh keypair under `name`.
    pub fn generate(&self, name: &str) -> Result<StoredKey> {
        let path = self.path_for(name)?;
        if path.exists() {
            bail!("key '{name}' already exists");
        }
        let keypair = KeyPair::generate().map_err(|e| anyhow!("keygen failed: {e}"))?;
        let address = derive_address(&keypair.public_key());
        let file = KeyFile {
            name: name.to_string(),
            address,
            public_key: keypair.public_key(),
            seed: format!("0x{}", hex::encode(keypair.seed())),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&file)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(StoredKey {
            name: name.to_string(),
            address,
            keypair,
        })
    }

    pub fn load(&self, name: &str) -> Result<StoredKey> {
        let path = self.path_for(name)?;
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("no key '{name}' in keystore ({})", path.display()))?;
        let file: KeyFile = serde_json::from_str(&text)
            .with_context(|| format!("malformed key file {}", path.display()))?;
        let seed_raw = blendcac::crypto::decode_prefixed_hex(&file.seed, 32)
            .ok_or_else(|| anyhow!("malformed seed in {}", path.display()))?;
        let keypair = KeyPair::from_seed(seed_raw.try_into().expect("length checked"))
            .map_err(|e| anyhow!("bad seed: {e}"))?;
        if derive_address(&keypair.public_key()) != file.address {
            bail!("key file {} is inconsistent", path.display());
        }
        Ok(StoredKey {
            name: file.name,
            address: file.address,
            keypair,
        })
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    names.push(stem.to_string());
                }
            }
        }
        names.sort();
        Ok(names)
    }

    /// Finds the stored key controlling `address`, if any.
    pub fn find_by_address(&self, address: &Address) -> Result<Option<StoredKey>> {
        for name in self.list()? {
            let key = self.load(&name)?;
            if key.address == *address {
                return Ok(Some(key));
            }
        }
        Ok(None)
    }
}
