//! Append-only chain file: a sequence of `len:u32 ∥ block` frames.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::warn;

use crate::codec::{DecodeError, Reader};

use super::block::Block;
use super::{Chain, GenesisConfig};

pub fn encode_frames<'a>(blocks: impl IntoIterator<Item = &'a Block>) -> Vec<u8> {
    let mut out = Vec::new();
    for b in blocks {
        push_frame(&mut out, b);
    }
    out
}

fn push_frame(out: &mut Vec<u8>, b: &Block) {
    let bytes = b.to_bytes();
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bytes);
}

/// Decodes frames until the input ends or a frame fails; returns the blocks
/// read so far and the error that stopped decoding, if any. Heights are
/// assigned by position.
pub fn decode_frames(bytes: &[u8]) -> (Vec<Block>, Option<DecodeError>) {
    let mut r = Reader::new(bytes);
    let mut blocks = Vec::new();
    while r.remaining() > 0 {
        let frame = match r.var_bytes() {
            Ok(f) => f,
            Err(e) => return (blocks, Some(e)),
        };
        match Block::from_bytes(frame, blocks.len() as u64) {
            Ok(b) => blocks.push(b),
            Err(e) => return (blocks, Some(e)),
        }
    }
    (blocks, None)
}

#[derive(Debug, Clone)]
pub struct ChainStore {
    path: PathBuf,
}

impl ChainStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ChainStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Rewrites the whole file through a temporary sibling and a rename.
    pub fn save(&self, chain: &Chain) -> io::Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&chain.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(tmp, &self.path)
    }

    pub fn append(&self, block: &Block) -> io::Result<()> {
        let mut buf = Vec::new();
        push_frame(&mut buf, block);
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(&buf)?;
        f.sync_data()
    }

    pub fn read(&self) -> io::Result<Vec<u8>> {
        fs::read(&self.path)
    }
}

/// Outcome of reloading a chain file after a restart.
#[derive(Debug, Clone)]
pub struct Recovery {
    pub chain: Chain,
    /// Frames present in the file, including any that were discarded.
    pub blocks_read: usize,
    /// Blocks dropped from the end because they failed to decode or validate.
    pub truncated: bool,
    /// The file could not be read at all and the chain restarted at genesis.
    pub from_genesis: bool,
}

/// Reloads and fully revalidates `path`, keeping the longest valid prefix.
/// Missing or unreadable files and foreign genesis blocks yield a fresh chain.
pub fn recover_chain(path: &Path, genesis: GenesisConfig) -> Recovery {
    let fresh = |chain| Recovery {
        chain,
        blocks_read: 0,
        truncated: false,
        from_genesis: true,
    };
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            if e.kind() != io::ErrorKind::NotFound {
                warn!("cannot read chain file {}: {e}; starting from genesis", path.display());
            }
            return fresh(Chain::new(genesis));
        }
    };
    let (blocks, err) = decode_frames(&bytes);
    if let Some(e) = &err {
        warn!("chain file {} has an undecodable tail: {e}", path.display());
    }
    let blocks_read = blocks.len();
    let mut chain = Chain::new(genesis);
    let mut iter = blocks.into_iter();
    match iter.next() {
        Some(g) if g == *chain.genesis() => {}
        Some(_) => {
            warn!("chain file {} has a foreign genesis; starting over", path.display());
            return fresh(chain);
        }
        None => return fresh(chain),
    }
    let mut truncated = err.is_some();
    for b in iter {
        let h = b.height;
        if let Err(e) = chain.push(b) {
            warn!("dropping chain file suffix from height {h}: {e}");
            truncated = true;
            break;
        }
    }
    Recovery {
        chain,
        blocks_read,
        truncated,
        from_genesis: false,
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn save_append_and_recover() {
        let dir = tempfile::tempdir().unwrap();
        let store = ChainStore::new(dir.path().join("sub").join("chain.bin"));
        let mut chain = Chain::new(genesis());
        grow(&mut chain, 3);
        store.save(&chain).unwrap();
        grow(&mut chain, 1);
        store.append(chain.tip()).unwrap();

        let r = recover_chain(store.path(), genesis());
        assert!(!r.truncated && !r.from_genesis);
        assert_eq!(r.chain.tip_hash(), chain.tip_hash());
        assert_eq!(r.chain.to_bytes(), store.read().unwrap());
    }

    #[test]
    fn corrupt_tail_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let store = ChainStore::new(dir.path().join("chain.bin"));
        let mut chain = Chain::new(genesis());
        grow(&mut chain, 3);
        store.save(&chain).unwrap();
        let mut bytes = store.read().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff; // inside the tip's aggregate
        fs::write(store.path(), &bytes).unwrap();

        let r = recover_chain(store.path(), genesis());
        assert!(r.truncated);
        assert_eq!(r.chain.tip_hash(), chain.block(2).unwrap().hash());

        fs::write(store.path(), &bytes[..n - 10]).unwrap();
        let r = recover_chain(store.path(), genesis());
        assert!(r.truncated);
        assert_eq!(r.chain.height(), 2);
    }

    #[test]
    fn missing_file_is_genesis() {
        let dir = tempfile::tempdir().unwrap();
        let r = recover_chain(&dir.path().join("nope"), genesis());
        assert!(r.from_genesis);
        assert_eq!(r.chain.len(), 1);
    }
}
