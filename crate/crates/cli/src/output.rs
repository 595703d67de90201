//! Buffered output files, written together once a command has succeeded.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::Failure;

/// Magic bytes of the binary path dump.
pub const DUMP_MAGIC: &[u8; 8] = b"DCTLPTH1";

pub struct Artifacts {
    hash: String,
    seed: u64,
    command: &'static str,
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    result: &'a T,
}

impl Artifacts {
    pub fn new(command: &'static str, hash: String, seed: u64) -> Self {
        Self {
            hash,
            seed,
            command,
            files: Vec::new(),
        }
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// CSV with a leading `# config_hash=<hex> seed=<n>` comment line.
    pub fn csv<R: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = R>) -> Result<(), Failure> {
        let mut buf = format!("# config_hash={} seed={}\n", self.hash, self.seed).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in rows {
                w.serialize(r).map_err(|e| Failure::numeric("output", e))?;
            }
            w.flush().map_err(|e| Failure::numeric("output", e))?;
        }
        self.files.push((name.to_string(), buf));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let env = Envelope {
            command: self.command,
            config_hash: &self.hash,
            seed: self.seed,
            result: value,
        };
        let mut buf = serde_json::to_vec_pretty(&env).map_err(|e| Failure::numeric("output", e))?;
        buf.push(b'\n');
        self.files.push((name.to_string(), buf));
        Ok(())
    }

    /// Path dump: magic, 64 ASCII hex digits of the config hash, then
    /// little-endian `u64` seed, n_paths, n_nodes, dim, `f64` t_first, h and
    /// the states `[path][node][component]`.
    pub fn dump(&mut self, name: &str, n_paths: usize, n_nodes: usize, dim: usize, t_first: f64, h: f64, states: &[f64]) {
        let mut buf = Vec::with_capacity(8 + 64 + 48 + states.len() * 8);
        buf.extend_from_slice(DUMP_MAGIC);
        buf.extend_from_slice(format!("{:0<64}", self.hash).as_bytes());
        for x in [self.seed, n_paths as u64, n_nodes as u64, dim as u64] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for x in [t_first, h] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for x in states {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.files.push((name.to_string(), buf));
    }

    pub fn write(self, dir: &Path) -> Result<Vec<String>, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
        let mut names = Vec::new();
        for (name, bytes) in self.files {
            let path = dir.join(&name);
            fs::write(&path, bytes).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
            names.push(name);
        }
        Ok(names)
    }
}
