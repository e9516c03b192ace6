use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

/// Run description written next to every output. Holds no timestamps, so
/// equal runs produce equal manifests.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    subcommand: String,
    seed: Option<u64>,
    config: Vec<(String, String)>,
    inputs: Vec<(String, String, u64)>,
    outputs: Vec<String>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Manifest {
    pub fn new(subcommand: &str) -> Self {
        Self { subcommand: subcommand.to_string(), ..Self::default() }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn config(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn config_entries(&mut self, prefix: &str, entries: Vec<(&'static str, String)>) {
        for (k, v) in entries {
            self.config.push((format!("{prefix}{k}"), v));
        }
    }

    pub fn input(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.inputs.push((role.to_string(), path.display().to_string(), fnv1a64(bytes)));
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn render(&self) -> String {
        let mut s = format!("subcommand={}\nversion={}\n", self.subcommand, env!("CARGO_PKG_VERSION"));
        match self.seed {
            Some(seed) => s += &format!("seed={seed}\n"),
            None => s += "seed=none\n",
        }
        for (k, v) in &self.config {
            s += &format!("config.{k}={v}\n");
        }
        for (role, path, digest) in &self.inputs {
            s += &format!("input.{role}={path} fnv1a64={digest:016x}\n");
        }
        for name in &self.outputs {
            s += &format!("output={name}\n");
        }
        s
    }
}
