//! Flat `key = value` config files. Keys are flag names without the leading
//! dashes; `_` and `-` are interchangeable.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use cdac::pipeline::RunConfig;

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    entries: BTreeMap<String, (String, usize)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value, got {line:?}", n + 1))?;
            let key = normalize(k);
            if entries.insert(key.clone(), (v.trim().to_string(), n + 1)).is_some() {
                return Err(format!("line {}: duplicate key {key:?}", n + 1));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), String> {
        match self.entries.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, (_, line))) => Err(format!("line {line}: unknown key {k:?}")),
            None => Ok(()),
        }
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(&normalize(key)) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| format!("line {line}: bad value for {key}: {e}")),
        }
    }

    /// The flag value if given, else the file value.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

/// Resolved settings as a config file that reproduces the run.
pub fn echo(config: &RunConfig) -> String {
    let mut lines = vec![
        ("variant", config.variant.to_string()),
        ("clusters-multiplier", config.cluster_multiplier.to_string()),
        ("labeled-ratio", config.labeled_ratio.to_string()),
        ("unknown-ratio", config.unknown_class_ratio.to_string()),
        ("seed", config.seed.to_string()),
        ("runs", config.num_runs.to_string()),
        ("lr", config.pairwise_learning_rate.to_string()),
        ("batch-size", config.batch_size.to_string()),
        ("eta", config.eta.to_string()),
        ("delta-label", config.delta_label.to_string()),
        ("dropout", config.dropout.to_string()),
        ("pairwise-epochs", config.pairwise_max_epochs.to_string()),
        ("refine-epochs", config.refine_max_epochs.to_string()),
        ("kmeans-restarts", config.kmeans_restarts.to_string()),
        ("kmeans-max-iters", config.kmeans_max_iters.to_string()),
    ];
    if let Some(k) = config.cluster_count {
        lines.push(("clusters", k.to_string()));
    }
    if let Some(g) = config.gamma {
        lines.push(("gamma", g.to_string()));
    }
    if let Some(lr) = config.refine_learning_rate {
        lines.push(("refine-lr", lr.to_string()));
    }
    lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
