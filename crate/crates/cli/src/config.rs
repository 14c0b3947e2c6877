use std::path::Path;

use serde::Deserialize;
use text2table::backend::BackendConfig;
use text2table::pipeline::HeaderMode;
use text2table::DatasetKind;

/// Contents of the `--config` TOML file. Every section and key is optional;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub backend: BackendConfig,
    pub run: RunSection,
    pub templates: TemplateSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub kind: Option<DatasetKind>,
    pub jobs: usize,
    pub header_mode: HeaderMode,
    pub seed: u64,
    /// Upper bound of the random delay added to replayed responses.
    pub replay_jitter_ms: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            kind: None,
            jobs: 1,
            header_mode: HeaderMode::Predicted,
            seed: 0,
            replay_jitter_ms: 0,
        }
    }
}

/// Inline prompt templates.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSection {
    pub structure: Option<String>,
    pub qa: Option<String>,
    pub flat: Option<String>,
}

pub fn load(path: &Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let c: FileConfig = toml::from_str(
            "[backend]\nkind = \"replay\"\nfixture_dir = \"fx\"\n[run]\nkind = \"wikibio\"\njobs = 3\nheader_mode = \"gold\"\n",
        )
        .unwrap();
        assert_eq!(c.run.kind, Some(DatasetKind::WikiBio));
        assert_eq!(c.run.jobs, 3);
        assert_eq!(c.run.header_mode, HeaderMode::Gold);
        assert!(toml::from_str::<FileConfig>("[run]\nthreads = 2\n").is_err());
        assert!(toml::from_str::<FileConfig>("[backend]\nmodel_name = \"x\"\n").is_err());
        assert!(toml::from_str::<FileConfig>("[other]\n").is_err());
    }
}
