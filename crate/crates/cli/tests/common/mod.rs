#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pcb_cli::run::{analysis_of, gen, load_frozen, train_run};
use pcb_cli::service::ServiceState;
use pcb_cli::RunConfig;

pub const TINY_CONFIG: &str = r#"
seed = 5

[generator]
num_patients = 400

[encoder]
extractor_layers = 1
aggregator_layers = 1
hidden = 8
heads = 2
intermediate = 16
max_len = 24
window = 8
stride = 4

[bottleneck]
latent_groups = 3
concept_hidden = 8
classifier_hidden = [8, 4]

[trainer]
epochs = 3
base_lr = 3e-3
"#;

pub fn tiny_config() -> RunConfig {
    RunConfig::parse(TINY_CONFIG).unwrap()
}

pub struct Pipeline {
    pub dir: tempfile::TempDir,
    pub config: RunConfig,
}

impl Pipeline {
    pub fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    pub fn run(&self) -> PathBuf {
        self.dir.path().join("run")
    }
}

/// Generates and trains the tiny configuration through the library entry points.
pub fn trained() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    gen(&config, &data).unwrap();
    train_run(&config, &data, &run, |_| {}).unwrap();
    Pipeline { dir, config }
}

pub fn service_state(p: &Pipeline) -> ServiceState {
    let f = load_frozen(&p.config, &p.data(), &p.run()).unwrap();
    let a = analysis_of(&p.config, &f).unwrap();
    ServiceState::new(p.config.template, f.model, a)
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn validator(name: &str) -> jsonschema::Validator {
    let path = schema_dir().join(format!("{name}.schema.json"));
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn assert_valid(name: &str, value: &serde_json::Value) {
    let v = validator(name);
    let errors: Vec<String> = v.iter_errors(value).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{value}");
}
