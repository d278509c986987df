//! Output directories and saved runs.

use std::fs;
use std::path::{Path, PathBuf};

use super::data::{read_text, tokenizer};
use super::OutArgs;
use crate::config::KvConfig;
use crate::error::{LmError, Result};
use crate::model::{read_checkpoint, Model, ModelConfig};
use crate::text::{Tokenizer, Vocab};
use crate::train::TrainConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.lmck";

/// Creates `out`, refusing a non-empty directory unless `force` is set, in
/// which case its contents are removed first.
pub fn prepare(out: &OutArgs) -> Result<PathBuf> {
    let dir = &out.out;
    if dir.exists() {
        if !dir.is_dir() {
            return Err(LmError::Config(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !out.force {
                return Err(LmError::Config(format!(
                    "{} is not empty (use a fresh directory or --force)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(dir.clone())
}

/// Writes a file that must not exist yet.
pub fn write_new(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path)?;
    f.write_all(contents.as_ref())?;
    Ok(())
}

/// Data-related keys of a run config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataKeys {
    pub corpus: Option<String>,
    pub task: Option<String>,
    pub tokenizer: String,
    pub max_vocab: Option<usize>,
}

impl DataKeys {
    pub fn take(kv: &mut KvConfig) -> Result<DataKeys> {
        Ok(DataKeys {
            corpus: kv.take_str("corpus"),
            task: kv.take_str("task"),
            tokenizer: kv.take_str("tokenizer").unwrap_or_else(|| "whitespace".into()),
            max_vocab: kv.take("max_vocab")?,
        })
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        if let Some(c) = &self.corpus {
            s += &format!("corpus={c}\n");
        }
        if let Some(t) = &self.task {
            s += &format!("task={t}\n");
        }
        s += &format!("tokenizer={}\n", self.tokenizer);
        if let Some(m) = self.max_vocab {
            s += &format!("max_vocab={m}\n");
        }
        s
    }
}

/// Full effective config of a training run, as echoed into `config.txt`.
pub fn run_config_text(data: &DataKeys, model: &ModelConfig, train: &TrainConfig) -> String {
    format!("{}{}{}", data.to_kv(), model.to_kv(), train.to_kv())
}

pub struct Run {
    pub model: Model,
    pub train: TrainConfig,
    pub vocab: Vocab,
    pub tokenizer: Tokenizer,
}

pub fn load_run(dir: &Path) -> Result<Run> {
    let mut kv = KvConfig::parse(&read_text(&dir.join(CONFIG_FILE))?)?;
    let data = DataKeys::take(&mut kv)?;
    let config = ModelConfig::from_kv(&mut kv)?;
    let train = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let vocab = Vocab::from_text(&read_text(&dir.join(VOCAB_FILE))?)?;
    if vocab.len() != config.vocab_size() {
        return Err(LmError::Data(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            config.vocab_size()
        )));
    }
    let bytes = fs::read(dir.join(CHECKPOINT_FILE))
        .map_err(|e| LmError::Data(format!("{}: {e}", dir.join(CHECKPOINT_FILE).display())))?;
    let model = read_checkpoint(&mut bytes.as_slice(), Some(&config))?;
    let tokenizer = tokenizer(&data.tokenizer)?;
    Ok(Run {
        model,
        train,
        vocab,
        tokenizer,
    })
}
