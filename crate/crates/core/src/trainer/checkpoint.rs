use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{OptState, TrainConfig};
use crate::corpus::{Context, Vocab};
use crate::encoder::{encode_context, EncoderParams};
use crate::error::{RelicError, Result};
use crate::neural::{read_container, write_container, Mode, RngState, Tensor};
use crate::store::{load_table, new_table, save_table, EmbeddingTable};

pub const MODEL_FILE: &str = "model.rlck";
pub const TABLE_FILE: &str = "entities.relc";
pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Everything needed to resume or evaluate a run: config, vocabulary,
/// encoder (with the score scale), entity table and optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub encoder: EncoderParams<f32>,
    pub table: EmbeddingTable,
    pub opt: OptState,
}

impl Checkpoint {
    /// Fresh parameters. `config.encoder.vocab_size` is taken from `vocab`.
    pub fn init(config: &TrainConfig, vocab: Vocab, entity_ids: Vec<String>) -> Result<Self> {
        let mut config = config.clone();
        config.encoder.vocab_size = vocab.len();
        config.validate()?;
        config.encoder.validate()?;
        let root = RngState::new(config.seed);
        let encoder = EncoderParams::init(&config.encoder, &mut root.derive(1))?;
        let table = new_table(entity_ids, config.encoder.output_dim, &mut root.derive(2))?;
        let opt = OptState::new(&encoder);
        Ok(Checkpoint {
            config,
            vocab,
            encoder,
            table,
            opt,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| RelicError::io(dir, e))?;
        let mut named = self.encoder.to_named();
        named.extend(self.opt.to_named(&self.encoder));
        let refs: Vec<(String, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        let path = dir.join(MODEL_FILE);
        let f = File::create(&path).map_err(|e| RelicError::io(&path, e))?;
        write_container(BufWriter::new(f), &refs).map_err(|e| RelicError::io(&path, e))?;
        save_table(&self.table, &dir.join(TABLE_FILE))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.config.to_toml()?).map_err(|e| RelicError::io(&path, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != config.encoder.vocab_size {
            return Err(RelicError::Format(format!(
                "vocabulary has {} tokens, config expects {}",
                vocab.len(),
                config.encoder.vocab_size
            )));
        }
        let path = dir.join(MODEL_FILE);
        let f = File::open(&path).map_err(|e| RelicError::io(&path, e))?;
        let named = read_container(BufReader::new(f))?;
        let encoder = EncoderParams::from_named(&config.encoder, &named)?;
        let opt = OptState::from_named(&encoder, &named)?;
        let table = load_table(&dir.join(TABLE_FILE))?;
        if table.dim() != config.encoder.output_dim {
            return Err(RelicError::Format(format!(
                "entity table has d={}, encoder outputs d={}",
                table.dim(),
                config.encoder.output_dim
            )));
        }
        Ok(Checkpoint {
            config,
            vocab,
            encoder,
            table,
            opt,
        })
    }

    pub fn scale(&self) -> f32 {
        self.encoder.scale()
    }

    /// Deterministic (eval-mode) encoding of one context.
    pub fn encode(&self, context: &Context) -> Result<Vec<f32>> {
        encode_context(&self.encoder, context, Mode::Eval, &mut RngState::new(0))
    }

    pub fn encode_all(&self, contexts: &[Context]) -> Result<Tensor<f32>> {
        let d = self.config.encoder.output_dim;
        let mut out = Tensor::zeros(&[contexts.len(), d]);
        for (i, c) in contexts.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&self.encode(c)?);
        }
        Ok(out)
    }
}
