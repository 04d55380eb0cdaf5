//! Entity embedding table, exact and approximate nearest-neighbor search,
//! and the `RELC` table file.

mod ann;
mod format;
mod table;

pub use ann::{AnnConfig, AnnIndex};
pub use format::{load_table, read_table, save_table, write_table, TABLE_MAGIC, TABLE_VERSION};
pub use table::{centroid, new_table, nn_search, rank_rows, CandidateSet, EmbeddingTable, Metric, RankedList};
