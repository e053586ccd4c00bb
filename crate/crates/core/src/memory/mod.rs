//! Two-tier rehearsal memory: a long-term bank of real-image features and
//! prompts, and a short-term bank of selected generated images.

pub mod bank;
pub mod select;
pub mod store;

pub use bank::{
    update_long_term, BankConfig, LongTermBank, LongTermEntry, ShortTermBank, ShortTermEntry,
};
pub use select::{generate_candidates, score, select_from_features, select_short_term};
pub use store::{load_long_term, load_short_term, save_long_term, save_short_term};
