//! From-scratch network engine: layers, exact backward, SGD training, model files.

pub mod io;
pub mod layer;
pub mod network;
pub mod presets;
pub mod train;

pub use io::{load_model, model_hash, save_model};
pub use layer::{avg_pool_backward, max_pool_backward, softmax, LayerSpec, Padding, ReluMode};
pub use network::{ForwardCache, Network};
pub use presets::Preset;
pub use train::{accuracy, train, TrainConfig, TrainOutcome};
