//! Message-passing GNN localizer built without an ML framework.

pub mod graph;
pub mod io;
pub mod model;
pub mod optim;
pub mod train;

pub use graph::{build_star_graph, StarGraph};
pub use io::{load_model, read_dataset, save_model, write_dataset, ModelMeta, Sample};
pub use model::{Aggregation, GnnModel, Widths};
pub use train::{evaluate, train, Evaluation, History, TrainConfig};
