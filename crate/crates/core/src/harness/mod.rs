//! Datasets, run configuration, sweeps, plots and the task runner behind
//! the command-line driver.

mod config;
mod data;
mod plot;
mod run;
mod sweep;

pub use config::{ModelSpec, PretrainSpec, RunConfig, Task};
pub use data::{load_dataset, parse_cifar_records, Batch, DataSource, Dataset, DatasetSpec};
pub use plot::{bar_chart_svg, line_plot_svg, to_rgb, write_panels, write_png, Series};
pub use run::{execute, model_config, pretrain_then_finetune, profile_model, train_classifier, train_config, Prepared};
pub use sweep::{sweep, SweepAxis, SweepReport, SweepRow};
