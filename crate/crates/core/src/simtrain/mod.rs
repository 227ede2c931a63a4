//! Synthetic training harness: scenes, a tabular predictor, the training
//! loop, variant grids and ranking-versus-oracle studies.

pub mod ablation;
pub mod oracle;
pub mod predictor;
pub mod scene;
pub mod train;

pub use ablation::{parse_variant, parse_variant_list, run_variant_grid, AblationRow, AblationTable};
pub use oracle::{random_instance, run_oracle_study, OracleConfig, OracleStudy, OracleTrial};
pub use predictor::{init_predictor, InitConfig, PixelLayout, ScenePredictor};
pub use scene::{generate_scene, generate_suite, read_scenes, write_scenes, Grid, Instance, Scene, SceneSpec};
pub use train::{train, EpochMetrics, MetricsLog, TrainConfig, TrainOutcome, Trainer, VariantConfig};
