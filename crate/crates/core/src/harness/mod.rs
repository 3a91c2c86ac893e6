//! Synthetic data, configuration files, and the train/evaluate loops.

pub mod config;
pub mod synth;
pub mod train;

pub use config::KvConfig;
pub use synth::{
    gen_dataset, gen_scenes, gen_shifted_testset, load_dataset, load_split, read_num_classes, render_scene, save_dataset,
    scene_label, Dataset, LabelRule, Sample, Scene, SceneObject, Shape, Shift, ShiftedSet, SyntheticSceneSpec,
};
pub use train::{
    evaluate, evaluate_prepared, forward_batch, model_config_from_kv, predict, prepare_set, throughput, train,
    train_model, EpochMetrics, EvalMetrics, Metrics, PreparedSet, TrainConfig, TrainOutcome,
};
