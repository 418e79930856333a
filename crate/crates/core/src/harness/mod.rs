//! Synthetic pretrain/fine-tune tasks, dataset splitting, and adapter-wrapped
//! models.

pub mod dataset;
pub mod model;
pub mod tasks;

pub use dataset::{split, BatchSampler, Dataset, SplitPair, Targets, TaskKind};
pub use model::{evaluate, AdapterModel, AdapterSpec, MetricRecord, ModelBatch};
pub use tasks::{
    accuracy, make_cluster_task, make_teacher_regression, make_teacher_task, pretrain_base, BaseNetwork, ClusterTask,
    ClusterTaskSpec, DenseLayer, ModelShape, Teacher, TeacherTask, TeacherTaskSpec,
};
