//! End-to-end orchestration: synthetic benchmark, feedforward editing and
//! lifting, the evaluation protocol, and the consistency ablation.

pub mod config;
pub mod io;
pub mod run;
pub mod synth;

pub use config::{LoraConfig, PipelineConfig, ProtocolConfig};
pub use run::{
    ablation_variants, default_novel_poses, edit_scene, evaluate, pretrained_editor, run_ablation, trained_lifter,
    AblationRow, AblationTable, EditResult, Models, OrderingCheck, SceneInput, ABLATION_GAP, RESIZE_FILTER,
};
pub use synth::{
    cast, edited_objects, intersect, random_scene, raycast, raycast_with_coverage, render_record, synth_dataset, Rig,
    SceneObject, SceneRecord, Shape, SynthConfig, SyntheticScene,
};
