//! Toy rectified-flow editing backbone.

pub mod model;
pub mod pretrain;
pub mod sampling;

pub use model::{BoundEditor, EditorConfig, FlowEditor, ForwardArgs, ForwardOutput, T_MIN};
pub use pretrain::{coupled_target, edit_strength, pretrain, recolor_example, PretrainConfig, RecolorExample};
pub use sampling::{
    decode, edit_image, edit_on_graph, euler_single_step, forward_diffuse, forward_diffuse_with, forward_with_tap,
    gaussian_noise, perturb, velocity, EditPrompt, FeatureTap, Latent, GDFL_TIMESTEP, HORIZON,
};
