//! The recurrent deblurring architecture.

pub mod cell;
pub mod config;
pub mod params;

pub use cell::{
    cell_core, cell_step, extract_features, extract_hidden, pp_block, pprnn_update, reconstruct_head,
    reconstruct_tail, res_block, snla, AttentionBundle, AttentionVars, CellOutput, Net, RecurrentCarry,
    StepOutput,
};
pub use config::{AttentionKind, AttentionSource, ModelConfig, UpdateOrder, FULL_WINDOW};
pub use params::{Bound, Layout, LayerSpec, PahsParameters, ParameterStore, BACKWARD, FORWARD, TAIL};
