//! Test-time grounding of sub-action text in motion sequences.
//!
//! A frozen attention-pooling encoder turns frames into one embedding.
//! For each motion, [`smo::optimize_masks`] fits soft per-frame masks, one
//! per sub-action, so that each masked pooling matches its own text. The
//! masks are then decoded into segments and scored with [`eval::mean_ap`].
//!
//! ```
//! use motion_grounding::model::AttentionPoolParams;
//! use motion_grounding::smo::{optimize_masks, SmoConfig};
//! use motion_grounding::synth::{generate_indexed, SynthSpec};
//!
//! let inst = generate_indexed(&SynthSpec::default(), 1)?;
//! let r = optimize_masks(&AttentionPoolParams::identity(16), &inst.feats, &inst.query_embeddings(), &SmoConfig::default())?;
//! assert!(r.segments.len() <= 3);
//! # Ok::<(), motion_grounding::Error>(())
//! ```

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod lsp;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod smo;
pub mod synth;

pub use error::{Error, Result};

// The guide's code blocks run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pooling.md")]
    mod pooling {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
