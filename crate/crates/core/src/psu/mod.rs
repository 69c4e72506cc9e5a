//! Private set union over a safe-prime group.

pub mod group;
pub mod protocol;
pub mod wire;

pub use group::{exp_shuffle, hash_to_group, GroupElement, GroupParams, PartySecrets};
pub use protocol::{
    pad_with_dummies, run_psu, run_psu_traced, transcript_capture, PsuRun, Role, Transcript, UidMap,
};
pub use wire::{Frame, PsuMessage, Round};
