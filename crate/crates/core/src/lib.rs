//! Entanglement-based probabilistic one-time programs.
//!
//! * [`qsim`]: gate states, Bell-pair sampling and `G_k` density matrices.
//! * [`tabler`]: detection streams, clock sync, coincidence matching and the shared tables.
//! * [`engine`]: the classical execution protocol over table lines.
//! * [`sig`]: one-time delegated signatures and their acceptance analysis.
//! * [`security`]: CHSH eavesdropper detection, attack models and privacy audits.
//! * [`wire`]: framed messages, transports and scripted sessions.

pub mod engine;
pub mod qsim;
pub mod security;
pub mod sig;
pub mod tabler;
pub mod wire;
