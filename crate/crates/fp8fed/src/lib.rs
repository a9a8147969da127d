//! Federated averaging with FP8-compressed communication.
//!
//! The crate simulates cross-device federated training where both the model
//! broadcast and the client uploads travel as 8-bit floating-point tensors
//! with a learned per-tensor clipping value. Stochastic rounding keeps the
//! compressed updates unbiased, which is what lets the averaged model track
//! its full-precision counterpart; an optional server pass re-optimizes the
//! aggregated weights and clip against the received updates.
//!
//! Module map:
//!
//! * [`codec`] — the flexible-bias FP8 grid, both rounding modes, and the
//!   byte-stream form of a quantized tensor.
//! * [`qat`] — dense models trained with quantizer nodes in the forward pass
//!   and straight-through gradients, including the learned clips.
//! * [`data`] — synthetic classification and least-squares tasks plus i.i.d.
//!   and Dirichlet client partitions.
//! * [`fed`] — the round loop: sample, broadcast, local updates, aggregate.
//! * [`server_opt`] — the server-side alternating refinement of weights and
//!   clip after aggregation.
//! * [`metrics`] — per-round ledger, persisted CSV artifacts, and the
//!   bytes-to-accuracy gain computation.
//! * [`bench`] — empirical checks of the quantizer's statistical properties
//!   and of the convergence behavior of quantized training.
//! * [`config`] — run configuration parsing.
//! * [`cli`] — the `simulate`, `verify`, `quantize` and `report` commands.

pub mod bench;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod fed;
pub mod metrics;
pub mod qat;
pub mod server_opt;
pub mod rng;
