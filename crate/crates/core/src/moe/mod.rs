//! Mixture-of-experts layer: noisy top-k router, expert aggregation and the
//! load-balancing auxiliary loss.

mod balance;
mod layer;
mod router;

pub use balance::{cv_squared, load_balance_loss, load_balance_loss_var, ExpertLoad, CV_MEAN_FLOOR};
pub use layer::{
    is_router_param, moe_forward, Expert, ExpertSelector, FixedSelection, MoeLayer, MoeOutput,
    RouteSite, Routing,
};
pub use router::{draw_noise, gate_logits, gate_probs, keep_top_k, top_k_indices, GateDecision, RouterParams};
