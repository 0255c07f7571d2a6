//! Fluid semantics: apparent rates, component rates, and the drift field.
//!
//! The population vector assigns a nonnegative count to every state. Each
//! action's capacity flows through the composition tree: leaves offer
//! population-weighted rate sums, synchronisation combines the two operands
//! with either `min` or product, and independent branches add. A state's
//! drift is the inflow from its atom's other states minus its own throughput.

mod expr;
mod field;
mod poly;
mod rates;

pub use expr::Expr;
pub use field::{ode_json, ode_text, vector_field, VectorField};
pub use poly::{FlatPoly, Monomial, Poly, Var};
pub use rates::{
    apparent_rate_at, component_rate_at, direct_field, system_apparent_rate, system_component_rate,
};
