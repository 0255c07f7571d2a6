//! Fluid process algebra: compile population models of interacting sequential
//! processes into ODE systems, verify and construct lumped (reduced) systems,
//! and bound the error of rate-homogenisation approximations.
//!
//! The pipeline is:
//!
//! 1. [`syntax::parse_model`] turns model text into a [`syntax::ModelSource`].
//! 2. [`model::compile`] derives each leaf process's state graph and builds a
//!    [`model::CompiledModel`] with state, action, and rate tables.
//! 3. [`semantics`] evaluates apparent and component rates and assembles the
//!    drift [`semantics::VectorField`] under either synchronisation semantics
//!    (`min` or `product`).
//! 4. [`solve`] integrates the field over a time grid.
//! 5. [`lumping`] checks candidate aggregations (exact and ordinary) and
//!    builds the reduced systems.
//! 6. [`perturb`] homogenises rates, computes Lipschitz bounds, and bounds the
//!    aggregation error of the perturbed model.
//! 7. [`experiment`] runs the parameter sweep that quantifies those errors on
//!    replica/server models.

pub mod experiment;
pub mod lumping;
pub mod model;
pub mod perturb;
pub mod semantics;
pub mod solve;
pub mod syntax;

pub use model::{compile, compose, validate, CompiledModel, Diagnostic, ModelError, Severity};
pub use syntax::{parse_model, ModelSource, ParseError, Rho};
