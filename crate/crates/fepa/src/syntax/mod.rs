//! Model text format: sequential process definitions, a composition line,
//! initial populations and a synchronisation semantics selector.
//!
//! ```text
//! P1  = (alpha, 1.0).P1';
//! P1' = (beta, 0.5).P1;
//! Q   = (alpha, 1.0).Q';
//! Q'  = (gamma, 15.0).Q;
//!
//! system = (P1 <> P2) <alpha> Q;
//! init P1 = 200;
//! semantics = product;
//! ```
//!
//! `<a,b>` composes two processes synchronising on actions `a` and `b`;
//! `<>` composes with no synchronisation. Composition is left-associative.
//! Prefix binds tighter than choice, so `(a,1).P + Q` is `((a,1).P) + Q`.

mod ast;
mod parser;

pub use ast::{AtomDef, CompTree, ModelSource, Rho, SeqTerm};
pub use parser::{parse_model, ParseError};
