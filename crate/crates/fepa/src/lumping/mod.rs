//! Model reduction by aggregating structurally related sequential
//! components.
//!
//! Two notions are supported. An *exact* reduction groups whole tuples of
//! atoms whose populations stay interchangeable for all time, so one
//! representative per tuple reproduces every member's trajectory. An
//! *ordinary* reduction groups atoms whose populations can be tracked as a
//! blockwise sum. Partitions are described by atom name ([`Partition`],
//! [`TuplePartition`]), checked against the drift semantics by sampled
//! verification ([`verify_efl`], [`verify_ofl`]), and turned into reduced
//! ODE systems ([`build_efl_lump`], [`build_ofl_lump`]). Candidates can be
//! proposed from the model structure ([`discover_efl`], [`discover_ofl`]),
//! projected ([`projected_partition`]), and merged ([`merge_partitions`]).

mod discover;
mod lump;
pub mod partition;
mod semi;
mod verify;

pub use discover::{discover_efl, discover_ofl, merge_partitions};
pub use lump::{build_efl_lump, build_ofl_lump, LumpError, LumpKind, LumpedSystem};
pub use partition::{
    discrete_partition, resolve_partition, resolve_tuple_partition, Block, Partition,
    PartitionError, TupleClass, TuplePartition,
};
pub use semi::{eps_semi_isomorphism, semi_isomorphic};
pub use verify::{
    recheck_efl, recheck_ofl, verify_efl, verify_ofl, VerifyOptions, VerifyReport, Witness,
};

use crate::model::CompiledModel;

/// Forget the tuple structure of an exact-lumping partition, keeping the
/// positionwise blocks and their state maps.
pub fn projected_partition(
    model: &CompiledModel,
    partition: &TuplePartition,
) -> Result<Partition, PartitionError> {
    partition.project(model)
}
