//! Prefix-aware decode-attention scheduling.
//!
//! The crate turns a paged KV block table into CTA work units that share
//! prefix loads ([`pack`]), picks tile shapes for each unit ([`tile`]), models
//! their execution on an SM pool ([`sim`]) and checks that the split-and-merge
//! computation reproduces plain attention ([`attention`]).
//!
//! ```
//! use prefixpack::{generate_workload, pack_table, WorkloadSpec};
//!
//! let spec = WorkloadSpec::new(vec![1, 4], vec![64, 32], 16);
//! let table = generate_workload(&spec, 0).unwrap();
//! let partition = pack_table(&table).unwrap();
//! partition.check_coverage(&table).unwrap();
//! ```

pub mod attention;
pub mod error;
pub mod forest;
pub mod pack;
pub mod par;
pub mod partition;
pub mod pipeline;
pub mod sim;
pub mod tile;
pub mod workload;

pub use error::{Error, Result};
pub use forest::{build_forest, PrefixForest, PrefixNode};
pub use pack::{pack_table, PackCache};
pub use par::Execution;
pub use partition::{CtaPack, Partition};
pub use pipeline::{run_strategy, Strategy, StrategyRow, TileSetup};
pub use workload::{generate_workload, BlockId, BlockTable, DtypeBytes, HeadConfig, QueryId, WorkloadSpec};
