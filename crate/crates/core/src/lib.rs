pub mod conflict;
pub mod consensus;
pub mod crypto;
pub mod faults;
pub mod ledger;
pub mod merkle;
pub mod net;
pub mod readonly;
pub mod twopc;
pub mod types;
pub mod workload;
pub mod harness;
pub mod sim;
