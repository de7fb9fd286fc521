//! Post-hoc measurement over transcripts: framework invariants, liveness and
//! security estimates, certificate searches and recalibration plans.

pub mod certificates;
pub mod invariants;
pub mod liveness;
pub mod recalibration;
pub mod replay;
pub mod security;
pub mod stats;

pub use certificates::{
    check_certificates, exhaustive_violation, first_certificate_violation, ledger_by,
};
pub use invariants::{check_invariants, InvariantViolation};
pub use liveness::{calibrate_ell, growth_report, measure_liveness, GrowthReport, GrowthSeries};
pub use recalibration::{
    build_certificate_recalibration, recalibrate_union_bound, CertificatePlan, EllTable,
    UnionBoundPlan,
};
pub use replay::Replay;
pub use security::{check_security, SecurityView, ViolationKind, ViolationRecord};
pub use stats::{wilson, Estimate};
