//! Two certified fork arms in a partially synchronous run, replayed to two
//! fresh observers that then confirm incompatible blocks.
//!
//!     cargo run --example partition_observers

use permsim::adversary::{build_partition_instance, observer_ids};
use permsim::analysis::security::Witnesses;
use permsim::analysis::{check_certificates, SecurityView};
use permsim::config::presets::pow;
use permsim::config::Synchrony;
use permsim::network::{ScheduleSpec, TimingPolicy};
use permsim::protocols::Rule;
use permsim::{run_execution, ProcessorId};

fn main() -> permsim::Result<()> {
    let mut base = pow(400, &[1.0; 4], 0.1, 3);
    base.setting.synchrony = Synchrony::PartiallySynchronous;
    base.schedule = ScheduleSpec { async_intervals: vec![[1, 400]] };
    // {p0, p1} and {p2, p3} never hear from each other.
    base.timing = TimingPolicy::Partition {
        groups: vec![vec![ProcessorId(0), ProcessorId(1)]],
        from: 1,
        to: 400,
        base: Box::new(TimingPolicy::default()),
    };
    let tr = run_execution(&base)?;

    let Some(rec) = check_certificates(&tr, &Rule::KDeep(3), 399) else {
        println!("no certified arms in this run");
        return Ok(());
    };
    let Witnesses::Certificates { m1, m2, .. } = rec.witnesses else { unreachable!() };
    println!("certificates of {} and {} messages for incompatible blocks", m1.len(), m2.len());

    let tr2 = run_execution(&build_partition_instance(&base, [m1, m2])?)?;
    let [o1, o2] = observer_ids(&base);
    let view = SecurityView::new(&tr2)?;
    println!("observers confirm incompatible blocks: {}", view.security_violated(o1, 400, o2, 400));
    Ok(())
}
