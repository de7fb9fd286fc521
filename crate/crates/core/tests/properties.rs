use permsim::adversary::AdversarySpec;
use permsim::analysis::{check_certificates, check_invariants, wilson};
use permsim::config::presets::{pos, pow};
use permsim::config::ProcessorSpec;
use permsim::pool::AdversaryBound;
use permsim::protocols::Rule;
use permsim::{run_execution, ExecutionConfig, Transcript};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = ExecutionConfig> {
    (
        any::<bool>(),
        2usize..8,
        50u64..400,
        0.05f64..0.6,
        1u32..5,
        any::<u64>(),
        prop::option::of(0.05f64..0.4),
    )
        .prop_map(|(timed, n, d, rate, k, seed, q)| {
            let mut c = if timed { pos(d, &vec![1.0; n], rate, k) } else { pow(d, &vec![1.0; n], rate / 4.0, k) };
            c.seed = seed;
            if let Some(q) = q {
                let bal = q * n as f64 / (1.0 - q) * 0.999;
                c.roster.push(ProcessorSpec::adversary(
                    bal,
                    AdversarySpec::PrivateFork { confirm_depth: k, give_up_lag: 4 },
                ));
                c.pool.adversary_bound = AdversaryBound::Fraction { q };
            }
            c
        })
}

/// Events at or before `t`.
fn prefix(tr: &Transcript, t: u64) -> (Vec<String>, usize) {
    let lines = tr
        .events()
        .iter()
        .skip(1)
        .filter_map(|e| {
            let v = serde_json::to_value(e).unwrap();
            let slot = v.get("slot")?.as_u64()?;
            (slot <= t).then(|| v.to_string())
        })
        .collect::<Vec<_>>();
    let n = lines.len();
    (lines, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn executions_satisfy_the_framework_invariants(cfg in config()) {
        let tr = run_execution(&cfg).unwrap();
        prop_assert!(tr.fault.is_none());
        prop_assert_eq!(check_invariants(&tr), vec![]);
    }

    #[test]
    fn shorter_runs_are_prefixes(cfg in config(), cut in 0.2f64..0.9) {
        let long = run_execution(&cfg).unwrap();
        let mut short_cfg = cfg.clone();
        short_cfg.duration = ((cfg.duration as f64 * cut) as u64).max(1);
        let short = run_execution(&short_cfg).unwrap();
        prop_assert_eq!(prefix(&short, short_cfg.duration), prefix(&long, short_cfg.duration));
    }

    #[test]
    fn transcripts_round_trip(cfg in config()) {
        let tr = run_execution(&cfg).unwrap();
        let back = Transcript::from_jsonl(&tr.to_jsonl()).unwrap();
        prop_assert_eq!(back, tr);
    }

    #[test]
    fn certificate_violations_persist(cfg in config(), k in 0u32..3) {
        let tr = run_execution(&cfg).unwrap();
        let rule = Rule::KDeep(k);
        let mut seen = false;
        for t in (1..=tr.slots_run).step_by(17).chain([tr.slots_run]) {
            let now = check_certificates(&tr, &rule, t).is_some();
            prop_assert!(!seen || now, "violation vanished at slot {}", t);
            seen |= now;
        }
    }
}

proptest! {
    #[test]
    fn wilson_interval_brackets_the_point(n in 1u64..5000, frac in 0.0f64..=1.0) {
        let s = (n as f64 * frac).round() as u64;
        let (lo, hi) = wilson(s, n, 1.959964);
        let p = s as f64 / n as f64;
        prop_assert!((0.0..=p).contains(&lo) && (p..=1.0).contains(&hi));
    }
}
