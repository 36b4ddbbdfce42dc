//! Group rates and disparities against a direct counting pass over the
//! predictions.

use biastrial_core::fairmetrics::{disparities, group_confusion, relative_to};
use biastrial_core::simba_gen::BiasGroup;
use proptest::prelude::*;

/// `count(pred & cond) / count(cond)` within one group, by filtering.
fn rate(rows: &[(f64, bool, BiasGroup)], group: Option<BiasGroup>, positives: bool) -> Option<f64> {
    let members: Vec<_> = rows.iter().filter(|r| group.is_none_or(|g| r.2 == g) && r.1 == positives).collect();
    let hits = members.iter().filter(|r| r.0 >= 0.5).count();
    (!members.is_empty()).then(|| hits as f64 / members.len() as f64)
}

fn accuracy(rows: &[(f64, bool, BiasGroup)], group: Option<BiasGroup>) -> Option<f64> {
    let members: Vec<_> = rows.iter().filter(|r| group.is_none_or(|g| r.2 == g)).collect();
    let right = members.iter().filter(|r| (r.0 >= 0.5) == r.1).count();
    (!members.is_empty()).then(|| right as f64 / members.len() as f64)
}

fn rows_strategy() -> impl Strategy<Value = Vec<(f64, bool, BiasGroup)>> {
    let prob = prop_oneof![0.0f64..1.0, Just(0.5), Just(0.0), Just(1.0)];
    let group = prop_oneof![Just(BiasGroup::Bias), Just(BiasGroup::NonBias)];
    prop::collection::vec((prob, any::<bool>(), group), 0..80)
}

fn split(rows: &[(f64, bool, BiasGroup)]) -> (Vec<f64>, Vec<bool>, Vec<BiasGroup>) {
    (rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect(), rows.iter().map(|r| r.2).collect())
}

proptest! {
    #[test]
    fn rates_match_counting(rows in rows_strategy()) {
        let (p, y, g) = split(&rows);
        let m = group_confusion(&p, &y, &g, 0.5).unwrap();
        for (got, group) in [(&m.bias, Some(BiasGroup::Bias)), (&m.non_bias, Some(BiasGroup::NonBias)), (&m.overall, None)] {
            prop_assert_eq!(got.tpr, rate(&rows, group, true));
            prop_assert_eq!(got.fpr, rate(&rows, group, false));
            prop_assert_eq!(got.accuracy, accuracy(&rows, group));
        }
    }

    #[test]
    fn disparities_and_relative_match_counting(a in rows_strategy(), b in rows_strategy(), seed in any::<u64>()) {
        let report = |rows: &[(f64, bool, BiasGroup)]| {
            let (p, y, g) = split(rows);
            disparities(&group_confusion(&p, &y, &g, 0.5).unwrap(), seed)
        };
        let expect = |rows: &[(f64, bool, BiasGroup)]| -> Option<(f64, f64)> {
            let t = rate(rows, Some(BiasGroup::Bias), true)? - rate(rows, Some(BiasGroup::NonBias), true)?;
            let f = rate(rows, Some(BiasGroup::Bias), false)? - rate(rows, Some(BiasGroup::NonBias), false)?;
            Some((t, f))
        };
        let (ra, rb) = (report(&a), report(&b));
        prop_assert_eq!(ra.as_ref().ok().map(|r| (r.delta.d_tpr, r.delta.d_fpr)), expect(&a));
        if let (Ok(ra), Ok(rb), Some(ea), Some(eb)) = (ra, rb, expect(&a), expect(&b)) {
            let rel = relative_to(&ra, &rb).unwrap().relative.unwrap();
            prop_assert_eq!((rel.d_tpr, rel.d_fpr), (ea.0 - eb.0, ea.1 - eb.1));
        }
    }
}
