//! Stratified train/val/test assignment.

use super::stratify::{seeded_permutation, stratified_assign_sized_with_order};
use super::{DatasetManifest, Split, CELLS};
use crate::error::{Error, Result};

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Assigns splits within every (class, group) cell.
///
/// Per-cell counts are `floor(f * n)` plus leftover units handed to the
/// splits with the largest fractional quota; ties go to the split that is
/// furthest behind its global quota, then to the seeded order. Within a cell,
/// subjects ordered by (disease magnitude, subject-coefficient norm, id) are
/// dealt across splits so every split sees the whole magnitude range.
pub fn split_dataset(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut out = manifest.clone();
    out.warnings.retain(|w| !w.starts_with("stratification"));
    let tie_order = seeded_permutation(3, seed, "split-ties");
    let mut global_deficit = [0.0f64; 3];

    for (cell_idx, &(class, group)) in CELLS.iter().enumerate() {
        let mut members: Vec<usize> =
            (0..out.records.len()).filter(|&i| out.records[i].class == class && out.records[i].group == group).collect();
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            out.warnings.push(format!(
                "stratification: cell {class:?}/{group:?} has only {n} subjects"
            ));
        }
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let frac: Vec<f64> = exact.iter().zip(&sizes).map(|(e, s)| e - *s as f64).collect();
        for (d, f) in global_deficit.iter_mut().zip(&frac) {
            *d += f;
        }
        let mut leftover = n - sizes.iter().sum::<usize>();
        let mut given = [false; 3];
        while leftover > 0 {
            let pick = tie_order
                .iter()
                .copied()
                .filter(|&s| !given[s])
                .max_by(|&a, &b| {
                    let fa = (frac[a] * 1e9).round();
                    let fb = (frac[b] * 1e9).round();
                    fa.total_cmp(&fb)
                        .then(global_deficit[a].total_cmp(&global_deficit[b]))
                        // max_by keeps the last maximum; prefer earlier in tie_order
                        .then(pos(&tie_order, b).cmp(&pos(&tie_order, a)))
                })
                .expect("fewer leftovers than splits");
            given[pick] = true;
            sizes[pick] += 1;
            global_deficit[pick] -= 1.0;
            leftover -= 1;
        }

        members.sort_by(|&a, &b| {
            let (ra, rb) = (&out.records[a], &out.records[b]);
            ra.disease_mag
                .total_cmp(&rb.disease_mag)
                .then(ra.coeff_norm().total_cmp(&rb.coeff_norm()))
                .then(ra.id.cmp(&rb.id))
        });
        // keys are already in order; deal by position
        let keys: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let nonzero: Vec<usize> = (0..3).filter(|&s| sizes[s] > 0).collect();
        let order: Vec<usize> = seeded_permutation(nonzero.len(), seed ^ cell_idx as u64, "split-deal");
        let cell_sizes: Vec<usize> = nonzero.iter().map(|&s| sizes[s]).collect();
        let dealt = stratified_assign_sized_with_order(&keys, &cell_sizes, &order)?;
        for (k, positions) in dealt.into_iter().enumerate() {
            for p in positions {
                out.records[members[p]].split = Some(SPLITS[nonzero[k]]);
            }
        }
    }
    out.refresh_checksum();
    Ok(out)
}

fn pos(order: &[usize], x: usize) -> usize {
    order.iter().position(|&o| o == x).unwrap()
}
