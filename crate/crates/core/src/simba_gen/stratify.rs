//! Stratified dealing of sorted values into cells.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeds;

/// Seeded permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64, tag: &str) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut seeds::rng_for(seed, tag, n as u64));
    p
}

fn sorted_indices(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// Sorts `values` ascending and deals them round-robin into `cells` cells;
/// round `r` visits the cells in the seeded base order rotated by `r`.
/// When `c` does not divide `m`, the first `m mod c` cells of the base order
/// get one extra value and dealing follows [`stratified_assign_sized`].
/// Returns, per cell, indices into `values`.
pub fn stratified_assign(values: &[f64], cells: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if cells == 0 || values.len() < cells {
        return Err(Error::Cardinality { values: values.len(), cells });
    }
    let order = seeded_permutation(cells, seed, "stratify");
    stratified_assign_with_order(values, &order)
}

/// [`stratified_assign`] with an explicit base cell order.
pub fn stratified_assign_with_order(values: &[f64], order: &[usize]) -> Result<Vec<Vec<usize>>> {
    let cells = order.len();
    if cells == 0 || values.len() < cells {
        return Err(Error::Cardinality { values: values.len(), cells });
    }
    let m = values.len();
    if !m.is_multiple_of(cells) {
        // the first m mod c cells in seeded order take one extra value
        let mut sizes = vec![m / cells; cells];
        for &c in &order[..m % cells] {
            sizes[c] += 1;
        }
        return stratified_assign_sized_with_order(values, &sizes, order);
    }
    let mut out = vec![Vec::with_capacity(m / cells); cells];
    for (pos, idx) in sorted_indices(values).into_iter().enumerate() {
        let round = pos / cells;
        let cell = order[(round + pos % cells) % cells];
        out[cell].push(idx);
    }
    Ok(out)
}

/// Deals sorted values into cells of prescribed sizes. Each value goes to the
/// unfilled cell furthest behind its proportional quota (exact integer
/// arithmetic); ties follow the seeded order rotated once per `cells` values.
/// With equal sizes this reproduces [`stratified_assign`].
pub fn stratified_assign_sized(values: &[f64], sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    let order = seeded_permutation(sizes.len(), seed, "stratify");
    stratified_assign_sized_with_order(values, sizes, &order)
}

pub fn stratified_assign_sized_with_order(
    values: &[f64],
    sizes: &[usize],
    order: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let m = values.len();
    let cells = sizes.len();
    if cells == 0 || sizes.iter().sum::<usize>() != m || sizes.contains(&0) {
        return Err(Error::Cardinality { values: m, cells });
    }
    let mut out: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for (pos, idx) in sorted_indices(values).into_iter().enumerate() {
        let round = pos / cells;
        let mut best: Option<(usize, i128)> = None;
        for j in 0..cells {
            let c = order[(round + j) % cells];
            if out[c].len() >= sizes[c] {
                continue;
            }
            let deficit = (pos as i128 + 1) * sizes[c] as i128 - m as i128 * out[c].len() as i128;
            if best.is_none_or(|(_, d)| deficit > d) {
                best = Some((c, deficit));
            }
        }
        let (c, _) = best.expect("some cell always has room");
        out[c].push(idx);
    }
    Ok(out)
}

/// Two-sample Kolmogorov-Smirnov statistic between empirical CDFs.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_run_two_cells() {
        let values: Vec<f64> = (1..=8).map(f64::from).collect();
        let cells = stratified_assign_with_order(&values, &[0, 1]).unwrap();
        let pick = |c: &Vec<usize>| c.iter().map(|&i| values[i]).collect::<Vec<_>>();
        assert_eq!(pick(&cells[0]), vec![1.0, 4.0, 5.0, 8.0]);
        assert_eq!(pick(&cells[1]), vec![2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn single_cell_takes_everything() {
        let values = [3.0, 1.0, 2.0];
        let cells = stratified_assign(&values, 1, 9).unwrap();
        assert_eq!(cells, vec![vec![1, 2, 0]]);
    }

    #[test]
    fn too_few_values_is_cardinality_error() {
        assert!(matches!(
            stratified_assign(&[1.0, 2.0], 3, 0),
            Err(Error::Cardinality { values: 2, cells: 3 })
        ));
    }

    #[test]
    fn sized_equals_plain_for_equal_cells() {
        let values: Vec<f64> = (0..40).map(|i| ((i * 37) % 41) as f64).collect();
        let order = [2, 0, 3, 1];
        let plain = stratified_assign_with_order(&values, &order).unwrap();
        let sized = stratified_assign_sized_with_order(&values, &[10, 10, 10, 10], &order).unwrap();
        assert_eq!(plain, sized);
    }

    #[test]
    fn sized_cells_fill_exactly() {
        let values: Vec<f64> = (0..200).map(|i| (i as f64 * 0.7).sin()).collect();
        let cells = stratified_assign_sized(&values, &[70, 30, 30, 70], 5).unwrap();
        assert_eq!(cells.iter().map(Vec::len).collect::<Vec<_>>(), vec![70, 30, 30, 70]);
        for c in &cells {
            let vals: Vec<f64> = c.iter().map(|&i| values[i]).collect();
            assert!(ks_distance(&vals, &values) <= 1.0 / c.len() as f64 + 1e-12);
        }
    }

    #[test]
    fn ks_of_identical_samples_is_zero() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert_eq!(ks_distance(&[0.0], &[1.0]), 1.0);
    }
}
