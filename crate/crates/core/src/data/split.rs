use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Disjoint train / validation / test variable sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariableSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Part sizes proportional to `ratios` by largest remainder; every part
/// gets at least one element.
pub fn part_sizes(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive")));
    }
    if n < ratios.len() {
        return Err(Error::Config(format!(
            "{n} variables cannot fill {} split parts",
            ratios.len()
        )));
    }
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let big = (0..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i)).unwrap();
        sizes[big] -= 1;
        sizes[empty] += 1;
    }
    Ok(sizes)
}

/// Shuffles `vars` with `seed` and cuts it into parts sized by `ratios`.
pub fn partition(vars: &[usize], ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let sizes = part_sizes(vars.len(), ratios)?;
    let mut shuffled = vars.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for s in sizes {
        let mut part = shuffled[at..at + s].to_vec();
        part.sort_unstable();
        out.push(part);
        at += s;
    }
    Ok(out)
}

/// Variable-wise train/val/test split.
pub fn split_by_variable(vars: &[usize], ratios: [f64; 3], seed: u64) -> Result<VariableSplit> {
    let mut parts = partition(vars, &ratios, seed)?.into_iter();
    Ok(VariableSplit {
        train: parts.next().unwrap(),
        val: parts.next().unwrap(),
        test: parts.next().unwrap(),
    })
}
