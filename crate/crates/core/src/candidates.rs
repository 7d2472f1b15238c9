//! Raw candidate generation around cached prefixes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::memo::PrefixPool;
use crate::space::SearchSpace;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub x: Vec<f64>,
    /// Number of leading stages copied from a cached prefix.
    pub delta: usize,
    /// Index into [`PrefixPool::distinct_prefixes`], `None` for the empty prefix.
    pub source_prefix: Option<usize>,
}

/// Generates `m` candidates: one batch of `m / n` per distinct cached
/// prefix plus the empty prefix (`n` groups in total), with the remainder
/// `m % n` going to the empty-prefix group. Prefix coordinates are copied
/// verbatim and the rest are drawn uniformly within bounds.
pub fn generate<R: Rng + ?Sized>(
    pool: &PrefixPool,
    space: &SearchSpace,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    if pool.stage_dims() != space.stage_dims() {
        return Err(Error::invalid(
            "prefix pool and search space disagree on stage layout",
        ));
    }
    let prefixes = pool.distinct_prefixes();
    let groups = prefixes.len() + 1;
    if m < groups {
        return Err(Error::invalid(format!(
            "{m} raw samples cannot cover {groups} prefix groups"
        )));
    }
    let batch = m / groups;
    let mut out = Vec::with_capacity(m);
    for (i, prefix) in prefixes.iter().enumerate() {
        let start = prefix.values.len();
        for _ in 0..batch {
            let mut x = prefix.values.clone();
            x.extend(
                space.bounds()[start..]
                    .iter()
                    .map(|(lo, hi)| uniform(rng, *lo, *hi)),
            );
            out.push(Candidate {
                x,
                delta: prefix.delta,
                source_prefix: Some(i),
            });
        }
    }
    for _ in 0..batch + m % groups {
        let x = space
            .bounds()
            .iter()
            .map(|(lo, hi)| uniform(rng, *lo, *hi))
            .collect();
        out.push(Candidate {
            x,
            delta: 0,
            source_prefix: None,
        });
    }
    Ok(out)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (lo + rng.random::<f64>() * (hi - lo)).clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memo::{OutputHandle, PrefixPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space() -> SearchSpace {
        SearchSpace::new(
            vec![2, 3, 2],
            vec![
                (-5.0, 10.0),
                (0.0, 15.0),
                (0.0, 1.0),
                (0.0, 1.0),
                (0.0, 1.0),
                (0.0, 3.0),
                (0.0, 3.0),
            ],
        )
        .unwrap()
    }

    fn add(pool: &mut PrefixPool, x: &[f64], y: f64) {
        let outs = vec![
            OutputHandle::for_prefix(1, &x[..2]),
            OutputHandle::for_prefix(2, &x[..5]),
        ];
        pool.update(x, y, &outs, PrefixPolicy::All).unwrap();
    }

    #[test]
    fn empty_pool_gives_fully_random_candidates() {
        let s = space();
        let pool = PrefixPool::new(5, s.stage_dims().to_vec());
        let c = generate(&pool, &s, 512, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(c.len(), 512);
        assert!(c.iter().all(|c| c.delta == 0 && s.contains(&c.x)));
    }

    #[test]
    fn group_sizes_with_remainder_on_empty_group() {
        let s = space();
        let mut pool = PrefixPool::new(5, s.stage_dims().to_vec());
        add(&mut pool, &[1.0, 2.0, 0.1, 0.2, 0.3, 1.0, 2.0], 1.0);
        let c = generate(&pool, &s, 512, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(c.len(), 512);
        let count = |d| c.iter().filter(|c| c.delta == d).count();
        assert_eq!(count(1), 170);
        assert_eq!(count(2), 170);
        assert_eq!(count(0), 172);
        for cand in c.iter().filter(|c| c.delta == 2) {
            assert_eq!(pool.lookup(&cand.x).delta(), 2);
        }
        for cand in c.iter().filter(|c| c.delta == 1) {
            assert_eq!(&cand.x[..2], &[1.0, 2.0]);
        }
    }

    #[test]
    fn duplicate_prefixes_form_one_group() {
        let s = space();
        let mut pool = PrefixPool::new(5, s.stage_dims().to_vec());
        add(&mut pool, &[1.0, 2.0, 0.1, 0.2, 0.3, 1.0, 2.0], 1.0);
        add(&mut pool, &[1.0, 2.0, 0.1, 0.2, 0.3, 0.5, 0.5], 2.0);
        assert_eq!(pool.entry_count(), 4);
        assert_eq!(pool.distinct_prefixes().len(), 2);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let s = space();
        let mut pool = PrefixPool::new(5, s.stage_dims().to_vec());
        add(&mut pool, &[1.0, 2.0, 0.1, 0.2, 0.3, 1.0, 2.0], 1.0);
        assert!(matches!(
            generate(&pool, &s, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let s = space();
        let mut pool = PrefixPool::new(5, s.stage_dims().to_vec());
        add(&mut pool, &[3.0, 2.0, 0.4, 0.2, 0.3, 1.0, 2.0], 1.0);
        let a = generate(&pool, &s, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate(&pool, &s, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
