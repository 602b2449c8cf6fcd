//! Nearest-neighbor feature matching under cosine distance.
//!
//! [`StyleIndex`] answers nearest-neighbor queries exactly: style vectors are
//! grouped around pivots and a group is skipped only when an angular lower
//! bound proves every member strictly worse than the current best. Distances
//! of evaluated candidates go through the same [`cosine_distance`] as the
//! exhaustive scan, so both paths return bitwise-identical results.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMap;

/// Guard on the norm product in the cosine distance.
pub const COSINE_EPS: f64 = 1e-8;
/// Vectors shorter than this bypass the pivot groups.
const SMALL_NORM: f64 = 1e-3;
const ANGLE_SLACK: f64 = 1e-7;
const DIST_SLACK: f64 = 1e-9;

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - a·b / max(|a||b|, ε)` with precomputed norms.
#[inline]
pub fn cosine_distance(a: &[f64], b: &[f64], norm_a: f64, norm_b: f64) -> f64 {
    1.0 - dot(a, b) / (norm_a * norm_b).max(COSINE_EPS)
}

/// Best match for one query: lowest distance, lowest index on ties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index: usize,
    pub distance: f64,
}

fn check_channels(fr: &FeatureMap, fs: &FeatureMap) -> Result<()> {
    if fr.channels != fs.channels {
        return Err(Error::mismatch("nnfm channels", fr.channels, fs.channels));
    }
    if fs.num_cells() == 0 {
        return Err(Error::InvalidInput("nnfm style map has no cells".into()));
    }
    Ok(())
}

fn scan<'a>(
    query: &[f64],
    norm_q: f64,
    candidates: impl Iterator<Item = (usize, &'a [f64], f64)>,
) -> Match {
    let mut best = Match {
        index: usize::MAX,
        distance: f64::INFINITY,
    };
    for (i, b, nb) in candidates {
        let d = cosine_distance(query, b, norm_q, nb);
        if d < best.distance || (d == best.distance && i < best.index) {
            best = Match {
                index: i,
                distance: d,
            };
        }
    }
    best
}

/// Exhaustive double loop. Reference for [`StyleIndex`].
pub fn nearest_exhaustive(fr: &FeatureMap, fs: &FeatureMap) -> Result<Vec<Match>> {
    check_channels(fr, fs)?;
    let style_norms: Vec<f64> = fs.cells().map(norm).collect();
    Ok(fr
        .cells()
        .map(|q| {
            let nq = norm(q);
            scan(
                q,
                nq,
                fs.cells().enumerate().map(|(i, b)| (i, b, style_norms[i])),
            )
        })
        .collect())
}

struct Group {
    /// Unit-length pivot.
    pivot: Vec<f64>,
    /// Max angle between the pivot and any member.
    radius: f64,
    members: Vec<usize>,
}

/// Pruned exact nearest-neighbor search over a style feature map.
pub struct StyleIndex<'a> {
    style: &'a FeatureMap,
    norms: Vec<f64>,
    small: Vec<usize>,
    groups: Vec<Group>,
}

fn angle(cos: f64) -> f64 {
    cos.clamp(-1.0, 1.0).acos()
}

impl<'a> StyleIndex<'a> {
    pub fn new(style: &'a FeatureMap) -> Self {
        let norms: Vec<f64> = style.cells().map(norm).collect();
        let (small, large): (Vec<usize>, Vec<usize>) =
            (0..norms.len()).partition(|&i| norms[i] < SMALL_NORM);
        let unit = |i: usize| -> Vec<f64> { style.cell(i).iter().map(|v| v / norms[i]).collect() };

        let k = (large.len() as f64).sqrt().ceil() as usize;
        let mut groups: Vec<Group> = (0..k)
            .map(|g| Group {
                pivot: unit(large[g * large.len() / k]),
                radius: 0.0,
                members: Vec::new(),
            })
            .collect();
        for &i in &large {
            let u = unit(i);
            let mut best = (0, f64::NEG_INFINITY);
            for (g, grp) in groups.iter().enumerate() {
                let c = dot(&u, &grp.pivot);
                if c > best.1 {
                    best = (g, c);
                }
            }
            let grp = &mut groups[best.0];
            grp.radius = grp.radius.max(angle(best.1));
            grp.members.push(i);
        }
        groups.retain(|g| !g.members.is_empty());
        Self {
            style,
            norms,
            small,
            groups,
        }
    }

    pub fn nearest(&self, query: &[f64]) -> Match {
        let nq = norm(query);
        let cand = |i: usize| (i, self.style.cell(i), self.norms[i]);
        if nq < SMALL_NORM {
            return scan(query, nq, (0..self.norms.len()).map(cand));
        }
        let mut best = scan(query, nq, self.small.iter().map(|&i| cand(i)));

        let mut bounds: Vec<(f64, usize)> = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, grp)| {
                let theta = angle(dot(query, &grp.pivot) / nq);
                let lower = (theta - grp.radius - ANGLE_SLACK).max(0.0);
                (1.0 - lower.cos() - DIST_SLACK, g)
            })
            .collect();
        bounds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (lb, g) in bounds {
            if lb > best.distance {
                break;
            }
            let m = scan(query, nq, self.groups[g].members.iter().map(|&i| cand(i)));
            if m.distance < best.distance || (m.distance == best.distance && m.index < best.index) {
                best = m;
            }
        }
        best
    }

    pub fn nearest_all(&self, fr: &FeatureMap) -> Result<Vec<Match>> {
        check_channels(fr, self.style)?;
        Ok((0..fr.num_cells())
            .into_par_iter()
            .map(|i| self.nearest(fr.cell(i)))
            .collect())
    }
}

/// NNFM loss and its gradient with respect to `fr`.
///
/// The gradient treats each query's argmin as fixed.
pub fn nnfm_loss(fr: &FeatureMap, fs: &FeatureMap) -> Result<(f64, FeatureMap)> {
    let matches = StyleIndex::new(fs).nearest_all(fr)?;
    Ok(nnfm_from_matches(fr, fs, &matches))
}

pub fn nnfm_from_matches(fr: &FeatureMap, fs: &FeatureMap, matches: &[Match]) -> (f64, FeatureMap) {
    let n = fr.num_cells() as f64;
    let loss = matches.iter().map(|m| m.distance).sum::<f64>() / n;
    let mut grad = FeatureMap::zeros(fr.height, fr.width, fr.channels);
    for ((g, a), m) in grad
        .data
        .chunks_exact_mut(fr.channels)
        .zip(fr.cells())
        .zip(matches)
    {
        let b = fs.cell(m.index);
        let (na, nb) = (norm(a), norm(b));
        let denom = na * nb;
        if denom > COSINE_EPS {
            let ab = dot(a, b);
            for k in 0..a.len() {
                g[k] = -(b[k] / denom - ab * a[k] / (na * na * denom)) / n;
            }
        } else {
            for k in 0..a.len() {
                g[k] = -b[k] / COSINE_EPS / n;
            }
        }
    }
    (loss, grad)
}

/// Seeded uniform subsample of a style map's cells, as a `1 × n` map.
/// Maps already within `max_cells` are returned unchanged.
pub fn subsample_style(fs: &FeatureMap, max_cells: usize, seed: u64) -> FeatureMap {
    if fs.num_cells() <= max_cells {
        return fs.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, fs.num_cells(), max_cells).into_vec();
    picked.sort_unstable();
    let mut data = Vec::with_capacity(max_cells * fs.channels);
    for i in picked {
        data.extend_from_slice(fs.cell(i));
    }
    FeatureMap {
        height: 1,
        width: max_cells,
        channels: fs.channels,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn map(cells: &[&[f64]]) -> FeatureMap {
        let c = cells[0].len();
        FeatureMap::from_vec(1, cells.len(), c, cells.concat()).unwrap()
    }

    fn random_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let data = (0..h * w * c).map(|_| rng.random::<f64>() - 0.3).collect();
        FeatureMap::from_vec(h, w, c, data).unwrap()
    }

    #[test]
    fn hand_example_is_one_half() {
        let fr = map(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let fs = map(&[&[1.0, 0.0]]);
        let (loss, _) = nnfm_loss(&fr, &fs).unwrap();
        assert_eq!(loss, 0.5);
    }

    #[test]
    fn self_match_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_map(4, 5, 8, &mut rng);
        let (loss, _) = nnfm_loss(&f, &f).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let fr = map(&[&[1.0, 0.0]]);
        let fs = map(&[&[1.0, 0.0, 0.0]]);
        assert!(nnfm_loss(&fr, &fs).is_err());
        assert!(nearest_exhaustive(&fr, &fs).is_err());
    }

    #[test]
    fn zero_vectors_have_unit_distance() {
        let fr = map(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let fs = map(&[&[0.0, 0.0], &[-1.0, 0.0]]);
        let m = StyleIndex::new(&fs).nearest_all(&fr).unwrap();
        assert_eq!(m, nearest_exhaustive(&fr, &fs).unwrap());
        assert_eq!(m[0], Match { index: 0, distance: 1.0 });
        assert_eq!(m[1].index, 0);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let fr = map(&[&[1.0, 0.0]]);
        let fs = map(&[&[0.0, 1.0], &[2.0, 0.0], &[1.0, 0.0], &[3.0, 0.0]]);
        let m = StyleIndex::new(&fs).nearest(fr.cell(0));
        assert_eq!(m.index, 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fr = random_map(3, 3, 5, &mut rng);
        let fs = random_map(4, 4, 5, &mut rng);
        let (_, grad) = nnfm_loss(&fr, &fs).unwrap();
        let matches = nearest_exhaustive(&fr, &fs).unwrap();
        let h = 1e-6;
        for i in 0..fr.data.len() {
            let eval = |delta: f64| {
                let mut f = fr.clone();
                f.data[i] += delta;
                // fixed assignment, so the FD sees the smooth branch
                f.cells()
                    .zip(&matches)
                    .map(|(a, m)| {
                        let b = fs.cell(m.index);
                        cosine_distance(a, b, norm(a), norm(b))
                    })
                    .sum::<f64>()
                    / f.num_cells() as f64
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - grad.data[i]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "{i}: fd {fd} analytic {}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn subsample_is_seeded_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_map(10, 10, 3, &mut rng);
        let a = subsample_style(&f, 17, 9);
        assert_eq!(a.num_cells(), 17);
        assert_eq!(a, subsample_style(&f, 17, 9));
        assert_eq!(subsample_style(&f, 500, 9), f);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn bounds_and_rescale_invariance(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fr = random_map(3, 4, 6, &mut rng);
            let fs = random_map(5, 3, 6, &mut rng);
            let (loss, _) = nnfm_loss(&fr, &fs).unwrap();
            prop_assert!((0.0..=2.0).contains(&loss));
            let mut scaled = fr.clone();
            for (i, cell) in scaled.data.chunks_exact_mut(6).enumerate() {
                let s = scale * (1.0 + i as f64 * 0.1);
                cell.iter_mut().for_each(|v| *v *= s);
            }
            let (loss2, _) = nnfm_loss(&scaled, &fs).unwrap();
            prop_assert!((loss - loss2).abs() < 1e-6);
        }

        #[test]
        fn index_equals_exhaustive(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fr = random_map(4, 4, 7, &mut rng);
            let fs = random_map(6, 5, 7, &mut rng);
            prop_assert_eq!(
                StyleIndex::new(&fs).nearest_all(&fr).unwrap(),
                nearest_exhaustive(&fr, &fs).unwrap()
            );
        }
    }
}
