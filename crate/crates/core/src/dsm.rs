//! DSM normalization, treetop peak prompts and border-masked gradients.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::raster::Grid;

/// Surface elevation with a mask of non-border pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DsmChannel {
    pub values: Grid<f32>,
    pub valid: Grid<bool>,
}

impl DsmChannel {
    pub fn new(values: Grid<f32>, valid: Grid<bool>) -> Result<Self> {
        if !values.same_shape(&valid) {
            return Err(Error::ShapeMismatch(alloc::format!(
                "DSM {}x{} vs valid mask {}x{}",
                values.width(),
                values.height(),
                valid.width(),
                valid.height()
            )));
        }
        Ok(Self { values, valid })
    }

    /// Every pixel valid.
    pub fn dense(values: Grid<f32>) -> Self {
        let valid = Grid::filled(values.width(), values.height(), true);
        Self { values, valid }
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            values: self.values.flip_horizontal(),
            valid: self.valid.flip_horizontal(),
        }
    }

    pub fn flip_vertical(&self) -> Self {
        Self {
            values: self.values.flip_vertical(),
            valid: self.valid.flip_vertical(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormalizeMode {
    /// Divide by the per-sample maximum.
    #[default]
    Max,
    /// Subtract the per-sample minimum, then divide by the range.
    MinMax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub dsm: DsmChannel,
    /// Set when the guard fired (no positive maximum); the output is all zeros.
    pub degenerate: bool,
}

/// Scale valid pixels so their maximum is 1; invalid pixels become 0.
pub fn normalize_dsm(dsm: &DsmChannel, mode: NormalizeMode) -> Normalized {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (&v, &ok) in dsm.values.data().iter().zip(dsm.valid.data()) {
        if ok {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let (offset, scale) = match mode {
        NormalizeMode::Max => (0.0, hi),
        NormalizeMode::MinMax => (lo, hi - lo),
    };
    let degenerate = !(scale > 0.0) || !scale.is_finite();
    let data = dsm
        .values
        .data()
        .iter()
        .zip(dsm.valid.data())
        .map(|(&v, &ok)| {
            if ok && !degenerate {
                (v - offset) / scale
            } else {
                0.0
            }
        })
        .collect();
    Normalized {
        dsm: DsmChannel {
            values: Grid::from_vec(dsm.width(), dsm.height(), data).expect("same shape"),
            valid: dsm.valid.clone(),
        },
        degenerate,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakConfig {
    /// Minimum Euclidean distance between returned peaks, in pixels.
    pub min_distance: f64,
}

impl PeakConfig {
    pub const PLANTATIONS: PeakConfig = PeakConfig { min_distance: 50.0 };
    pub const FOREST: PeakConfig = PeakConfig { min_distance: 20.0 };

    pub fn validate(&self) -> Result<()> {
        if self.min_distance >= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!(
                "min_distance {} < 1",
                self.min_distance
            )))
        }
    }
}

/// Pixel coordinates `(x, y)` of a peak.
pub type Peak = (usize, usize);

/// Local maxima of the DSM that dominate their `min_distance` disk.
///
/// A valid pixel is a candidate when no valid pixel within `min_distance` is higher and it is
/// above the minimum of the tile. Connected plateaus of equal-valued candidates collapse to the
/// member nearest their centroid. Candidates are visited by descending value (ties in raster
/// order) and greedily dropped when closer than `min_distance` to an accepted peak.
pub fn peak_prompts(dsm: &DsmChannel, cfg: &PeakConfig) -> Result<Vec<Peak>> {
    cfg.validate()?;
    let (w, h) = (dsm.width(), dsm.height());
    let v = dsm.values.data();
    let ok = dsm.valid.data();
    let floor = v
        .iter()
        .zip(ok)
        .filter(|(_, &k)| k)
        .map(|(&x, _)| x)
        .fold(f32::INFINITY, f32::min);
    let r = cfg.min_distance;
    let r2 = r * r;
    let ri = libm::floor(r) as isize;

    // a disk of radius >= sqrt(2) contains the 8-neighbourhood, radius >= 1 the 4-neighbourhood
    let neigh: &[(isize, isize)] = if r2 >= 2.0 {
        &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
    } else {
        &[(0, -1), (-1, 0), (1, 0), (0, 1)]
    };
    let at = |x: isize, y: isize| -> Option<f32> {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            return None;
        }
        let i = y as usize * w + x as usize;
        ok[i].then_some(v[i])
    };

    let mut candidate = Grid::filled(w, h, false);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let Some(c) = at(x, y) else { continue };
            if !(c > floor) {
                continue;
            }
            if neigh.iter().any(|&(dx, dy)| at(x + dx, y + dy).is_some_and(|n| n > c)) {
                continue;
            }
            let mut dominated = false;
            'disk: for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if ((dx * dx + dy * dy) as f64) > r2 {
                        continue;
                    }
                    if at(x + dx, y + dy).is_some_and(|n| n > c) {
                        dominated = true;
                        break 'disk;
                    }
                }
            }
            if !dominated {
                candidate.set(x as usize, y as usize, true);
            }
        }
    }

    // plateau representatives
    let mut seen = Grid::filled(w, h, false);
    let mut reps: Vec<(f32, Peak)> = Vec::new();
    let mut queue = VecDeque::new();
    let mut members: Vec<Peak> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !*candidate.get(x, y) || *seen.get(x, y) {
                continue;
            }
            let value = *dsm.values.get(x, y);
            members.clear();
            queue.push_back((x, y));
            seen.set(x, y, true);
            while let Some((cx, cy)) = queue.pop_front() {
                members.push((cx, cy));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if *candidate.get(nx, ny)
                            && !*seen.get(nx, ny)
                            && *dsm.values.get(nx, ny) == value
                        {
                            seen.set(nx, ny, true);
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            let n = members.len() as f64;
            let cx = members.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cy = members.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            let mut best = members[0];
            let mut best_d = f64::INFINITY;
            for &(mx, my) in members.iter() {
                let d = (mx as f64 - cx) * (mx as f64 - cx) + (my as f64 - cy) * (my as f64 - cy);
                if d < best_d || (d == best_d && (my, mx) < (best.1, best.0)) {
                    best_d = d;
                    best = (mx, my);
                }
            }
            reps.push((value, best));
        }
    }

    reps.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then((a.1 .1, a.1 .0).cmp(&(b.1 .1, b.1 .0)))
    });
    let mut out: Vec<Peak> = Vec::new();
    for (_, p) in reps {
        let far = out.iter().all(|q| {
            let dx = p.0 as f64 - q.0 as f64;
            let dy = p.1 as f64 - q.1 as f64;
            dx * dx + dy * dy >= r2
        });
        if far {
            out.push(p);
        }
    }
    Ok(out)
}

/// Vertical (row-axis) and horizontal (column-axis) gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub vertical: Grid<f32>,
    pub horizontal: Grid<f32>,
}

/// Central differences with unit spacing, one-sided at the array edges; zero on invalid
/// pixels.
pub fn dsm_gradients(dsm: &DsmChannel) -> Gradients {
    let (w, h) = (dsm.width(), dsm.height());
    let f = |x: usize, y: usize| *dsm.values.get(x, y);
    let diff = |n: usize, i: usize, get: &dyn Fn(usize) -> f32| -> f32 {
        if n < 2 {
            0.0
        } else if i == 0 {
            get(1) - get(0)
        } else if i == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            (get(i + 1) - get(i - 1)) * 0.5
        }
    };
    let vertical = Grid::from_fn(w, h, |x, y| {
        if *dsm.valid.get(x, y) {
            diff(h, y, &|yy| f(x, yy))
        } else {
            0.0
        }
    });
    let horizontal = Grid::from_fn(w, h, |x, y| {
        if *dsm.valid.get(x, y) {
            diff(w, x, &|xx| f(xx, y))
        } else {
            0.0
        }
    });
    Gradients {
        vertical,
        horizontal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn bumps(w: usize, h: usize, centers: &[(f64, f64, f32)]) -> DsmChannel {
        DsmChannel::dense(Grid::from_fn(w, h, |x, y| {
            centers
                .iter()
                .map(|&(cx, cy, a)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    a * libm::exp(-d2 / 50.0) as f32
                })
                .sum()
        }))
    }

    #[test]
    fn normalize_divides_by_valid_max() {
        let mut d = DsmChannel::dense(Grid::from_fn(4, 1, |x, _| [10.0, 50.0, 25.0, 99.0][x]));
        d.valid.set(3, 0, false);
        let n = normalize_dsm(&d, NormalizeMode::Max);
        assert!(!n.degenerate);
        assert_eq!(n.dsm.values.data(), &[0.2, 1.0, 0.5, 0.0]);
        let again = normalize_dsm(&n.dsm, NormalizeMode::Max);
        assert_eq!(again.dsm, n.dsm);
    }

    #[test]
    fn normalize_guards_zero_and_constant() {
        let z = DsmChannel::dense(Grid::filled(3, 3, 0.0));
        let n = normalize_dsm(&z, NormalizeMode::Max);
        assert!(n.degenerate);
        assert!(n.dsm.values.data().iter().all(|&v| v == 0.0));
        let c = DsmChannel::dense(Grid::filled(3, 3, 7.0));
        let n = normalize_dsm(&c, NormalizeMode::Max);
        assert!(n.dsm.values.data().iter().all(|&v| v == 1.0));
        let mm = normalize_dsm(&DsmChannel::dense(Grid::from_fn(3, 1, |x, _| 2.0 + x as f32)), NormalizeMode::MinMax);
        assert_eq!(mm.dsm.values.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn single_bump_gives_apex() {
        let d = bumps(64, 64, &[(20.0, 30.0, 10.0)]);
        let p = peak_prompts(&d, &PeakConfig { min_distance: 5.0 }).unwrap();
        assert_eq!(p, vec![(20, 30)]);
    }

    #[test]
    fn min_distance_merges_close_bumps() {
        let d = bumps(96, 64, &[(20.0, 32.0, 10.0), (50.0, 32.0, 8.0)]);
        assert_eq!(
            peak_prompts(&d, &PeakConfig { min_distance: 50.0 }).unwrap(),
            vec![(20, 32)]
        );
        assert_eq!(
            peak_prompts(&d, &PeakConfig { min_distance: 20.0 }).unwrap(),
            vec![(20, 32), (50, 32)]
        );
    }

    #[test]
    fn flat_dsm_has_no_peaks_and_plateaus_centroid() {
        let flat = DsmChannel::dense(Grid::filled(16, 16, 3.0));
        assert!(peak_prompts(&flat, &PeakConfig { min_distance: 2.0 }).unwrap().is_empty());
        let plateau = DsmChannel::dense(Grid::from_fn(16, 16, |x, y| {
            if (4..9).contains(&x) && (6..9).contains(&y) {
                5.0
            } else {
                1.0
            }
        }));
        assert_eq!(
            peak_prompts(&plateau, &PeakConfig { min_distance: 3.0 }).unwrap(),
            vec![(6, 7)]
        );
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let mut d = bumps(32, 32, &[(10.0, 10.0, 10.0)]);
        d.valid.set(10, 10, false);
        let p = peak_prompts(&d, &PeakConfig { min_distance: 4.0 }).unwrap();
        assert!(!p.contains(&(10, 10)));
        assert!(!p.is_empty());
    }

    #[test]
    fn gradients_of_ramp_and_border() {
        let ramp = DsmChannel::dense(Grid::from_fn(6, 4, |x, _| x as f32));
        let g = dsm_gradients(&ramp);
        assert!(g.horizontal.data().iter().all(|&v| v == 1.0));
        assert!(g.vertical.data().iter().all(|&v| v == 0.0));
        let mut seam = DsmChannel::dense(Grid::from_fn(8, 4, |x, _| if x < 4 { 30.0 } else { 0.0 }));
        for y in 0..4 {
            for x in 4..8 {
                seam.valid.set(x, y, false);
            }
        }
        let g = dsm_gradients(&seam);
        for y in 0..4 {
            for x in 4..8 {
                assert_eq!(*g.horizontal.get(x, y), 0.0);
            }
        }
        let constant = dsm_gradients(&DsmChannel::dense(Grid::filled(5, 5, 2.5)));
        assert!(constant.horizontal.data().iter().chain(constant.vertical.data()).all(|&v| v == 0.0));
    }
}
