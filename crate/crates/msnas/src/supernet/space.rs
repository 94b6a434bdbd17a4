//! Search-space configuration and architecture points.

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact rational in (0, 1], kept normalized. Serialized as `"num/den"` so
/// ratios like 2/3 round-trip losslessly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u32,
    den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::Config(format!("ratio {num}/{den} not in (0, 1]")));
        }
        let g = gcd(num, den);
        Ok(Ratio { num: num / g, den: den / g })
    }

    pub fn one() -> Self {
        Ratio { num: 1, den: 1 }
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(value * self)` with ties rounded up (half away from zero).
    pub fn scale_round(&self, value: usize) -> usize {
        let num = value as u64 * self.num as u64;
        let den = self.den as u64;
        ((2 * num + den) / (2 * den)) as usize
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u64 * other.den as u64).cmp(&(other.num as u64 * self.den as u64))
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (n, dd) = s
            .split_once('/')
            .ok_or_else(|| serde::de::Error::custom("ratio must look like \"2/3\""))?;
        let num: u32 = n.parse().map_err(serde::de::Error::custom)?;
        let den: u32 = dd.parse().map_err(serde::de::Error::custom)?;
        Ratio::new(num, den).map_err(serde::de::Error::custom)
    }
}

/// Given non-decreasing cumulative ratios, the incremental channel count each
/// stage owns out of `cmax`. Computed as differences of rounded cumulative
/// counts `round(c_s * cmax)`: rounding increments independently could make
/// the slices overflow `cmax`, while cumulative rounding keeps them a
/// partition and lands exactly on `cmax` when the last ratio is 1.
pub fn incremental_channels(ratios: &[Ratio], cmax: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(ratios.len());
    let mut prev = 0u64;
    for r in ratios {
        let cum = r.scale_round(cmax) as u64;
        out.push((cum - prev) as usize);
        prev = cum;
    }
    out
}

/// One residual block group of the once-for-all network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// Maximal number of blocks N.
    pub blocks: usize,
    /// External channel width (shared by all stages; not searched).
    pub width: usize,
    /// Maximal intermediate (expanded) channel width.
    pub hidden: usize,
    /// Stride applied by the group's first block.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceConfig {
    pub stages: usize,
    pub num_classes: usize,
    pub image_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub resolution_pool: Vec<usize>,
    pub depth_pool: Vec<usize>,
    pub kernel_pool: Vec<usize>,
    pub cum_width_ratio_pool: Vec<Ratio>,
    pub groups: Vec<GroupSpec>,
}

impl SearchSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stage count must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Config("need at least one block group".into()));
        }
        fn check_pool<T: PartialOrd + std::fmt::Debug>(name: &str, pool: &[T]) -> Result<()> {
            if pool.is_empty() {
                return Err(Error::Config(format!("{name} pool is empty")));
            }
            if pool.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "{name} pool must be strictly ascending: {pool:?}"
                )));
            }
            Ok(())
        }
        check_pool("resolution", &self.resolution_pool)?;
        check_pool("depth", &self.depth_pool)?;
        check_pool("kernel", &self.kernel_pool)?;
        check_pool("cumulative width ratio", &self.cum_width_ratio_pool)?;
        if self.kernel_pool.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("kernel pool must hold odd sizes".into()));
        }
        if self.depth_pool[0] == 0 {
            return Err(Error::Config("depths must be positive".into()));
        }
        if !self.cum_width_ratio_pool.last().unwrap().is_one() {
            return Err(Error::Config("largest cumulative width ratio must be 1".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if *self.depth_pool.last().unwrap() > g.blocks {
                return Err(Error::Config(format!(
                    "max depth {} exceeds group {i} block count {}",
                    self.depth_pool.last().unwrap(),
                    g.blocks
                )));
            }
            if g.width == 0 || g.hidden == 0 || g.stride == 0 {
                return Err(Error::Config(format!("group {i} has zero dimension")));
            }
        }
        if self.stem_kernel % 2 == 0 || self.stem_stride == 0 {
            return Err(Error::Config("bad stem configuration".into()));
        }
        Ok(())
    }

    pub fn max_kernel(&self) -> usize {
        *self.kernel_pool.last().unwrap()
    }

    pub fn total_blocks(&self) -> usize {
        self.groups.iter().map(|g| g.blocks).sum()
    }

    /// External input width of group `g`'s first block.
    pub fn group_input_width(&self, g: usize) -> usize {
        if g == 0 {
            self.groups[0].width
        } else {
            self.groups[g - 1].width
        }
    }

    /// Number of distinct architecture points, computed combinatorially.
    pub fn search_space_size(&self) -> u128 {
        let m = |pool: usize, slots: usize| -> u128 {
            // non-decreasing tuples: C(pool + slots - 1, slots)
            let mut num: u128 = 1;
            let mut den: u128 = 1;
            for i in 0..slots {
                num *= (pool + i) as u128;
                den *= (i + 1) as u128;
            }
            num / den
        };
        let mut total = self.resolution_pool.len() as u128;
        for g in &self.groups {
            total *= m(self.depth_pool.len(), self.stages);
            total *= (self.kernel_pool.len() as u128
                * m(self.cum_width_ratio_pool.len(), self.stages))
            .pow(g.blocks as u32);
        }
        total
    }
}

/// A point in the search space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiStageArch {
    pub resolution: usize,
    /// `depths[group][stage]`, non-decreasing across stages.
    pub depths: Vec<Vec<usize>>,
    /// `kernels[group][block]` for each block's depthwise layer.
    pub kernels: Vec<Vec<usize>>,
    /// `cum_ratios[group][block][stage]`, non-decreasing across stages.
    pub cum_ratios: Vec<Vec<Vec<Ratio>>>,
}

impl MultiStageArch {
    pub fn validate(&self, config: &SearchSpaceConfig) -> Result<()> {
        let s = config.stages;
        let gs = config.groups.len();
        if self.depths.len() != gs || self.kernels.len() != gs || self.cum_ratios.len() != gs {
            return Err(Error::Arch("group dimension mismatch".into()));
        }
        if !config.resolution_pool.contains(&self.resolution) {
            return Err(Error::Arch(format!("resolution {} not in pool", self.resolution)));
        }
        for (g, spec) in config.groups.iter().enumerate() {
            if self.depths[g].len() != s {
                return Err(Error::Arch(format!("group {g} depth list length != {s}")));
            }
            for d in &self.depths[g] {
                if !config.depth_pool.contains(d) {
                    return Err(Error::Arch(format!("depth {d} not in pool")));
                }
            }
            if self.depths[g].windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Arch(format!(
                    "group {g} depths must be non-decreasing across stages"
                )));
            }
            if self.kernels[g].len() != spec.blocks || self.cum_ratios[g].len() != spec.blocks {
                return Err(Error::Arch(format!("group {g} block dimension mismatch")));
            }
            for k in &self.kernels[g] {
                if !config.kernel_pool.contains(k) {
                    return Err(Error::Arch(format!("kernel {k} not in pool")));
                }
            }
            for ratios in &self.cum_ratios[g] {
                if ratios.len() != s {
                    return Err(Error::Arch("per-block ratio list length mismatch".into()));
                }
                for r in ratios {
                    if !config.cum_width_ratio_pool.contains(r) {
                        return Err(Error::Arch(format!("ratio {r} not in pool")));
                    }
                }
                if ratios.windows(2).any(|w| w[0] > w[1]) {
                    return Err(Error::Arch(
                        "cumulative ratios must be non-decreasing across stages".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The most capable architecture: largest resolution, depth and kernel,
    /// full cumulative width spread over the stages (the final ratio is
    /// always 1, so every intermediate channel is computed and later stages
    /// reuse the most sources).
    pub fn maximal(config: &SearchSpaceConfig) -> Self {
        let s = config.stages;
        let pool = &config.cum_width_ratio_pool;
        let spread: Vec<Ratio> = (1..=s)
            .map(|stage| pool[(stage * pool.len()).div_ceil(s) - 1])
            .collect();
        MultiStageArch {
            resolution: *config.resolution_pool.last().unwrap(),
            depths: config
                .groups
                .iter()
                .map(|_| vec![*config.depth_pool.last().unwrap(); s])
                .collect(),
            kernels: config
                .groups
                .iter()
                .map(|g| vec![config.max_kernel(); g.blocks])
                .collect(),
            cum_ratios: config
                .groups
                .iter()
                .map(|g| vec![spread.clone(); g.blocks])
                .collect(),
        }
    }
}

/// Uniformly sample each free choice from its pool, then enforce the
/// monotonicity constraints by sorting per-group depths and per-block
/// cumulative ratios ascending across stages.
pub fn sample_arch(config: &SearchSpaceConfig, rng: &mut ChaCha8Rng) -> MultiStageArch {
    let s = config.stages;
    let pick = |rng: &mut ChaCha8Rng, n: usize| rng.gen_range(0..n);
    let resolution = config.resolution_pool[pick(rng, config.resolution_pool.len())];
    let mut depths = Vec::new();
    let mut kernels = Vec::new();
    let mut cum_ratios = Vec::new();
    for g in &config.groups {
        let mut d: Vec<usize> = (0..s)
            .map(|_| config.depth_pool[pick(rng, config.depth_pool.len())])
            .collect();
        d.sort_unstable();
        depths.push(d);
        kernels.push(
            (0..g.blocks)
                .map(|_| config.kernel_pool[pick(rng, config.kernel_pool.len())])
                .collect(),
        );
        let mut block_ratios = Vec::new();
        for _ in 0..g.blocks {
            let mut r: Vec<Ratio> = (0..s)
                .map(|_| {
                    config.cum_width_ratio_pool[pick(rng, config.cum_width_ratio_pool.len())]
                })
                .collect();
            r.sort();
            block_ratios.push(r);
        }
        cum_ratios.push(block_ratios);
    }
    MultiStageArch { resolution, depths, kernels, cum_ratios }
}

/// Enumerate every architecture of a (small) search space.
pub fn enumerate_archs(config: &SearchSpaceConfig) -> Vec<MultiStageArch> {
    fn nondecreasing<T: Clone>(pool: &[T], slots: usize) -> Vec<Vec<T>> {
        fn rec<T: Clone>(pool: &[T], slots: usize, start: usize, cur: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
            if cur.len() == slots {
                out.push(cur.clone());
                return;
            }
            for i in start..pool.len() {
                cur.push(pool[i].clone());
                rec(pool, slots, i, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(pool, slots, 0, &mut Vec::new(), &mut out);
        out
    }
    fn cartesian<T: Clone>(options: &[Vec<T>]) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = vec![Vec::new()];
        for opts in options {
            let mut next = Vec::new();
            for prefix in &out {
                for o in opts {
                    let mut p = prefix.clone();
                    p.push(o.clone());
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }

    let s = config.stages;
    let depth_tuples = nondecreasing(&config.depth_pool, s);
    let ratio_tuples = nondecreasing(&config.cum_width_ratio_pool, s);

    let mut archs = Vec::new();
    for &resolution in &config.resolution_pool {
        let depth_combos = cartesian(&vec![depth_tuples.clone(); config.groups.len()]);
        for depths in &depth_combos {
            // kernels and ratios per (group, block), flattened then reshaped
            let total_blocks = config.total_blocks();
            let kernel_combos = cartesian(&vec![config.kernel_pool.clone(); total_blocks]);
            for kflat in &kernel_combos {
                let ratio_combos = cartesian(&vec![ratio_tuples.clone(); total_blocks]);
                for rflat in &ratio_combos {
                    let mut kernels = Vec::new();
                    let mut cum_ratios = Vec::new();
                    let mut off = 0;
                    for g in &config.groups {
                        kernels.push(kflat[off..off + g.blocks].to_vec());
                        cum_ratios.push(rflat[off..off + g.blocks].to_vec());
                        off += g.blocks;
                    }
                    archs.push(MultiStageArch {
                        resolution,
                        depths: depths.clone(),
                        kernels,
                        cum_ratios,
                    });
                }
            }
        }
    }
    archs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny_config() -> SearchSpaceConfig {
        SearchSpaceConfig {
            stages: 2,
            num_classes: 4,
            image_channels: 1,
            stem_kernel: 3,
            stem_stride: 1,
            resolution_pool: vec![8, 12],
            depth_pool: vec![1, 2],
            kernel_pool: vec![3, 5],
            cum_width_ratio_pool: vec![Ratio::new(1, 2).unwrap(), Ratio::one()],
            groups: vec![GroupSpec { blocks: 2, width: 4, hidden: 4, stride: 1 }],
        }
    }

    #[test]
    fn ratio_ordering_and_serialization() {
        let half = Ratio::new(1, 2).unwrap();
        let two_thirds = Ratio::new(2, 3).unwrap();
        assert!(half < two_thirds && two_thirds < Ratio::one());
        let json = serde_json::to_string(&two_thirds).unwrap();
        assert_eq!(json, "\"2/3\"");
        let back: Ratio = serde_json::from_str(&json).unwrap();
        assert_eq!(back, two_thirds);
        assert_eq!(Ratio::new(4, 6).unwrap(), two_thirds);
        assert!(Ratio::new(0, 3).is_err());
        assert!(Ratio::new(4, 3).is_err());
    }

    #[test]
    fn incremental_channels_match_hand_values() {
        let r = |n, d| Ratio::new(n, d).unwrap();
        // Pool [1/2, 2/3, 1] over 24 channels: 12 + 4 + 8.
        assert_eq!(
            incremental_channels(&[r(1, 2), r(2, 3), r(1, 1)], 24),
            vec![12, 4, 8]
        );
        // Repeated cumulative ratio adds zero incremental channels.
        assert_eq!(
            incremental_channels(&[r(1, 2), r(1, 2), r(1, 1)], 16),
            vec![8, 0, 8]
        );
        // Rounding: 16 * (1/2 - 1/3) wants 2.67 -> 3.
        assert_eq!(
            incremental_channels(&[r(1, 3), r(1, 2), r(1, 1)], 16),
            vec![5, 3, 8]
        );
    }

    #[test]
    fn sample_sorts_draws_into_constraints() {
        let config = tiny_config();
        config.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let arch = sample_arch(&config, &mut rng);
            arch.validate(&config).unwrap();
        }
    }

    #[test]
    fn sampled_resolution_is_uniform_within_3_sigma() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let mut counts = vec![0usize; config.resolution_pool.len()];
        for _ in 0..n {
            let arch = sample_arch(&config, &mut rng);
            let i = config.resolution_pool.iter().position(|&r| r == arch.resolution).unwrap();
            counts[i] += 1;
        }
        let p = 1.0 / config.resolution_pool.len() as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "count {c} vs mean {mean}");
        }
    }

    #[test]
    fn enumeration_matches_combinatorial_count() {
        let config = tiny_config();
        let archs = enumerate_archs(&config);
        assert_eq!(archs.len() as u128, config.search_space_size());
        // 2 res * 3 depth-tuples * (2 kernels * 3 ratio-tuples)^2 blocks = 216
        assert_eq!(archs.len(), 216);
        let unique: std::collections::HashSet<_> = archs.iter().collect();
        assert_eq!(unique.len(), archs.len());
        for a in &archs {
            a.validate(&config).unwrap();
        }
    }

    #[test]
    fn arch_json_roundtrip_is_lossless() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let arch = sample_arch(&config, &mut rng);
            let json = serde_json::to_string(&arch).unwrap();
            let back: MultiStageArch = serde_json::from_str(&json).unwrap();
            assert_eq!(back, arch);
        }
    }

    #[test]
    fn config_validation_rejects_bad_pools() {
        let mut c = tiny_config();
        c.resolution_pool = vec![12, 8];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.cum_width_ratio_pool = vec![Ratio::new(1, 2).unwrap(), Ratio::new(2, 3).unwrap()];
        assert!(c.validate().is_err()); // max ratio must be 1
        let mut c = tiny_config();
        c.depth_pool = vec![1, 2, 3];
        assert!(c.validate().is_err()); // exceeds group blocks
        let mut c = tiny_config();
        c.kernel_pool = vec![2, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn sorted_draw_examples() {
        // Draws (4, 2, 3) -> (2, 3, 4); ratio draws (1, 1/2, 2/3) -> sorted.
        let mut d = vec![4, 2, 3];
        d.sort_unstable();
        assert_eq!(d, vec![2, 3, 4]);
        let r = |n, dd| Ratio::new(n, dd).unwrap();
        let mut rs = vec![r(1, 1), r(1, 2), r(2, 3)];
        rs.sort();
        assert_eq!(rs, vec![r(1, 2), r(2, 3), r(1, 1)]);
    }
}
