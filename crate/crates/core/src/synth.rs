//! Synthetic stained-tissue patch generator and group-aware splitting.
//!
//! Each patch carries two independent signals: a chromatic stain cue (a
//! global palette tint per stain class) and a geometric lesion cue (class 1
//! has more and larger bright blobs). A confounding coefficient `rho` couples
//! the two labels: with probability `rho` the stain is forced from the lesion
//! label through a fixed table (lesion 1 maps to stains {0, 1}, lesion 0 to
//! stains {2, 3}), otherwise it is drawn from the configured marginals. This
//! makes the shortcut strength a controlled quantity with known ground truth.
//!
//! Groups model slides: every group carries exactly one stain and one center,
//! and splits never divide a group across partitions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{stream, substream};

pub const STAIN_COUNT: usize = 4;
pub const CENTER_COUNT: u32 = 3;
pub const CHANNELS: usize = 3;

/// Stain assignment when the confounding draw forces it from the lesion
/// label: proliferative patches get one of these, non-proliferative the rest.
pub const CONFOUND_TABLE: [[u8; 2]; 2] = [[2, 3], [0, 1]];

/// The inverted assignment, used to build counterfactual stain-swapped
/// evaluation sets: every forced patch lands in the opposite stain pair.
pub const SWAPPED_CONFOUND_TABLE: [[u8; 2]; 2] = [[0, 1], [2, 3]];

/// Errors from generation configuration.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("patch_size {0} must be even and at least 8")]
    BadPatchSize(usize),
    #[error("{name} = {value} outside [0, 1]")]
    UnitInterval { name: &'static str, value: f64 },
    #[error("lesion_signal_strength {0} must be finite and non-negative")]
    BadSignalStrength(f64),
    #[error("noise_sigma {0} must be finite and non-negative")]
    BadNoise(f64),
    #[error("stain proportions must be non-negative and sum to 1, got sum {0}")]
    BadStainProps(f64),
    #[error("n_patches must be positive")]
    NoPatches,
    #[error("groups_per_stain must be positive")]
    NoGroups,
    #[error("palette jitter {0} must be finite and non-negative")]
    BadJitter(f64),
    #[error("records disagree on pixel shape: {0} vs {1} values")]
    MixedShapes(usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Errors from group-aware splitting.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("stain {stain} has {got} groups, need at least {need}")]
    TooFewGroups { stain: u8, got: usize, need: usize },
    #[error("dev_fraction {0} outside (0, 1)")]
    BadDevFraction(f64),
    #[error("n_folds {0} must be at least 2")]
    BadFoldCount(usize),
    #[error("{got} dev groups cannot fill {folds} folds")]
    TooFewDevGroups { got: usize, folds: usize },
    #[error("manifest is empty")]
    EmptyManifest,
}

/// One generated patch with its labels and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_id: u32,
    /// Synthetic slide id; all patches of a group share stain and center.
    pub group_id: u32,
    pub center_id: u8,
    /// 0 PAS, 1 H&E, 2 Jones, 3 Trichrome.
    pub stain: u8,
    /// 0 non-proliferative, 1 proliferative.
    pub lesion: u8,
    /// Row-major [C, H, W] values in [0, 1].
    pub pixels: Vec<f32>,
}

/// Mean palette colors for the four stains plus per-patch tint jitter.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct StainPalettes {
    pub colors: [[f64; 3]; STAIN_COUNT],
    pub jitter_sigma: f64,
}

impl Default for StainPalettes {
    fn default() -> Self {
        Self {
            colors: [
                [0.66, 0.38, 0.55],
                [0.38, 0.36, 0.66],
                [0.34, 0.52, 0.36],
                [0.40, 0.64, 0.62],
            ],
            jitter_sigma: 0.02,
        }
    }
}

/// Full generator configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GenSpec {
    pub n_patches: usize,
    /// Square patch side; must be even and at least 8 so the conv trunk can
    /// halve the resolution twice.
    pub patch_size: usize,
    pub stain_palettes: StainPalettes,
    /// Scales the blob count and size difference between lesion classes.
    /// Zero removes the morphology cue entirely.
    pub lesion_signal_strength: f64,
    /// Probability that the stain is forced from the lesion label through
    /// the confounding table instead of drawn from `stain_props`.
    pub confound_rho: f64,
    pub class_prior: f64,
    /// Marginal stain distribution for unforced draws.
    pub stain_props: [f64; STAIN_COUNT],
    pub noise_sigma: f64,
    pub groups_per_stain: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_patches: 9674,
            patch_size: 16,
            stain_palettes: StainPalettes::default(),
            lesion_signal_strength: 1.0,
            confound_rho: 0.9,
            class_prior: 0.197,
            stain_props: [0.249, 0.233, 0.235, 0.283],
            noise_sigma: 0.05,
            groups_per_stain: 10,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.n_patches == 0 {
            return Err(GenError::NoPatches);
        }
        if self.patch_size < 8 || self.patch_size % 2 != 0 {
            return Err(GenError::BadPatchSize(self.patch_size));
        }
        for (name, value) in [
            ("confound_rho", self.confound_rho),
            ("class_prior", self.class_prior),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(GenError::UnitInterval { name, value });
            }
        }
        for color in &self.stain_palettes.colors {
            for &c in color {
                if !(0.0..=1.0).contains(&c) {
                    return Err(GenError::UnitInterval { name: "palette color", value: c });
                }
            }
        }
        if !(self.stain_palettes.jitter_sigma >= 0.0)
            || !self.stain_palettes.jitter_sigma.is_finite()
        {
            return Err(GenError::BadJitter(self.stain_palettes.jitter_sigma));
        }
        if !(self.lesion_signal_strength >= 0.0) || !self.lesion_signal_strength.is_finite() {
            return Err(GenError::BadSignalStrength(self.lesion_signal_strength));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(GenError::BadNoise(self.noise_sigma));
        }
        let sum: f64 = self.stain_props.iter().sum();
        if self.stain_props.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(GenError::BadStainProps(sum));
        }
        if self.groups_per_stain == 0 {
            return Err(GenError::NoGroups);
        }
        Ok(())
    }
}

/// Group-level split: held-out test groups plus a fold id per dev group.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SplitPlan {
    pub dev_fraction: f64,
    pub n_folds: usize,
    pub fold_of_group: BTreeMap<u32, usize>,
    pub test_groups: BTreeSet<u32>,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            dev_fraction: 0.85,
            n_folds: 5,
            fold_of_group: BTreeMap::new(),
            test_groups: BTreeSet::new(),
        }
    }
}

impl SplitPlan {
    pub fn fold_of(&self, group: u32) -> Option<usize> {
        self.fold_of_group.get(&group).copied()
    }

    pub fn is_test(&self, group: u32) -> bool {
        self.test_groups.contains(&group)
    }
}

/// Generates the full patch list for a spec. Deterministic per seed: each
/// patch is drawn from its own substream keyed by patch id, so the result is
/// independent of evaluation order.
pub fn generate(spec: &GenSpec) -> Result<Vec<PatchRecord>, GenError> {
    generate_with_table(spec, &CONFOUND_TABLE)
}

/// Like [`generate`] but with an explicit forced-stain table. Passing
/// [`SWAPPED_CONFOUND_TABLE`] yields the counterfactual twin of the default
/// set: identical lesion labels, morphology, and noise, with every forced
/// patch re-tinted into the opposite stain pair. Unforced patches are
/// byte-identical to their [`generate`] counterparts.
pub fn generate_with_table(
    spec: &GenSpec,
    table: &[[u8; 2]; 2],
) -> Result<Vec<PatchRecord>, GenError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_patches);
    for patch_id in 0..spec.n_patches {
        out.push(generate_patch(spec, table, patch_id as u32));
    }
    Ok(out)
}

fn generate_patch(spec: &GenSpec, table: &[[u8; 2]; 2], patch_id: u32) -> PatchRecord {
    let mut rng = substream(spec.seed, &[stream::DATA_GEN, patch_id as u64]);
    let lesion = u8::from(rng.gen_bool(spec.class_prior));
    let forced = rng.gen_bool(spec.confound_rho);
    let stain = if forced {
        let pair = table[lesion as usize];
        pair[usize::from(rng.gen_bool(0.5))]
    } else {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut pick = STAIN_COUNT - 1;
        for (s, &p) in spec.stain_props.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = s;
                break;
            }
        }
        pick as u8
    };
    let group_id =
        stain as u32 * spec.groups_per_stain as u32 + rng.gen_range(0..spec.groups_per_stain) as u32;
    let center_id = (group_id % CENTER_COUNT) as u8;

    let size = spec.patch_size;
    let plane = size * size;
    let mut pixels = vec![0.0f64; CHANNELS * plane];
    for (c, chan) in pixels.chunks_mut(plane).enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let tint = spec.stain_palettes.colors[stain as usize][c]
            + spec.stain_palettes.jitter_sigma * z;
        chan.fill(tint);
    }

    // geometric lesion cue: bright chroma-neutral blobs, more and larger for
    // the proliferative class, with the difference scaled by signal strength
    let kappa = spec.lesion_signal_strength;
    let (n_blobs, radius) = if lesion == 1 {
        (2 + libm::round(3.0 * kappa) as usize, 1.5 * (1.0 + 0.4 * kappa))
    } else {
        (2, 1.5)
    };
    for _ in 0..n_blobs {
        let cx: f64 = rng.gen_range(1.0..(size as f64 - 1.0));
        let cy: f64 = rng.gen_range(1.0..(size as f64 - 1.0));
        let inv = 1.0 / (2.0 * radius * radius);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx) * (x as f64 - cx) + (y as f64 - cy) * (y as f64 - cy);
                let bump = 0.3 * libm::exp(-d2 * inv);
                for c in 0..CHANNELS {
                    pixels[c * plane + y * size + x] += bump;
                }
            }
        }
    }

    let pixels: Vec<f32> = pixels
        .into_iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            (v + spec.noise_sigma * z).clamp(0.0, 1.0) as f32
        })
        .collect();

    PatchRecord { patch_id, group_id, center_id, stain, lesion, pixels }
}

/// Plug-in mutual information between two label sequences, in nats.
pub fn mutual_information(a: &[u8], b: &[u8]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let mut joint: BTreeMap<(u8, u8), f64> = BTreeMap::new();
    let mut pa: BTreeMap<u8, f64> = BTreeMap::new();
    let mut pb: BTreeMap<u8, f64> = BTreeMap::new();
    let n = a.len() as f64;
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *pa.entry(x).or_insert(0.0) += 1.0;
        *pb.entry(y).or_insert(0.0) += 1.0;
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c / n;
        let px = pa[&x] / n;
        let py = pb[&y] / n;
        mi += pxy * libm::log(pxy / (px * py));
    }
    mi.max(0.0)
}

/// In-memory dataset with instrumented stain-label access.
///
/// `stain_counted` increments an internal counter on every call; the training
/// path reads stain labels only through it, so a zero counter after a run is
/// evidence the run was label-free on the stain side. Evaluation and
/// reporting use `stain_uncounted`, which is outside the audit.
#[derive(Debug)]
pub struct Dataset {
    records: Vec<PatchRecord>,
    shape: (usize, usize, usize),
    stain_reads: AtomicU64,
}

impl Dataset {
    pub fn new(records: Vec<PatchRecord>) -> Result<Self, GenError> {
        let first = records.first().ok_or(GenError::EmptyDataset)?;
        let len = first.pixels.len();
        for r in &records {
            if r.pixels.len() != len {
                return Err(GenError::MixedShapes(len, r.pixels.len()));
            }
        }
        let plane = len / CHANNELS;
        let side = libm::sqrt(plane as f64) as usize;
        if side * side != plane || plane * CHANNELS != len {
            return Err(GenError::BadPatchSize(side));
        }
        Ok(Self {
            records,
            shape: (CHANNELS, side, side),
            stain_reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// (channels, height, width) of every patch.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        &self.records[i].pixels
    }

    pub fn lesion(&self, i: usize) -> usize {
        self.records[i].lesion as usize
    }

    pub fn group(&self, i: usize) -> u32 {
        self.records[i].group_id
    }

    /// Stain label through the audited access path.
    pub fn stain_counted(&self, i: usize) -> usize {
        self.stain_reads.fetch_add(1, Ordering::Relaxed);
        self.records[i].stain as usize
    }

    /// Stain label for evaluation and reporting, outside the audit.
    pub fn stain_uncounted(&self, i: usize) -> usize {
        self.records[i].stain as usize
    }

    /// Number of audited stain-label reads so far.
    pub fn stain_reads(&self) -> u64 {
        self.stain_reads.load(Ordering::Relaxed)
    }

    pub fn reset_stain_reads(&self) {
        self.stain_reads.store(0, Ordering::Relaxed);
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<PatchRecord> {
        self.records
    }
}

#[derive(Debug, Clone)]
struct GroupStat {
    group: u32,
    stain: u8,
    patches: usize,
    positives: usize,
}

fn group_stats(records: &[PatchRecord]) -> Vec<GroupStat> {
    let mut by_group: BTreeMap<u32, GroupStat> = BTreeMap::new();
    for r in records {
        let s = by_group.entry(r.group_id).or_insert(GroupStat {
            group: r.group_id,
            stain: r.stain,
            patches: 0,
            positives: 0,
        });
        s.patches += 1;
        s.positives += r.lesion as usize;
    }
    by_group.into_values().collect()
}

/// Splits groups into a held-out test set and `n_folds` cross-validation
/// folds. The test set takes `round((1 - dev_fraction) * n_groups)` groups,
/// chosen round-robin across stains, largest first, targeting the same
/// fraction of patches. Dev groups are then assigned to folds by a greedy
/// pass that keeps fold sizes near equal while matching each fold's lesion
/// prevalence to the dev-set prevalence, followed by a swap-polish pass.
pub fn group_split(
    records: &[PatchRecord],
    plan: &SplitPlan,
    seed: u64,
) -> Result<SplitPlan, SplitError> {
    if records.is_empty() {
        return Err(SplitError::EmptyManifest);
    }
    if !(plan.dev_fraction > 0.0 && plan.dev_fraction < 1.0) {
        return Err(SplitError::BadDevFraction(plan.dev_fraction));
    }
    if plan.n_folds < 2 {
        return Err(SplitError::BadFoldCount(plan.n_folds));
    }
    let stats = group_stats(records);
    let mut per_stain: BTreeMap<u8, Vec<GroupStat>> = BTreeMap::new();
    for s in &stats {
        per_stain.entry(s.stain).or_default().push(s.clone());
    }
    for (&stain, groups) in &per_stain {
        if groups.len() < plan.n_folds + 1 {
            return Err(SplitError::TooFewGroups {
                stain,
                got: groups.len(),
                need: plan.n_folds + 1,
            });
        }
    }

    let mut rng = substream(seed, &[stream::SPLIT]);
    let n_groups = stats.len();
    let total_patches: usize = stats.iter().map(|s| s.patches).sum();
    let k_test = (libm::round((1.0 - plan.dev_fraction) * n_groups as f64) as usize).max(1);
    let target_test_patches = (1.0 - plan.dev_fraction) * total_patches as f64;

    // shuffle within each stain so equal-size ties break by seed, then sort
    // descending by patch count for the greedy pass
    for groups in per_stain.values_mut() {
        shuffle(groups, &mut rng);
        groups.sort_by(|a, b| b.patches.cmp(&a.patches));
    }

    let mut test_groups: BTreeSet<u32> = BTreeSet::new();
    let mut test_patches = 0usize;
    let mut taken: BTreeMap<u8, usize> = per_stain.keys().map(|&s| (s, 0)).collect();
    while test_groups.len() < k_test {
        // stain with the fewest test groups that can still spare one
        let stain = match per_stain
            .iter()
            .filter(|(s, groups)| groups.len() - taken[s] > plan.n_folds)
            .min_by_key(|(s, _)| (taken[*s], **s))
        {
            Some((&s, _)) => s,
            None => break,
        };
        let remaining_picks = k_test - test_groups.len();
        let per_pick_target =
            (target_test_patches - test_patches as f64) / remaining_picks as f64;
        let groups = &per_stain[&stain];
        let pick = groups
            .iter()
            .filter(|g| !test_groups.contains(&g.group))
            .min_by(|a, b| {
                let da = libm::fabs(a.patches as f64 - per_pick_target);
                let db = libm::fabs(b.patches as f64 - per_pick_target);
                da.total_cmp(&db).then(a.group.cmp(&b.group))
            })
            .expect("filter above guarantees a spare group");
        test_patches += pick.patches;
        *taken.get_mut(&stain).unwrap() += 1;
        let id = pick.group;
        test_groups.insert(id);
    }

    let mut dev: Vec<GroupStat> = stats
        .iter()
        .filter(|g| !test_groups.contains(&g.group))
        .cloned()
        .collect();
    if dev.len() < plan.n_folds {
        return Err(SplitError::TooFewDevGroups { got: dev.len(), folds: plan.n_folds });
    }
    shuffle(&mut dev, &mut rng);
    dev.sort_by(|a, b| b.patches.cmp(&a.patches));

    let dev_patches: usize = dev.iter().map(|g| g.patches).sum();
    let dev_positives: usize = dev.iter().map(|g| g.positives).sum();
    let dev_prev = dev_positives as f64 / dev_patches as f64;
    let cap = 1.25 * dev_patches as f64 / plan.n_folds as f64;
    let target_patches = dev_patches as f64 / plan.n_folds as f64;
    let target_positives = dev_positives as f64 / plan.n_folds as f64;

    #[derive(Clone, Default)]
    struct Fold {
        patches: usize,
        positives: usize,
        members: Vec<usize>,
    }
    // largest first, each group to the fold that stays closest to the per
    // fold patch and positive budgets; this balances size and prevalence
    // jointly instead of packing one dimension at a time
    let mut folds = vec![Fold::default(); plan.n_folds];
    let dev_index: Vec<GroupStat> = dev.clone();
    for (gi, g) in dev_index.iter().enumerate() {
        let mut best = 0usize;
        let mut best_cost = f64::INFINITY;
        for (fi, f) in folds.iter().enumerate() {
            let dp = (f.patches + g.patches) as f64 / target_patches;
            let dpos = if target_positives > 0.0 {
                (f.positives + g.positives) as f64 / target_positives
            } else {
                0.0
            };
            let cost = dp * dp + dpos * dpos;
            if cost < best_cost {
                best = fi;
                best_cost = cost;
            }
        }
        folds[best].patches += g.patches;
        folds[best].positives += g.positives;
        folds[best].members.push(gi);
    }

    // polish: repeatedly apply the swap or single-group move that most
    // reduces the worst fold-prevalence deviation, sizes kept under the cap
    let deviation = |patches: usize, positives: usize| {
        if patches == 0 {
            f64::INFINITY
        } else {
            libm::fabs(positives as f64 / patches as f64 - dev_prev)
        }
    };
    for _ in 0..200 {
        let devs: Vec<f64> =
            folds.iter().map(|f| deviation(f.patches, f.positives)).collect();
        let global_before = devs.iter().fold(0.0f64, |m, &d| m.max(d));
        // max deviation among folds other than a and b
        let others_max = |a: usize, b: usize| {
            devs.iter()
                .enumerate()
                .filter(|&(i, _)| i != a && i != b)
                .fold(0.0f64, |m, (_, &d)| m.max(d))
        };
        let mut best_move: Option<(usize, usize, usize, Option<usize>, f64)> = None;
        for a in 0..folds.len() {
            for b in 0..folds.len() {
                if a == b {
                    continue;
                }
                let rest = others_max(a, b);
                if rest >= global_before {
                    continue;
                }
                for (ia, &ga) in folds[a].members.iter().enumerate() {
                    let sa = &dev_index[ga];
                    // move a's group into b
                    if folds[a].members.len() > 1 {
                        let ap = folds[a].patches - sa.patches;
                        let bp = folds[b].patches + sa.patches;
                        if ap > 0 && (bp as f64) <= cap {
                            let after = deviation(ap, folds[a].positives - sa.positives)
                                .max(deviation(bp, folds[b].positives + sa.positives))
                                .max(rest);
                            if after < global_before - 1e-12
                                && best_move.map_or(true, |(.., cur)| after < cur)
                            {
                                best_move = Some((a, b, ia, None, after));
                            }
                        }
                    }
                    // swap a's group with one of b's
                    if a < b {
                        for (ib, &gb) in folds[b].members.iter().enumerate() {
                            let sb = &dev_index[gb];
                            let ap = folds[a].patches + sb.patches - sa.patches;
                            let bp = folds[b].patches + sa.patches - sb.patches;
                            if ap == 0 || bp == 0 || ap as f64 > cap || bp as f64 > cap {
                                continue;
                            }
                            let apos = folds[a].positives + sb.positives - sa.positives;
                            let bpos = folds[b].positives + sa.positives - sb.positives;
                            let after =
                                deviation(ap, apos).max(deviation(bp, bpos)).max(rest);
                            if after < global_before - 1e-12
                                && best_move.map_or(true, |(.., cur)| after < cur)
                            {
                                best_move = Some((a, b, ia, Some(ib), after));
                            }
                        }
                    }
                }
            }
        }
        match best_move {
            Some((a, b, ia, Some(ib), _)) => {
                let ga = folds[a].members[ia];
                let gb = folds[b].members[ib];
                let (sa, sb) = (dev_index[ga].clone(), dev_index[gb].clone());
                folds[a].members[ia] = gb;
                folds[b].members[ib] = ga;
                folds[a].patches = folds[a].patches + sb.patches - sa.patches;
                folds[b].patches = folds[b].patches + sa.patches - sb.patches;
                folds[a].positives = folds[a].positives + sb.positives - sa.positives;
                folds[b].positives = folds[b].positives + sa.positives - sb.positives;
            }
            Some((a, b, ia, None, _)) => {
                let ga = folds[a].members.swap_remove(ia);
                let sa = dev_index[ga].clone();
                folds[b].members.push(ga);
                folds[a].patches -= sa.patches;
                folds[a].positives -= sa.positives;
                folds[b].patches += sa.patches;
                folds[b].positives += sa.positives;
            }
            None => break,
        }
    }

    let mut fold_of_group = BTreeMap::new();
    for (fi, f) in folds.iter().enumerate() {
        for &gi in &f.members {
            fold_of_group.insert(dev_index[gi].group, fi);
        }
    }
    Ok(SplitPlan {
        dev_fraction: plan.dev_fraction,
        n_folds: plan.n_folds,
        fold_of_group,
        test_groups,
    })
}

fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
