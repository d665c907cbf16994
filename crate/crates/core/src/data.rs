//! Synthetic identity-clustered data and federated partitioning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::FeatureVector;
use crate::rng::{rng_for, stream};

/// A raw input with its global class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: FeatureVector,
    pub label: usize,
}

/// Indices into the test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    /// Held-out samples per class used to build verification pairs.
    pub test_per_class: usize,
    pub input_dim: usize,
    pub cluster_std: f64,
    /// Per-coordinate std of the class centers around their group center (or the origin
    /// when `center_groups == 0`).
    pub class_center_scale: f64,
    /// Number of center groups; class `c` belongs to group `c % center_groups`. Classes of a
    /// group are close to each other and, under contiguous assignment, land on different
    /// clients. `0` draws every class center independently.
    pub center_groups: usize,
    /// Per-coordinate std of the group centers.
    pub group_center_scale: f64,
    /// Pairs per class for each of the positive and negative lists.
    pub pairs_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 32,
            samples_per_class: 20,
            test_per_class: 4,
            input_dim: 32,
            cluster_std: 1.0,
            class_center_scale: 5.0,
            center_groups: 0,
            group_center_scale: 5.0,
            pairs_per_class: 10,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes < 2 {
            problems.push(format!("num_classes = {} must be >= 2", self.num_classes));
        }
        if self.samples_per_class < 2 {
            problems.push(format!("samples_per_class = {} must be >= 2", self.samples_per_class));
        }
        if self.test_per_class < 2 {
            problems.push(format!("test_per_class = {} must be >= 2", self.test_per_class));
        }
        if self.input_dim == 0 {
            problems.push("input_dim must be >= 1".into());
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            problems.push(format!("cluster_std = {} must be finite and >= 0", self.cluster_std));
        }
        if !(self.class_center_scale > 0.0 && self.class_center_scale.is_finite()) {
            problems.push(format!(
                "class_center_scale = {} must be finite and > 0",
                self.class_center_scale
            ));
        }
        if self.center_groups > self.num_classes {
            problems.push(format!(
                "center_groups = {} exceeds num_classes = {}",
                self.center_groups, self.num_classes
            ));
        }
        if self.center_groups > 0 && !(self.group_center_scale >= 0.0 && self.group_center_scale.is_finite()) {
            problems.push(format!(
                "group_center_scale = {} must be finite and >= 0",
                self.group_center_scale
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub pairs: Vec<VerificationPair>,
    pub centers: Vec<FeatureVector>,
    pub num_classes: usize,
}

impl SyntheticDataset {
    pub fn input_dim(&self) -> usize {
        self.centers.first().map_or(0, |c| c.dim())
    }
}

/// Gaussian class clusters around seeded centers, a train/test split, and verification pairs
/// drawn from the test split.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut group_rng = rng_for(spec.seed, stream::DATA_CENTERS, 1, 0);
    let groups: Vec<Vec<f64>> = (0..spec.center_groups)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut group_rng);
                    z * spec.group_center_scale
                })
                .collect()
        })
        .collect();
    let mut center_rng = rng_for(spec.seed, stream::DATA_CENTERS, 0, 0);
    let centers: Vec<FeatureVector> = (0..spec.num_classes)
        .map(|c| {
            FeatureVector(
                (0..spec.input_dim)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(&mut center_rng);
                        let base = if groups.is_empty() { 0.0 } else { groups[c % groups.len()][i] };
                        base + z * spec.class_center_scale
                    })
                    .collect(),
            )
        })
        .collect();
    let noise = Normal::new(0.0, spec.cluster_std).map_err(|_| Error::Config("bad cluster_std".into()))?;
    let mut train = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut test = Vec::with_capacity(spec.num_classes * spec.test_per_class);
    for (label, center) in centers.iter().enumerate() {
        let mut rng = rng_for(spec.seed, stream::DATA_SAMPLES, label as u64, 0);
        let mut draw = || Sample {
            input: FeatureVector(
                center
                    .iter()
                    .map(|&c| {
                        if spec.cluster_std == 0.0 {
                            c
                        } else {
                            c + noise.sample(&mut rng)
                        }
                    })
                    .collect(),
            ),
            label,
        };
        for _ in 0..spec.samples_per_class {
            train.push(draw());
        }
        for _ in 0..spec.test_per_class {
            test.push(draw());
        }
    }
    let pairs = sample_pairs(&test, spec.num_classes, spec.pairs_per_class * spec.num_classes, spec.seed);
    Ok(SyntheticDataset {
        train,
        test,
        pairs,
        centers,
        num_classes: spec.num_classes,
    })
}

/// `count` positive and `count` negative pairs, never pairing a sample with itself.
fn sample_pairs(test: &[Sample], num_classes: usize, count: usize, seed: u64) -> Vec<VerificationPair> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in test.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = rng_for(seed, stream::DATA_PAIRS, 0, 0);
    let mut pairs = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let c = rng.random_range(0..num_classes);
        let members = &by_class[c];
        let i = rng.random_range(0..members.len());
        let mut j = rng.random_range(0..members.len() - 1);
        if j >= i {
            j += 1;
        }
        pairs.push(VerificationPair {
            a: members[i],
            b: members[j],
            same: true,
        });
    }
    for _ in 0..count {
        let c1 = rng.random_range(0..num_classes);
        let mut c2 = rng.random_range(0..num_classes - 1);
        if c2 >= c1 {
            c2 += 1;
        }
        let a = by_class[c1][rng.random_range(0..by_class[c1].len())];
        let b = by_class[c2][rng.random_range(0..by_class[c2].len())];
        pairs.push(VerificationPair { a, b, same: false });
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    Balanced,
    LogNormal,
    Shared,
}

/// Client-side data: raw inputs with *local* labels indexing into `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    /// Global class id of every local class; local label `i` is `classes[i]`.
    pub classes: Vec<usize>,
    pub local_data: Vec<(FeatureVector, usize)>,
}

impl ClientState {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_samples(&self) -> usize {
        self.local_data.len()
    }
}

/// A class held by more than one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedIdentity {
    pub class: usize,
    pub clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub scheme: PartitionScheme,
    /// Global classes of every client, ascending.
    pub client_classes: Vec<Vec<usize>>,
    /// Sample count `n_k` of every client.
    pub counts: Vec<usize>,
    pub shared: Vec<SharedIdentity>,
}

impl PartitionSpec {
    pub fn total_samples(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `p_k = n_k / N`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.total_samples() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Clients holding each global class.
    pub fn class_owners(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut owners = vec![Vec::new(); num_classes];
        for (k, classes) in self.client_classes.iter().enumerate() {
            for &c in classes {
                owners[c].push(k);
            }
        }
        owners
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub spec: PartitionSpec,
    pub clients: Vec<ClientState>,
}

impl Partition {
    /// All client samples back with global labels, in client order.
    pub fn pooled(&self) -> Vec<Sample> {
        self.clients
            .iter()
            .flat_map(|c| {
                c.local_data.iter().map(move |(x, l)| Sample {
                    input: x.clone(),
                    label: c.classes[*l],
                })
            })
            .collect()
    }
}

fn build_partition(
    dataset: &SyntheticDataset,
    mut client_classes: Vec<Vec<usize>>,
    scheme: PartitionScheme,
    shared: Vec<SharedIdentity>,
) -> Partition {
    for c in &mut client_classes {
        c.sort_unstable();
    }
    let k = client_classes.len();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (client, classes) in client_classes.iter().enumerate() {
        for &c in classes {
            owners[c].push(client);
        }
    }
    let mut per_class: Vec<Vec<&Sample>> = vec![Vec::new(); dataset.num_classes];
    for s in &dataset.train {
        per_class[s.label].push(s);
    }
    let mut clients: Vec<ClientState> = client_classes
        .iter()
        .enumerate()
        .map(|(id, classes)| ClientState {
            client_id: id,
            classes: classes.clone(),
            local_data: Vec::new(),
        })
        .collect();
    for (class, samples) in per_class.iter().enumerate() {
        let holders = &owners[class];
        if holders.is_empty() {
            continue;
        }
        // Contiguous chunks: the first holder gets the first share of the class.
        let h = holders.len();
        for (i, s) in samples.iter().enumerate() {
            let holder = holders[i * h / samples.len()];
            let local = clients[holder]
                .classes
                .binary_search(&class)
                .expect("holder lists class");
            clients[holder].local_data.push((s.input.clone(), local));
        }
    }
    let counts = clients.iter().map(|c| c.local_data.len()).collect();
    Partition {
        spec: PartitionSpec {
            num_clients: k,
            scheme,
            client_classes,
            counts,
            shared,
        },
        clients,
    }
}

/// Contiguous blocks of `C/K` classes per client.
pub fn partition_balanced(dataset: &SyntheticDataset, num_clients: usize) -> Result<Partition> {
    let c = dataset.num_classes;
    if num_clients == 0 || !c.is_multiple_of(num_clients) {
        return Err(Error::Config(format!(
            "balanced partition needs the client count to divide the class count: {c} classes, {num_clients} clients"
        )));
    }
    let per = c / num_clients;
    let classes = (0..num_clients)
        .map(|k| (k * per..(k + 1) * per).collect())
        .collect();
    Ok(build_partition(dataset, classes, PartitionScheme::Balanced, Vec::new()))
}

/// Class counts proportional to `weights`, every client at least one class, remainders
/// resolved by largest fractional part (ties to the lower client index).
pub fn class_counts_from_weights(num_classes: usize, weights: &[f64]) -> Result<Vec<usize>> {
    let k = weights.len();
    if k == 0 || num_classes < k {
        return Err(Error::Config(format!(
            "need at least one class per client: {num_classes} classes, {k} clients"
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Config("partition weights must be nonnegative with finite positive sum".into()));
    }
    let spare = (num_classes - k) as f64;
    let quotas: Vec<f64> = weights.iter().map(|w| spare * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| 1 + libm::floor(*q) as usize).collect();
    let mut left = num_classes - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - libm::floor(quotas[a]);
        let fb = quotas[b] - libm::floor(quotas[b]);
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Unbalanced partition: client weights `X_k` with `ln X_k ~ N(0, 1)` set the number of
/// classes per client; classes are dealt out in shuffled order.
pub fn partition_lognormal(dataset: &SyntheticDataset, num_clients: usize, seed: u64) -> Result<Partition> {
    if num_clients < 2 {
        return Err(Error::Config(format!(
            "log-normal partition needs at least 2 clients, got {num_clients}"
        )));
    }
    let mut rng = rng_for(seed, stream::PARTITION, 1, 0);
    let weights: Vec<f64> = (0..num_clients)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            libm::exp(z)
        })
        .collect();
    partition_with_weights(dataset, &weights, &mut rng)
}

/// Deals shuffled classes to clients according to `weights`. Exposed so degenerate
/// weightings can be exercised directly.
pub fn partition_with_weights<R: Rng + ?Sized>(
    dataset: &SyntheticDataset,
    weights: &[f64],
    rng: &mut R,
) -> Result<Partition> {
    let counts = class_counts_from_weights(dataset.num_classes, weights)?;
    let mut order: Vec<usize> = (0..dataset.num_classes).collect();
    order.shuffle(rng);
    let mut classes = Vec::with_capacity(weights.len());
    let mut next = 0;
    for &n in &counts {
        classes.push(order[next..next + n].to_vec());
        next += n;
    }
    Ok(build_partition(dataset, classes, PartitionScheme::LogNormal, Vec::new()))
}

/// `round(share_fraction · C)` classes are each held by a random pair of clients (samples
/// split between them); the rest are dealt round-robin as exclusive classes.
pub fn partition_shared(
    dataset: &SyntheticDataset,
    num_clients: usize,
    share_fraction: f64,
    seed: u64,
) -> Result<Partition> {
    if !(0.0..1.0).contains(&share_fraction) {
        return Err(Error::Config(format!("share_fraction = {share_fraction} must lie in [0, 1)")));
    }
    if num_clients < 2 {
        return Err(Error::Config(format!("shared partition needs at least 2 clients, got {num_clients}")));
    }
    let n_shared = libm::round(share_fraction * dataset.num_classes as f64) as usize;
    partition_shared_count(dataset, num_clients, n_shared, seed)
}

/// Shared partition with an explicit number of shared classes.
pub fn partition_shared_count(
    dataset: &SyntheticDataset,
    num_clients: usize,
    n_shared: usize,
    seed: u64,
) -> Result<Partition> {
    if num_clients < 2 || n_shared > dataset.num_classes {
        return Err(Error::Config(format!(
            "cannot share {n_shared} of {} classes across {num_clients} clients",
            dataset.num_classes
        )));
    }
    let mut rng = rng_for(seed, stream::PARTITION, 2, 0);
    let mut order: Vec<usize> = (0..dataset.num_classes).collect();
    order.shuffle(&mut rng);
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    let mut shared = Vec::with_capacity(n_shared);
    for &class in &order[..n_shared] {
        let a = rng.random_range(0..num_clients);
        let mut b = rng.random_range(0..num_clients - 1);
        if b >= a {
            b += 1;
        }
        let mut group = vec![a, b];
        group.sort_unstable();
        for &k in &group {
            classes[k].push(class);
        }
        shared.push(SharedIdentity { class, clients: group });
    }
    for (i, &class) in order[n_shared..].iter().enumerate() {
        classes[i % num_clients].push(class);
    }
    shared.sort_by_key(|s| s.class);
    Ok(build_partition(dataset, classes, PartitionScheme::Shared, shared))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticDataset {
        generate(&SyntheticSpec {
            num_classes: 16,
            samples_per_class: 6,
            test_per_class: 3,
            input_dim: 5,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn sorted_pool(samples: &[Sample]) -> Vec<(usize, Vec<u64>)> {
        let mut v: Vec<(usize, Vec<u64>)> = samples
            .iter()
            .map(|s| (s.label, s.input.iter().map(|x| x.to_bits()).collect()))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn grouped_centers_with_zero_group_scale_match_independent() {
        let base = SyntheticSpec {
            num_classes: 8,
            input_dim: 4,
            ..SyntheticSpec::default()
        };
        let grouped = SyntheticSpec {
            center_groups: 2,
            group_center_scale: 0.0,
            ..base.clone()
        };
        assert_eq!(generate(&base).unwrap(), generate(&grouped).unwrap());
    }

    #[test]
    fn grouped_centers_cluster_by_class_modulo_groups() {
        let d = generate(&SyntheticSpec {
            num_classes: 16,
            input_dim: 16,
            class_center_scale: 0.1,
            center_groups: 4,
            group_center_scale: 5.0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dist = |a: usize, b: usize| {
            let diff: Vec<f64> = d.centers[a].iter().zip(d.centers[b].iter()).map(|(x, y)| x - y).collect();
            crate::linalg::norm(&diff)
        };
        for a in 0..16 {
            for b in 0..16 {
                if a != b && a % 4 == b % 4 {
                    assert!(dist(a, b) < 2.0);
                } else if a % 4 != b % 4 {
                    assert!(dist(a, b) > 5.0);
                }
            }
        }
    }

    #[test]
    fn more_groups_than_classes_is_rejected() {
        let spec = SyntheticSpec {
            num_classes: 4,
            center_groups: 5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_reproduces_centers() {
        let d = generate(&SyntheticSpec {
            cluster_std: 0.0,
            num_classes: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for s in d.train.iter().chain(&d.test) {
            assert_eq!(s.input, d.centers[s.label]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(4), small(4));
        assert_ne!(small(4).train, small(5).train);
    }

    #[test]
    fn counts_and_pairs() {
        let d = generate(&SyntheticSpec {
            num_classes: 4,
            samples_per_class: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(d.train.len(), 40);
        let pos = d.pairs.iter().filter(|p| p.same).count();
        let neg = d.pairs.iter().filter(|p| !p.same).count();
        assert_eq!((pos, neg), (40, 40));
        for p in &d.pairs {
            assert_ne!(p.a, p.b);
            assert_eq!(d.test[p.a].label == d.test[p.b].label, p.same);
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = SyntheticSpec {
            num_classes: 1,
            test_per_class: 1,
            ..SyntheticSpec::default()
        };
        let err = bad.validate().unwrap_err();
        let Error::Config(msg) = err else { panic!() };
        assert!(msg.contains("num_classes") && msg.contains("test_per_class"));
    }

    #[test]
    fn balanced_partition() {
        let d = generate(&SyntheticSpec {
            num_classes: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let p = partition_balanced(&d, 2).unwrap();
        assert_eq!(p.spec.client_classes, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(p.spec.counts, vec![40, 40]);
        let one = partition_balanced(&d, 1).unwrap();
        assert_eq!(one.clients[0].num_samples(), d.train.len());
        let Err(Error::Config(msg)) = partition_balanced(&d, 3) else { panic!() };
        assert!(msg.contains("4 classes") && msg.contains("3 clients"));
    }

    #[test]
    fn thirty_six_equal_clients() {
        let d = generate(&SyntheticSpec {
            num_classes: 72,
            samples_per_class: 2,
            input_dim: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let p = partition_balanced(&d, 36).unwrap();
        assert_eq!(p.clients.len(), 36);
        assert!(p.spec.counts.iter().all(|&n| n == 4));
    }

    #[test]
    fn equal_weights_give_balanced_counts() {
        let d = small(1);
        let mut rng = rng_for(0, 0, 0, 0);
        let p = partition_with_weights(&d, &[2.5; 4], &mut rng).unwrap();
        assert!(p.spec.client_classes.iter().all(|c| c.len() == 4));
        let max = p.spec.counts.iter().max().unwrap();
        let min = p.spec.counts.iter().min().unwrap();
        assert_eq!(max, min);
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(class_counts_from_weights(10, &[1.0, 1.0, 2.0]).unwrap(), vec![3, 3, 4]);
        assert_eq!(class_counts_from_weights(3, &[100.0, 0.0, 0.0]).unwrap(), vec![1, 1, 1]);
        assert!(class_counts_from_weights(2, &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn lognormal_is_seeded_and_right_skewed() {
        let d = generate(&SyntheticSpec {
            num_classes: 64,
            samples_per_class: 2,
            input_dim: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(partition_lognormal(&d, 8, 3).unwrap(), partition_lognormal(&d, 8, 3).unwrap());
        let mut skewed = 0;
        for seed in 0..100 {
            let p = partition_lognormal(&d, 8, seed).unwrap();
            let sizes: Vec<usize> = p.spec.client_classes.iter().map(|c| c.len()).collect();
            assert_eq!(sizes.iter().sum::<usize>(), 64);
            assert!(sizes.iter().all(|&s| s >= 1));
            let mean = 64.0 / 8.0;
            if *sizes.iter().max().unwrap() as f64 > mean {
                skewed += 1;
            }
        }
        assert!(skewed >= 95, "{skewed}");
    }

    #[test]
    fn shared_partition_structure() {
        let d = small(2);
        let none = partition_shared(&d, 4, 0.0, 9).unwrap();
        assert!(none.spec.shared.is_empty());
        let owners = none.spec.class_owners(16);
        assert!(owners.iter().all(|o| o.len() == 1));

        let p = partition_shared(&d, 4, 0.25, 9).unwrap();
        assert_eq!(p.spec.shared.len(), 4);
        let owners = p.spec.class_owners(16);
        for class in 0..16 {
            let listed = p.spec.shared.iter().find(|s| s.class == class);
            match listed {
                Some(s) => {
                    assert_eq!(owners[class], s.clients);
                    assert!(s.clients.len() >= 2);
                    // Split evenly between the two holders.
                    for &k in &s.clients {
                        let local = p.clients[k].classes.binary_search(&class).unwrap();
                        let n = p.clients[k].local_data.iter().filter(|(_, l)| *l == local).count();
                        assert_eq!(n, 3);
                    }
                }
                None => assert_eq!(owners[class].len(), 1),
            }
        }
        assert!(partition_shared(&d, 4, 1.0, 0).is_err());
    }

    #[test]
    fn pooling_preserves_the_training_multiset() {
        let d = small(3);
        let expected = sorted_pool(&d.train);
        for p in [
            partition_balanced(&d, 4).unwrap(),
            partition_lognormal(&d, 4, 1).unwrap(),
            partition_shared(&d, 4, 0.25, 1).unwrap(),
        ] {
            assert_eq!(sorted_pool(&p.pooled()), expected);
            assert_eq!(p.spec.total_samples(), d.train.len());
            let w: f64 = p.spec.weights().iter().sum();
            assert!((w - 1.0).abs() < 1e-12);
            for c in &p.clients {
                assert!(c.local_data.iter().all(|(_, l)| *l < c.num_classes()));
            }
        }
    }
}
