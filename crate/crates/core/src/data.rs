//! Image datasets, disjoint target/shadow partitions and membership labels.
//!
//! Supported on-disk layouts under a data root:
//!
//! * `fmnist/` (or `mnist/`): the four IDX files
//!   `{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
//! * `stl10_binary/`: `{train,test}_X.bin` and `{train,test}_y.bin` from the
//!   STL-10 binary release (labels 1..=10, images column-major per channel).
//!
//! Images are held channel-major (`C x H x W`) with pixels scaled to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    /// Builds a dataset from channel-major pixels, checking every invariant.
    pub fn new(
        name: impl Into<String>,
        (height, width, channels): (usize, usize, usize),
        classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let size = height * width * channels;
        if size == 0 || pixels.len() != size * labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} pixels do not form {} images of {height}x{width}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y >= classes) {
            return Err(Error::InvalidInput(format!(
                "label {} at index {i} is not below K={classes}",
                labels[i]
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(format!(
                "pixel {} of image {} is outside [0, 1]",
                pixels[i],
                i / size
            )));
        }
        Ok(Self {
            name: name.into(),
            height,
            width,
            channels,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// `(channels, height, width)` as seen by the networks.
    pub fn chw(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.image_len();
        &self.pixels[i * s..(i + 1) * s]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images at `indices` stacked into a `[n, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let s = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| p as f64));
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Per-channel mean and standard deviation over the given images.
    pub fn channel_stats(&self, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let plane = self.height * self.width;
        let mut sum = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for &i in indices {
            for (c, chunk) in self.image(i).chunks(plane).enumerate() {
                for &p in chunk {
                    sum[c] += p as f64;
                    sq[c] += (p as f64) * (p as f64);
                }
            }
        }
        let n = (indices.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        (mean, std)
    }
}

/// Loads a named dataset from `root`.
/// Image shape `[c, h, w]` and class count of a known dataset.
pub fn dataset_shape(name: &str) -> Result<([usize; 3], usize)> {
    match name {
        "fmnist" | "mnist" => Ok(([1, 28, 28], 10)),
        "stl10" => Ok(([3, STL_SIDE, STL_SIDE], 10)),
        other => Err(Error::DatasetNotFound(format!(
            "unknown dataset '{other}' (known: fmnist, mnist, stl10)"
        ))),
    }
}

pub fn load_dataset(name: &str, root: &Path) -> Result<LabeledDataset> {
    match name {
        "fmnist" | "mnist" => load_idx_pair(name, root),
        "stl10" => load_stl10(root),
        other => Err(Error::DatasetNotFound(format!(
            "unknown dataset '{other}' (known: fmnist, mnist, stl10)"
        ))),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::DatasetNotFound(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })
}

fn dataset_dir(root: &Path, sub: &str, probe: &str) -> PathBuf {
    let nested = root.join(sub);
    if nested.join(probe).exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn load_idx_pair(name: &str, root: &Path) -> Result<LabeledDataset> {
    let dir = dataset_dir(root, name, "train-images-idx3-ubyte");
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut shape = (0, 0);
    for split in ["train", "t10k"] {
        let img_path = dir.join(format!("{split}-images-idx3-ubyte"));
        let lbl_path = dir.join(format!("{split}-labels-idx1-ubyte"));
        let img = read_file(&img_path)?;
        let lbl = read_file(&lbl_path)?;
        let header = |what: &str| Error::Decode {
            file: img_path.display().to_string(),
            index: 0,
            reason: format!("bad header ({what})"),
        };
        if be_u32(&img, 0) != Some(0x803) {
            return Err(header("magic"));
        }
        let count = be_u32(&img, 4).ok_or_else(|| header("count"))? as usize;
        let h = be_u32(&img, 8).ok_or_else(|| header("rows"))? as usize;
        let w = be_u32(&img, 12).ok_or_else(|| header("cols"))? as usize;
        if shape != (0, 0) && shape != (h, w) {
            return Err(header("image size differs between splits"));
        }
        shape = (h, w);
        if be_u32(&lbl, 0) != Some(0x801) || be_u32(&lbl, 4) != Some(count as u32) {
            return Err(Error::Decode {
                file: lbl_path.display().to_string(),
                index: 0,
                reason: "bad header or count mismatch".into(),
            });
        }
        let body = &img[16..];
        for i in 0..count {
            let Some(raw) = body.get(i * h * w..(i + 1) * h * w) else {
                return Err(Error::Decode {
                    file: img_path.display().to_string(),
                    index: i,
                    reason: "truncated image".into(),
                });
            };
            let y = match lbl.get(8 + i) {
                Some(&y) if y < 10 => y as usize,
                Some(&y) => {
                    return Err(Error::Decode {
                        file: lbl_path.display().to_string(),
                        index: i,
                        reason: format!("label {y} out of range"),
                    })
                }
                None => {
                    return Err(Error::Decode {
                        file: lbl_path.display().to_string(),
                        index: i,
                        reason: "truncated labels".into(),
                    })
                }
            };
            pixels.extend(raw.iter().map(|&p| p as f32 / 255.0));
            labels.push(y);
        }
    }
    LabeledDataset::new(name, (shape.0, shape.1, 1), 10, pixels, labels)
}

const STL_SIDE: usize = 96;

fn load_stl10(root: &Path) -> Result<LabeledDataset> {
    let dir = dataset_dir(root, "stl10_binary", "train_X.bin");
    let size = STL_SIDE * STL_SIDE * 3;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for split in ["train", "test"] {
        let x_path = dir.join(format!("{split}_X.bin"));
        let y_path = dir.join(format!("{split}_y.bin"));
        let x = read_file(&x_path)?;
        let y = read_file(&y_path)?;
        if x.len() != y.len() * size {
            let complete = x.len() / size;
            return Err(Error::Decode {
                file: x_path.display().to_string(),
                index: complete.min(y.len()),
                reason: format!("{} bytes for {} labels", x.len(), y.len()),
            });
        }
        for (i, &lab) in y.iter().enumerate() {
            if !(1..=10).contains(&lab) {
                return Err(Error::Decode {
                    file: y_path.display().to_string(),
                    index: i,
                    reason: format!("label {lab} outside 1..=10"),
                });
            }
            let raw = &x[i * size..(i + 1) * size];
            // Stored column-major per channel; transpose to row-major.
            for c in 0..3 {
                let plane = &raw[c * STL_SIDE * STL_SIDE..(c + 1) * STL_SIDE * STL_SIDE];
                for r in 0..STL_SIDE {
                    for col in 0..STL_SIDE {
                        pixels.push(plane[col * STL_SIDE + r] as f32 / 255.0);
                    }
                }
            }
            labels.push(lab as usize - 1);
        }
    }
    LabeledDataset::new("stl10", (STL_SIDE, STL_SIDE, 3), 10, pixels, labels)
}

/// Requested sample counts for the four disjoint splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub target_train: usize,
    pub target_test: usize,
    pub shadow_train: usize,
    pub shadow_test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.target_train + self.target_test + self.shadow_train + self.shadow_test
    }

    fn as_array(&self) -> [usize; 4] {
        [
            self.target_train,
            self.target_test,
            self.shadow_train,
            self.shadow_test,
        ]
    }
}

impl std::fmt::Display for SplitSizes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [a, b, c, d] = self.as_array();
        write!(f, "{a},{b},{c},{d}")
    }
}

impl FromStr for SplitSizes {
    type Err = Error;

    /// Parses `a,b,c,d` (target train, target test, shadow train, shadow test).
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("split sizes '{s}': {e}")))?;
        match v[..] {
            [a, b, c, d] => Ok(Self {
                target_train: a,
                target_test: b,
                shadow_train: c,
                shadow_test: d,
            }),
            _ => Err(Error::InvalidArgument(format!(
                "split sizes '{s}' must have four entries"
            ))),
        }
    }
}

/// Index manifest for the four disjoint splits of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dataset: String,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub shadow_train: Vec<usize>,
    pub shadow_test: Vec<usize>,
    /// Per-channel `(mean, std)` of the target and shadow training images.
    pub target_standardization: (Vec<f64>, Vec<f64>),
    pub shadow_standardization: (Vec<f64>, Vec<f64>),
}

impl SplitSpec {
    pub fn splits(&self) -> [&[usize]; 4] {
        [
            &self.target_train,
            &self.target_test,
            &self.shadow_train,
            &self.shadow_test,
        ]
    }

    pub fn train(&self, source: Source) -> &[usize] {
        match source {
            Source::Target => &self.target_train,
            Source::Shadow => &self.shadow_train,
        }
    }

    pub fn test(&self, source: Source) -> &[usize] {
        match source {
            Source::Target => &self.target_test,
            Source::Shadow => &self.shadow_test,
        }
    }

    pub fn standardization(&self, source: Source) -> &(Vec<f64>, Vec<f64>) {
        match source {
            Source::Target => &self.target_standardization,
            Source::Shadow => &self.shadow_standardization,
        }
    }

    /// Writes `<run>/splits/<name>.json`.
    pub fn save(&self, run_dir: &Path, name: &str) -> Result<PathBuf> {
        let dir = run_dir.join("splits");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{name}.json"));
        let body = serde_json::to_string_pretty(self)?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&body)?)
    }
}

/// Splits `dataset` into four disjoint, class-stratified index sets.
pub fn partition(dataset: &LabeledDataset, sizes: SplitSizes, seed: u64) -> Result<SplitSpec> {
    if sizes.total() > dataset.len() {
        return Err(Error::InsufficientData {
            requested: sizes.total(),
            available: dataset.len(),
        });
    }
    let counts = dataset.class_counts();
    let quotas = stratified_quotas(&counts, &sizes.as_array());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, &y) in dataset.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; dataset.classes];
    let mut splits: Vec<Vec<usize>> = Vec::with_capacity(4);
    for quota in &quotas {
        let mut idx = Vec::new();
        for (c, &q) in quota.iter().enumerate() {
            idx.extend_from_slice(&pools[c][cursor[c]..cursor[c] + q]);
            cursor[c] += q;
        }
        idx.sort_unstable();
        splits.push(idx);
    }
    let mut it = splits.into_iter();
    let (tt, te, st, se) = (
        it.next().unwrap_or_default(),
        it.next().unwrap_or_default(),
        it.next().unwrap_or_default(),
        it.next().unwrap_or_default(),
    );
    Ok(SplitSpec {
        dataset: dataset.name.clone(),
        seed,
        sizes,
        target_standardization: dataset.channel_stats(&tt),
        shadow_standardization: dataset.channel_stats(&st),
        target_train: tt,
        target_test: te,
        shadow_train: st,
        shadow_test: se,
    })
}

/// Largest-remainder per-class quotas for each split, repaired so that no
/// class is asked for more samples than it has.
fn stratified_quotas(counts: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let n: usize = counts.iter().sum();
    let mut remaining = counts.to_vec();
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let exact: Vec<f64> = counts
            .iter()
            .map(|&c| size as f64 * c as f64 / n.max(1) as f64)
            .collect();
        let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut short = size - q.iter().sum::<usize>();
        for &c in order.iter().cycle().take(order.len() * 2) {
            if short == 0 {
                break;
            }
            if q[c] < remaining[c] {
                q[c] += 1;
                short -= 1;
            }
        }
        // Clamp to availability and hand the excess to classes with room.
        let mut excess = 0;
        for c in 0..q.len() {
            if q[c] > remaining[c] {
                excess += q[c] - remaining[c];
                q[c] = remaining[c];
            }
        }
        excess += short;
        for &c in &order {
            while excess > 0 && q[c] < remaining[c] {
                q[c] += 1;
                excess -= 1;
            }
        }
        for c in 0..q.len() {
            remaining[c] -= q[c];
        }
        out.push(q);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Target,
    Shadow,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Target => "target",
            Source::Shadow => "shadow",
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Source::Target),
            "shadow" => Ok(Source::Shadow),
            other => Err(Error::InvalidArgument(format!(
                "unknown source '{other}' (expected target or shadow)"
            ))),
        }
    }
}

/// Sample indices paired with membership labels (1 = trained on).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipSet {
    pub source: Source,
    pub records: Vec<(usize, u8)>,
}

impl MembershipSet {
    pub fn indices(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.0).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.1).collect()
    }

    pub fn members(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.1 == 1).map(|r| r.0).collect()
    }

    pub fn nonmembers(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.1 == 0).map(|r| r.0).collect()
    }
}

/// Members are the split's training indices, non-members its test indices.
pub fn label_membership(split: &SplitSpec, source: Source) -> MembershipSet {
    let records = split
        .train(source)
        .iter()
        .map(|&i| (i, 1))
        .chain(split.test(source).iter().map(|&i| (i, 0)))
        .collect();
    MembershipSet { source, records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn toy(n: usize, classes: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % classes).collect();
        let pixels = (0..n * 4).map(|i| (i % 11) as f32 / 10.0).collect();
        LabeledDataset::new("toy", (2, 2, 1), classes, pixels, labels).unwrap()
    }

    fn sizes(a: usize, b: usize, c: usize, d: usize) -> SplitSizes {
        SplitSizes {
            target_train: a,
            target_test: b,
            shadow_train: c,
            shadow_test: d,
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = toy(1000, 10);
        let a = partition(&ds, sizes(100, 100, 100, 100), 7).unwrap();
        let b = partition(&ds, sizes(100, 100, 100, 100), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = partition(&ds, sizes(100, 100, 100, 100), 8).unwrap();
        assert_ne!(a.target_train, c.target_train);
    }

    #[test]
    fn oversized_request_is_rejected() {
        let ds = toy(50, 5);
        let err = partition(&ds, sizes(20, 10, 10, 11), 1).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { requested: 51, available: 50 }));
    }

    #[test]
    fn whole_dataset_can_be_partitioned() {
        let ds = toy(103, 7);
        let s = partition(&ds, sizes(40, 20, 30, 13), 3).unwrap();
        let all: HashSet<usize> = s.splits().iter().flat_map(|v| v.iter().copied()).collect();
        assert_eq!(all.len(), 103);
    }

    #[test]
    fn membership_labels_follow_splits() {
        let ds = toy(400, 4);
        let s = partition(&ds, sizes(50, 30, 40, 20), 2).unwrap();
        let m = label_membership(&s, Source::Shadow);
        assert_eq!(m.records.len(), 60);
        for &i in &s.shadow_train {
            assert!(m.records.contains(&(i, 1)));
        }
        for &j in &s.shadow_test {
            assert!(m.records.contains(&(j, 0)));
        }
        assert!(matches!("attack".parse::<Source>(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dataset_invariants_are_checked() {
        assert!(LabeledDataset::new("bad", (1, 1, 1), 2, vec![0.5], vec![2]).is_err());
        assert!(LabeledDataset::new("bad", (1, 1, 1), 2, vec![0.5, 0.1], vec![1]).is_err());
        assert!(LabeledDataset::new("bad", (1, 1, 1), 2, vec![1.5], vec![1]).is_err());
    }

    #[test]
    fn empty_root_is_dataset_not_found() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["fmnist", "stl10", "cifar"] {
            assert!(matches!(
                load_dataset(name, dir.path()),
                Err(Error::DatasetNotFound(_))
            ));
        }
    }

    fn write_idx(dir: &Path, split: &str, n: usize, bad_label_at: Option<usize>) {
        let mut img = vec![0, 0, 8, 3];
        for d in [n as u32, 28, 28] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..n * 784).map(|i| (i % 256) as u8));
        let mut lbl = vec![0, 0, 8, 1];
        lbl.extend_from_slice(&(n as u32).to_be_bytes());
        lbl.extend((0..n).map(|i| if Some(i) == bad_label_at { 42 } else { (i % 10) as u8 }));
        fs::write(dir.join(format!("{split}-images-idx3-ubyte")), img).unwrap();
        fs::write(dir.join(format!("{split}-labels-idx1-ubyte")), lbl).unwrap();
    }

    #[test]
    fn idx_layout_loads_and_reports_corrupt_records() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("fmnist");
        fs::create_dir_all(&dir).unwrap();
        write_idx(&dir, "train", 12, None);
        write_idx(&dir, "t10k", 3, None);
        let ds = load_dataset("fmnist", root.path()).unwrap();
        assert_eq!(ds.len(), 15);
        assert_eq!((ds.height, ds.width, ds.channels, ds.classes), (28, 28, 1, 10));
        assert_eq!(ds.image(0)[255], 1.0);

        write_idx(&dir, "t10k", 3, Some(2));
        match load_dataset("fmnist", root.path()) {
            Err(Error::Decode { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn stl10_layout_loads_column_major_pixels() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("stl10_binary");
        fs::create_dir_all(&dir).unwrap();
        let size = 96 * 96 * 3;
        let mut x = vec![0u8; 2 * size];
        // image 0, channel 0, row 1, column 0 lives at column-major offset 1.
        x[1] = 255;
        fs::write(dir.join("train_X.bin"), &x).unwrap();
        fs::write(dir.join("train_y.bin"), [1u8, 10]).unwrap();
        fs::write(dir.join("test_X.bin"), &x[..size]).unwrap();
        fs::write(dir.join("test_y.bin"), [3u8]).unwrap();
        let ds = load_dataset("stl10", root.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels(), &[0, 9, 2]);
        assert_eq!(ds.image(0)[96], 1.0);
        assert_eq!(ds.chw(), [3, 96, 96]);

        fs::write(dir.join("test_y.bin"), [11u8]).unwrap();
        assert!(matches!(load_dataset("stl10", root.path()), Err(Error::Decode { index: 0, .. })));
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_stratified(seed in any::<u64>(), a in 0usize..120, b in 0usize..120, c in 0usize..120, d in 0usize..120) {
            let ds = toy(600, 6);
            let s = partition(&ds, sizes(a, b, c, d), seed).unwrap();
            let mut seen = HashSet::new();
            for split in s.splits() {
                for &i in split {
                    prop_assert!(seen.insert(i), "index {} appears twice", i);
                }
            }
            let counts = ds.class_counts();
            for (split, size) in s.splits().iter().zip([a, b, c, d]) {
                prop_assert_eq!(split.len(), size);
                let mut per_class = vec![0usize; ds.classes];
                for &i in *split {
                    per_class[ds.label(i)] += 1;
                }
                for cls in 0..ds.classes {
                    let exact = size as f64 * counts[cls] as f64 / ds.len() as f64;
                    prop_assert!((per_class[cls] as f64 - exact).abs() <= 1.0 + 1e-9);
                }
            }
        }
    }
}
