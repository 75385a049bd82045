//! Directory-per-class datasets: discovery, decoding, resizing, stratified
//! splits and mini-batching.

pub mod augment;
pub mod pnm;
pub mod synth;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::stack;
use crate::tensor::{Rng, Shape, Tensor};

pub use augment::{augment, AugmentParams};
pub use pnm::{decode_pnm, encode_pgm};
pub use synth::{synth_generate, SynthSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H, W, C]`, values in `[0, 255]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub source_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Number of samples per class label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Shape shared by every image, or `None` for an empty set.
    pub fn image_dims(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.dims())
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Skip files that fail to decode instead of failing the whole load.
    pub skip_undecodable: bool,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Files skipped under [`LoadOptions::skip_undecodable`], with reasons.
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_hidden(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'))
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_hidden(&path) || path.is_dir() != want_dirs {
            continue;
        }
        out.push(path);
    }
    // OsStr ordering on Unix is bytewise, which equals code point order for UTF-8.
    out.sort();
    Ok(out)
}

/// Bilinear resize of `[H, W, C]` with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let &[h, w, c] = img.dims() else {
        return Err(Error::Shape(format!("resize expects [H, W, C], got {}", img.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape(vec![out_h, out_w, c]));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let axis = |o: usize, n_out: usize, n_in: usize| {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, out_w, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new([out_h, out_w, c])?, out))
}

/// Converts between 1 and 3 channels: gray is replicated, colour is averaged.
pub fn convert_channels(img: Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let dims = img.dims().to_vec();
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    match (c, channels) {
        (a, b) if a == b => Ok(img),
        (1, 3) => {
            let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
            Ok(Tensor::from_parts(Shape::new([h, w, 3])?, data))
        }
        (3, 1) => {
            let data = img.data().chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
            Ok(Tensor::from_parts(Shape::new([h, w, 1])?, data))
        }
        (a, b) => Err(Error::Shape(format!("cannot convert {a} channels to {b}"))),
    }
}

/// Reads, decodes and resizes one image file to `target` = `[H, W, C]`.
pub fn load_image(path: &Path, target: [usize; 3]) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = decode_pnm(&bytes)?;
    let img = resize_bilinear(&img, target[0], target[1])?;
    convert_channels(img, target[2])
}

/// Loads `root/<class>/<file>` into a dataset with images shaped `target`.
pub fn load_directory(root: &Path, target: [usize; 3]) -> Result<Dataset> {
    Ok(load_directory_with(root, target, &LoadOptions::default())?.dataset)
}

pub fn load_directory_with(root: &Path, target: [usize; 3], opts: &LoadOptions) -> Result<Loaded> {
    if target.contains(&0) || !matches!(target[2], 1 | 3) {
        return Err(Error::InvalidArgument(format!(
            "target shape {target:?} must be positive with 1 or 3 channels"
        )));
    }
    let class_dirs = sorted_entries(root, true)?;
    if class_dirs.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} has {} class directories, need at least 2",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut jobs = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("class directory {} is not UTF-8", dir.display())))?;
        class_names.push(name.to_string());
        let files = sorted_entries(dir, false)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        jobs.extend(files.into_iter().map(|f| (label, f)));
    }

    let decoded: Vec<(usize, PathBuf, Result<Tensor<f32>>)> = jobs
        .into_par_iter()
        .map(|(label, path)| {
            let img = load_image(&path, target);
            (label, path, img)
        })
        .collect();

    let mut samples = Vec::with_capacity(decoded.len());
    let mut skipped = Vec::new();
    for (label, path, img) in decoded {
        match img {
            Ok(image) => samples.push(Sample { image, label, source_path: path }),
            Err(e @ Error::Decode(_)) if opts.skip_undecodable => skipped.push((path, e.to_string())),
            Err(e @ Error::Io { .. }) => return Err(e),
            Err(e) => return Err(Error::in_file(path, e)),
        }
    }
    let dataset = Dataset { class_names, samples };
    if let Some(label) = dataset.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!(
            "class '{}' has no decodable images",
            dataset.class_names[label]
        )));
    }
    Ok(Loaded { dataset, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(f > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {parts:?} must be positive and sum to 1"
            )));
        }
        Ok(())
    }
}

const SPLIT_STREAM: u64 = 0x5311;

/// Per-class shuffle, then cuts at `floor(n * train)` and
/// `floor(n * (train + val))`.
pub fn split_stratified(d: &Dataset, s: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    s.validate()?;
    let mut by_class: Vec<Vec<&Sample>> = vec![Vec::new(); d.num_classes()];
    for sample in &d.samples {
        by_class[sample.label].push(sample);
    }
    let empty = || Dataset {
        class_names: d.class_names.clone(),
        samples: Vec::new(),
    };
    let (mut train, mut val, mut test) = (empty(), empty(), empty());
    for (label, mut members) in by_class.into_iter().enumerate() {
        let n = members.len() as f64;
        // The epsilon keeps e.g. 100 * 0.6 from flooring to 59.
        let cut1 = (n * s.train + 1e-9).floor() as usize;
        let cut2 = (n * (s.train + s.val) + 1e-9).floor() as usize;
        if cut1 == 0 || cut2 == cut1 || cut2 == members.len() {
            return Err(Error::Dataset(format!(
                "class '{}' has {} samples, too few for all three splits",
                d.class_names[label],
                members.len()
            )));
        }
        Rng::derive(s.seed, SPLIT_STREAM, label as u64).shuffle(&mut members);
        train.samples.extend(members[..cut1].iter().map(|&x| x.clone()));
        val.samples.extend(members[cut1..cut2].iter().map(|&x| x.clone()));
        test.samples.extend(members[cut2..].iter().map(|&x| x.clone()));
    }
    Ok((train, val, test))
}

/// Iterator over `(images [N, H, W, C], labels)` covering each sample once.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.data.samples[i].image).collect();
        let labels = idx.iter().map(|&i| self.data.samples[i].label).collect();
        let batch = stack(&images).expect("dataset images share one shape");
        Some((batch, labels))
    }
}

/// Visiting order of `n` samples for one epoch.
pub fn epoch_order(n: usize, shuffle: bool, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order
}

pub fn batches<'a>(d: &'a Dataset, batch_size: usize, shuffle: bool, rng: &mut Rng) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if d.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let order = epoch_order(d.len(), shuffle, rng);
    Ok(Batches {
        data: d,
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn toy(per_class: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image: Tensor::full([1, 1, 1], i as f32).unwrap(),
                    label,
                    source_path: PathBuf::from(format!("c{label}/{i}")),
                });
            }
        }
        Dataset {
            class_names: (0..per_class.len()).map(|i| format!("c{i}")).collect(),
            samples,
        }
    }

    fn write_tree(root: &Path, classes: &[&str], per_class: usize) {
        for (k, name) in classes.iter().enumerate() {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..per_class {
                let px = [(k * 50 + i) as u8; 4];
                std::fs::write(dir.join(format!("{i}.pgm")), encode_pgm(2, 2, &px)).unwrap();
            }
        }
    }

    #[test]
    fn loads_two_classes_in_order() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path(), &["b", "a"], 3);
        std::fs::write(tmp.path().join("a/.DS_Store"), b"junk").unwrap();
        let d = load_directory(tmp.path(), [2, 2, 1]).unwrap();
        assert_eq!(d.class_names, vec!["a", "b"]);
        assert_eq!(d.labels(), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(d.samples[1].image.data(), &[51.0; 4]);
        assert_eq!(d.samples[4].image.data(), &[1.0; 4]);
        assert_eq!(load_directory(tmp.path(), [2, 2, 1]).unwrap(), d);
    }

    #[test]
    fn gray_is_replicated_and_resized() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path(), &["x", "y"], 1);
        let d = load_directory(tmp.path(), [5, 3, 3]).unwrap();
        assert_eq!(d.image_dims().unwrap(), &[5, 3, 3]);
        assert!(d.samples[1].image.data().iter().all(|&v| v == 50.0));
    }

    #[test]
    fn directory_errors() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path(), &["only"], 2);
        assert!(matches!(load_directory(tmp.path(), [2, 2, 1]), Err(Error::Dataset(_))));
        std::fs::create_dir(tmp.path().join("empty")).unwrap();
        let err = load_directory(tmp.path(), [2, 2, 1]).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn undecodable_files_fail_or_skip() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path(), &["a", "b"], 2);
        let bad = tmp.path().join("a/zz.pgm");
        std::fs::write(&bad, b"not an image").unwrap();
        let err = load_directory(tmp.path(), [2, 2, 1]).unwrap_err();
        assert!(err.to_string().contains("zz.pgm"), "{err}");
        assert!(err.is_data_error());
        let opts = LoadOptions { skip_undecodable: true };
        let loaded = load_directory_with(tmp.path(), [2, 2, 1], &opts).unwrap();
        assert_eq!(loaded.dataset.len(), 4);
        assert_eq!(loaded.skipped.len(), 1);
        assert_eq!(loaded.skipped[0].0, bad);
    }

    #[test]
    fn resize_is_bilinear() {
        let img = Tensor::new([1, 2, 1], vec![0.0, 100.0]).unwrap();
        let up = resize_bilinear(&img, 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 25.0, 75.0, 100.0]);
        let down = resize_bilinear(&up, 1, 2).unwrap();
        assert_eq!(down.data(), &[12.5, 87.5]);
    }

    #[test]
    fn split_counts() {
        let (tr, va, te) = split_stratified(&toy(&[100; 10]), &SplitSpec::with_seed(3)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (600, 200, 200));
        let (tr, va, te) = split_stratified(&toy(&[7, 7]), &SplitSpec::default()).unwrap();
        assert_eq!(tr.class_counts(), vec![4, 4]);
        assert_eq!(va.class_counts(), vec![1, 1]);
        assert_eq!(te.class_counts(), vec![2, 2]);
        assert!(split_stratified(&toy(&[2, 5]), &SplitSpec::default()).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_input(counts in prop::collection::vec(5usize..40, 2..6), seed in any::<u64>()) {
            let d = toy(&counts);
            let (tr, va, te) = split_stratified(&d, &SplitSpec::with_seed(seed)).unwrap();
            let mut all: Vec<&PathBuf> = tr.samples.iter().chain(&va.samples).chain(&te.samples)
                .map(|s| &s.source_path).collect();
            all.sort();
            let mut want: Vec<&PathBuf> = d.samples.iter().map(|s| &s.source_path).collect();
            want.sort();
            prop_assert_eq!(all, want);
            for (k, &n) in counts.iter().enumerate() {
                let got = tr.class_counts()[k] as f64;
                prop_assert!((got - n as f64 * 0.6).abs() <= 1.0);
                prop_assert!((va.class_counts()[k] as f64 - n as f64 * 0.2).abs() <= 1.0);
            }
            let again = split_stratified(&d, &SplitSpec::with_seed(seed)).unwrap();
            prop_assert_eq!(again.0, tr);
        }
    }

    #[test]
    fn batch_sizes_and_order() {
        let d = toy(&[5, 5]);
        let mut rng = Rng::new(0);
        let it = batches(&d, 4, false, &mut rng).unwrap();
        assert_eq!(it.num_batches(), 3);
        let got: Vec<(Vec<usize>, Vec<usize>)> =
            it.map(|(x, y)| (x.dims().to_vec(), y)).collect();
        assert_eq!(got.iter().map(|g| g.0[0]).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(got.iter().flat_map(|g| g.1.clone()).collect::<Vec<_>>(), d.labels());
        assert!(batches(&d, 0, false, &mut rng).is_err());
    }

    #[test]
    fn shuffled_epochs_are_seeded() {
        let d = toy(&[20, 20]);
        let order = |seed, epoch| -> Vec<f32> {
            let mut rng = Rng::derive(seed, 1, epoch);
            batches(&d, 8, true, &mut rng)
                .unwrap()
                .flat_map(|(x, _)| x.into_data())
                .collect()
        };
        assert_eq!(order(9, 0), order(9, 0));
        assert_ne!(order(9, 0), order(9, 1));
        let mut sorted = order(9, 1);
        sorted.sort_by(f32::total_cmp);
        let mut want: Vec<f32> = d.samples.iter().map(|s| s.image.data()[0]).collect();
        want.sort_by(f32::total_cmp);
        assert_eq!(sorted, want);
    }
}
