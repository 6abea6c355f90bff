//! Open-world datasets: synthetic Gaussian blobs and the stratified
//! labeled/validation/test split.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::GraphOperator;
use crate::numerics::{self, Mat, Rng};

/// Labeled / validation / test fractions applied per known class.
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.1, 0.1, 0.8);
/// Fraction of each unknown class placed in the validation pool.
pub const DEFAULT_UNKNOWN_IN_TRAIN: f64 = 0.2;

/// Features and ground truth before any split.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub modalities: Vec<Mat>,
    pub labels: Vec<usize>,
    pub known_classes: Vec<usize>,
}

impl RawDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::invalid("dataset has no modalities"));
        }
        for (m, x) in self.modalities.iter().enumerate() {
            if x.rows() != self.labels.len() {
                return Err(Error::invalid(alloc::format!(
                    "modality {m} has {} rows but there are {} labels",
                    x.rows(),
                    self.labels.len()
                )));
            }
        }
        if self.known_classes.is_empty() {
            return Err(Error::invalid("no known classes"));
        }
        Ok(())
    }
}

/// Partition masks over the N samples. `labeled_train`, `validation` and
/// `test` are pairwise disjoint and cover every sample; `unlabeled` is the
/// pool read by the unknown loss (every non-labeled, non-test sample).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masks {
    pub labeled_train: Vec<bool>,
    pub unlabeled: Vec<bool>,
    pub validation: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn count(mask: &[bool]) -> usize {
        mask.iter().filter(|&&b| b).count()
    }
}

/// Normalized features, ground truth, known-class set and split.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenWorldDataset {
    pub modalities: Vec<Mat>,
    pub labels: Vec<usize>,
    /// Sorted ascending; position in this list is the model's class index.
    pub known_classes: Vec<usize>,
    pub masks: Masks,
    /// Optional precomputed propagation operator per modality (for example
    /// from an edge list); missing ones are built from features on demand.
    pub graphs: Vec<Option<GraphOperator>>,
}

impl OpenWorldDataset {
    /// Normalizes every modality to [0, 1] and splits.
    pub fn from_raw(
        raw: RawDataset,
        ratios: (f64, f64, f64),
        unknown_in_train: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        raw.validate()?;
        let mut known = raw.known_classes.clone();
        known.sort_unstable();
        known.dedup();
        let masks = split_open_world(&raw.labels, &known, ratios, unknown_in_train, rng)?;
        Ok(OpenWorldDataset {
            graphs: vec![None; raw.modalities.len()],
            modalities: raw
                .modalities
                .iter()
                .map(numerics::minmax_normalize)
                .collect(),
            labels: raw.labels,
            known_classes: known,
            masks,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Number of known classes K.
    pub fn k(&self) -> usize {
        self.known_classes.len()
    }

    /// Class index of each sample within the known set, `None` for unknowns.
    pub fn known_index(&self, i: usize) -> Option<usize> {
        self.known_classes.binary_search(&self.labels[i]).ok()
    }

    /// Per-sample training targets: the known-class index where labeled,
    /// `usize::MAX` elsewhere. Only `labeled_train` rows carry a label, so
    /// no other ground truth can reach a loss.
    pub fn training_targets(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| {
                if self.masks.labeled_train[i] {
                    self.known_index(i).expect("labeled rows are known")
                } else {
                    usize::MAX
                }
            })
            .collect()
    }

    /// The same dataset with only the listed modalities, in that order.
    pub fn with_modalities(&self, order: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        out.modalities = order
            .iter()
            .map(|&m| {
                self.modalities
                    .get(m)
                    .cloned()
                    .ok_or_else(|| Error::invalid(alloc::format!("no modality {m}")))
            })
            .collect::<Result<_>>()?;
        out.graphs = order.iter().map(|&m| self.graphs[m].clone()).collect();
        Ok(out)
    }
}

/// Stratified open-world split.
///
/// Each known class is shuffled and cut into labeled / validation / test by
/// `ratios` (at least one sample each). Each unknown class sends
/// `unknown_in_train` of its samples to validation with labels hidden and
/// the rest to test.
pub fn split_open_world(
    labels: &[usize],
    known_classes: &[usize],
    ratios: (f64, f64, f64),
    unknown_in_train: f64,
    rng: &mut Rng,
) -> Result<Masks> {
    let (r_lab, r_val, r_test) = ratios;
    if [r_lab, r_val, r_test].iter().any(|&r| !(r >= 0.0))
        || (r_lab + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(alloc::format!(
            "split ratios ({r_lab}, {r_val}, {r_test}) must be non-negative and sum to 1"
        )));
    }
    if !(0.0..=1.0).contains(&unknown_in_train) {
        return Err(Error::Domain {
            what: "unknown_in_train fraction",
            value: unknown_in_train,
        });
    }
    let n = labels.len();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut masks = Masks {
        labeled_train: vec![false; n],
        unlabeled: vec![false; n],
        validation: vec![false; n],
        test: vec![false; n],
    };
    for &c in &classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let count = idx.len();
        if known_classes.contains(&c) {
            if count < 3 {
                return Err(Error::invalid(alloc::format!(
                    "known class {c} has {count} samples; at least 3 are needed"
                )));
            }
            let n_lab = (libm::round(r_lab * count as f64) as usize).max(1);
            let n_val = (libm::round(r_val * count as f64) as usize).max(1);
            let (n_lab, n_val) = if n_lab + n_val >= count {
                (1, 1)
            } else {
                (n_lab, n_val)
            };
            for (pos, &i) in idx.iter().enumerate() {
                if pos < n_lab {
                    masks.labeled_train[i] = true;
                } else if pos < n_lab + n_val {
                    masks.validation[i] = true;
                } else {
                    masks.test[i] = true;
                }
            }
        } else {
            let n_pool = libm::round(unknown_in_train * count as f64) as usize;
            for (pos, &i) in idx.iter().enumerate() {
                if pos < n_pool {
                    masks.validation[i] = true;
                } else {
                    masks.test[i] = true;
                }
            }
        }
    }
    for i in 0..n {
        masks.unlabeled[i] = !masks.labeled_train[i] && !masks.test[i];
    }
    Ok(masks)
}

/// Parameters of [`make_blobs`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub n_per_class: usize,
    pub k_known: usize,
    pub k_unknown: usize,
    pub d_feat: usize,
    /// Pairwise center distance in units of the within-class std.
    pub sep: f64,
    pub m_modalities: usize,
    /// Replace the last modality with label-independent noise.
    pub noise_modality: bool,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            n_per_class: 100,
            k_known: 4,
            k_unknown: 1,
            d_feat: 16,
            sep: 8.0,
            m_modalities: 1,
            noise_modality: false,
        }
    }
}

/// Gaussian blobs in a shared latent space, one random linear projection
/// per modality.
///
/// Latent centers sit on scaled basis vectors so every pair is exactly
/// `sep` apart with unit within-class spread. Classes `0..k_known` are
/// known, the rest unknown.
pub fn make_blobs(spec: &BlobSpec, rng: &mut Rng) -> Result<RawDataset> {
    let BlobSpec {
        n_per_class,
        k_known,
        k_unknown,
        d_feat,
        sep,
        m_modalities,
        noise_modality,
    } = *spec;
    if n_per_class == 0 || k_known == 0 || d_feat == 0 || m_modalities == 0 {
        return Err(Error::invalid("blob counts must be at least 1"));
    }
    if !(sep > 0.0) {
        return Err(Error::Domain {
            what: "sep",
            value: sep,
        });
    }
    let k_total = k_known + k_unknown;
    let latent_dim = k_total.max(2);
    let n = n_per_class * k_total;
    let radius = sep / core::f64::consts::SQRT_2;
    let mut labels = Vec::with_capacity(n);
    let mut latent = Mat::zeros(n, latent_dim);
    for c in 0..k_total {
        for s in 0..n_per_class {
            let i = c * n_per_class + s;
            labels.push(c);
            for j in 0..latent_dim {
                latent[(i, j)] = rng.normal() + if j == c { radius } else { 0.0 };
            }
        }
    }
    let mut modalities = Vec::with_capacity(m_modalities);
    for m in 0..m_modalities {
        if noise_modality && m == m_modalities - 1 && m_modalities > 1 {
            modalities.push(Mat::randn(n, d_feat, rng));
            continue;
        }
        let proj = Mat::randn(latent_dim, d_feat, rng).scale(1.0 / libm::sqrt(latent_dim as f64));
        modalities.push(latent.matmul(&proj)?);
    }
    if noise_modality && m_modalities == 1 {
        modalities[0] = Mat::randn(n, d_feat, rng);
    }
    Ok(RawDataset {
        modalities,
        labels,
        known_classes: (0..k_known).collect(),
    })
}
