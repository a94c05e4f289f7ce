//! The four feature-extraction methods behind a single fitted-projection
//! abstraction.
//!
//! A fitted transform maps an L-band spectrum `x` to `K` features as
//! `y = projection * (x - mean) + offset`. PCA, LDA and ICA store the sample
//! mean and a zero offset. The class-wise variant concatenates one PCA block
//! per class; each block is centered on its own class mean, which is folded
//! into the offset so that application stays a single affine map and needs no
//! label information.

use std::fmt;
use std::path::Path;

use crate::error::{HsdrError, Result};
use crate::hsio::{HyperCube, LabelRaster, Partition, SplitAssignment};
use crate::linalg::{covariance, eigh_symmetric};
use crate::mat::{dot, Mat};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Pca,
    Ica,
    Lda,
    Cwpca,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::Ica => "ica",
            Method::Lda => "lda",
            Method::Cwpca => "cwpca",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How class-wise PCA computes per-class statistics.
///
/// `Masked` fits each class block on that class's training pixels only.
/// `Literal` fits on the full-scene subscene in which every pixel outside the
/// class's training set is zeroed, so the zero background enters the
/// statistics; it is kept for fidelity experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CwpcaMode {
    #[default]
    Masked,
    Literal,
}

impl CwpcaMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CwpcaMode::Masked => "masked",
            CwpcaMode::Literal => "literal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformDetails<F> {
    Pca {
        /// Eigenvalues of the retained components, descending.
        explained_variance: Vec<F>,
        /// Trace of the sample covariance (total variance).
        total_variance: F,
    },
    Lda {
        /// Discriminant eigenvalues of the retained directions.
        eigenvalues: Vec<F>,
    },
    Ica {
        converged: bool,
        iterations: usize,
    },
    Cwpca {
        components_per_class: usize,
        n_classes: usize,
        mode: CwpcaMode,
        /// Classes in block order (always ascending 1..=N).
        class_order: Vec<u16>,
        /// Per-feature affine offset folding in the per-class centering.
        offset: Vec<F>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransform<F> {
    pub method: Method,
    pub input_bands: usize,
    pub output_bands: usize,
    /// Subtracted from each spectrum before projection (length L).
    pub mean: Vec<F>,
    /// K x L; rows are projection directions.
    pub projection: Mat<F>,
    pub details: TransformDetails<F>,
}

impl<F: Scalar> LinearTransform<F> {
    fn offset(&self) -> Option<&[F]> {
        match &self.details {
            TransformDetails::Cwpca { offset, .. } => Some(offset),
            _ => None,
        }
    }

    /// Project one spectrum into the fitted feature space.
    pub fn project_spectrum(&self, spectrum: &[F], out: &mut [F]) {
        debug_assert_eq!(spectrum.len(), self.input_bands);
        debug_assert_eq!(out.len(), self.output_bands);
        let offset = self.offset();
        for (i, slot) in out.iter_mut().enumerate() {
            let row = self.projection.row(i);
            let mut acc = F::zero();
            for ((p, x), mu) in row.iter().zip(spectrum).zip(&self.mean) {
                acc += *p * (*x - *mu);
            }
            if let Some(off) = offset {
                acc += off[i];
            }
            *slot = acc;
        }
    }
}

/// Fit a principal component analysis with `k` retained components.
pub fn fit_pca<F: Scalar>(samples: &Mat<F>, k: usize) -> Result<LinearTransform<F>> {
    let l = samples.cols();
    if k < 1 || k > l {
        return Err(HsdrError::InvalidK { k, max: l });
    }
    if samples.rows() < 2 {
        return Err(HsdrError::InsufficientSamples {
            have: samples.rows(),
            need: 2,
        });
    }
    let stats = covariance(samples)?;
    let eig = eigh_symmetric(&stats.covariance)?;

    let mut projection = Mat::zeros(k, l);
    for i in 0..k {
        for j in 0..l {
            projection[(i, j)] = eig.eigenvectors[(j, i)];
        }
    }
    Ok(LinearTransform {
        method: Method::Pca,
        input_bands: l,
        output_bands: k,
        mean: stats.mean,
        projection,
        details: TransformDetails::Pca {
            explained_variance: eig.eigenvalues[..k].to_vec(),
            total_variance: stats.covariance.trace(),
        },
    })
}

/// Fit class-wise PCA: one `m`-component PCA per class on its training
/// pixels, blocks stacked in ascending class order into a `m*N x L`
/// projection.
pub fn fit_cwpca<F: Scalar>(
    cube: &HyperCube,
    raster: &LabelRaster,
    split: &SplitAssignment,
    m: usize,
    mode: CwpcaMode,
) -> Result<LinearTransform<F>> {
    if cube.width() != raster.width() || cube.height() != raster.height() {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("raster of {}x{}", cube.width(), cube.height()),
            actual: format!("{}x{}", raster.width(), raster.height()),
        });
    }
    let n_classes = raster.n_classes();
    if n_classes == 0 {
        return Err(HsdrError::EmptyInput("raster has no labeled pixels"));
    }
    let l = cube.bands();
    if m == 0 || m * n_classes > l {
        return Err(HsdrError::InvalidM {
            m,
            n_classes,
            bands: l,
        });
    }

    let k = m * n_classes;
    let mut projection = Mat::zeros(k, l);
    let mut offset = vec![F::zero(); k];
    for class in 1..=n_classes as u16 {
        let block = match mode {
            CwpcaMode::Masked => {
                let samples = class_train_samples::<F>(cube, raster, split, class);
                if samples.rows() < 2 {
                    return Err(HsdrError::InsufficientClassSamples {
                        class,
                        have: samples.rows(),
                        need: 2,
                    });
                }
                fit_pca(&samples, m)?
            }
            CwpcaMode::Literal => {
                let train_count = count_class_train(raster, split, class);
                if train_count < 2 {
                    return Err(HsdrError::InsufficientClassSamples {
                        class,
                        have: train_count,
                        need: 2,
                    });
                }
                let subscene = zero_filled_subscene::<F>(cube, raster, split, class);
                fit_pca(&subscene, m)?
            }
        };
        let base = (class as usize - 1) * m;
        let block_offset = block.projection.matvec(&block.mean);
        for j in 0..m {
            projection
                .row_mut(base + j)
                .copy_from_slice(block.projection.row(j));
            offset[base + j] = -block_offset[j];
        }
    }

    Ok(LinearTransform {
        method: Method::Cwpca,
        input_bands: l,
        output_bands: k,
        mean: vec![F::zero(); l],
        projection,
        details: TransformDetails::Cwpca {
            components_per_class: m,
            n_classes,
            mode,
            class_order: (1..=n_classes as u16).collect(),
            offset,
        },
    })
}

fn count_class_train(raster: &LabelRaster, split: &SplitAssignment, class: u16) -> usize {
    let mut count = 0;
    for y in 0..raster.height() {
        for x in 0..raster.width() {
            if raster.label(x, y) == class && split.partition(x, y) == Partition::Train {
                count += 1;
            }
        }
    }
    count
}

/// Training spectra of one class, in raster scan order.
pub fn class_train_samples<F: Scalar>(
    cube: &HyperCube,
    raster: &LabelRaster,
    split: &SplitAssignment,
    class: u16,
) -> Mat<F> {
    let bands = cube.bands();
    let mut rows: Vec<F> = Vec::new();
    let mut count = 0;
    let mut spectrum = vec![F::zero(); bands];
    for y in 0..raster.height() {
        for x in 0..raster.width() {
            if raster.label(x, y) == class && split.partition(x, y) == Partition::Train {
                cube.spectrum_into(x, y, &mut spectrum);
                rows.extend_from_slice(&spectrum);
                count += 1;
            }
        }
    }
    Mat::from_vec(count, bands, rows).expect("consistent row construction")
}

fn zero_filled_subscene<F: Scalar>(
    cube: &HyperCube,
    raster: &LabelRaster,
    split: &SplitAssignment,
    class: u16,
) -> Mat<F> {
    let bands = cube.bands();
    let mut subscene = Mat::zeros(cube.pixels(), bands);
    let mut spectrum = vec![F::zero(); bands];
    let mut row = 0;
    for y in 0..cube.height() {
        for x in 0..cube.width() {
            if raster.label(x, y) == class && split.partition(x, y) == Partition::Train {
                cube.spectrum_into(x, y, &mut spectrum);
                subscene.row_mut(row).copy_from_slice(&spectrum);
            }
            row += 1;
        }
    }
    subscene
}

/// Fisher discriminant directions via the symmetrized whitening formulation.
///
/// Within-class scatter is regularized by `eps * I` with
/// `eps = 1e-6 * trace(S_w) / L` so small classes cannot make it singular.
pub fn fit_lda<F: Scalar>(samples: &Mat<F>, labels: &[u16], k: usize) -> Result<LinearTransform<F>> {
    let m = samples.rows();
    let l = samples.cols();
    if labels.len() != m {
        return Err(HsdrError::LengthMismatch {
            left: m,
            right: labels.len(),
        });
    }
    if m == 0 {
        return Err(HsdrError::EmptyInput("lda samples"));
    }
    let n_classes = *labels.iter().max().unwrap() as usize;
    if labels.iter().any(|&l| l == 0) {
        return Err(HsdrError::LabelOutOfRange {
            label: 0,
            n_classes,
        });
    }
    if k < 1 || k > n_classes.min(l) {
        return Err(HsdrError::InvalidK {
            k,
            max: n_classes.min(l),
        });
    }

    let mut counts = vec![0usize; n_classes];
    for &label in labels {
        counts[label as usize - 1] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count < 2 {
            return Err(HsdrError::InsufficientClassSamples {
                class: (c + 1) as u16,
                have: count,
                need: 2,
            });
        }
    }

    let mut class_means = Mat::zeros(n_classes, l);
    let mut global_mean = vec![F::zero(); l];
    for (row, &label) in samples.iter_rows().zip(labels) {
        let dst = class_means.row_mut(label as usize - 1);
        for ((d, v), g) in dst.iter_mut().zip(row).zip(global_mean.iter_mut()) {
            *d += *v;
            *g += *v;
        }
    }
    let inv_m = F::one() / F::from_usize(m).unwrap();
    for g in &mut global_mean {
        *g *= inv_m;
    }
    for c in 0..n_classes {
        let inv = F::one() / F::from_usize(counts[c]).unwrap();
        for v in class_means.row_mut(c) {
            *v *= inv;
        }
    }

    // scatter matrices, accumulated on the upper triangle and mirrored
    let mut s_w = Mat::zeros(l, l);
    let mut centered = vec![F::zero(); l];
    for (row, &label) in samples.iter_rows().zip(labels) {
        let mu = class_means.row(label as usize - 1);
        for ((c, v), mv) in centered.iter_mut().zip(row).zip(mu) {
            *c = *v - *mv;
        }
        accumulate_outer_upper(&mut s_w, &centered);
    }
    mirror_upper(&mut s_w);

    let mut s_b = Mat::zeros(l, l);
    for c in 0..n_classes {
        let mu = class_means.row(c);
        for ((d, v), g) in centered.iter_mut().zip(mu).zip(&global_mean) {
            *d = (*v - *g) * F::from_usize(counts[c]).unwrap().sqrt();
        }
        accumulate_outer_upper(&mut s_b, &centered);
    }
    mirror_upper(&mut s_b);

    let trace_w = s_w.trace();
    if trace_w == F::zero() {
        return Err(HsdrError::SingularScatter);
    }
    let eps = F::of(1e-6) * trace_w / F::from_usize(l).unwrap();
    for i in 0..l {
        s_w[(i, i)] += eps;
    }

    // whitening of S_w, then an ordinary symmetric problem on S_b
    let eig_w = eigh_symmetric(&s_w)?;
    let lambda_floor = eig_w.eigenvalues[0].max(F::one()) * F::of(1e-14);
    let mut whiten = Mat::zeros(l, l);
    for i in 0..l {
        let inv_sqrt = F::one() / eig_w.eigenvalues[i].max(lambda_floor).sqrt();
        for r in 0..l {
            whiten[(r, i)] = eig_w.eigenvectors[(r, i)] * inv_sqrt;
        }
    }
    let whiten = whiten.matmul(&eig_w.eigenvectors.transpose());

    let mut m_sym = whiten.matmul(&s_b).matmul(&whiten);
    for i in 0..l {
        for j in (i + 1)..l {
            let avg = (m_sym[(i, j)] + m_sym[(j, i)]) * F::of(0.5);
            m_sym[(i, j)] = avg;
            m_sym[(j, i)] = avg;
        }
    }
    let eig_b = eigh_symmetric(&m_sym)?;

    let mut projection = Mat::zeros(k, l);
    for i in 0..k {
        let direction = whiten.matvec(&eig_b.eigenvectors.column(i));
        let norm = dot(&direction, &direction).sqrt();
        let scale = if norm > F::zero() {
            F::one() / norm
        } else {
            F::one()
        };
        let mut best = F::zero();
        let mut flip = false;
        for &v in &direction {
            if v.abs() > best {
                best = v.abs();
                flip = v < F::zero();
            }
        }
        let sign = if flip { -scale } else { scale };
        for (dst, v) in projection.row_mut(i).iter_mut().zip(&direction) {
            *dst = *v * sign;
        }
    }

    Ok(LinearTransform {
        method: Method::Lda,
        input_bands: l,
        output_bands: k,
        mean: global_mean,
        projection,
        details: TransformDetails::Lda {
            eigenvalues: eig_b.eigenvalues[..k].to_vec(),
        },
    })
}

fn accumulate_outer_upper<F: Scalar>(target: &mut Mat<F>, v: &[F]) {
    let l = v.len();
    for i in 0..l {
        let vi = v[i];
        let dst = &mut target.row_mut(i)[i..];
        for (d, vj) in dst.iter_mut().zip(&v[i..]) {
            *d += vi * *vj;
        }
    }
}

fn mirror_upper<F: Scalar>(target: &mut Mat<F>) {
    let l = target.rows();
    for i in 0..l {
        for j in (i + 1)..l {
            target[(j, i)] = target[(i, j)];
        }
    }
}

/// Iteration cap of the FastICA fixed point.
pub const ICA_MAX_ITERATIONS: usize = 500;
/// Convergence tolerance on `max_i ||diag(W_new W_old^T)_ii| - 1|`.
pub const ICA_TOL: f64 = 1e-6;

/// Symmetric FastICA with tanh nonlinearity on PCA-whitened data.
///
/// Non-convergence is not a hard failure: the best iterate is returned with
/// `converged = false` recorded in the details.
pub fn fit_ica<F: Scalar>(samples: &Mat<F>, k: usize, seed: u64) -> Result<LinearTransform<F>> {
    let m = samples.rows();
    let l = samples.cols();
    if k < 1 || k > l {
        return Err(HsdrError::InvalidK { k, max: l });
    }
    if m <= k {
        return Err(HsdrError::InsufficientSamples {
            have: m,
            need: k + 1,
        });
    }

    let stats = covariance(samples)?;
    let eig = eigh_symmetric(&stats.covariance)?;
    if eig.eigenvalues[0] <= F::zero() {
        return Err(HsdrError::DegenerateData(
            "ica requires nonzero sample variance".into(),
        ));
    }
    let floor = eig.eigenvalues[0] * F::of(1e-12);
    let mut whiten = Mat::zeros(k, l);
    for i in 0..k {
        let inv_sqrt = F::one() / eig.eigenvalues[i].max(floor).sqrt();
        for j in 0..l {
            whiten[(i, j)] = eig.eigenvectors[(j, i)] * inv_sqrt;
        }
    }

    // whitened samples, M x k
    let mut z = Mat::zeros(m, k);
    let mut centered = vec![F::zero(); l];
    for (r, row) in samples.iter_rows().enumerate() {
        for ((c, v), mu) in centered.iter_mut().zip(row).zip(&stats.mean) {
            *c = *v - *mu;
        }
        let out = z.row_mut(r);
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = dot(whiten.row(i), &centered);
        }
    }

    let mut rng = SeededRng::new(seed);
    let mut w = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            w[(i, j)] = F::of(rng.uniform_in(-1.0, 1.0));
        }
    }
    w = symmetric_decorrelation(&w)?;

    let inv_m = F::one() / F::from_usize(m).unwrap();
    let tol = F::of(ICA_TOL);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=ICA_MAX_ITERATIONS {
        iterations = iter;
        let mut w_new = Mat::zeros(k, k);
        for i in 0..k {
            let wi = w.row(i).to_vec();
            let mut zt_g = vec![F::zero(); k];
            let mut gprime_sum = F::zero();
            for row in z.iter_rows() {
                let u = dot(row, &wi);
                let g = u.tanh();
                gprime_sum += F::one() - g * g;
                for (acc, v) in zt_g.iter_mut().zip(row) {
                    *acc += *v * g;
                }
            }
            let gprime_mean = gprime_sum * inv_m;
            for (slot, (acc, wv)) in w_new.row_mut(i).iter_mut().zip(zt_g.iter().zip(&wi)) {
                *slot = *acc * inv_m - gprime_mean * *wv;
            }
        }
        let w_new = symmetric_decorrelation(&w_new)?;

        let mut lim = F::zero();
        for i in 0..k {
            let d = dot(w_new.row(i), w.row(i)).abs() - F::one();
            lim = lim.max(d.abs());
        }
        w = w_new;
        if lim < tol {
            converged = true;
            break;
        }
    }

    Ok(LinearTransform {
        method: Method::Ica,
        input_bands: l,
        output_bands: k,
        mean: stats.mean,
        projection: w.matmul(&whiten),
        details: TransformDetails::Ica {
            converged,
            iterations,
        },
    })
}

/// `W <- (W W^T)^{-1/2} W`
fn symmetric_decorrelation<F: Scalar>(w: &Mat<F>) -> Result<Mat<F>> {
    let s = w.matmul(&w.transpose());
    let mut sym = s;
    let k = sym.rows();
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = (sym[(i, j)] + sym[(j, i)]) * F::of(0.5);
            sym[(i, j)] = avg;
            sym[(j, i)] = avg;
        }
    }
    let eig = eigh_symmetric(&sym)?;
    let floor = eig.eigenvalues[0].max(F::one()) * F::of(1e-14);
    let mut inv_sqrt = Mat::zeros(k, k);
    for i in 0..k {
        let scale = F::one() / eig.eigenvalues[i].max(floor).sqrt();
        for r in 0..k {
            inv_sqrt[(r, i)] = eig.eigenvectors[(r, i)] * scale;
        }
    }
    Ok(inv_sqrt.matmul(&eig.eigenvectors.transpose()).matmul(w))
}

/// Apply a fitted transform to every pixel of a cube, labeled or not.
pub fn apply<F: Scalar>(transform: &LinearTransform<F>, cube: &HyperCube) -> Result<HyperCube> {
    if cube.bands() != transform.input_bands {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("{} bands", transform.input_bands),
            actual: format!("{}", cube.bands()),
        });
    }
    let (width, height) = (cube.width(), cube.height());
    let k = transform.output_bands;
    let mut data = vec![0.0f32; width * height * k];
    let mut spectrum = vec![F::zero(); cube.bands()];
    let mut features = vec![F::zero(); k];
    for y in 0..height {
        for x in 0..width {
            cube.spectrum_into(x, y, &mut spectrum);
            transform.project_spectrum(&spectrum, &mut features);
            for (b, v) in features.iter().enumerate() {
                data[(b * height + y) * width + x] = v.to_f64().unwrap_or(f64::NAN) as f32;
            }
        }
    }
    HyperCube::from_data(width, height, k, data)
}

/// Apply a fitted transform to a sample matrix (`M x L` -> `M x K`).
pub fn apply_samples<F: Scalar>(transform: &LinearTransform<F>, samples: &Mat<F>) -> Result<Mat<F>> {
    if samples.cols() != transform.input_bands {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("{} columns", transform.input_bands),
            actual: format!("{}", samples.cols()),
        });
    }
    let mut out = Mat::zeros(samples.rows(), transform.output_bands);
    let mut features = vec![F::zero(); transform.output_bands];
    for (r, row) in samples.iter_rows().enumerate() {
        transform.project_spectrum(row, &mut features);
        out.row_mut(r).copy_from_slice(&features);
    }
    Ok(out)
}

const TRANSFORM_MAGIC: &str = "HSDT 1";

/// Persist a transform: ASCII header followed by raw little-endian arrays.
/// Round-trips bit-for-bit.
pub fn save_transform<F: Scalar>(t: &LinearTransform<F>, path: impl AsRef<Path>) -> Result<()> {
    let mut header = String::new();
    header.push_str(TRANSFORM_MAGIC);
    header.push('\n');
    header.push_str(&format!("scalar {}\n", F::NAME));
    header.push_str(&format!("method {}\n", t.method));
    header.push_str(&format!("input_bands {}\n", t.input_bands));
    header.push_str(&format!("output_bands {}\n", t.output_bands));

    let mut arrays: Vec<(&str, Vec<F>)> = vec![
        ("mean", t.mean.clone()),
        ("projection", t.projection.as_slice().to_vec()),
    ];
    match &t.details {
        TransformDetails::Pca {
            explained_variance,
            total_variance,
        } => {
            arrays.push(("explained_variance", explained_variance.clone()));
            arrays.push(("total_variance", vec![*total_variance]));
        }
        TransformDetails::Lda { eigenvalues } => {
            arrays.push(("eigenvalues", eigenvalues.clone()));
        }
        TransformDetails::Ica {
            converged,
            iterations,
        } => {
            header.push_str(&format!("ica_converged {converged}\n"));
            header.push_str(&format!("ica_iterations {iterations}\n"));
        }
        TransformDetails::Cwpca {
            components_per_class,
            n_classes,
            mode,
            class_order,
            offset,
        } => {
            header.push_str(&format!("cwpca_m {components_per_class}\n"));
            header.push_str(&format!("cwpca_classes {n_classes}\n"));
            header.push_str(&format!("cwpca_mode {}\n", mode.as_str()));
            let order: Vec<String> = class_order.iter().map(|c| c.to_string()).collect();
            header.push_str(&format!("class_order {}\n", order.join(",")));
            arrays.push(("offset", offset.clone()));
        }
    }
    for (name, values) in &arrays {
        header.push_str(&format!("array {name} {}\n", values.len()));
    }
    header.push_str("end\n");

    let mut bytes = header.into_bytes();
    for (_, values) in &arrays {
        for v in values {
            v.write_le(&mut bytes);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_transform<F: Scalar>(path: impl AsRef<Path>) -> Result<LinearTransform<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| HsdrError::FormatError(format!("{}: {msg}", path.display()));

    let end_marker = b"\nend\n";
    let end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| fail("missing end-of-header marker"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| fail("non-utf8 header"))?;
    let payload = &bytes[end + end_marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(TRANSFORM_MAGIC) {
        return Err(fail("not an HSDT transform file"));
    }
    let mut scalar = None;
    let mut method = None;
    let mut input_bands = None;
    let mut output_bands = None;
    let mut ica_converged = None;
    let mut ica_iterations = None;
    let mut cwpca_m = None;
    let mut cwpca_classes = None;
    let mut cwpca_mode = None;
    let mut class_order: Option<Vec<u16>> = None;
    let mut array_spec: Vec<(String, usize)> = Vec::new();
    for line in lines {
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| fail(&format!("malformed header line {line:?}")))?;
        match key {
            "scalar" => scalar = Some(value.to_string()),
            "method" => method = Some(value.to_string()),
            "input_bands" => input_bands = value.parse::<usize>().ok(),
            "output_bands" => output_bands = value.parse::<usize>().ok(),
            "ica_converged" => ica_converged = value.parse::<bool>().ok(),
            "ica_iterations" => ica_iterations = value.parse::<usize>().ok(),
            "cwpca_m" => cwpca_m = value.parse::<usize>().ok(),
            "cwpca_classes" => cwpca_classes = value.parse::<usize>().ok(),
            "cwpca_mode" => cwpca_mode = Some(value.to_string()),
            "class_order" => {
                let parsed: std::result::Result<Vec<u16>, _> =
                    value.split(',').map(|v| v.parse::<u16>()).collect();
                class_order = parsed.ok();
            }
            "array" => {
                let (name, len) = value
                    .split_once(' ')
                    .ok_or_else(|| fail("malformed array line"))?;
                let len = len
                    .parse::<usize>()
                    .map_err(|_| fail("bad array length"))?;
                array_spec.push((name.to_string(), len));
            }
            _ => return Err(fail(&format!("unknown header key {key:?}"))),
        }
    }

    let scalar = scalar.ok_or_else(|| fail("missing scalar"))?;
    if scalar != F::NAME {
        return Err(fail(&format!(
            "scalar mismatch: file has {scalar}, loading as {}",
            F::NAME
        )));
    }
    let input_bands = input_bands.ok_or_else(|| fail("missing input_bands"))?;
    let output_bands = output_bands.ok_or_else(|| fail("missing output_bands"))?;

    let expected_bytes: usize = array_spec.iter().map(|(_, len)| len * F::BYTE_WIDTH).sum();
    if payload.len() != expected_bytes {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("{expected_bytes} payload bytes"),
            actual: format!("{}", payload.len()),
        });
    }
    let mut arrays = std::collections::HashMap::new();
    let mut cursor = 0usize;
    for (name, len) in &array_spec {
        let take = len * F::BYTE_WIDTH;
        let values: Vec<F> = payload[cursor..cursor + take]
            .chunks_exact(F::BYTE_WIDTH)
            .map(F::read_le)
            .collect();
        cursor += take;
        arrays.insert(name.clone(), values);
    }
    let mut take_array = |name: &str| {
        arrays
            .remove(name)
            .ok_or_else(|| fail(&format!("missing array {name:?}")))
    };

    let mean = take_array("mean")?;
    let projection = Mat::from_vec(output_bands, input_bands, take_array("projection")?)?;
    if mean.len() != input_bands {
        return Err(fail("mean length does not match input_bands"));
    }

    let method = method.ok_or_else(|| fail("missing method"))?;
    let (method, details) = match method.as_str() {
        "pca" => {
            let explained_variance = take_array("explained_variance")?;
            let total = take_array("total_variance")?;
            if total.len() != 1 {
                return Err(fail("total_variance must have one element"));
            }
            (
                Method::Pca,
                TransformDetails::Pca {
                    explained_variance,
                    total_variance: total[0],
                },
            )
        }
        "lda" => (
            Method::Lda,
            TransformDetails::Lda {
                eigenvalues: take_array("eigenvalues")?,
            },
        ),
        "ica" => (
            Method::Ica,
            TransformDetails::Ica {
                converged: ica_converged.ok_or_else(|| fail("missing ica_converged"))?,
                iterations: ica_iterations.ok_or_else(|| fail("missing ica_iterations"))?,
            },
        ),
        "cwpca" => {
            let mode = match cwpca_mode.as_deref() {
                Some("masked") => CwpcaMode::Masked,
                Some("literal") => CwpcaMode::Literal,
                _ => return Err(fail("missing or bad cwpca_mode")),
            };
            (
                Method::Cwpca,
                TransformDetails::Cwpca {
                    components_per_class: cwpca_m.ok_or_else(|| fail("missing cwpca_m"))?,
                    n_classes: cwpca_classes.ok_or_else(|| fail("missing cwpca_classes"))?,
                    mode,
                    class_order: class_order.ok_or_else(|| fail("missing class_order"))?,
                    offset: take_array("offset")?,
                },
            )
        }
        other => return Err(fail(&format!("unknown method {other:?}"))),
    };

    Ok(LinearTransform {
        method,
        input_bands,
        output_bands,
        mean,
        projection,
        details,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsio::stratified_split;
    use crate::synth::{generate, ClassSpec, SceneSpec};

    fn line_samples() -> Mat<f64> {
        // points on y = x
        let ts = [-2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        Mat::from_rows(&ts.iter().map(|&t| vec![t, t]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pca_line_direction_and_full_variance() {
        let samples = line_samples();
        let t = fit_pca(&samples, 1).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((t.projection[(0, 0)] - s).abs() < 1e-12);
        assert!((t.projection[(0, 1)] - s).abs() < 1e-12);
        match &t.details {
            TransformDetails::Pca {
                explained_variance,
                total_variance,
            } => {
                assert!((explained_variance[0] / total_variance - 1.0).abs() < 1e-12);
            }
            _ => panic!("wrong details"),
        }
    }

    #[test]
    fn pca_full_rank_round_trip() {
        let mut rng = SeededRng::new(21);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| rng.uniform_in(-3.0, 3.0)).collect())
            .collect();
        let samples = Mat::from_rows(&rows).unwrap();
        let t = fit_pca(&samples, 4).unwrap();
        let projected = apply_samples(&t, &samples).unwrap();
        // orthonormal rows: inverse is the transpose
        let back = projected.matmul(&t.projection);
        for (r, row) in back.iter_rows().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expect = samples[(r, j)] - t.mean[j];
                assert!((v - expect).abs() < 1e-6, "({r},{j})");
            }
        }
    }

    #[test]
    fn pca_rejects_bad_k() {
        let samples = line_samples();
        assert!(matches!(
            fit_pca(&samples, 0),
            Err(HsdrError::InvalidK { .. })
        ));
        assert!(matches!(
            fit_pca(&samples, 3),
            Err(HsdrError::InvalidK { .. })
        ));
    }

    fn two_axis_scene() -> (HyperCube, LabelRaster, SplitAssignment) {
        let spec = SceneSpec {
            width: 24,
            height: 24,
            bands: 6,
            classes: vec![
                ClassSpec {
                    mean: vec![0.0, 0.0, 4.0, 0.0, 0.0, 0.0],
                    scale: 0.5,
                    fraction: 0.5,
                    name: None,
                },
                ClassSpec {
                    mean: vec![0.0, 0.0, 0.0, 0.0, 3.0, 0.0],
                    scale: 0.5,
                    fraction: 0.5,
                    name: None,
                },
            ],
            noise_sigma: 0.0,
            seed: 5,
        };
        let (cube, raster) = generate(&spec).unwrap();
        let split = stratified_split(&raster, 0.7, 11).unwrap();
        (cube, raster, split)
    }

    #[test]
    fn cwpca_axis_aligned_blocks() {
        let (cube, raster, split) = two_axis_scene();
        let t = fit_cwpca::<f64>(&cube, &raster, &split, 1, CwpcaMode::Masked).unwrap();
        assert_eq!(t.output_bands, 2);
        // class 1 varies only along band 2, class 2 only along band 4
        assert!((t.projection[(0, 2)].abs() - 1.0).abs() < 1e-9);
        assert!((t.projection[(1, 4)].abs() - 1.0).abs() < 1e-9);
        for b in [0, 1, 3, 4, 5] {
            assert!(t.projection[(0, b)].abs() < 1e-9);
        }
        for b in [0, 1, 2, 3, 5] {
            assert!(t.projection[(1, b)].abs() < 1e-9);
        }
    }

    #[test]
    fn cwpca_masked_blocks_match_per_class_pca_exactly() {
        let (cube, raster, split) = two_axis_scene();
        let m = 2;
        let t = fit_cwpca::<f64>(&cube, &raster, &split, m, CwpcaMode::Masked).unwrap();
        for class in 1..=2u16 {
            let samples = class_train_samples::<f64>(&cube, &raster, &split, class);
            let block = fit_pca(&samples, m).unwrap();
            for j in 0..m {
                let row = t.projection.row((class as usize - 1) * m + j);
                assert_eq!(row, block.projection.row(j), "class {class} row {j}");
            }
        }
    }

    #[test]
    fn cwpca_rejects_m_beyond_bands() {
        let (cube, raster, split) = two_axis_scene();
        assert!(matches!(
            fit_cwpca::<f64>(&cube, &raster, &split, 4, CwpcaMode::Masked),
            Err(HsdrError::InvalidM { .. })
        ));
        assert!(matches!(
            fit_cwpca::<f64>(&cube, &raster, &split, 0, CwpcaMode::Masked),
            Err(HsdrError::InvalidM { .. })
        ));
    }

    #[test]
    fn cwpca_literal_mode_sees_zero_background() {
        let (cube, raster, split) = two_axis_scene();
        let masked = fit_cwpca::<f64>(&cube, &raster, &split, 1, CwpcaMode::Masked).unwrap();
        let literal = fit_cwpca::<f64>(&cube, &raster, &split, 1, CwpcaMode::Literal).unwrap();
        // directions still axis-aligned here, but block means differ
        assert!((literal.projection[(0, 2)].abs() - 1.0).abs() < 1e-9);
        let m_off = match &masked.details {
            TransformDetails::Cwpca { offset, .. } => offset.clone(),
            _ => unreachable!(),
        };
        let l_off = match &literal.details {
            TransformDetails::Cwpca { offset, .. } => offset.clone(),
            _ => unreachable!(),
        };
        assert!((m_off[0].abs() - l_off[0].abs()).abs() > 1e-3);
    }

    fn blob_samples(seed: u64) -> (Mat<f64>, Vec<u16>) {
        let mut rng = SeededRng::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..120 {
            rows.push(vec![
                rng.standard_normal() * 0.4 + 3.0,
                rng.standard_normal() * 0.4 + 1.0,
            ]);
            labels.push(1u16);
        }
        for _ in 0..120 {
            rows.push(vec![
                rng.standard_normal() * 0.4 - 3.0,
                rng.standard_normal() * 0.4 - 1.0,
            ]);
            labels.push(2u16);
        }
        (Mat::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn lda_aligns_with_class_mean_difference() {
        let (samples, labels) = blob_samples(31);
        let t = fit_lda(&samples, &labels, 1).unwrap();
        let diff = [6.0, 2.0];
        let norm = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt();
        let cos = (t.projection[(0, 0)] * diff[0] + t.projection[(0, 1)] * diff[1]) / norm;
        assert!(cos.abs() >= 0.99, "cosine {cos}");
    }

    #[test]
    fn lda_identical_means_returns_without_error() {
        let mut rng = SeededRng::new(8);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            rows.push(vec![rng.standard_normal(), rng.standard_normal()]);
            labels.push((i % 2 + 1) as u16);
        }
        let samples = Mat::from_rows(&rows).unwrap();
        let t = fit_lda(&samples, &labels, 1).unwrap();
        match &t.details {
            TransformDetails::Lda { eigenvalues } => {
                assert!(eigenvalues[0] < 1.0, "near-zero fisher ratio expected");
            }
            _ => panic!("wrong details"),
        }
    }

    #[test]
    fn lda_rejects_undersized_class() {
        let samples = Mat::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![5.0, 5.0],
        ])
        .unwrap();
        let labels = vec![1, 1, 2];
        assert!(matches!(
            fit_lda(&samples, &labels, 1),
            Err(HsdrError::InsufficientClassSamples { class: 2, .. })
        ));
    }

    fn mixed_uniform_sources(seed: u64, n: usize) -> (Mat<f64>, [[f64; 2]; 2]) {
        let mut rng = SeededRng::new(seed);
        let mixing = [[0.9, 0.4], [-0.3, 0.8]];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let s1 = rng.uniform_in(-1.7320508, 1.7320508);
                let s2 = rng.uniform_in(-1.7320508, 1.7320508);
                vec![
                    mixing[0][0] * s1 + mixing[0][1] * s2,
                    mixing[1][0] * s1 + mixing[1][1] * s2,
                ]
            })
            .collect();
        (Mat::from_rows(&rows).unwrap(), mixing)
    }

    fn amari_index(g: &Mat<f64>) -> f64 {
        let n = g.rows();
        let mut total = 0.0;
        for i in 0..n {
            let row_max = (0..n).map(|j| g[(i, j)].abs()).fold(0.0, f64::max);
            let row_sum: f64 = (0..n).map(|j| g[(i, j)].abs()).sum();
            total += row_sum / row_max - 1.0;
        }
        for j in 0..n {
            let col_max = (0..n).map(|i| g[(i, j)].abs()).fold(0.0, f64::max);
            let col_sum: f64 = (0..n).map(|i| g[(i, j)].abs()).sum();
            total += col_sum / col_max - 1.0;
        }
        total / (2.0 * n as f64 * (n as f64 - 1.0))
    }

    #[test]
    fn ica_recovers_mixed_uniform_sources() {
        let (samples, mixing) = mixed_uniform_sources(77, 4000);
        let t = fit_ica(&samples, 2, 123).unwrap();
        let mixing_mat = Mat::from_rows(&[mixing[0].to_vec(), mixing[1].to_vec()]).unwrap();
        let g = t.projection.matmul(&mixing_mat);
        let index = amari_index(&g);
        assert!(index < 0.1, "amari index {index}");
        match &t.details {
            TransformDetails::Ica { converged, .. } => assert!(converged),
            _ => panic!("wrong details"),
        }
    }

    #[test]
    fn ica_output_is_whitened() {
        let (samples, _) = mixed_uniform_sources(78, 4000);
        let t = fit_ica(&samples, 2, 9).unwrap();
        let out = apply_samples(&t, &samples).unwrap();
        let stats = covariance(&out).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (stats.covariance[(i, j)] - expect).abs() < 1e-4,
                    "cov({i},{j}) = {}",
                    stats.covariance[(i, j)]
                );
            }
        }
    }

    #[test]
    fn ica_deterministic_for_fixed_seed() {
        let (samples, _) = mixed_uniform_sources(79, 1000);
        let a = fit_ica(&samples, 2, 5).unwrap();
        let b = fit_ica(&samples, 2, 5).unwrap();
        assert_eq!(a.projection, b.projection);
        let c = fit_ica(&samples, 2, 6).unwrap();
        assert_ne!(c.projection, a.projection);
    }

    #[test]
    fn apply_identity_transform_preserves_cube() {
        let (cube, _, _) = two_axis_scene();
        let l = cube.bands();
        let t = LinearTransform {
            method: Method::Pca,
            input_bands: l,
            output_bands: l,
            mean: vec![0.0f64; l],
            projection: Mat::identity(l),
            details: TransformDetails::Pca {
                explained_variance: vec![0.0; l],
                total_variance: 0.0,
            },
        };
        let out = apply(&t, &cube).unwrap();
        assert_eq!(out.data(), cube.data());
    }

    #[test]
    fn apply_rejects_band_mismatch() {
        let (cube, _, _) = two_axis_scene();
        let t = fit_pca(&line_samples(), 1).unwrap();
        assert!(matches!(
            apply(&t, &cube),
            Err(HsdrError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn transform_files_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (cube, raster, split) = two_axis_scene();
        let (samples, labels, _) = crate::hsio::cube_to_samples::<f64>(
            &cube,
            &raster,
            crate::hsio::SampleSubset::Train(&split),
        )
        .unwrap();

        let transforms = vec![
            fit_pca(&samples, 3).unwrap(),
            fit_lda(&samples, &labels, 2).unwrap(),
            fit_ica(&samples, 2, 4).unwrap(),
            fit_cwpca(&cube, &raster, &split, 2, CwpcaMode::Masked).unwrap(),
            fit_cwpca(&cube, &raster, &split, 1, CwpcaMode::Literal).unwrap(),
        ];
        for (i, t) in transforms.iter().enumerate() {
            let path = dir.path().join(format!("t{i}.hst"));
            save_transform(t, &path).unwrap();
            let back: LinearTransform<f64> = load_transform(&path).unwrap();
            assert_eq!(&back, t, "transform {i}");
        }
    }

    #[test]
    fn transform_scalar_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hst");
        let t = fit_pca(&line_samples(), 1).unwrap();
        save_transform(&t, &path).unwrap();
        assert!(matches!(
            load_transform::<f32>(&path),
            Err(HsdrError::FormatError(_))
        ));
    }
}
