//! FFT machinery, centered-patch frequency filters and spectral distances.
//!
//! Conventions: forward transforms are unnormalized, inverse transforms carry
//! the `1/N` factor, and the DC bin sits at index `(0, 0)` until shifted.
//! [`fftshift`] moves it to `(H/2, W/2)` (floor division) for any parity.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Part, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

/// Largest imaginary residue [`ifft2`] tolerates before reporting an asymmetric spectrum.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-3;

/// Complex frequency-domain counterpart of a real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> ComplexSpectrum<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::shape(
                "ComplexSpectrum",
                shape_str(re.shape()),
                shape_str(im.shape()),
            ));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// `|z|` per bin.
    pub fn magnitude(&self) -> Tensor<T> {
        self.re
            .zip_map(&self.im, |a, b| a.hypot(b))
            .expect("re/im shapes agree")
    }

    fn to_complex(&self) -> Vec<Complex<T>> {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&re, &im)| Complex::new(re, im))
            .collect()
    }

    fn from_complex(shape: &[usize], buf: &[Complex<T>]) -> Self {
        Self {
            re: Tensor::new(shape.to_vec(), buf.iter().map(|z| z.re).collect()).expect("shape"),
            im: Tensor::new(shape.to_vec(), buf.iter().map(|z| z.im).collect()).expect("shape"),
        }
    }
}

/// Unnormalized DFT (or unnormalized inverse when `inverse`) of each length-`c`
/// row of a real buffer. Returns (re, im).
pub(crate) fn dft_rows<T: Scalar>(x: &[T], c: usize, inverse: bool) -> (Vec<T>, Vec<T>) {
    let zeros = vec![T::zero(); x.len()];
    dft_rows_complex(x, &zeros, c, inverse)
}

/// As [`dft_rows`] for complex input given as separate (re, im) buffers.
pub(crate) fn dft_rows_complex<T: Scalar>(re: &[T], im: &[T], c: usize, inverse: bool) -> (Vec<T>, Vec<T>) {
    let mut planner = FftPlanner::<T>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(c)
    } else {
        planner.plan_fft_forward(c)
    };
    let mut buf: Vec<Complex<T>> = re.iter().zip(im).map(|(&a, &b)| Complex::new(a, b)).collect();
    if !buf.is_empty() {
        fft.process(&mut buf);
    }
    buf.into_iter().map(|z| (z.re, z.im)).unzip()
}

/// In-place unnormalized 2D transform of a row-major `h x w` buffer.
fn fft2_in_place<T: Scalar>(buf: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(buf);
    let mut cols = vec![Complex::new(T::zero(), T::zero()); h * w];
    for r in 0..h {
        for c in 0..w {
            cols[c * h + r] = buf[r * w + c];
        }
    }
    col_fft.process(&mut cols);
    for r in 0..h {
        for c in 0..w {
            buf[r * w + c] = cols[c * h + r];
        }
    }
}

fn plane_dims<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] if h >= 1 && w >= 1 => Ok((h, w)),
        _ => Err(Error::shape(op, "H x W with H, W >= 1", shape_str(x.shape()))),
    }
}

/// Unnormalized forward 2D DFT of an `H x W` real tensor.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (h, w) = plane_dims("fft2", x)?;
    x.ensure_finite("fft2")?;
    let mut buf: Vec<Complex<T>> = x.data().iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_in_place(&mut buf, h, w, false);
    Ok(ComplexSpectrum::from_complex(&[h, w], &buf))
}

/// Inverse 2D DFT returning the full complex result (with `1/(H*W)` normalization).
pub fn ifft2_complex<T: Scalar>(s: &ComplexSpectrum<T>) -> Result<ComplexSpectrum<T>> {
    let (h, w) = plane_dims("ifft2", &s.re)?;
    let mut buf = s.to_complex();
    fft2_in_place(&mut buf, h, w, true);
    let norm = T::one() / T::of((h * w) as f64);
    for z in &mut buf {
        *z = *z * norm;
    }
    Ok(ComplexSpectrum::from_complex(&[h, w], &buf))
}

/// Inverse 2D DFT keeping the real part, plus the largest `|imag|` that was dropped.
pub fn ifft2_with_residue<T: Scalar>(s: &ComplexSpectrum<T>) -> Result<(Tensor<T>, f64)> {
    let out = ifft2_complex(s)?;
    let residue = out.im.max_abs().f64();
    Ok((out.re, residue))
}

/// Inverse 2D DFT of a spectrum that should be conjugate-symmetric.
///
/// Fails with [`Error::ImaginaryResidue`] when the discarded imaginary part
/// exceeds [`IMAG_RESIDUE_LIMIT`].
pub fn ifft2<T: Scalar>(s: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    let (re, residue) = ifft2_with_residue(s)?;
    if residue > IMAG_RESIDUE_LIMIT {
        return Err(Error::ImaginaryResidue {
            residue,
            limit: IMAG_RESIDUE_LIMIT,
        });
    }
    re.ensure_finite("ifft2")?;
    Ok(re)
}

/// Circularly shifts a row-major `h x w` grid so that `(0,0)` lands on `(h/2, w/2)`.
pub fn shift_grid<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for r in 0..h {
        for c in 0..w {
            out[((r + h / 2) % h) * w + (c + w / 2) % w] = data[r * w + c];
        }
    }
    out
}

/// Inverse of [`shift_grid`].
pub fn unshift_grid<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = data[((r + h / 2) % h) * w + (c + w / 2) % w];
        }
    }
    out
}

fn map_planes<T: Scalar>(s: &ComplexSpectrum<T>, f: fn(&[T], usize, usize) -> Vec<T>) -> Result<ComplexSpectrum<T>> {
    let (h, w) = plane_dims("fftshift", &s.re)?;
    ComplexSpectrum::new(
        Tensor::new(vec![h, w], f(s.re.data(), h, w))?,
        Tensor::new(vec![h, w], f(s.im.data(), h, w))?,
    )
}

/// Moves the DC bin from `(0,0)` to `(H/2, W/2)`.
pub fn fftshift<T: Scalar>(s: &ComplexSpectrum<T>) -> Result<ComplexSpectrum<T>> {
    map_planes(s, shift_grid)
}

/// Undoes [`fftshift`] for any parity.
pub fn ifftshift<T: Scalar>(s: &ComplexSpectrum<T>) -> Result<ComplexSpectrum<T>> {
    map_planes(s, unshift_grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    /// Keeps the centered patch of the shifted spectrum (low frequencies).
    Lpf,
    /// Keeps the centered patch of the unshifted spectrum (high frequencies).
    Hpf,
}

/// Centered `k x k` patch filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub bandwidth: usize,
}

impl FilterSpec {
    pub fn lpf(bandwidth: usize) -> Self {
        Self {
            kind: FilterKind::Lpf,
            bandwidth,
        }
    }

    pub fn hpf(bandwidth: usize) -> Self {
        Self {
            kind: FilterKind::Hpf,
            bandwidth,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.bandwidth > h.min(w) {
            return Err(Error::invalid(format!(
                "bandwidth {} exceeds min({h}, {w})",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// `k = min(H, W)` means no filtering.
    pub fn is_identity(&self, h: usize, w: usize) -> bool {
        self.bandwidth == h.min(w)
    }

    /// Keep-mask over one axis of length `n`, in unshifted (DC at 0) index order.
    fn axis_mask(&self, n: usize) -> Vec<bool> {
        let start = n / 2 - self.bandwidth / 2;
        let mut mask = vec![false; n];
        for pos in start..start + self.bandwidth {
            let idx = match self.kind {
                // position in the shifted layout maps back to (pos - n/2) mod n
                FilterKind::Lpf => (pos + n - n / 2) % n,
                FilterKind::Hpf => pos,
            };
            mask[idx] = true;
        }
        mask
    }
}

/// Applies a centered-patch filter to every `H x W` plane of a tensor of rank >= 2.
///
/// Stages: FFT, keep the centered `k x k` patch (of the shifted layout for
/// LPF, of the raw layout for HPF), inverse FFT, real part. `k = min(H, W)`
/// returns an exact copy and `k = 0` exact zeros.
pub fn apply_filter<T: Scalar>(x: &Tensor<T>, spec: &FilterSpec) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape("apply_filter", "rank >= 2", shape_str(x.shape())));
    }
    let (h, w) = (x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]);
    if h == 0 || w == 0 {
        return Err(Error::shape("apply_filter", "non-empty planes", shape_str(x.shape())));
    }
    spec.validate(h, w)?;
    if spec.is_identity(h, w) {
        return Ok(x.clone());
    }
    if spec.bandwidth == 0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    x.ensure_finite("apply_filter")?;
    let rows = spec.axis_mask(h);
    let cols = spec.axis_mask(w);
    let norm = T::one() / T::of((h * w) as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    for plane in x.data().chunks_exact(h * w) {
        for (z, &v) in buf.iter_mut().zip(plane) {
            *z = Complex::new(v, T::zero());
        }
        fft2_in_place(&mut buf, h, w, false);
        for r in 0..h {
            for c in 0..w {
                if !(rows[r] && cols[c]) {
                    buf[r * w + c] = Complex::new(T::zero(), T::zero());
                }
            }
        }
        fft2_in_place(&mut buf, h, w, true);
        out.extend(buf.iter().map(|z| z.re * norm));
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.ensure_finite("apply_filter")?;
    Ok(out)
}

/// Unnormalized 1D DFT of a vector.
pub fn fft1<T: Scalar>(v: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    if v.rank() != 1 || v.is_empty() {
        return Err(Error::shape("fft1", "length-C vector, C >= 1", shape_str(v.shape())));
    }
    v.ensure_finite("fft1")?;
    let (re, im) = dft_rows(v.data(), v.len(), false);
    ComplexSpectrum::new(Tensor::from_vec(re), Tensor::from_vec(im))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    L1,
    L2,
    Cosine,
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "cosine" | "cos" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown distance metric `{other}`"))),
        }
    }
}

/// Distance between two spectra, applied to the real and imaginary parts.
///
/// * L1: `sum|dre| + sum|dim|`
/// * L2: `sqrt(sum dre^2) + sqrt(sum dim^2)`
/// * cosine: `1 - cos` of the concatenated `(re, im)` vectors; undefined for zero vectors.
pub fn spectral_distance<T: Scalar>(
    a: &ComplexSpectrum<T>,
    b: &ComplexSpectrum<T>,
    metric: DistanceMetric,
) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "spectral_distance",
            shape_str(a.shape()),
            shape_str(b.shape()),
        ));
    }
    let pairs = || {
        a.re.data()
            .iter()
            .zip(b.re.data())
            .chain(a.im.data().iter().zip(b.im.data()))
            .map(|(&x, &y)| (x.f64(), y.f64()))
    };
    let value = match metric {
        DistanceMetric::L1 => pairs().map(|(x, y)| (x - y).abs()).sum::<f64>(),
        DistanceMetric::L2 => {
            let norm = |x: &Tensor<T>, y: &Tensor<T>| {
                x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| (p.f64() - q.f64()).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            norm(&a.re, &b.re) + norm(&a.im, &b.im)
        }
        DistanceMetric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in pairs() {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::invalid("cosine distance is undefined for a zero spectrum"));
            }
            1.0 - dot / (na.sqrt() * nb.sqrt())
        }
    };
    Ok(T::of(value))
}

/// Per-row spectral distance on a tape between `[N, C]` logits, via the DFT
/// along the class axis. Returns an `[N]` variable.
pub fn tape_spectral_distance<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    metric: DistanceMetric,
) -> Result<Var> {
    let (a_re, a_im) = (tape.dft(a, Part::Re)?, tape.dft(a, Part::Im)?);
    let (b_re, b_im) = (tape.dft(b, Part::Re)?, tape.dft(b, Part::Im)?);
    match metric {
        DistanceMetric::L1 => {
            let d_re = tape.sub(a_re, b_re)?;
            let d_im = tape.sub(a_im, b_im)?;
            let abs_re = tape.abs(d_re)?;
            let abs_im = tape.abs(d_im)?;
            let s_re = tape.sum_rows(abs_re)?;
            let s_im = tape.sum_rows(abs_im)?;
            tape.add(s_re, s_im)
        }
        DistanceMetric::L2 => {
            let mut part_norm = |x: Var, y: Var| -> Result<Var> {
                let d = tape.sub(x, y)?;
                let sq = tape.mul(d, d)?;
                let s = tape.sum_rows(sq)?;
                tape.sqrt(s)
            };
            let n_re = part_norm(a_re, b_re)?;
            let n_im = part_norm(a_im, b_im)?;
            tape.add(n_re, n_im)
        }
        DistanceMetric::Cosine => {
            let mut row_dot = |x_re: Var, x_im: Var, y_re: Var, y_im: Var| -> Result<Var> {
                let p_re = tape.mul(x_re, y_re)?;
                let p_im = tape.mul(x_im, y_im)?;
                let s_re = tape.sum_rows(p_re)?;
                let s_im = tape.sum_rows(p_im)?;
                tape.add(s_re, s_im)
            };
            let dot = row_dot(a_re, a_im, b_re, b_im)?;
            let aa = row_dot(a_re, a_im, a_re, a_im)?;
            let bb = row_dot(b_re, b_im, b_re, b_im)?;
            if tape.value(aa).data().iter().chain(tape.value(bb).data()).any(|&v| v == T::zero()) {
                return Err(Error::invalid("cosine distance is undefined for a zero spectrum"));
            }
            let na = tape.sqrt(aa)?;
            let nb = tape.sqrt(bb)?;
            let denom = tape.mul(na, nb)?;
            let cos = tape.div(dot, denom)?;
            let neg = tape.neg(cos)?;
            tape.add_scalar(neg, 1.0)
        }
    }
}

/// Channel-averaged `|F(x)|` of a `C x H x W` tensor, zero frequency centered.
pub fn power_spectrum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] if c >= 1 && h >= 1 && w >= 1 => (c, h, w),
        _ => return Err(Error::shape("power_spectrum", "C x H x W", shape_str(x.shape()))),
    };
    x.ensure_finite("power_spectrum")?;
    let mut acc = vec![T::zero(); h * w];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    for plane in x.data().chunks_exact(h * w) {
        for (z, &v) in buf.iter_mut().zip(plane) {
            *z = Complex::new(v, T::zero());
        }
        fft2_in_place(&mut buf, h, w, false);
        for (a, z) in acc.iter_mut().zip(&buf) {
            *a = *a + z.norm();
        }
    }
    let inv_c = T::one() / T::of(c as f64);
    let avg: Vec<T> = acc.into_iter().map(|v| v * inv_c).collect();
    Tensor::new(vec![h, w], shift_grid(&avg, h, w))
}
