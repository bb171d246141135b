//! Linear convolution through the FFT, with its vector-Jacobian product.

use std::cell::RefCell;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::waveform::{ImpulseResponse, Waveform};

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

pub(crate) fn forward_plan(n: usize) -> Arc<dyn RealToComplex<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

pub(crate) fn inverse_plan(n: usize) -> Arc<dyn ComplexToReal<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Smallest 2^a·3^b·5^c not below `n`.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

pub(crate) fn rfft(x: &[f64], len: usize) -> Vec<Complex64> {
    let plan = forward_plan(len);
    let mut buf = vec![0.0; len];
    buf[..x.len()].copy_from_slice(x);
    let mut out = plan.make_output_vec();
    plan.process(&mut buf, &mut out).expect("rfft length");
    out
}

/// Unnormalised inverse; divides by `len` before returning.
pub(crate) fn irfft(spec: &[Complex64], len: usize) -> Vec<f64> {
    let plan = inverse_plan(len);
    let mut s = spec.to_vec();
    // The imaginary parts of the DC and Nyquist bins must vanish for a real
    // inverse; they do up to rounding.
    s[0].im = 0.0;
    if len % 2 == 0 {
        let last = s.len() - 1;
        s[last].im = 0.0;
    }
    let mut out = plan.make_output_vec();
    plan.process(&mut s, &mut out).expect("irfft length");
    let inv = 1.0 / len as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Forward transform of one zero-padded block (public wrapper).
pub fn rfft_block(x: &[f64], len: usize) -> Vec<Complex64> {
    rfft(x, len)
}

/// Inverse of [`rfft_block`], normalised.
pub fn irfft_block(spec: &[Complex64], len: usize) -> Vec<f64> {
    irfft(spec, len)
}

/// First `x.len()` samples of the linear convolution `x * h`.
pub fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    assert!(!x.is_empty() && !h.is_empty());
    let m = next_fast_len(x.len() + h.len() - 1);
    let xs = rfft(x, m);
    let hs = rfft(h, m);
    let prod: Vec<Complex64> = xs.iter().zip(&hs).map(|(a, b)| a * b).collect();
    let mut y = irfft(&prod, m);
    y.truncate(x.len());
    y
}

/// Gradients of `<grad_out, convolve_same(x, h)>` with respect to `x` and `h`.
pub fn convolve_same_vjp(x: &[f64], h: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(grad_out.len(), x.len());
    let m = next_fast_len(x.len() + h.len() - 1);
    let gs = rfft(grad_out, m);
    let xs = rfft(x, m);
    let hs = rfft(h, m);
    let dx_spec: Vec<Complex64> = gs.iter().zip(&hs).map(|(g, h)| g * h.conj()).collect();
    let dh_spec: Vec<Complex64> = gs.iter().zip(&xs).map(|(g, x)| g * x.conj()).collect();
    let mut dx = irfft(&dx_spec, m);
    dx.truncate(x.len());
    let mut dh = irfft(&dh_spec, m);
    dh.truncate(h.len());
    (dx, dh)
}

/// Same-length convolution of a waveform with an impulse response.
pub fn fft_convolve(w: &Waveform, ir: &ImpulseResponse) -> Waveform {
    Waveform::new(convolve_same(w.samples(), ir.taps())).expect("convolution of finite inputs is finite")
}

/// Convolver for a fixed signal and a varying filter of fixed length; the
/// signal spectrum is computed once.
pub struct SignalConvolver {
    n: usize,
    taps: usize,
    fft_len: usize,
    spectrum: Vec<Complex64>,
}

impl SignalConvolver {
    pub fn new(x: &[f64], taps: usize) -> Self {
        let fft_len = next_fast_len(x.len() + taps - 1);
        Self {
            n: x.len(),
            taps,
            fft_len,
            spectrum: rfft(x, fft_len),
        }
    }

    pub fn convolve(&self, h: &[f64]) -> Vec<f64> {
        assert_eq!(h.len(), self.taps);
        let hs = rfft(h, self.fft_len);
        let prod: Vec<Complex64> = self.spectrum.iter().zip(&hs).map(|(a, b)| a * b).collect();
        let mut y = irfft(&prod, self.fft_len);
        y.truncate(self.n);
        y
    }

    /// Gradient with respect to the filter taps.
    pub fn filter_gradient(&self, grad_out: &[f64]) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.n);
        let gs = rfft(grad_out, self.fft_len);
        let spec: Vec<Complex64> = gs.iter().zip(&self.spectrum).map(|(g, x)| g * x.conj()).collect();
        let mut dh = irfft(&spec, self.fft_len);
        dh.truncate(self.taps);
        dh
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::waveform::IrOrigin;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct(x: &[f64], h: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|n| (0..h.len()).filter(|&k| k <= n).map(|k| h[k] * x[n - k]).sum())
            .collect()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn unit_impulse_is_identity() {
        let w = Waveform::new(vec![0.1, -0.4, 0.25, 0.9]).unwrap();
        let y = fft_convolve(&w, &ImpulseResponse::unit_impulse());
        for (a, b) in y.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn one_sample_delay_shifts() {
        let w = Waveform::new(vec![0.1, -0.4, 0.25, 0.9]).unwrap();
        let ir = ImpulseResponse::new(vec![0.0, 1.0], IrOrigin::Synthetic).unwrap();
        let y = fft_convolve(&w, &ir);
        let expected = [0.0, 0.1, -0.4, 0.25];
        for (a, b) in y.samples().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 4096);
        let h = rand_vec(&mut rng, 64);
        let fast = convolve_same(&x, &h);
        let slow = direct(&x, &h);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max abs error {err}");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_vec(&mut rng, 37);
        let h = rand_vec(&mut rng, 9);
        let g = rand_vec(&mut rng, 37);
        let f = |x: &[f64], h: &[f64]| -> f64 { convolve_same(x, h).iter().zip(&g).map(|(a, b)| a * b).sum() };
        let (dx, dh) = convolve_same_vjp(&x, &h, &g);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += eps;
            let mut m = x.clone();
            m[i] -= eps;
            let fd = (f(&p, &h) - f(&m, &h)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-7);
        }
        for k in 0..h.len() {
            let mut p = h.clone();
            p[k] += eps;
            let mut m = h.clone();
            m[k] -= eps;
            let fd = (f(&x, &p) - f(&x, &m)) / (2.0 * eps);
            assert!((fd - dh[k]).abs() < 1e-7);
        }
        let conv = SignalConvolver::new(&x, h.len());
        let dh2 = conv.filter_gradient(&g);
        for (a, b) in dh.iter().zip(&dh2) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in conv.convolve(&h).iter().zip(convolve_same(&x, &h)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_lengths_are_smooth() {
        assert_eq!(next_fast_len(1), 1);
        assert_eq!(next_fast_len(7), 8);
        assert_eq!(next_fast_len(20095), 20250);
    }
}
