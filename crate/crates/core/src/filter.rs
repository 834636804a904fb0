//! Butterworth IIR filters as cascaded second-order sections, applied
//! forward-backward for zero phase.

use std::f64::consts::PI;

/// One biquad in transposed direct form II, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// State that makes a constant unit input produce a constant output.
    fn steady_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = self.b[1] - self.a[0] * g + z2;
        [z1, z2]
    }

    fn run(&self, data: &mut [f64], state: [f64; 2]) {
        let [mut z1, mut z2] = state;
        for x in data.iter_mut() {
            let input = *x;
            let y = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * y + z2;
            z2 = self.b[2] * input - self.a[1] * y;
            *x = y;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    LowPass,
    HighPass,
}

/// A cascade of biquads.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    sections: Vec<Biquad>,
}

impl SosFilter {
    /// Even-order Butterworth low-pass. `order` is rounded up to even.
    pub fn lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Self {
        Self::design(Kind::LowPass, order, cutoff_hz, fs)
    }

    pub fn highpass(order: usize, cutoff_hz: f64, fs: f64) -> Self {
        Self::design(Kind::HighPass, order, cutoff_hz, fs)
    }

    /// High-pass at `low_hz` followed by low-pass at `high_hz`.
    pub fn bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Self {
        let mut f = Self::highpass(order, low_hz, fs);
        f.sections.extend(Self::lowpass(order, high_hz, fs).sections);
        f
    }

    fn design(kind: Kind, order: usize, cutoff_hz: f64, fs: f64) -> Self {
        let n_sections = order.max(2).div_ceil(2);
        let n = 2 * n_sections;
        let k = 2.0 * fs;
        let wc = k * (PI * cutoff_hz / fs).tan();
        let mut sections = Vec::with_capacity(n_sections);
        for i in 0..n_sections {
            let theta = PI * (2 * i + n + 1) as f64 / (2 * n) as f64;
            // pole pair wc·e^{±jθ}: s² + a1·s + a0
            let a1 = -2.0 * wc * theta.cos();
            let a0 = wc * wc;
            let d0 = k * k + a1 * k + a0;
            let d1 = 2.0 * a0 - 2.0 * k * k;
            let d2 = k * k - a1 * k + a0;
            let b = match kind {
                Kind::LowPass => [a0, 2.0 * a0, a0],
                Kind::HighPass => [k * k, -2.0 * k * k, k * k],
            };
            sections.push(Biquad {
                b: [b[0] / d0, b[1] / d0, b[2] / d0],
                a: [d1 / d0, d2 / d0],
            });
        }
        Self { sections }
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    fn run_once(&self, data: &mut [f64]) {
        let mut level = data.first().copied().unwrap_or(0.0);
        for s in &self.sections {
            let zi = s.steady_state();
            s.run(data, [zi[0] * level, zi[1] * level]);
            level *= s.dc_gain();
        }
    }

    /// Zero-phase filtering with odd-reflection padding of `pad` samples
    /// on each side (clamped to `len - 1`).
    pub fn filtfilt(&self, signal: &[f64], pad: usize) -> Vec<f64> {
        let n = signal.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let first = signal[0];
        let last = signal[n - 1];
        for i in (1..=pad).rev() {
            ext.push(2.0 * first - signal[i]);
        }
        ext.extend_from_slice(signal);
        for i in 1..=pad {
            ext.push(2.0 * last - signal[n - 1 - i]);
        }
        self.run_once(&mut ext);
        ext.reverse();
        self.run_once(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}
