use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

/// One biquad, `b0 + b1 z⁻¹ + b2 z⁻²` over `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (self.a[0] + self.a[1] * z1 + self.a[2] * z2)
    }
}

/// Digital Butterworth band-pass of prototype order `order` (so `2·order` poles),
/// as second-order sections. Edges are in Hz and must lie in (0, fs/2).
pub fn butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Vec<Biquad> {
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (w1, w2) = (warp(low), warp(high));
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    let mut poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * bw / 2.0;
        let disc = (half * half - w0sq).sqrt();
        for s in [half + disc, half - disc] {
            poles.push((2.0 * fs + s) / (2.0 * fs - s));
        }
    }

    // Upper-half-plane poles pair with their conjugates; stray real poles pair together.
    let mut sections = Vec::with_capacity(order);
    let mut reals = Vec::new();
    for z in &poles {
        if z.im > 1e-12 {
            sections.push(Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -2.0 * z.re, z.norm_sqr()] });
        } else if z.im.abs() <= 1e-12 {
            reals.push(z.re);
        }
    }
    reals.sort_by(f64::total_cmp);
    for pair in reals.chunks(2) {
        let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -(r1 + r2), r1 * r2] });
    }

    let centre = 2.0 * (w0sq.sqrt() / (2.0 * fs)).atan();
    let gain: f64 = sections.iter().map(|s| s.response(centre).norm()).product();
    for b in &mut sections[0].b {
        *b /= gain;
    }
    sections
}

pub fn cascade_response(sos: &[Biquad], omega: f64) -> Complex64 {
    sos.iter().map(|s| s.response(omega)).product()
}

/// Direct-form II transposed cascade with optional per-section initial state.
fn sosfilt(sos: &[Biquad], x: &mut [f64], zi: &[[f64; 2]]) {
    for (s, z0) in sos.iter().zip(zi) {
        let [b0, b1, b2] = s.b;
        let [_, a1, a2] = s.a;
        let [mut z1, mut z2] = *z0;
        for v in x.iter_mut() {
            let y = b0 * *v + z1;
            z1 = b1 * *v - a1 * y + z2;
            z2 = b2 * *v - a2 * y;
            *v = y;
        }
    }
}

/// Steady-state section states for a unit step input, scaled by the gain of the
/// preceding sections.
fn sosfilt_zi(sos: &[Biquad]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let g = s.b.iter().sum::<f64>() / s.a.iter().sum::<f64>();
            let zi = [scale * (g - s.b[0]), scale * (s.b[2] - s.a[2] * g)];
            scale *= g;
            zi
        })
        .collect()
}

/// Zero-phase forward–backward filtering with odd-extension padding.
pub fn sosfiltfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = (3 * (2 * sos.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = sosfilt_zi(sos);
    let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();
    let z = scaled(ext[0]);
    sosfilt(sos, &mut ext, &z);
    ext.reverse();
    let z = scaled(ext[0]);
    sosfilt(sos, &mut ext, &z);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}
