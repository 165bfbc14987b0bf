use std::f64::consts::PI;

/// Zero crossings of the interpolation kernel on each side.
const ZEROS: f64 = 24.0;
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;
const MAX_TABLE: usize = 1 << 20;

/// Band-limited rational-ratio resampling with a Kaiser-windowed sinc kernel.
/// Output length is `round(len · to / from)`.
pub fn resample_samples(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let up = (to as u64 / g) as usize;
    let down = (from as u64 / g) as usize;
    let out_len = (x.len() as f64 * to as f64 / from as f64).round() as usize;

    // Cutoff in cycles per input sample.
    let fc = 0.5 * ROLLOFF * (to as f64 / from as f64).min(1.0);
    let half = (ZEROS / (2.0 * fc)).ceil() as isize;
    let kernel = |t: f64| -> f64 {
        let r = t / half as f64;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        2.0 * fc * sinc(2.0 * fc * t) * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
    };
    let taps = 2 * half as usize + 1;
    let table: Option<Vec<f64>> = (up * taps <= MAX_TABLE).then(|| {
        let mut t = Vec::with_capacity(up * taps);
        for p in 0..up {
            let frac = p as f64 / up as f64;
            for k in -half..=half {
                t.push(kernel(k as f64 - frac));
            }
        }
        t
    });

    let n = x.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let pos = j * down;
        let n0 = (pos / up) as isize;
        let p = pos % up;
        let mut acc = 0.0;
        for (ti, k) in (-half..=half).enumerate() {
            let i = n0 + k;
            if i < 0 || i >= n {
                continue;
            }
            let w = match &table {
                Some(t) => t[p * taps + ti],
                None => kernel(k as f64 - p as f64 / up as f64),
            };
            acc += w * x[i as usize];
        }
        out.push(acc);
    }
    out
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut sum, mut term) = (1.0, 1.0);
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}
