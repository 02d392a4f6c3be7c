//! Deterministic integer hashing and value noise used for procedural textures
//! and the simulated IR dot pattern.

#[inline]
pub fn hash64(mut x: u64) -> u64 {
    // splitmix64 finaliser
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[inline]
pub fn hash3(seed: u64, x: i64, y: i64, z: i64) -> u64 {
    let mut h = hash64(seed);
    h = hash64(h ^ (x as u64));
    h = hash64(h ^ (y as u64).rotate_left(21));
    hash64(h ^ (z as u64).rotate_left(42))
}

/// Uniform value in [0, 1) derived from a hash.
#[inline]
pub fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly interpolated lattice noise in [0, 1].
pub fn value_noise3(seed: u64, x: f64, y: f64, z: f64) -> f64 {
    let (xi, yi, zi) = (x.floor(), y.floor(), z.floor());
    let (fx, fy, fz) = (smooth(x - xi), smooth(y - yi), smooth(z - zi));
    let (xi, yi, zi) = (xi as i64, yi as i64, zi as i64);
    let v = |dx: i64, dy: i64, dz: i64| unit(hash3(seed, xi + dx, yi + dy, zi + dz));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let x00 = lerp(v(0, 0, 0), v(1, 0, 0), fx);
    let x10 = lerp(v(0, 1, 0), v(1, 1, 0), fx);
    let x01 = lerp(v(0, 0, 1), v(1, 0, 1), fx);
    let x11 = lerp(v(0, 1, 1), v(1, 1, 1), fx);
    lerp(lerp(x00, x10, fy), lerp(x01, x11, fy), fz)
}

/// Sum of `octaves` value-noise layers, normalised back to [0, 1].
pub fn fractal_noise3(seed: u64, x: f64, y: f64, z: f64, octaves: u32) -> f64 {
    let mut amp = 1.0;
    let mut freq = 1.0;
    let mut sum = 0.0;
    let mut norm = 0.0;
    for o in 0..octaves.max(1) {
        sum += amp * value_noise3(seed.wrapping_add(o as u64 * 7919), x * freq, y * freq, z * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}
