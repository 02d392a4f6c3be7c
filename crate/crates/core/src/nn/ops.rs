//! Keypoint bottleneck operators on NCHW tensors: channel-wise spatial softmax,
//! soft-argmax to normalised coordinates, and Laplace heatmap rendering.
//!
//! A keypoint is (u, v) with u along the first spatial axis (rows, size I) and v
//! along the second (columns, size J), both in [0, 1).

use super::{NnError, Real, Tensor};

fn dims4<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize), NnError> {
    match t.shape[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(NnError::Shape(format!("expected NCHW, got {:?}", t.shape))),
    }
}

/// Per-channel softmax over the spatial positions, with max subtraction.
pub fn spatial_softmax<T: Real>(h: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, c, hh, ww) = dims4(h)?;
    let hw = hh * ww;
    let mut out = h.clone();
    for ch in out.data.chunks_mut(hw).take(n * c) {
        let m = ch.iter().copied().fold(ch[0], |a, b| a.max(b));
        let mut s = 0.0f64;
        for v in ch.iter_mut() {
            *v = (*v - m).exp();
            s += v.to_f64();
        }
        let inv = T::from_f64(1.0 / s);
        ch.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Expected normalised coordinates per channel: u = Σ p·i / I, v = Σ p·j / J.
/// Output is N×2K laid out as (u0, v0, u1, v1, ...).
pub fn soft_argmax<T: Real>(o: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, c, hh, ww) = dims4(o)?;
    let mut out = Tensor::zeros(&[n, 2 * c]);
    for b in 0..n {
        for k in 0..c {
            let base = (b * c + k) * hh * ww;
            let (mut u, mut v) = (0.0f64, 0.0f64);
            for i in 0..hh {
                for j in 0..ww {
                    let p = o.data[base + i * ww + j].to_f64();
                    u += p * i as f64;
                    v += p * j as f64;
                }
            }
            out.data[b * 2 * c + 2 * k] = T::from_f64(u / hh as f64);
            out.data[b * 2 * c + 2 * k + 1] = T::from_f64(v / ww as f64);
        }
    }
    Ok(out)
}

/// Laplace heatmaps with unit peak: exp(−|m − u·M|/σ − |n − v·N|/σ).
pub fn keypoints_to_heatmaps<T: Real>(k: &Tensor<T>, sigma: f64, height: usize, width: usize) -> Result<Tensor<T>, NnError> {
    if !(sigma > 0.0) {
        return Err(NnError::InvalidLayer(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let (n, two_k) = match k.shape[..] {
        [n, c] if c % 2 == 0 => (n, c),
        _ => return Err(NnError::Shape(format!("expected N×2K keypoints, got {:?}", k.shape))),
    };
    let kk = two_k / 2;
    let mut out = Tensor::zeros(&[n, kk, height, width]);
    let mut row = vec![0.0f64; height];
    let mut col = vec![0.0f64; width];
    for b in 0..n {
        for c in 0..kk {
            let u = k.data[b * two_k + 2 * c].to_f64() * height as f64;
            let v = k.data[b * two_k + 2 * c + 1].to_f64() * width as f64;
            for (m, r) in row.iter_mut().enumerate() {
                *r = (-(m as f64 - u).abs() / sigma).exp();
            }
            for (j, r) in col.iter_mut().enumerate() {
                *r = (-(j as f64 - v).abs() / sigma).exp();
            }
            let base = (b * kk + c) * height * width;
            for m in 0..height {
                for j in 0..width {
                    out.data[base + m * width + j] = T::from_f64(row[m] * col[j]);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_constant_and_normalised() {
        let t = Tensor::<f32>::from_vec(&[1, 2, 4, 4], vec![3.0; 32]).unwrap();
        let s = spatial_softmax(&t).unwrap();
        assert!(s.data.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-7));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::<f32>::from_vec(&[3, 5, 8, 8], (0..3 * 5 * 64).map(|_| rng.gen_range(-20.0..20.0)).collect()).unwrap();
        let s = spatial_softmax(&t).unwrap();
        for ch in s.data.chunks(64) {
            let sum: f64 = ch.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_spike() {
        let mut d = vec![0.0f64; 64];
        d[19] = 50.0;
        let s = spatial_softmax(&Tensor::from_vec(&[1, 1, 8, 8], d).unwrap()).unwrap();
        assert!(s.data[19] > 1.0 - 1e-9);
    }

    #[test]
    fn soft_argmax_cases() {
        let mut d = vec![0.0f64; 8 * 6];
        d[3 * 6 + 5] = 1.0;
        let k = soft_argmax(&Tensor::from_vec(&[1, 1, 8, 6], d).unwrap()).unwrap();
        assert!((k.data[0] - 3.0 / 8.0).abs() < 1e-12 && (k.data[1] - 5.0 / 6.0).abs() < 1e-12);
        let u = soft_argmax(&Tensor::from_vec(&[1, 1, 8, 8], vec![1.0 / 64.0; 64]).unwrap()).unwrap();
        assert!((u.data[0] - 7.0 / 16.0).abs() < 1e-12 && (u.data[1] - 7.0 / 16.0).abs() < 1e-12);
        let mut d = vec![0.0f64; 64];
        d[2 * 8 + 4] = 0.5;
        d[6 * 8 + 4] = 0.5;
        let k = soft_argmax(&Tensor::from_vec(&[1, 1, 8, 8], d).unwrap()).unwrap();
        assert!((k.data[0] - 8.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn heatmap_peak_and_ratio() {
        let sigma = 2.0;
        let k = Tensor::from_vec(&[1, 4], vec![0.25f64, 0.5, 0.75, 0.125]).unwrap();
        let h = keypoints_to_heatmaps(&k, sigma, 16, 16).unwrap();
        let ch0 = &h.data[..256];
        let (arg, peak) = ch0.iter().enumerate().fold((0, 0.0), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        assert_eq!((arg / 16, arg % 16), (4, 8));
        assert!((peak - 1.0).abs() < 1e-12);
        assert!((ch0[5 * 16 + 8] / peak - (-1.0 / sigma).exp()).abs() < 1e-12);
        let linf = h.data[..256].iter().zip(&h.data[256..]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(linf > 0.5);
        assert!(keypoints_to_heatmaps(&k, 0.0, 4, 4).is_err());
    }
}
