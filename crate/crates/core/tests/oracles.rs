//! Checks against independent reference computations. Nothing here calls the
//! code path it is checking to produce the expected value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sconv_core::basis::{make_grid, BasisKind};
use sconv_core::conv::{self, ConvSpec};
use sconv_core::fit::{self, FitConfig, FitMethod, Init};
use sconv_core::model;
use sconv_core::quant::{self, BfpConfig};
use sconv_core::{Tensor3, Tensor4};

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Loss evaluated straight from the series definition with `cos`, without
/// the basis module.
fn loss_by_definition(filter: &[f64], coeffs: &[f64], k: usize) -> f64 {
    let n = (coeffs.len() as f64).sqrt() as usize;
    let theta = |a: usize| (a as f64 + 0.5) * std::f64::consts::PI / k as f64;
    let mut sum = 0.0;
    for a in 0..k {
        for b in 0..k {
            let mut w_hat = 0.0;
            for i0 in 0..n {
                for i1 in 0..n {
                    w_hat += coeffs[i0 * n + i1] * (i0 as f64 * theta(a)).cos() * (i1 as f64 * theta(b)).cos();
                }
            }
            let r = filter[a * k + b] - w_hat;
            sum += r * r;
        }
    }
    sum / (k * k) as f64
}

#[test]
fn loss_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 1..=7 {
        for n in 1..=k {
            let w = random_vec(&mut rng, k * k);
            let a = random_vec(&mut rng, n * n);
            for kind in BasisKind::ALL {
                let grid = make_grid(kind, k).unwrap();
                let got = fit::mse_loss(&w, &a, &grid).unwrap();
                let want = loss_by_definition(&w, &a, k);
                assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{kind} k={k} n={n}");
            }
        }
    }
}

/// Double-double value `hi + lo`, enough to keep central differences of the
/// loss free of cancellation error.
#[derive(Clone, Copy)]
struct Dd(f64, f64);

impl Dd {
    fn add(self, other: Dd) -> Dd {
        let s = self.0 + other.0;
        let bb = s - self.0;
        let err = (self.0 - (s - bb)) + (other.0 - bb);
        Dd::quick(s, err + self.1 + other.1)
    }

    fn mul(self, other: Dd) -> Dd {
        let p = self.0 * other.0;
        let err = self.0.mul_add(other.0, -p);
        Dd::quick(p, err + self.0 * other.1 + self.1 * other.0)
    }

    fn quick(hi: f64, lo: f64) -> Dd {
        let s = hi + lo;
        Dd(s, lo - (s - hi))
    }

    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }
}

/// Sum of squared residuals in double-double, with the basis values taken
/// from plain `cos`.
fn sse_dd(filter: &[f64], coeffs: &[f64], k: usize) -> Dd {
    let n = (coeffs.len() as f64).sqrt() as usize;
    let theta = |a: usize| (a as f64 + 0.5) * std::f64::consts::PI / k as f64;
    let mut sum = Dd(0.0, 0.0);
    for a in 0..k {
        for b in 0..k {
            let mut r = Dd(filter[a * k + b], 0.0);
            for i0 in 0..n {
                for i1 in 0..n {
                    let phi = (i0 as f64 * theta(a)).cos() * (i1 as f64 * theta(b)).cos();
                    r = r.add(Dd(coeffs[i0 * n + i1], 0.0).mul(Dd(phi, 0.0)).neg());
                }
            }
            sum = sum.add(r.mul(r));
        }
    }
    sum
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let k = rng.random_range(1..=7);
        let n = rng.random_range(1..=k);
        let kind = BasisKind::ALL[trial % 2];
        let grid = make_grid(kind, k).unwrap();
        let w = random_vec(&mut rng, k * k);
        let a = random_vec(&mut rng, n * n);
        let g = fit::mse_gradient(&w, &a, &grid).unwrap();
        for j in 0..n * n {
            let mut plus = a.clone();
            let mut minus = a.clone();
            plus[j] += h;
            minus[j] -= h;
            let diff = sse_dd(&w, &plus, k).add(sse_dd(&w, &minus, k).neg());
            let fd = (diff.0 + diff.1) / ((plus[j] - minus[j]) * (k * k) as f64);
            let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-300);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-6, "worst relative error {worst:e}");
}

#[test]
fn descent_reaches_normal_equation_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 1..=7 {
        for n in 1..=k {
            let w = Tensor4::new(2, 1, k, k, random_vec(&mut rng, 2 * k * k)).unwrap();
            for kind in BasisKind::ALL {
                let (_, ls) = fit::fit(&w, kind, n, &FitConfig::default()).unwrap();
                let gd_cfg = FitConfig::for_basis(kind, 9).with_method(FitMethod::GradientDescent);
                let (_, gd) = fit::fit(&w, kind, n, &gd_cfg).unwrap();
                for (g, l) in gd.mse.iter().zip(&ls.mse) {
                    assert!((g - l).abs() <= 1e-8, "{kind} k={k} n={n}: gd {g} vs ls {l}");
                }
            }
        }
    }
}

/// Least squares by brute-force Gaussian elimination on the normal equations
/// built from `cos` directly.
fn least_squares_by_elimination(filter: &[f64], k: usize, n: usize) -> f64 {
    let theta = |a: usize| (a as f64 + 0.5) * std::f64::consts::PI / k as f64;
    let cols = n * n;
    let phi: Vec<Vec<f64>> = (0..k * k)
        .map(|r| {
            let (a, b) = (r / k, r % k);
            (0..cols)
                .map(|c| ((c / n) as f64 * theta(a)).cos() * ((c % n) as f64 * theta(b)).cos())
                .collect()
        })
        .collect();
    let mut m = vec![vec![0.0; cols + 1]; cols];
    for p in 0..cols {
        for q in 0..cols {
            m[p][q] = (0..k * k).map(|r| phi[r][p] * phi[r][q]).sum();
        }
        m[p][cols] = (0..k * k).map(|r| phi[r][p] * filter[r]).sum();
    }
    for col in 0..cols {
        let pivot = (col..cols)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        for row in 0..cols {
            if row != col {
                let f = m[row][col] / m[col][col];
                let pivot_row = m[col].clone();
                for (dst, src) in m[row].iter_mut().zip(&pivot_row).skip(col) {
                    *dst -= f * src;
                }
            }
        }
    }
    let a: Vec<f64> = (0..cols).map(|p| m[p][cols] / m[p][p]).collect();
    loss_by_definition(filter, &a, k)
}

#[test]
fn least_squares_matches_elimination() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 1..=6 {
        for n in 1..=k {
            let w = Tensor4::new(1, 1, k, k, random_vec(&mut rng, k * k)).unwrap();
            let (_, report) = fit::fit(&w, BasisKind::Chebyshev, n, &FitConfig::default()).unwrap();
            let want = least_squares_by_elimination(w.data(), k, n);
            assert!((report.mse[0] - want).abs() <= 1e-12, "k={k} n={n}");
        }
    }
}

#[test]
fn dct_gram_diagonal_for_all_sizes() {
    for k in 1..=11 {
        let phi = sconv_core::basis::design_matrix(BasisKind::Cosine, k, k).unwrap();
        let kk = (k * k) as f64;
        for p in 0..k * k {
            for q in 0..k * k {
                let dot: f64 = (0..k * k).map(|r| phi.get(r, p) * phi.get(r, q)).sum();
                let want = if p != q {
                    0.0
                } else {
                    let factor = |i: usize| if i == 0 { 1.0 } else { 0.5 };
                    kk * factor(p / k) * factor(p % k)
                };
                assert!((dot - want).abs() <= 1e-9, "k={k} ({p},{q}): {dot} vs {want}");
            }
        }
    }
}

/// Convolution written against raw slices, independent of the library's
/// geometry handling.
fn brute_conv(input: &Tensor3, kernels: &Tensor4, pad: usize) -> Vec<f64> {
    let [c, h, w] = input.shape();
    let [o_n, i_n, kh, kw] = kernels.shape();
    assert_eq!(c, i_n);
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = Vec::new();
    for o in 0..o_n {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for i in 0..i_n {
                    for a in 0..kh {
                        for b in 0..kw {
                            let (yy, xx) = ((y + a) as i64 - pad as i64, (x + b) as i64 - pad as i64);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += input.get(i, yy as usize, xx as usize) * kernels.get(o, i, a, b);
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn conv_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for pad in 0..=2 {
        let input = Tensor3::new(3, 6, 7, random_vec(&mut rng, 3 * 6 * 7)).unwrap();
        let kernels = Tensor4::new(2, 3, 3, 3, random_vec(&mut rng, 2 * 3 * 9)).unwrap();
        let got = conv::conv2d(
            &input,
            &kernels,
            &ConvSpec {
                stride: 1,
                padding: pad,
                groups: 1,
            },
        )
        .unwrap();
        for (g, w) in got.data().iter().zip(brute_conv(&input, &kernels, pad)) {
            assert!((g - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn layer_output_error_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = Tensor3::new(3, 8, 8, random_vec(&mut rng, 3 * 64)).unwrap();
    let kernels = Tensor4::new(4, 3, 3, 3, random_vec(&mut rng, 4 * 3 * 9)).unwrap();
    let layer = model::compress_layer(&kernels, BasisKind::Cosine, 2, &FitConfig::default()).unwrap();
    let spec = ConvSpec::same(3);
    let got = conv::layer_output_error(&input, &kernels, &layer, &spec).unwrap();

    let reference = brute_conv(&input, &kernels, 1);
    let approx = brute_conv(&input, &model::reconstruct(&layer), 1);
    let num: f64 = reference
        .iter()
        .zip(&approx)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = reference.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!((got.rel_l2 - num / den).abs() <= 1e-12);
    assert!(got.rel_l2 > 0.0);
}

#[test]
fn gaussian_init_statistics() {
    let (c_in, k) = (16, 3);
    // 6945 * 16 filters x 9 coefficients = 1_000_080 draws
    let c_out = 6945;
    let coeffs = fit::init_gaussian(c_out, c_in, k, 3, 42).unwrap();
    let draws = coeffs.data();
    assert!(draws.len() >= 1_000_000);
    let count = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / count;
    let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
    let sigma2: f64 = 1.0 / 144.0;
    assert!(mean.abs() <= 3.0 * sigma2.sqrt() / 1e3, "mean {mean}");
    assert!((var - sigma2).abs() / sigma2 <= 0.01, "variance {var}");
}

#[test]
fn gaussian_init_used_by_descent_is_seeded() {
    let w = Tensor4::from_fn(3, 2, 3, 3, |o, i, a, b| (o + i * a + b) as f64).unwrap();
    let cfg = FitConfig {
        init: Init::GaussianRandom { seed: 5 },
        method: FitMethod::GradientDescent,
        max_iters: 3,
        ..FitConfig::default()
    };
    let (a, _) = fit::fit(&w, BasisKind::Cosine, 2, &cfg).unwrap();
    let (b, _) = fit::fit(&w, BasisKind::Cosine, 2, &cfg).unwrap();
    assert_eq!(a, b);
    let other = FitConfig {
        init: Init::GaussianRandom { seed: 6 },
        ..cfg
    };
    assert_ne!(fit::fit(&w, BasisKind::Cosine, 2, &other).unwrap().0, a);
}

#[test]
fn bfp_error_bound_against_step_definition() {
    let cfg = BfpConfig::new(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values: Vec<f64> = (0..100_000).map(|_| rng.random_range(0.5..2.0)).collect();
    let (deq, _) = quant::quantize_bfp(&values, &cfg).unwrap();
    for (v, d) in values.iter().zip(&deq) {
        let e = v.log2().floor();
        let step = 2f64.powf(e - 7.0);
        assert!((v - d).abs() <= step / 2.0 + 1e-18, "{v} -> {d}");
        assert!((v - d).abs() / v <= 2f64.powi(-8));
    }
}
