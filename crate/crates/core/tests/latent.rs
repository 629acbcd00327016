mod common;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpcc_core::generator::PointBatch;
use dpcc_core::geometry::Point;
use dpcc_core::latent::{
    bits, gaussian_conditional_likelihood, quantize_values, rate_from_likelihoods, Compressor,
    CompressorConfig, DetailEncoder, EntropyParams, FactorizedPrior, Hyperprior, LatentTriple,
    QuantMode, ShapeEncoder,
};
use dpcc_core::nn::{tensor_from, ParamStore};

use common::{check_gradients, normal_points, randomize, rel_err, vars_of};

fn host(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn batch(points: Vec<Point>) -> PointBatch {
    PointBatch::new(vec![points], DType::F64).unwrap()
}

/// Points on a 1/64 grid inside the unit cube: exact in binary, so sums and
/// differences with other grid values never round.
fn grid_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-64i32..=64) as f64 / 64.0))
        .collect()
}

#[test]
fn shape_latent_default_width_and_duplicates() {
    let mut store = ParamStore::new(DType::F64, 3);
    let enc = ShapeEncoder::new(&mut store, "shape", 288).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = normal_points(&mut rng, 100, 0.5);
    let y = enc.forward(&batch(pts.clone())).unwrap();
    assert_eq!(y.dims(), [1, 1, 288]);
    let doubled: Vec<Point> = pts.iter().chain(&pts).copied().collect();
    assert_eq!(host(&y), host(&enc.forward(&batch(doubled)).unwrap()));
}

#[test]
fn default_compressor_shapes() {
    let mut store = ParamStore::new(DType::F32, 4);
    let comp = Compressor::new(&mut store, CompressorConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = PointBatch::new(vec![normal_points(&mut rng, 256, 0.4)], DType::F32).unwrap();
    let out = comp.forward(&x, QuantMode::Test, &mut rng).unwrap();
    assert_eq!(out.shape_hat.dims(), [1, 1, 288]);
    assert_eq!(out.detail_hat.dims(), [1, 64, 288]);
    assert_eq!(out.hyper_hat.as_ref().unwrap().dims(), [1, 1, 96]);
    let params = out.params.as_ref().unwrap();
    assert_eq!(params.mu.dims(), [1, 64, 288]);
    assert_eq!(params.sigma.dims(), [1, 64, 288]);
    assert!(host(&params.sigma).iter().all(|&s| s >= 0.04 - 1e-7));
    let triple = comp.triple(&out, 0).unwrap();
    assert_eq!((triple.shape.len(), triple.detail.len(), triple.hyper.len()), (288, 64 * 288, 96));
}

#[test]
fn detail_encoder_needs_enough_points() {
    let mut store = ParamStore::new(DType::F64, 1);
    let cfg = CompressorConfig { channels: 12, tokens: 8, neighbors: 4, ..Default::default() };
    let enc = DetailEncoder::new(&mut store, "detail", &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(enc.forward(&batch(normal_points(&mut rng, 7, 1.0))).is_err());
    assert!(enc.forward(&batch(normal_points(&mut rng, 8, 1.0))).is_ok());
}

#[test]
fn detail_latent_is_translation_invariant() {
    let mut store = ParamStore::new(DType::F64, 5);
    let cfg = CompressorConfig { channels: 24, tokens: 8, neighbors: 6, ..Default::default() };
    let enc = DetailEncoder::new(&mut store, "detail", &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pts = grid_points(&mut rng, 80);
    let shift = [0.5, -0.25, 1.75];
    let moved: Vec<Point> = pts.iter().map(|p| std::array::from_fn(|i| p[i] + shift[i])).collect();
    let a = host(&enc.forward(&batch(pts)).unwrap());
    let b = host(&enc.forward(&batch(moved)).unwrap());
    assert_eq!(a, b);
}

#[test]
fn duplicated_patch_gives_identical_rows() {
    // Two copies of one elongated patch, far apart along x. Each patch's
    // first point has the largest x, so farthest-point sampling starting at
    // index 0 picks the matching point of the other copy next.
    let patch: Vec<Point> = (0..8)
        .map(|j| [-0.125 * j as f64, 0.0078125 * (j % 3) as f64, 0.0078125 * (j % 2) as f64])
        .collect();
    let offset = [4.0, 0.0, 0.0];
    let mut pts = patch.clone();
    pts.extend(patch.iter().map(|p| std::array::from_fn::<f64, 3, _>(|i| p[i] + offset[i])));

    let mut store = ParamStore::new(DType::F64, 8);
    let cfg = CompressorConfig { channels: 18, tokens: 2, neighbors: 8, ..Default::default() };
    let enc = DetailEncoder::new(&mut store, "detail", &cfg).unwrap();
    let y = enc.forward(&batch(pts)).unwrap();
    assert_eq!(y.dims(), [1, 2, 18]);
    let rows = host(&y);
    assert_eq!(rows[..18], rows[18..]);
    assert!(rows.iter().any(|v| *v != 0.0));
}

#[test]
fn train_quantizer_is_unbiased_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = quantize_values(&vec![0.0; 100_000], QuantMode::Train, &mut rng);
    let mean = q.iter().sum::<f64>() / q.len() as f64;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!(q.iter().all(|v| *v > -0.5 && *v < 0.5));

    let y: Vec<f64> = (0..1000).map(|i| (i as f64 - 500.0) * 0.013).collect();
    let reps = 100;
    let mut bias = 0.0;
    for _ in 0..reps {
        let q = quantize_values(&y, QuantMode::Train, &mut rng);
        assert!(y.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 0.5));
        bias += y.iter().zip(&q).map(|(a, b)| b - a).sum::<f64>();
    }
    let bias = bias / (reps * y.len()) as f64;
    // Standard error of the mean of 1e5 uniforms is about 9e-4.
    assert!(bias.abs() < 5e-3, "bias {bias}");
}

#[test]
fn hyper_shapes_and_sigma_clamp() {
    let mut store = ParamStore::new(DType::F64, 10);
    let hyper = Hyperprior::new(&mut store, "hyper", 4, 6, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    randomize(&store, &mut rng, 3.0);
    let y = tensor_from(normal_points(&mut rng, 8, 2.0).into_iter().flatten().collect(), &[1, 4, 6], DType::F64).unwrap();
    let z = hyper.encode(&y).unwrap();
    assert_eq!(z.dims(), [1, 1, 3]);
    let z_hat = tensor_from(vec![-9.0, 7.0, 12.0], &[1, 1, 3], DType::F64).unwrap();
    let p = hyper.decode(&z_hat).unwrap();
    assert_eq!(p.mu.dims(), [1, 4, 6]);
    assert_eq!(p.sigma.dims(), [1, 4, 6]);
    assert!(host(&p.sigma).iter().all(|&s| s >= 0.04));
    assert!(hyper.encode(&tensor_from(vec![0.0; 20], &[1, 4, 5], DType::F64).unwrap()).is_err());
    assert!(hyper.decode(&tensor_from(vec![0.0; 4], &[1, 1, 4], DType::F64).unwrap()).is_err());
}

#[test]
fn estimate_rate_matches_independent_sums() {
    let cfg = CompressorConfig { channels: 12, hyper_channels: 4, tokens: 3, neighbors: 4, ..Default::default() };
    let mut store = ParamStore::new(DType::F64, 12);
    let comp = Compressor::new(&mut store, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    randomize(&store, &mut rng, 0.5);
    for _ in 0..10 {
        let mut ints = |n: usize| -> Vec<i32> { (0..n).map(|_| rng.random_range(-4..=4)).collect() };
        let triple = LatentTriple { shape: ints(12), detail: ints(36), hyper: ints(4) };
        let est = comp.estimate_rate(&triple, DType::F64).unwrap();

        let f = |v: &[i32], shape: &[usize]| tensor_from(v.iter().map(|&x| x as f64).collect(), shape, DType::F64).unwrap();
        let shape_p = host(&comp.shape_prior().likelihood(&f(&triple.shape, &[1, 1, 12])).unwrap());
        let z = f(&triple.hyper, &[1, 1, 4]);
        let hyper_p = host(&comp.hyper_prior().likelihood(&z).unwrap());
        let params = comp.hyperprior().decode(&z).unwrap();
        let detail_p = host(&gaussian_conditional_likelihood(&f(&triple.detail, &[1, 3, 12]), &params).unwrap());
        for (got, p) in [(est.shape, &shape_p), (est.hyper, &hyper_p), (est.detail, &detail_p)] {
            assert!(p.iter().all(|&v| (2f64.powi(-16)..=1.0).contains(&v)));
            let want = rate_from_likelihoods(p);
            assert!(rel_err(got, want) < 1e-6, "{got} vs {want}");
        }
        assert!(est.total().is_finite() && est.total() >= 0.0);
    }
}

#[test]
fn likelihood_gradients_match_finite_differences() {
    let dtype = DType::F64;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let y = tensor_from(vec![0.0, 1.0, -2.0, 3.0, 0.0, -1.0], &[1, 2, 3], dtype).unwrap();
    let mu = Var::from_tensor(&tensor_from(vec![0.2, 0.7, -1.4, 2.6, -0.3, -0.6], &[1, 2, 3], dtype).unwrap()).unwrap();
    let sigma = Var::from_tensor(&tensor_from(vec![0.8, 1.3, 0.5, 2.0, 0.9, 0.6], &[1, 2, 3], dtype).unwrap()).unwrap();
    let vars = vec![("mu".to_string(), mu.clone()), ("sigma".to_string(), sigma.clone())];
    let gauss = || {
        let params = EntropyParams { mu: mu.as_tensor().clone(), sigma: sigma.as_tensor().clone() };
        bits(&gaussian_conditional_likelihood(&y, &params).unwrap()).unwrap().sum_all().unwrap()
    };
    let (err, at) = check_gradients(&vars, &gauss, &mut rng);
    assert!(err < 1e-4, "gaussian {err} at {at}");

    let mut store = ParamStore::new(dtype, 15);
    let prior = FactorizedPrior::new(&mut store, "prior", 3).unwrap();
    randomize(&store, &mut rng, 0.6);
    let y = tensor_from(vec![0.0, 1.0, -1.0, 2.0, 0.0, -3.0], &[1, 2, 3], dtype).unwrap();
    let fact = || bits(&prior.likelihood(&y).unwrap()).unwrap().sum_all().unwrap();
    let (err, at) = check_gradients(&vars_of(&store), &fact, &mut rng);
    assert!(err < 1e-4, "factorized {err} at {at}");
}
