use pnacc_core::fixq::{requantize, wrap_to_width, FixedFormat, QTensor};
use pnacc_core::tile_mm::{
    apply_activation, matmul_maxpool, matmul_tiled, max_columns, Activation, EngineRegistry, MatmulJob,
    OutputOrientation, TileConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Naive triple loop with a 64-bit accumulator, wrapped to the hardware width before narrowing.
fn naive(a: &QTensor, w: &QTensor, bias: &[i64], shift: i32, act: Activation, out: FixedFormat) -> Vec<i32> {
    let (n, k) = (a.dims()[0], a.dims()[1]);
    let c = w.dims()[1];
    let bits = if a.fmt().total_bits().max(w.fmt().total_bits()) == 8 { 32 } else { 48 };
    let mut acc = vec![0i64; n * c];
    for i in 0..n {
        for j in 0..c {
            let mut s = bias[j];
            for t in 0..k {
                s += a.codes()[i * k + t] as i64 * w.codes()[t * c + j] as i64;
            }
            acc[i * c + j] = wrap_to_width(s, bits);
        }
    }
    let codes = requantize(&acc, shift, out).unwrap();
    codes
        .into_iter()
        .map(|x| match act {
            Activation::None => x,
            Activation::Relu => x.max(0),
            Activation::Relu6 => x.max(0).min((6 << out.frac_bits()).min(out.max_code() as i32)),
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fmt: FixedFormat) -> QTensor {
    let codes = (0..rows * cols)
        .map(|_| rng.gen_range(fmt.min_code()..=fmt.max_code()) as i32)
        .collect();
    QTensor::new(vec![rows, cols], codes, fmt).unwrap()
}

const CONFIGS: [(usize, usize); 4] = [(32, 32), (8, 16), (1, 1), (5, 7)];

#[test]
fn random_cases_match_naive_oracle_on_every_engine_and_tile() {
    let registry = EngineRegistry::with_defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let bits = if case % 2 == 0 { 8 } else { 16 };
        let fmt = FixedFormat::new(bits, rng.gen_range(0..bits / 2)).unwrap();
        let (n, k, c) = (rng.gen_range(1..=130), rng.gen_range(1..=130), rng.gen_range(1..=130));
        let a = random_matrix(&mut rng, n, k, fmt);
        let w = random_matrix(&mut rng, k, c, fmt);
        let bias: Vec<i64> = (0..c).map(|_| rng.gen_range(-5000..5000)).collect();
        let shift = rng.gen_range(0..(2 * fmt.frac_bits() as i32 + 8));
        let act = [Activation::None, Activation::Relu, Activation::Relu6][case % 3];
        let expected = naive(&a, &w, &bias, shift, act, fmt);
        let pooled_expected = max_columns(&QTensor::new(vec![n, c], expected.clone(), fmt).unwrap()).unwrap();
        for &(m_u, n_u) in &CONFIGS {
            let tile = TileConfig::new(m_u, n_u).unwrap();
            for orient in [OutputOrientation::RowOriented, OutputOrientation::ColumnOriented] {
                let got = matmul_tiled(&a, &w, &bias, tile, orient, act, shift, fmt).unwrap();
                assert_eq!(got.codes(), expected.as_slice(), "case {case} tile {tile:?} {orient:?}");
            }
            let pooled = matmul_maxpool(&a, &w, &bias, tile, act, shift, fmt).unwrap();
            assert_eq!(pooled, pooled_expected, "case {case} pooled");
        }
        if case % 10 == 0 {
            for name in registry.names() {
                let job = MatmulJob {
                    input: &a,
                    weight: &w,
                    bias: &bias,
                    tile: TileConfig::default(),
                    orientation: OutputOrientation::ColumnOriented,
                    activation: act,
                    shift,
                    out_fmt: fmt,
                    max_pool: false,
                    record_trace: false,
                };
                let out = registry.get(name).unwrap().run(&job).unwrap();
                assert_eq!(out.tensor.codes(), expected.as_slice(), "engine {name}");
            }
        }
    }
}

#[test]
fn ragged_33_by_33_with_32_tiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let fmt = FixedFormat::Q8_4;
    let a = random_matrix(&mut rng, 17, 33, fmt);
    let w = random_matrix(&mut rng, 33, 33, fmt);
    let bias = vec![0; 33];
    let expected = naive(&a, &w, &bias, 6, Activation::None, fmt);
    let got = matmul_tiled(&a, &w, &bias, TileConfig::default(), OutputOrientation::RowOriented, Activation::None, 6, fmt).unwrap();
    assert_eq!(got.codes(), expected.as_slice());
}

#[test]
fn orientation_changes_trace_not_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fmt = FixedFormat::Q8_4;
    let a = random_matrix(&mut rng, 9, 20, fmt);
    let w = random_matrix(&mut rng, 20, 11, fmt);
    let bias = vec![3; 11];
    let tile = TileConfig::new(8, 4).unwrap();
    let engine = EngineRegistry::with_defaults().get("tiled").unwrap();
    let run = |orientation| {
        let job = MatmulJob {
            input: &a,
            weight: &w,
            bias: &bias,
            tile,
            orientation,
            activation: Activation::Relu,
            shift: 5,
            out_fmt: fmt,
            max_pool: false,
            record_trace: true,
        };
        engine.run(&job).unwrap()
    };
    let row = run(OutputOrientation::RowOriented);
    let col = run(OutputOrientation::ColumnOriented);
    assert_eq!(row.tensor, col.tensor);
    let (rt, ct) = (row.trace.unwrap(), col.trace.unwrap());
    // Same multiset of passes: 9 points x 3 reduction blocks x 3 channel blocks.
    assert_eq!(rt.len(), 9 * 3 * 3);
    let mut rs = rt.clone();
    let mut cs = ct.clone();
    rs.sort_by_key(|v| (v.point, v.k_tile, v.c_tile));
    cs.sort_by_key(|v| (v.point, v.k_tile, v.c_tile));
    assert_eq!(rs, cs);
    assert_ne!(rt, ct);
    // Row-oriented: point index never decreases. Column-oriented: channel block never decreases.
    assert!(rt.windows(2).all(|p| p[0].point <= p[1].point));
    assert!(ct.windows(2).all(|p| p[0].c_tile <= p[1].c_tile));
}

proptest! {
    #[test]
    fn activation_matches_scalar_reference(codes in prop::collection::vec(-128i32..=127, 0..64), frac in 0u8..8) {
        let fmt = FixedFormat::new(8, frac).unwrap();
        let six = 6i32 << frac;
        let relu = apply_activation(&codes, Activation::Relu, fmt);
        let relu6 = apply_activation(&codes, Activation::Relu6, fmt);
        for (i, &c) in codes.iter().enumerate() {
            prop_assert_eq!(relu[i], if c < 0 { 0 } else { c });
            let clipped = if c < 0 { 0 } else if c > six { six } else { c };
            prop_assert_eq!(relu6[i], clipped.min(127));
        }
    }

    #[test]
    fn max_columns_matches_transpose_then_row_max(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, rows, cols, FixedFormat::Q8_4);
        let transposed: Vec<Vec<i32>> = (0..cols).map(|j| (0..rows).map(|i| x.codes()[i * cols + j]).collect()).collect();
        let expected: Vec<i32> = transposed.iter().map(|r| *r.iter().max().unwrap()).collect();
        let got = max_columns(&x).unwrap();
        prop_assert_eq!(got.codes(), expected.as_slice());
    }
}
