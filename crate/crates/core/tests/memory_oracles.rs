use sdmcl::numerics::{DenseMatrix, Rng};
use sdmcl::sdm_theory::{
    intersection_count, intersection_curve, intersection_weighted_sum, ActivationRule, IntersectionQuery, SdmMemory,
    WeightType,
};

fn unit(rng: &mut Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn cosine(x_a: &DenseMatrix<f64>, j: usize, v: &[f64]) -> f64 {
    (0..v.len()).map(|i| x_a[(i, j)] * v[i]).sum()
}

/// Active set computed pairwise, independent of the memory's own ranking code.
fn brute_active(x_a: &DenseMatrix<f64>, v: &[f64], rule: ActivationRule) -> Vec<bool> {
    let r = x_a.cols();
    let cos: Vec<f64> = (0..r).map(|j| cosine(x_a, j, v)).collect();
    match rule {
        ActivationRule::CosineThreshold(c) => cos.iter().map(|&e| e >= c).collect(),
        ActivationRule::TopK(k) => (0..r)
            .map(|j| {
                let better = (0..r)
                    .filter(|&i| cos[i] > cos[j] || (cos[i] == cos[j] && i < j))
                    .count();
                better < k
            })
            .collect(),
    }
}

#[test]
fn read_and_write_match_pairwise_sums() {
    let mut rng = Rng::new(42);
    for case in 0..100 {
        let n = 2 + rng.below(15);
        let r = 1 + rng.below(10);
        let m = 1 + rng.below(8);
        let o = 1 + rng.below(4);
        let rule = if case % 2 == 0 {
            ActivationRule::CosineThreshold(rng.uniform_range(-0.3, 0.5))
        } else {
            ActivationRule::TopK(1 + rng.below(r))
        };
        let mut mem = SdmMemory::random(n, r, o, rule, &mut rng).unwrap();
        let patterns: Vec<Vec<f64>> = (0..m).map(|_| unit(&mut rng, n)).collect();
        let values: Vec<Vec<f64>> = (0..m).map(|_| (0..o).map(|_| rng.normal()).collect()).collect();
        let p_a = DenseMatrix::<f64>::from_fn(n, m, |i, mu| patterns[mu][i]);
        let p_v = DenseMatrix::<f64>::from_fn(o, m, |c, mu| values[mu][c]);
        mem.write(&p_a, &p_v).unwrap();

        let mut expect_v = DenseMatrix::<f64>::zeros(o, r);
        for mu in 0..m {
            let on = brute_active(&mem.x_a, &patterns[mu], rule);
            for j in (0..r).filter(|&j| on[j]) {
                for c in 0..o {
                    expect_v[(c, j)] += values[mu][c];
                }
            }
        }
        assert!(mem.x_v.max_abs_diff(&expect_v) < 1e-12, "case {case} write");

        let query = unit(&mut rng, n);
        let on = brute_active(&mem.x_a, &query, rule);
        match mem.read(&query, false) {
            Ok(y) => {
                for c in 0..o {
                    let expect: f64 = (0..r).filter(|&j| on[j]).map(|j| expect_v[(c, j)]).sum();
                    assert!((y[c] - expect).abs() < 1e-12, "case {case} read");
                }
            }
            Err(_) => assert!(!on.iter().any(|&a| a), "case {case}: read failed with active neurons"),
        }
    }
}

fn hamming(a: u32, b: u32) -> usize {
    (a ^ b).count_ones() as usize
}

#[test]
fn binary_intersection_matches_enumeration() {
    for n in 1..=14usize {
        let total = 1u32 << n;
        let query = 0u32;
        for d_v in 0..=n {
            let pattern = (1u32 << d_v) - 1;
            let dist_q: Vec<usize> = (0..total).map(|x| hamming(x, query)).collect();
            let dist_p: Vec<usize> = (0..total).map(|x| hamming(x, pattern)).collect();
            for d in 0..=n {
                let count = (0..total as usize)
                    .filter(|&x| dist_q[x] <= d && dist_p[x] <= d)
                    .count();
                let got = intersection_weighted_sum(&IntersectionQuery {
                    n,
                    d,
                    d_v,
                    weight: WeightType::Binary,
                });
                assert_eq!(got, count as f64, "n={n} d={d} d_v={d_v}");
                assert_eq!(intersection_count(n, d, d_v).to_string(), count.to_string());
            }
        }
    }
}

#[test]
fn binary_curve_is_nonincreasing_at_n64() {
    for d in [5, 11, 15, 19, 25] {
        let curve = intersection_curve(64, d, WeightType::Binary).unwrap();
        assert_eq!(curve[0].1, 1.0);
        for w in curve.windows(2) {
            assert!(w[1].1 <= w[0].1, "d={d} at d_v={}", w[1].0);
        }
    }
}

#[test]
fn tiny_hand_values() {
    let q = |d_v| IntersectionQuery {
        n: 4,
        d: 1,
        d_v,
        weight: WeightType::Binary,
    };
    assert_eq!(intersection_weighted_sum(&q(0)), 5.0);
    assert_eq!(intersection_weighted_sum(&q(4)), 0.0);
}
