use axdelta::tensor::half::to_half_round;
use axdelta::tensor::{dot, Half, Matrix, SeededRng, TensorContainer};
use axdelta::Error;

/// Decodes binary16 bits by hand.
fn half_value(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 if frac == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
    }
}

/// Nearest finite half by search over the sorted positive table, ties to
/// the even bit pattern, saturating at the largest finite value.
struct HalfOracle {
    // (value, bits) for every non-negative finite half, ascending.
    table: Vec<(f64, u16)>,
}

impl HalfOracle {
    fn new() -> Self {
        let table = (0u16..0x7c00).map(|b| (half_value(b), b)).collect();
        Self { table }
    }

    fn round(&self, x: f32) -> u16 {
        let sign = if x.is_sign_negative() { 0x8000 } else { 0 };
        let a = (x as f64).abs();
        let idx = self.table.partition_point(|&(v, _)| v < a);
        let bits = if idx == self.table.len() {
            0x7bff
        } else if self.table[idx].0 == a || idx == 0 {
            self.table[idx].1
        } else {
            let (lo, lo_bits) = self.table[idx - 1];
            let (hi, hi_bits) = self.table[idx];
            let (dl, dh) = (a - lo, hi - a);
            if dl < dh || (dl == dh && lo_bits % 2 == 0) {
                lo_bits
            } else {
                hi_bits
            }
        };
        sign | bits
    }
}

#[test]
fn half_decode_matches_hand_decoder_for_every_pattern() {
    for bits in 0..=u16::MAX {
        let got = Half(bits).to_f32() as f64;
        let want = half_value(bits);
        if want.is_nan() {
            assert!(got.is_nan(), "{bits:#06x}");
        } else {
            assert_eq!(got, want, "{bits:#06x}");
        }
    }
}

#[test]
fn half_rounding_matches_oracle_on_sweep() {
    let oracle = HalfOracle::new();
    let mut inputs: Vec<f32> = Vec::new();
    for &(v, _) in &oracle.table {
        inputs.push(v as f32);
    }
    for w in oracle.table.windows(2) {
        let mid = ((w[0].0 + w[1].0) / 2.0) as f32;
        inputs.extend([
            mid,
            f32::from_bits(mid.to_bits() + 1),
            f32::from_bits(mid.to_bits() - 1),
        ]);
    }
    inputs.extend([
        65504.0,
        65519.0,
        65520.0,
        1e6,
        f32::MAX,
        f32::INFINITY,
        1e-10,
        0.0,
    ]);
    let mut bits = 0u32;
    while bits < 0x7f80_0000 {
        inputs.push(f32::from_bits(bits));
        bits += 4099;
    }
    let mut checked = 0usize;
    for x in inputs {
        for x in [x, -x] {
            let got = to_half_round(x).unwrap().bits();
            assert_eq!(got, oracle.round(x), "x = {x:e}");
            checked += 1;
        }
    }
    assert!(checked > 1_000_000);
}

#[test]
fn half_rejects_nan() {
    assert!(matches!(to_half_round(f32::NAN), Err(Error::InvalidValue(_))));
}

#[test]
fn matmul_t_is_close_to_f64_triple_loop() {
    let mut rng = SeededRng::new(11);
    for (m, k, n) in [(1, 1, 1), (3, 7, 5), (16, 64, 33), (9, 129, 4)] {
        let a = rng.normal_matrix(m, k, 1.0);
        let b = rng.normal_matrix(n, k, 1.0);
        let c = a.matmul_t(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut exact = 0.0f64;
                let mut abs = 0.0f64;
                for t in 0..k {
                    let p = a.get(i, t) as f64 * b.get(j, t) as f64;
                    exact += p;
                    abs += p.abs();
                }
                // Standard bound for a length-k float sum.
                let bound = k as f64 * f32::EPSILON as f64 * abs + 1e-30;
                assert!(
                    (c.get(i, j) as f64 - exact).abs() <= bound,
                    "({m},{k},{n}) at {i},{j}"
                );
            }
        }
        assert_eq!(a.matmul(&b.transpose()).unwrap().shape(), c.shape());
    }
}

#[test]
fn dot_is_order_fixed() {
    let mut rng = SeededRng::new(3);
    let a = rng.normal_matrix(1, 100, 1.0);
    let b = rng.normal_matrix(1, 100, 1.0);
    let d1 = dot(a.row(0), b.row(0));
    let d2 = dot(a.row(0), b.row(0));
    assert_eq!(d1.to_bits(), d2.to_bits());
    assert_eq!(d1.to_bits(), dot(b.row(0), a.row(0)).to_bits());
}

/// Reads a TNC1 buffer without the library.
fn hand_parse(bytes: &[u8]) -> Vec<(String, usize, usize, Vec<u32>)> {
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
    assert_eq!(&bytes[..4], b"TNC1");
    assert_eq!(u32_at(4), 1);
    let count = u32_at(8);
    let mut p = 12;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32_at(p);
        let name = String::from_utf8(bytes[p + 4..p + 4 + len].to_vec()).unwrap();
        p += 4 + len;
        let (r, c) = (u32_at(p), u32_at(p + 4));
        p += 8;
        let vals = (0..r * c).map(|i| u32_at(p + 4 * i) as u32).collect();
        p += 4 * r * c;
        out.push((name, r, c, vals));
    }
    assert_eq!(p, bytes.len());
    out
}

#[test]
fn container_roundtrip_of_100_tensors() {
    let mut rng = SeededRng::new(5);
    let mut c = TensorContainer::new();
    for i in 0..100 {
        let r = 1 + rng.below(9) as usize;
        let k = 1 + rng.below(17) as usize;
        c.push(format!("t{i}.w"), rng.normal_matrix(r, k, 2.0)).unwrap();
    }
    let bytes = c.encode();
    let back = TensorContainer::decode(&bytes).unwrap();
    assert_eq!(back.encode(), bytes);
    let parsed = hand_parse(&bytes);
    assert_eq!(parsed.len(), 100);
    for ((name, m), (pn, r, k, vals)) in back.entries().iter().zip(&parsed) {
        assert_eq!(name, pn);
        assert_eq!(m.shape(), (*r, *k));
        let bits: Vec<u32> = m.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(&bits, vals);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tnc");
    axdelta::tensor::write_container(&path, &c).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(axdelta::tensor::read_container(&path).unwrap().encode(), bytes);
}

#[test]
fn container_rejects_damage() {
    let mut c = TensorContainer::new();
    c.push("a", Matrix::identity(3)).unwrap();
    let bytes = c.encode();
    assert!(matches!(
        TensorContainer::decode(&bytes[..bytes.len() - 1]),
        Err(Error::Truncated { .. })
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        TensorContainer::decode(&bad),
        Err(Error::BadMagic { .. })
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(
        TensorContainer::decode(&long),
        Err(Error::Malformed { .. })
    ));
    assert!(matches!(
        c.push("a", Matrix::identity(2)),
        Err(Error::DuplicateName(_))
    ));
}
