use nalgebra::DMatrix;
use proptest::prelude::*;

use robodata_core::tokens::{
    build_layout, build_mask, dump_text, kept_indices, masked_attention, parse_text,
    subset_layout, MimMask, ModalitySubset, TokenKind, TokenLayout,
};

/// Plain dense softmax attention with a large negative additive mask.
fn dense_oracle(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, mask: &MimMask) -> DMatrix<f64> {
    let n = q.nrows();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q * k.transpose() * scale;
    for i in 0..n {
        for j in 0..n {
            if !mask.allowed(i, j) {
                scores[(i, j)] += -1e30;
            }
        }
    }
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let row = scores.row(i);
        let m = row.max();
        let e: Vec<f64> = row.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            w[(i, j)] = e[j] / z;
        }
    }
    w * v
}

fn subsets() -> Vec<ModalitySubset> {
    let mut out = Vec::new();
    for bits in 0..8u8 {
        out.push(ModalitySubset {
            static_image: bits & 1 == 0,
            wrist_image: bits & 2 == 0,
            occupancy: bits & 4 == 0,
        });
    }
    out
}

fn layout_strategy() -> impl Strategy<Value = TokenLayout> {
    prop::collection::vec(0usize..6, 1..4).prop_map(|lens| build_layout(&lens).unwrap())
}

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
    DMatrix::from_iterator(rows, cols, vals.iter().cycle().copied().take(rows * cols))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mask_structure(layout in layout_strategy()) {
        let mask = build_mask(&layout);
        let toks = layout.tokens();
        for i in 0..layout.len() {
            prop_assert!(mask.allowed(i, i));
            if toks[i].kind == TokenKind::Text {
                for (j, t) in toks.iter().enumerate() {
                    if t.kind.is_readout() {
                        prop_assert!(!mask.allowed(i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn attention_matches_dense_oracle(
        layout in layout_strategy(),
        vals in prop::collection::vec(-3.0f64..3.0, 1..64),
        d in 1usize..6,
    ) {
        let n = layout.len();
        let mask = build_mask(&layout);
        let q = matrix(n, d, &vals);
        let k = matrix(n, d, &vals.iter().rev().copied().collect::<Vec<_>>());
        let v = matrix(n, d + 1, &vals.iter().map(|x| x * 0.5 - 0.1).collect::<Vec<_>>());
        let got = masked_attention(&q, &k, &v, &mask).unwrap();
        let want = dense_oracle(&q, &k, &v, &mask);
        prop_assert!((got - want).abs().max() < 1e-12);
    }

    /// Outputs of every surviving token are bit-identical whatever optional
    /// read-out groups are dropped.
    #[test]
    fn dropping_groups_is_exact(
        layout in layout_strategy(),
        vals in prop::collection::vec(-2.0f64..2.0, 7..97),
    ) {
        let n = layout.len();
        let d = 4;
        let q = matrix(n, d, &vals);
        let k = matrix(n, d, &vals[3..]);
        let v = matrix(n, d, &vals[5..]);
        let full = masked_attention(&q, &k, &v, &build_mask(&layout)).unwrap();
        for subset in subsets() {
            let keep = kept_indices(&layout, &subset);
            let (_, mask) = subset_layout(&layout, &subset);
            let pick = |m: &DMatrix<f64>| m.select_rows(keep.iter());
            let out = masked_attention(&pick(&q), &pick(&k), &pick(&v), &mask).unwrap();
            for (r, &i) in keep.iter().enumerate() {
                for c in 0..d {
                    prop_assert_eq!(out[(r, c)].to_bits(), full[(i, c)].to_bits());
                }
            }
        }
    }

    #[test]
    fn text_dump_round_trips(layout in layout_strategy(), bits in 0u8..8) {
        let subset = subsets()[bits as usize];
        let (sub, mask) = subset_layout(&layout, &subset);
        let (l2, m2) = parse_text(&dump_text(&sub, &mask)).unwrap();
        prop_assert_eq!(l2, sub);
        prop_assert_eq!(m2, mask);
    }
}
