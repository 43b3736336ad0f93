mod common;

use std::collections::HashSet;

use common::{naive_attention as naive, project, rand, Raw};
use crossformer::lsda::{attention_flops, group_attention, AttentionKind, GroupLayout, MASK_LOGIT};
use crossformer::{Tape, Tensor};
use proptest::prelude::*;

fn grouped(x: &Tensor, layout: &GroupLayout, p: &Raw, bias: &Tensor) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let o = group_attention(&tape.constant(x.clone()), layout, &p.bind(&tape), &tape.constant(bias.clone())).unwrap();
    (o.out.value().clone(), o.attn)
}

fn check_bijection(layout: &GroupLayout) {
    let mut seen = HashSet::new();
    for r in 0..layout.rows {
        for c in 0..layout.cols {
            let (g, s) = layout.assignment(r, c);
            assert!(g < layout.n_groups() && s < layout.slots_per_group());
            assert_eq!(layout.slot(g, s), Some((r, c)));
            assert!(seen.insert((g, s)));
        }
    }
    let filled = (0..layout.n_groups())
        .flat_map(|g| (0..layout.slots_per_group()).map(move |s| (g, s)))
        .filter(|&(g, s)| layout.slot(g, s).is_some())
        .count();
    assert_eq!(filled, layout.n_tokens());
    assert_eq!(filled + layout.padded_count(), layout.n_groups() * layout.slots_per_group());
}

#[test]
fn exhaustive_bijection() {
    for rows in 1..=16 {
        for cols in 1..=16 {
            for g in 1..=8 {
                check_bijection(&GroupLayout::sda(rows, cols, g).unwrap());
                for i in 1..=4 {
                    check_bijection(&GroupLayout::lda(rows, cols, g, i).unwrap());
                }
            }
        }
    }
}

#[test]
fn sda_tiles_are_contiguous() {
    let l = GroupLayout::sda(6, 6, 3).unwrap();
    assert_eq!(l.n_groups(), 4);
    let origins: Vec<_> = (0..4).map(|g| l.slot(g, 0).unwrap()).collect();
    assert_eq!(origins, vec![(0, 0), (0, 3), (3, 0), (3, 3)]);
    for g in 0..4 {
        let (r0, c0) = origins[g];
        for s in 0..9 {
            assert_eq!(l.slot(g, s), Some((r0 + s / 3, c0 + s % 3)));
        }
    }
    assert_eq!(GroupLayout::sda(3, 3, 3).unwrap().n_groups(), 1);
}

#[test]
fn sda_padding_is_flagged() {
    let l = GroupLayout::sda(7, 7, 3).unwrap();
    assert_eq!(l.n_groups(), 9);
    assert_eq!(l.padded_count(), 81 - 49);
    let m = l.key_mask();
    let masked = m.data().iter().filter(|&&v| v == MASK_LOGIT).count();
    assert_eq!(masked, l.padded_count());
    assert!(l.group_is_full(0) && !l.group_is_full(8));
}

#[test]
fn lda_residue_groups() {
    let l = GroupLayout::lda(9, 9, 3, 3).unwrap();
    assert_eq!(l.n_groups(), 9);
    let first: Vec<_> = (0..9).map(|s| l.slot(0, s).unwrap()).collect();
    let expect: Vec<_> = [0, 3, 6].iter().flat_map(|&r| [0, 3, 6].map(|c| (r, c))).collect();
    assert_eq!(first, expect);
    for g in 0..9 {
        let (r0, c0) = l.slot(g, 0).unwrap();
        for s in 0..9 {
            let (sy, sx) = l.lattice_coords(s);
            assert_eq!(l.slot(g, s), Some((r0 + 3 * sy, c0 + 3 * sx)));
        }
    }
}

#[test]
fn lda_large_grid() {
    let l = GroupLayout::lda(56, 56, 4, 4).unwrap();
    assert_eq!(l.n_groups(), 256);
    check_bijection(&l);
    assert_eq!(l.padded_count(), 256 * 16 - 56 * 56);
}

#[test]
fn unit_interval_is_sda() {
    for (r, c, g) in [(5, 7, 2), (8, 8, 4), (3, 10, 3)] {
        let a = GroupLayout::sda(r, c, g).unwrap();
        let b = GroupLayout::lda(r, c, g, 1).unwrap();
        assert_eq!(a.slot_table(), b.slot_table());
        assert_eq!(a.n_groups(), b.n_groups());
    }
}

#[test]
fn six_grid_matches_naive() {
    let x = rand(1, &[1, 6, 6, 8], 1.0);
    let p = Raw::random(2, 8, 2);
    let bias = rand(3, &[2, 9, 9], 1.0);
    let l = GroupLayout::sda(6, 6, 3).unwrap();
    assert!(grouped(&x, &l, &p, &bias).0.max_abs_diff(&naive(&x, &l, &p, &bias)) < 1e-10);
}

#[test]
fn single_token_groups() {
    let x = rand(4, &[2, 3, 2, 4], 1.0);
    let p = Raw::random(5, 4, 2);
    let bias = rand(6, &[2, 1, 1], 1.0);
    let (out, attn) = grouped(&x, &GroupLayout::sda(3, 2, 1).unwrap(), &p, &bias);
    assert!(attn.data().iter().all(|&a| a == 1.0));
    for r in 0..3 {
        for c in 0..2 {
            let t: Vec<f64> = (0..4).map(|k| x.get(&[1, r, c, k])).collect();
            let y = project(&project(&t, &p.wv, Some(&p.bv)), &p.wo, Some(&p.bo));
            for k in 0..4 {
                assert!((out.get(&[1, r, c, k]) - y[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_query_is_uniform() {
    let x = rand(7, &[1, 5, 5, 6], 1.0);
    let mut p = Raw::random(8, 6, 3);
    p.wq = Tensor::zeros(vec![6, 6]);
    p.bq = Tensor::zeros(vec![6]);
    let l = GroupLayout::sda(5, 5, 3).unwrap();
    let (out, attn) = grouped(&x, &l, &p, &Tensor::zeros(vec![1, 9, 9]));
    for g in 0..l.n_groups() {
        let members: Vec<_> = (0..9).filter_map(|s| l.slot(g, s)).collect();
        let n = members.len() as f64;
        for s in 0..9 {
            if l.slot(g, s).is_none() {
                continue;
            }
            for j in 0..9 {
                let a = attn.get(&[0, g, 1, s, j]);
                let e = if l.slot(g, j).is_some() { 1.0 / n } else { 0.0 };
                assert!((a - e).abs() < 1e-12);
            }
        }
        let mut mean_v = vec![0.0; 6];
        for &(r, c) in &members {
            let t: Vec<f64> = (0..6).map(|k| x.get(&[0, r, c, k])).collect();
            for (m, v) in mean_v.iter_mut().zip(project(&t, &p.wv, Some(&p.bv))) {
                *m += v / n;
            }
        }
        let y = project(&mean_v, &p.wo, Some(&p.bo));
        for &(r, c) in &members {
            for k in 0..6 {
                assert!((out.get(&[0, r, c, k]) - y[k]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn permutation_equivariance() {
    let l = GroupLayout::sda(4, 4, 2).unwrap();
    let x = rand(9, &[1, 4, 4, 4], 1.0);
    let p = Raw::random(10, 4, 2);
    let bias = rand(11, &[2, 4, 4], 1.0);
    let perm = [2usize, 0, 3, 1];
    let g = 3;
    let pos: Vec<_> = (0..4).map(|s| l.slot(g, s).unwrap()).collect();
    let px = Tensor::from_fn(x.shape().to_vec(), |i| {
        match pos.iter().position(|&q| q == (i[1], i[2])) {
            Some(s) => x.get(&[i[0], pos[perm[s]].0, pos[perm[s]].1, i[3]]),
            None => x.get(i),
        }
    });
    let pbias = Tensor::from_fn(vec![2, 4, 4], |i| bias.get(&[i[0], perm[i[1]], perm[i[2]]]));
    let (y, _) = grouped(&x, &l, &p, &bias);
    let (py, _) = grouped(&px, &l, &p, &pbias);
    for (s, &(r, c)) in pos.iter().enumerate() {
        let (sr, sc) = pos[perm[s]];
        for k in 0..4 {
            assert!((py.get(&[0, r, c, k]) - y.get(&[0, sr, sc, k])).abs() < 1e-12);
        }
    }
}

#[test]
fn bias_shape_is_checked() {
    let x = rand(12, &[1, 4, 4, 4], 1.0);
    let p = Raw::random(13, 4, 2);
    let tape = Tape::new();
    let l = GroupLayout::sda(4, 4, 2).unwrap();
    let bad = tape.constant(Tensor::zeros(vec![2, 9, 9]));
    assert!(group_attention(&tape.constant(x), &l, &p.bind(&tape), &bad).is_err());
}

#[test]
fn flops_scale_with_group_area() {
    let (dim, heads) = (64, 4);
    let d = (dim / heads) as u64;
    let proj = |l: &GroupLayout| 4 * (l.n_groups() * l.slots_per_group()) as u64 * (dim * dim) as u64;
    let score = |g| {
        let l = GroupLayout::sda(56, 56, g).unwrap();
        attention_flops(&l, dim, heads) - proj(&l)
    };
    assert_eq!(score(14), 4 * score(7));
    assert_eq!(score(28), 4 * score(14));
    let full = GroupLayout::sda(14, 14, 14).unwrap();
    assert_eq!(attention_flops(&full, dim, heads) - proj(&full), 2 * heads as u64 * 14u64.pow(4) * d);
}

fn config() -> impl Strategy<Value = (u64, usize, usize, usize, usize, bool, usize, usize, usize)> {
    (any::<u64>(), 1usize..3, 1usize..9, 1usize..9, 1usize..4, any::<bool>(), 1usize..4, 1usize..3, 1usize..4)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn grouped_matches_naive((seed, batch, rows, cols, g, lda, interval, heads, hd) in config()) {
        let dim = heads * hd;
        let kind = if lda { AttentionKind::Lda } else { AttentionKind::Sda };
        let l = GroupLayout::new(kind, rows, cols, g, interval).unwrap();
        let x = rand(seed, &[batch, rows, cols, dim], 1.0);
        let p = Raw::random(seed ^ 0x55, dim, heads);
        let bias = rand(seed ^ 0xaa, &[if seed % 2 == 0 { heads } else { 1 }, g * g, g * g], 1.0);
        let (out, attn) = grouped(&x, &l, &p, &bias);
        prop_assert!(out.max_abs_diff(&naive(&x, &l, &p, &bias)) < 1e-10);
        let gg = g * g;
        for row in 0..attn.numel() / gg {
            let s = (row / gg) % gg;
            let group = (row / (gg * heads)) % l.n_groups();
            if l.slot(group, s).is_some() {
                let sum: f64 = attn.data()[row * gg..(row + 1) * gg].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
