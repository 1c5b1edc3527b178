use alloc::vec;
use alloc::vec::Vec;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;

fn mask_of(dims: Dims, voxels: &[[usize; 3]]) -> BinaryMask {
    let mut m = BinaryMask::filled(dims, false);
    for c in voxels {
        m.data[dims.index(c[0], c[1], c[2])] = true;
    }
    m
}

#[test]
fn dice_examples() {
    let dims = Dims::cube(4);
    let a = mask_of(dims, &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
    let b = mask_of(dims, &[[0, 0, 2], [0, 0, 3], [1, 1, 1], [2, 2, 2]]);
    let c = mask_of(dims, &[[3, 3, 3]]);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &c).unwrap(), 0.0);
    assert_eq!(dice(&a, &b).unwrap(), 0.5);
    let empty = BinaryMask::filled(dims, false);
    assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    assert!(dice(&a, &BinaryMask::filled(Dims::cube(3), false)).is_err());
}

#[test]
fn hd95_examples() {
    let dims = Dims::cube(8);
    let a = mask_of(dims, &[[2, 2, 1]]);
    let b = mask_of(dims, &[[2, 2, 4]]);
    assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), 0.0);
    assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), 3.0);
    assert_eq!(hd95(&a, &b, [1.0, 1.0, 2.0]).unwrap(), 6.0);
    let empty = BinaryMask::filled(dims, false);
    assert!(matches!(hd95(&empty, &b, [1.0; 3]), Err(Error::EmptyMask(_))));
    assert!(matches!(hd95(&a, &empty, [1.0; 3]), Err(Error::EmptyMask(_))));
}

#[test]
fn surface_of_a_block_excludes_its_core() {
    let dims = Dims::cube(5);
    let block = BinaryMask::from_fn(dims, |c| c.iter().all(|&x| (1..=3).contains(&x)));
    let s = surface(&block);
    assert_eq!(s.len(), 26);
    assert!(!s.contains(&[2, 2, 2]));
}

#[test]
fn jacobian_examples() {
    let dims = Dims::cube(6);
    let r = jacobian_folding(&DisplacementField::zeros(dims)).unwrap();
    assert!(r.determinant.data.iter().all(|&d| d == 1.0));
    assert_eq!(r.folding_percent, 0.0);

    let scale = DisplacementField::from_fn(dims, |c| c.map(|x| 0.5 * x as f64));
    let r = jacobian_folding(&scale).unwrap();
    for idx in 0..dims.len() {
        if dims.is_interior(dims.coords(idx)) {
            assert_abs_diff_eq!(r.determinant.data[idx], 3.375, epsilon = 1e-6);
        }
    }
    assert_eq!(r.folding_percent, 0.0);

    let reflect = DisplacementField::from_fn(dims, |c| [-2.0 * c[0] as f64, 0.0, 0.0]);
    let r = jacobian_folding(&reflect).unwrap();
    for idx in 0..dims.len() {
        if dims.is_interior(dims.coords(idx)) {
            assert_abs_diff_eq!(r.determinant.data[idx], -1.0, epsilon = 1e-12);
        }
    }
    assert_eq!(r.folding_percent, 100.0);
}

#[test]
fn heatmap_examples() {
    let dims = Dims::new(3, 4, 2);
    let src = FeatureField::new(dims, 3, (0..dims.len() * 3).map(|i| ((i * 7 % 11) as f64) - 5.0).collect()).unwrap();
    let at = [1, 2, 1];
    let h = similarity_heatmap(&src, &src, at).unwrap();
    assert_abs_diff_eq!(h.data[dims.index(1, 2, 1)], 1.0, epsilon = 1e-12);
    assert!(h.data.iter().all(|&v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&v)));

    let ex = FeatureField::new(dims, 2, [1.0, 0.0].repeat(dims.len())).unwrap();
    let ey = FeatureField::new(dims, 2, [0.0, 3.0].repeat(dims.len())).unwrap();
    let h = similarity_heatmap(&ex, &ey, [0, 0, 0]).unwrap();
    assert!(h.data.iter().all(|&v| v == 0.0));
    assert!(similarity_heatmap(&src, &ex, at).is_err());
    assert!(similarity_heatmap(&src, &src, [3, 0, 0]).is_err());
}

#[test]
fn rotation_basics() {
    let dims = Dims::cube(9);
    let v = Volume::from_fn(dims, |c| (c[0] * 81 + c[1] * 9 + c[2]) as f64 / 729.0);
    assert_eq!(rotate(&v, [0.0, 0.0]), v);
    // a quarter turn about axis 0 permutes lattice points exactly
    let q = rotate(&v, [90.0, 0.0]);
    let back = rotate(&q, [-90.0, 0.0]);
    for (a, b) in v.data.iter().zip(&back.data) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }
    assert_ne!(q, v);
    let ball = Volume::from_fn(dims, |c| {
        let r2: f64 = c.iter().map(|&x| (x as f64 - 4.0) * (x as f64 - 4.0)).sum();
        if r2 <= 9.0 { 1.0 } else { 0.0 }
    });
    let spun = rotate(&ball, [90.0, 90.0]);
    for (a, b) in ball.data.iter().zip(&spun.data) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }
}

#[test]
fn landscape_grid_and_extrema() {
    let grid = angle_grid(-30.0, 30.0, 5.0).unwrap();
    assert_eq!(grid.len(), 13);
    assert_eq!(grid[6], 0.0);
    assert!(angle_grid(0.0, 1.0, 0.0).is_err());
    let v = Volume::from_fn(Dims::cube(6), |c| c[0] as f64 / 5.0);
    let reference = v.clone();
    let rows = loss_landscape(&v, &grid, |m| {
        Ok(m.data.iter().zip(&reference.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    })
    .unwrap();
    assert_eq!(rows.len(), 169);
    let best = landscape_argmin(&rows).unwrap();
    assert_eq!((best.angle1, best.angle2, best.cost), (0.0, 0.0, 0.0));
    let negated: Vec<LandscapeRow> = rows.iter().map(|r| LandscapeRow { cost: -r.cost, ..*r }).collect();
    let top = landscape_argmax(&negated).unwrap();
    assert_eq!((top.angle1, top.angle2), (0.0, 0.0));
}

#[test]
fn label_volume_contract() {
    let dims = Dims::cube(2);
    let legend = vec![(0, "background".into()), (1, "organ".into())];
    assert!(LabelVolume::new(dims, vec![0, 1, 2, 0, 0, 0, 0, 0], legend.clone()).is_err());
    let l = LabelVolume::new(dims, vec![0, 1, 1, 0, 0, 0, 0, 1], legend).unwrap();
    assert_eq!(l.mask(1).count(), 3);
    assert_eq!(l.name(1), Some("organ"));
    assert_eq!(l.warped(&DisplacementField::zeros(dims)).unwrap(), l);
}

fn arb_mask(dims: Dims) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), dims.len()).prop_map(move |d| BinaryMask::new(dims, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dice_and_hd95_are_symmetric(a in arb_mask(Dims::new(4, 3, 5)), b in arb_mask(Dims::new(4, 3, 5))) {
        let ab = dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        if a.count() > 0 && b.count() > 0 {
            prop_assert_eq!(hd95(&a, &b, [1.0, 2.0, 0.5]).unwrap(), hd95(&b, &a, [1.0, 2.0, 0.5]).unwrap());
        }
    }

    #[test]
    fn translations_never_fold(t in proptest::array::uniform3(-5.0f64..5.0)) {
        let phi = DisplacementField::from_fn(Dims::new(5, 4, 6), |_| t);
        let r = jacobian_folding(&phi).unwrap();
        prop_assert_eq!(r.folding_percent, 0.0);
    }
}
