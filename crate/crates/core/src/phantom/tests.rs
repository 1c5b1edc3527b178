use alloc::vec::Vec;

use super::*;
use crate::volume::{invert_field, warp, BinaryMask};

#[test]
fn generation_is_deterministic() {
    let a = generate(7, Dims::cube(16)).unwrap();
    let b = generate(7, Dims::cube(16)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.volume, generate(8, Dims::cube(16)).unwrap().volume);
    assert!(generate(1, Dims::new(16, 12, 16)).is_err());
}

#[test]
fn desk_phantom_contracts() {
    for seed in [1, 2, 3] {
        let ph = generate(seed, Dims::cube(48)).unwrap();
        assert!(ph.volume.is_unit_range());
        let count = |l| ph.labels.data.iter().filter(|&&x| x == l).count();
        let (organ, tumour, vessel) = (count(ORGAN), count(TUMOUR), count(VESSEL));
        assert!(organ > tumour && tumour > 0, "organ {organ} tumour {tumour}");
        assert!(vessel > 0);
        // the tumour sits inside the organ: none of its voxels touch background
        let dims = ph.labels.dims;
        for idx in 0..dims.len() {
            if ph.labels.data[idx] != TUMOUR {
                continue;
            }
            let c = dims.coords(idx);
            for o in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
                assert_ne!(ph.labels.data[dims.clamped_index(c, o)], BACKGROUND);
            }
        }
    }
}

#[test]
fn deformation_contracts() {
    let dims = Dims::cube(48);
    assert_eq!(synth_deformation(1, dims, 0.0, 8.0).unwrap(), DisplacementField::zeros(dims));
    let phi = synth_deformation(3, dims, 6.0, 8.0).unwrap();
    assert!((phi.max_magnitude() - 6.0).abs() < 1e-9);
    assert_eq!(jacobian_folding(&phi).unwrap().folding_percent, 0.0);
    assert_eq!(phi, synth_deformation(3, dims, 6.0, 8.0).unwrap());
    assert!(synth_deformation(3, dims, -1.0, 8.0).is_err());
    assert!(matches!(synth_deformation(3, Dims::cube(16), 40.0, 1.0), Err(Error::RejectionFailed(REJECTION_TRIES))));
}

#[test]
fn inverse_field_undoes_the_warp() {
    let dims = Dims::cube(32);
    let phi = synth_deformation(5, dims, 4.0, 6.0).unwrap();
    let psi = invert_field(&phi, 30);
    // psi(x) + phi(x + psi(x)) ~ 0 away from the borders
    let channels: Vec<Volume> = (0..3)
        .map(|a| Volume { dims, spacing: [1.0; 3], data: (0..dims.len()).map(|i| phi.data[3 * i + a]).collect() })
        .collect();
    let mut worst = 0.0f64;
    for v in 0..dims.len() {
        let c = dims.coords(v);
        if !c.iter().all(|&x| (6..26).contains(&x)) {
            continue;
        }
        let p = psi.at(v);
        let q = [c[0] as f64 + p[0], c[1] as f64 + p[1], c[2] as f64 + p[2]];
        for a in 0..3 {
            worst = worst.max((p[a] + crate::volume::trilinear_sample(&channels[a], q)).abs());
        }
    }
    assert!(worst < 0.05, "inverse residual {worst}");
    let ph = generate(2, dims).unwrap();
    let there_and_back = warp(&warp(&ph.volume, &phi).unwrap(), &psi).unwrap();
    let mask = BinaryMask::from_fn(dims, |c| c.iter().all(|&x| (8..24).contains(&x)));
    let err: f64 = mask.indices().iter().map(|&i| (there_and_back.data[i] - ph.volume.data[i]).abs()).sum::<f64>() / mask.count() as f64;
    assert!(err < 0.05, "round trip error {err}");
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = alloc::vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn modality_pair_is_rank_inverted() {
    let ph = generate(4, Dims::cube(32)).unwrap();
    let (a, b) = make_modality_pair(&ph, 9).unwrap();
    assert_eq!(a, ph.volume);
    assert_eq!((a.clone(), b.clone()), make_modality_pair(&ph, 9).unwrap());
    assert!(b.is_unit_range());
    let fg = BinaryMask::foreground(&a, 0.01).indices();
    let xa: Vec<f64> = fg.iter().map(|&i| a.data[i]).collect();
    let xb: Vec<f64> = fg.iter().map(|&i| b.data[i]).collect();
    let rho = pearson(&ranks(&xa), &ranks(&xb));
    assert!(rho < -0.8, "rank correlation {rho}");
}
