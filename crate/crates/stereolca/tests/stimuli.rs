//! Stimulus-level integration checks: correlation-probe verification of
//! shifted pairs and slanted-plane renders, and the end-to-end disparity
//! sign convention.

use stereolca::datagen::{
    make_shifted_pair, probe_horizontal_disparity, procedural_texture, render_slanted_plane,
    DisparityLabel, RigSpec, SurfaceLabel,
};
use stereolca::imagecore::Preprocess;
use stereolca::lca::{binarize, encode, Dictionary, LcaConfig};
use stereolca::readout::{infer_map, TuningAccumulator, TuningMaps};

#[test]
fn shifted_pair_disparity_matches_probe() {
    let tex = procedural_texture::<f64>(256, 256, 21);
    for (dx, dy) in [(2.0, 0.0), (-1.5, 0.0), (0.5, 0.0)] {
        let pair = make_shifted_pair(&tex, DisparityLabel { dx, dy }, 160, 9).unwrap();
        let (h, w) = pair.dims();
        let measured = probe_horizontal_disparity(
            &pair,
            w as f64 / 2.0,
            h as f64 / 2.0,
            12,
            12,
            4.0,
            0.05,
        )
        .unwrap();
        assert!(
            (measured - dx).abs() < 0.15,
            "dx {dx}: cross-correlation peak at {measured}"
        );
    }
}

#[test]
fn slanted_plane_tilt_flip_negates_disparity() {
    // Rotating the tilt by 180 degrees negates the disparity field about
    // the fixation point.
    let tex = procedural_texture::<f64>(1024, 1024, 22);
    let rig = RigSpec {
        image_px: 128,
        texture_m_per_px: 0.001,
        ..RigSpec::calibrated()
    };
    let center = (rig.image_px as f64 - 1.0) / 2.0;
    let slant = 38.2;
    let a = render_slanted_plane(
        &tex,
        SurfaceLabel {
            tilt_deg: 0.0,
            slant_deg: slant,
        },
        &rig,
    )
    .unwrap();
    let b = render_slanted_plane(
        &tex,
        SurfaceLabel {
            tilt_deg: 180.0,
            slant_deg: slant,
        },
        &rig,
    )
    .unwrap();
    let probe = |pair, x| probe_horizontal_disparity(pair, x, center, 3, 9, 6.0, 0.05).unwrap();
    let da_plus = probe(&a, center + 10.0);
    let da_minus = probe(&a, center - 10.0);
    let db_plus = probe(&b, center + 10.0);
    let db_minus = probe(&b, center - 10.0);
    // The field of the flipped tilt at +10 px matches the original at
    // -10 px and vice versa (sign pattern mirrored).
    assert!(
        (da_plus - db_minus).abs() < 0.3 && (da_minus - db_plus).abs() < 0.3,
        "tilt flip should mirror the disparity field: {da_plus} {da_minus} vs {db_plus} {db_minus}"
    );
    assert!(
        (da_plus + da_minus).abs() < 0.35,
        "horizontal slant field should be odd about fixation: {da_plus} vs {da_minus}"
    );
    assert!(da_plus.abs() > 0.8, "slant {slant} should produce measurable disparity");
}

/// End-to-end sign test for the global disparity convention: stimuli
/// generated at +dx must be read out as +dx by tuning maps estimated from
/// independently generated stimuli.
#[test]
fn end_to_end_disparity_sign_convention() {
    let grid = stereolca::datagen::LabelGrid::Disparity(stereolca::datagen::DisparityGrid {
        max_abs: 1.0,
        step: 1.0,
    });
    let labels = grid.labels();
    let pre = Preprocess::default();
    let cfg = LcaConfig::default();
    // A fixed smooth dictionary is enough for a sign check; tuning maps
    // absorb whatever selectivity it has.
    let dict = {
        let noise = Dictionary::<f64>::init_noise(24, 16, 8, 3).unwrap();
        // Smooth the kernels so they correlate with natural structure.
        let mut left = noise.left().clone();
        let mut right = noise.right().clone();
        for k in 0..24 {
            for arr in [&mut left, &mut right] {
                let img = stereolca::imagecore::Image::new(
                    arr.index_axis(ndarray::Axis(0), k).to_owned(),
                )
                .unwrap();
                let sm = stereolca::imagecore::gaussian_blur(&img, 1.2).unwrap();
                arr.index_axis_mut(ndarray::Axis(0), k).assign(sm.as_array());
            }
        }
        Dictionary::new(left, right, 8).unwrap()
    };

    let encode_label = |li: usize, seed: u64| {
        let stereolca::datagen::Label::Disparity(d) = labels[li] else {
            unreachable!()
        };
        let tex = procedural_texture::<f64>(200, 200, seed);
        let raw = make_shifted_pair(&tex, d, 128, seed ^ 0x55).unwrap();
        let norm = pre.apply(&raw).unwrap();
        binarize(&encode(&norm.pair, &dict, &cfg).unwrap())
    };

    let mut acc = TuningAccumulator::shared(24, grid.clone(), 1);
    for li in 0..labels.len() {
        for i in 0..24u64 {
            let bits = encode_label(li, 1000 + li as u64 * 131 + i);
            acc.add(li, &bits.view()).unwrap();
        }
    }
    let maps: TuningMaps<f64> = acc.finish().unwrap();

    // Fresh stimuli at (+1, 0) and (-1, 0): the median readout must land
    // on the generating label, pinning the sign end to end.
    for (dx, li_want) in [(1.0f64, None), (-1.0, None)] {
        let li = labels
            .iter()
            .position(|l| {
                let v = l.as_vec2();
                v[0] == dx && v[1] == 0.0
            })
            .unwrap();
        let mut votes = std::collections::BTreeMap::<usize, usize>::new();
        for i in 0..12u64 {
            let bits = encode_label(li, 900_000 + li as u64 * 17 + i);
            let map = infer_map(&bits.view(), &maps).unwrap();
            for &est in map.label_indices.iter() {
                *votes.entry(est).or_default() += 1;
            }
        }
        let (best, _) = votes.iter().max_by_key(|(_, &n)| n).unwrap();
        assert_eq!(
            labels[*best].as_vec2(),
            [dx, 0.0],
            "majority readout must recover the generated sign for dx = {dx}"
        );
        let _ = li_want;
    }
}
