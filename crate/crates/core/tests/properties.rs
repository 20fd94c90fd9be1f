use nalgebra::{Matrix3, Vector3};
use panfield_core::diffmath::{forward_backward, Mat, ParamRef, Tape};
use panfield_core::fields::{band_weight, init_biased, FieldConfig, FieldRole};
use panfield_core::renderer::sample_weights;
use panfield_core::scene::{project_so3, world_to_box, ObjectTrack};
use panfield_core::synth::{panoptic_quality, PanopticQuality};
use proptest::prelude::*;

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-3).then(|| v.map(|c| c / n))
}

fn vec3() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-2.0f64..2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn density_is_non_negative(seed in 0u64..1000, scale in 0.1f32..20.0, x in vec3(), d in vec3()) {
        let Some(d) = unit(d) else { return Ok(()) };
        let mut field = init_biased(FieldConfig::stuff_toy(3), FieldRole::Stuff, seed).unwrap();
        for v in field.params.values_mut() {
            *v *= scale;
        }
        let s = field.eval_stuff(x.map(|v| v as f32), d.map(|v| v as f32), 10.0, 4.0).unwrap();
        prop_assert!(s.density >= 0.0);
    }

    #[test]
    fn density_and_semantics_ignore_direction(seed in 0u64..1000, x in vec3(), d1 in vec3(), d2 in vec3()) {
        let (Some(d1), Some(d2)) = (unit(d1), unit(d2)) else { return Ok(()) };
        let field = init_biased(FieldConfig::stuff_toy(4), FieldRole::Stuff, seed).unwrap();
        let x = x.map(|v| v as f32);
        let a = field.eval_stuff(x, d1.map(|v| v as f32), 10.0, 4.0).unwrap();
        let b = field.eval_stuff(x, d2.map(|v| v as f32), 10.0, 4.0).unwrap();
        prop_assert_eq!(a.density.to_bits(), b.density.to_bits());
        prop_assert_eq!(a.semantic_logits, b.semantic_logits);
    }

    #[test]
    fn band_window_is_monotone(alpha in 0.0f64..12.0, step in 0.0f64..2.0, j in 0usize..10) {
        prop_assert!(band_weight(j, alpha + step) >= band_weight(j, alpha));
        prop_assert!(band_weight(j + 1, alpha) <= band_weight(j, alpha));
    }

    #[test]
    fn projection_is_idempotent(m in prop::array::uniform9(-3.0f64..3.0)) {
        let m = Matrix3::from_row_slice(&m);
        if m.determinant().abs() < 1e-3 {
            return Ok(());
        }
        let r = project_so3(&m).unwrap();
        let rr = project_so3(&r).unwrap();
        prop_assert!((r - rr).norm() < 1e-7);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shared_translation_leaves_box_coordinates_unchanged(
        yaw in -3.0f64..3.0, t in vec3(), shift in vec3(), x in vec3(), d in vec3(),
    ) {
        let Some(d) = unit(d) else { return Ok(()) };
        let r = panfield_core::scene::rotation_z(yaw);
        let mut track = ObjectTrack::fixed(1, 0, [1.0, 2.0, 0.5], r, Vector3::from(t)).unwrap();
        let a = world_to_box(&track, 0.0, x, d);
        track.translate(Vector3::from(shift));
        let moved = [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]];
        let b = world_to_box(&track, 0.0, moved, d);
        for i in 0..3 {
            prop_assert!((a.x_local[i] - b.x_local[i]).abs() < 1e-9);
            prop_assert!((a.d_local[i] - b.d_local[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_normalized_and_transmittance_decreases(
        samples in prop::collection::vec((0.0f64..50.0, 0.001f64..0.2), 1..64),
    ) {
        let density: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let delta: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let w = sample_weights(&density, &delta);
        let total: f64 = w.iter().map(|&v| v as f64).sum();
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!(total <= 1.0 + 1e-6);
        let mut trans = 1.0f64;
        for (s, d) in density.iter().zip(&delta) {
            let next = trans * (-(s * d)).exp();
            prop_assert!(next <= trans);
            trans = next;
        }
    }

    #[test]
    fn occluder_reduces_later_weights(
        samples in prop::collection::vec((0.01f64..10.0, 0.01f64..0.2), 2..32),
        at in 0usize..31,
    ) {
        let at = at % samples.len();
        let density: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let delta: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let before = sample_weights(&density, &delta);
        let mut d2 = density.clone();
        let mut t2 = delta.clone();
        d2.insert(at, 100.0);
        t2.insert(at, 0.1);
        let after = sample_weights(&d2, &t2);
        for i in at..density.len() {
            prop_assert!(after[i + 1] < before[i] || before[i] == 0.0);
        }
    }

    #[test]
    fn gradient_is_linear_in_the_loss(
        p in prop::collection::vec(-1.0f64..1.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0,
    ) {
        let w = ParamRef { block: 0, offset: 0, rows: 2, cols: 2 };
        let bias = ParamRef { block: 0, offset: 4, rows: 1, cols: 2 };
        let grad_of = |wa: f64, wb: f64| {
            forward_backward(vec![&p[..]], |tape: &mut Tape<'_, f64>| {
                let x = tape.input(Mat::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7])?)?;
                let h = tape.linear(x, w, bias)?;
                let s = tape.softplus(h)?;
                let l1 = tape.sum_squares(s, vec![0.2; 6], 1.0)?;
                let e = tape.sigmoid(h)?;
                let l2 = tape.sum(e)?;
                tape.combine(vec![(l1, wa), (l2, wb)])
            })
            .unwrap()
            .1
            .remove(0)
        };
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        let g = grad_of(a, b);
        for i in 0..6 {
            prop_assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn replayed_tape_is_bit_identical(p in prop::collection::vec(-1.0f32..1.0, 6)) {
        let run = || {
            forward_backward(vec![&p[..]], |tape: &mut Tape<'_, f32>| {
                let x = tape.input(Mat::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.1])?)?;
                let h = tape.linear(
                    x,
                    ParamRef { block: 0, offset: 0, rows: 2, cols: 2 },
                    ParamRef { block: 0, offset: 4, rows: 1, cols: 2 },
                )?;
                let r = tape.relu(h)?;
                tape.sum_squares(r, vec![0.3; 4], 0.5)
            })
            .unwrap()
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn pq_factorizes(
        gt in prop::collection::vec((0u32..3, 0u32..3), 64),
        pred in prop::collection::vec((0u32..3, 0u32..3), 64),
    ) {
        let split = |v: &[(u32, u32)]| -> (Vec<u32>, Vec<u32>) { v.iter().copied().unzip() };
        let (gs, gi) = split(&gt);
        let (ps, pi) = split(&pred);
        let q: PanopticQuality = panoptic_quality(&ps, &pi, &gs, &gi).unwrap();
        prop_assert!((q.pq - q.sq * q.rq).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&q.pq));
    }
}
