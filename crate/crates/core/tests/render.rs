mod common;

use netlogic::datasets::Tier;
use netlogic::linalg::Matrix;
use netlogic::nn::{forward, random_params, ArchSpec, MlpParams};
use netlogic::render::{boundary_figure, extract_all, extract_nsb, render_figure, Target};
use netlogic::states::GridSpec;

fn preact(p: &MlpParams, t: Target, x: &[f64]) -> f64 {
    let tr = forward(p, x).unwrap();
    match t {
        Target::Neuron { layer, index } => tr.preactivations[layer - 1][index],
        Target::Output => tr.output,
    }
}

#[test]
fn trained_data_ii_net_has_boundaries_on_several_layers() {
    let (data, params) = common::trained(Tier::DataII, &common::ARCH_II, 0);
    let g = common::grid(&data, 128);
    let curves = extract_all(&params, &g).unwrap();
    let db = curves.iter().find(|c| c.target == Target::Output).unwrap();
    assert!(!db.polylines.is_empty());
    let mut layers: Vec<usize> = curves
        .iter()
        .filter(|c| !c.polylines.is_empty())
        .filter_map(|c| match c.target {
            Target::Neuron { layer, .. } => Some(layer),
            Target::Output => None,
        })
        .collect();
    layers.dedup();
    assert!(layers.len() >= 2, "{layers:?}");

    let (lo, hi) = (g.lower(), g.upper());
    for c in &curves {
        for line in &c.polylines {
            assert!(line.len() >= 2);
            for v in line {
                assert!(preact(&params, c.target, v).abs() <= 1e-6, "{} at {v:?}", c.target);
                assert!((0..2).all(|k| v[k] >= lo[k] - 1e-12 && v[k] <= hi[k] + 1e-12));
            }
        }
    }
    // Per-target extraction agrees with the batched one.
    for c in curves.iter().step_by(7) {
        assert_eq!(&extract_nsb(&params, &g, c.target).unwrap(), c);
    }
}

#[test]
fn a_single_line_crosses_the_box_once() {
    // Layer-1 neuron 0 is x0 + x1 - 0.5; neuron 1 never changes sign.
    let arch = ArchSpec::new(2, vec![2]).unwrap();
    let p = MlpParams::new(
        arch,
        vec![
            Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]),
            Matrix::from_rows(&[vec![1.0, 0.0]]),
        ],
        vec![vec![-0.5, 1.0], vec![-0.1]],
    )
    .unwrap();
    let g = GridSpec::uniform(vec![-1.0, -1.0], vec![1.0, 1.0], 41).unwrap();
    let line = extract_nsb(&p, &g, Target::Neuron { layer: 1, index: 0 }).unwrap();
    assert_eq!(line.polylines.len(), 1);
    for v in &line.polylines[0] {
        assert!((v[0] + v[1] - 0.5).abs() <= 1e-6);
    }
    let ends = [line.polylines[0][0], *line.polylines[0].last().unwrap()];
    for e in ends {
        assert!(e.iter().any(|c| (c.abs() - 1.0).abs() < 1e-9), "{e:?} is not on the box");
    }
    assert!(extract_nsb(&p, &g, Target::Neuron { layer: 1, index: 1 }).unwrap().polylines.is_empty());
    assert!(extract_nsb(&p, &g, Target::Neuron { layer: 2, index: 0 }).is_err());
    assert!(extract_nsb(&p, &g, Target::Neuron { layer: 1, index: 2 }).is_err());
}

#[test]
fn svg_output_is_deterministic() {
    let p = random_params(&ArchSpec::new(2, vec![4, 6, 8]).unwrap(), 3, 1.0);
    let g = GridSpec::uniform(vec![-2.0, -2.0], vec![2.0, 2.0], 64).unwrap();
    let a = render_figure(&boundary_figure("t", &p, &g, None).unwrap());
    let b = render_figure(&boundary_figure("t", &p, &g, None).unwrap());
    assert_eq!(a, b);
    assert!(a.trim_start().starts_with("<svg") && a.trim_end().ends_with("</svg>"));
    assert!(a.contains("decision boundary"));
}

#[test]
fn boundaries_need_a_plane() {
    let p = random_params(&ArchSpec::new(3, vec![2]).unwrap(), 0, 1.0);
    let g = GridSpec::uniform(vec![0.0; 3], vec![1.0; 3], 4).unwrap();
    assert!(extract_all(&p, &g).is_err());
}
