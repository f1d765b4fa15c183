use super::*;
use crate::nn::grad_check;
use crate::volume::trilinear_sample;

fn tiny_config(in_channels: usize, num_classes: usize) -> ModelConfig {
    ModelConfig {
        num_classes,
        encoder: EncoderConfig {
            in_channels,
            stage_channels: vec![3, 4],
            activation: Activation::LeakyRelu(LEAKY_SLOPE),
        },
        template: TemplateConfig {
            latent_dim: 6,
            base_resolution: 3,
            base_channels: 4,
            stage_channels: vec![3],
        },
        head: PointHeadConfig {
            hidden: vec![8, 8],
            activation: Activation::LeakyRelu(LEAKY_SLOPE),
            zero_init_heads: true,
        },
    }
}

fn random_input(channels: usize, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, channels, n, n, n], |_| rng.random_range(-1.0..1.0))
}

fn random_points(n: usize, seed: u64) -> Vec<NormCoord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            NormCoord::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect()
}

/// Textbook trilinear interpolation on a `[C, D, H, W]` buffer.
fn manual_trilinear(data: &[f64], c: usize, dims: [usize; 3], p: NormCoord) -> Vec<f64> {
    let [d, h, w] = dims;
    let axis = |v: f64, n: usize| {
        let u = (v + 1.0) / 2.0 * (n - 1) as f64;
        let i0 = (u.floor() as usize).min(n - 2);
        (i0, u - i0 as f64)
    };
    let (x0, fx) = axis(p.x, w);
    let (y0, fy) = axis(p.y, h);
    let (z0, fz) = axis(p.z, d);
    (0..c)
        .map(|ch| {
            let at = |z: usize, y: usize, x: usize| data[ch * d * h * w + (z * h + y) * w + x];
            let mut acc = 0.0;
            for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                        acc += wz * wy * wx * at(z0 + dz, y0 + dy, x0 + dx);
                    }
                }
            }
            acc
        })
        .collect()
}

#[test]
fn pyramid_levels_halve() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = EncoderConfig {
        in_channels: 1,
        stage_channels: vec![2, 2, 3, 3],
        activation: Activation::LeakyRelu(LEAKY_SLOPE),
    };
    let enc = Encoder::new(cfg, &mut rng).unwrap();
    let pyr = enc.pyramid(&random_input(1, 48, 1)).unwrap();
    let shapes: Vec<&[usize]> = pyr.levels.iter().map(|t| t.shape()).collect();
    assert_eq!(
        shapes,
        vec![&[1, 2, 24, 24, 24][..], &[1, 2, 12, 12, 12], &[1, 3, 6, 6, 6], &[1, 3, 3, 3, 3]]
    );
    assert!(matches!(enc.pyramid(&random_input(1, 40, 1)), Err(Error::Shape(_))));
    assert!(matches!(enc.pyramid(&random_input(2, 48, 1)), Err(Error::Shape(_))));
}

#[test]
fn zero_input_and_homogeneity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cfg = EncoderConfig {
        in_channels: 2,
        stage_channels: vec![3, 4],
        activation: Activation::LeakyRelu(LEAKY_SLOPE),
    };
    let enc = Encoder::new(cfg.clone(), &mut rng).unwrap();
    let zero = enc.pyramid(&Tensor::zeros(&[1, 2, 8, 8, 8])).unwrap();
    assert!(zero.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

    cfg.activation = Activation::Identity;
    let enc = Encoder::new(cfg, &mut rng).unwrap();
    let x = random_input(2, 8, 3);
    let mut x2 = x.clone();
    x2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    let (a, b) = (enc.pyramid(&x).unwrap(), enc.pyramid(&x2).unwrap());
    for (la, lb) in a.levels.iter().zip(&b.levels) {
        for (va, vb) in la.data().iter().zip(lb.data()) {
            assert_eq!(2.0 * va, *vb);
        }
    }
}

#[test]
fn encoding_width_and_layout() {
    assert_eq!(ModelConfig::new(4, 5).encoding_width(), 243);

    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lvl_a = Tensor::from_fn(&[1, 2, 4, 4, 4], |_| rng.random_range(-1.0..1.0));
    let lvl_b = Tensor::from_fn(&[1, 3, 2, 2, 2], |_| rng.random_range(-1.0..1.0));
    let levels = [tape.constant(lvl_a.clone()), tape.constant(lvl_b.clone())];
    let points = random_points(10, 5);
    let coords = tape.constant(coords_tensor(&points));
    let enc = point_encoding(&mut tape, &levels, coords).unwrap();
    let v = tape.value(enc);
    assert_eq!(v.shape(), &[10, 8]);
    for (r, p) in points.iter().enumerate() {
        let row = &v.data()[r * 8..(r + 1) * 8];
        let a = manual_trilinear(lvl_a.data(), 2, [4, 4, 4], *p);
        let b = manual_trilinear(lvl_b.data(), 3, [2, 2, 2], *p);
        for (got, want) in row.iter().zip(a.iter().chain(&b)) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(&row[5..], &p.as_array());
    }

    // a constant pyramid only varies in the coordinate entries
    let mut tape = Tape::new();
    let flat = tape.constant(Tensor::from_fn(&[1, 2, 4, 4, 4], |i| if i < 64 { 0.7 } else { -0.2 }));
    let coords = tape.constant(coords_tensor(&points));
    let enc = point_encoding(&mut tape, &[flat], coords).unwrap();
    for row in tape.value(enc).data().chunks(5) {
        assert!((row[0] - 0.7).abs() < 1e-15 && (row[1] + 0.2).abs() < 1e-15);
    }
}

#[test]
fn template_shapes_and_latent_sensitivity() {
    assert_eq!(TemplateNet::output_shape(&TemplateConfig::paper(), 19), [19, 128, 128, 128]);
    assert_eq!(TemplateNet::output_shape(&TemplateConfig::default(), 5), [5, 32, 32, 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = TemplateNet::new(TemplateConfig::default(), 5, &mut rng).unwrap();
    let a = net.generate().unwrap();
    assert_eq!((a.channels(), a.dims()), (5, GridDims::cube(32).unwrap()));
    assert!(a.data().iter().all(|v| v.is_finite()));
    let mut other = net.clone();
    let latent = other.store.find("template.latent").unwrap();
    other.store.get_mut(latent).value.data_mut()[0] += 1.0;
    let b = other.generate().unwrap();
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(diff > 0.0);
}

#[test]
fn zero_heads_give_identity_composition() {
    let model = ImplicitModel::new(tiny_config(1, 3), 7).unwrap();
    let input = random_input(1, 8, 8);
    let pyr = model.encoder.pyramid(&input).unwrap();
    let points = random_points(50, 9);
    let d = model.point_deformation(&pyr, &points).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
    let logits = model.point_logits(&pyr, &points).unwrap();
    for (p, row) in points.iter().zip(logits.data().chunks(3)) {
        assert_eq!(row, trilinear_sample(model.template_field(), *p).as_slice());
    }
    // dense inference at template resolution is the template argmax
    let field = model.template_field();
    let labels = model.infer(&input, field.dims()).unwrap();
    assert_eq!(labels, field.argmax_labels());
}

#[test]
fn deformation_is_bounded() {
    let mut cfg = tiny_config(1, 3);
    cfg.head.zero_init_heads = false;
    let model = ImplicitModel::new(cfg, 10).unwrap();
    let pyr = model.encoder.pyramid(&random_input(1, 8, 11)).unwrap();
    let mut points = random_points(200, 12);
    points.push(NormCoord::new(1.0, -1.0, 1.0));
    let d = model.point_deformation(&pyr, &points).unwrap();
    assert!(d.data().iter().any(|&v| v != 0.0));
    assert!(d.data().iter().all(|&v| v > -1.0 && v < 1.0));
}

#[test]
fn batching_and_chunking_do_not_change_results() {
    let mut cfg = tiny_config(2, 4);
    cfg.head.zero_init_heads = false;
    let model = ImplicitModel::new(cfg, 13).unwrap();
    let input = random_input(2, 8, 14);
    let pyr = model.encoder.pyramid(&input).unwrap();
    let dims = GridDims::new(5, 6, 7).unwrap();
    let dense = model.infer_with_pyramid(&pyr, dims).unwrap();
    let points: Vec<NormCoord> = (0..dims.len()).map(|i| voxel_point(dims, i)).collect();
    let batch = model.point_logits(&pyr, &points).unwrap();
    for (i, p) in points.iter().enumerate() {
        let single = model.point_logits(&pyr, &[*p]).unwrap();
        assert_eq!(single.data(), &batch.data()[i * 4..(i + 1) * 4]);
        assert_eq!(argmax(single.data()), dense.data()[i]);
    }
    // shifting every correction by a constant never changes the argmax
    for row in batch.data().chunks(4) {
        let shifted: Vec<f64> = row.iter().map(|v| v + 3.25).collect();
        assert_eq!(argmax(row), argmax(&shifted));
    }
}

#[test]
fn argmax_prefers_lower_class_on_ties() {
    assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
    assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut cfg = tiny_config(1, 3);
    cfg.head.zero_init_heads = false;
    cfg.encoder.activation = Activation::Tanh;
    cfg.head.activation = Activation::Tanh;
    let model = ImplicitModel::new(cfg, 15).unwrap();
    let input = random_input(1, 8, 16);
    let coords = coords_tensor(&random_points(16, 17));
    let targets: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
    let n_enc = model.encoder.store.len();
    let params: Vec<Tensor> = model
        .encoder
        .store
        .iter()
        .chain(model.head.store.iter())
        .map(|p| p.value.clone())
        .collect();
    let report = grad_check(
        |tape, vars| {
            let bound = BoundModel {
                encoder: Bound::from_vars(vars[..n_enc].to_vec()),
                head: Bound::from_vars(vars[n_enc..].to_vec()),
            };
            let out = model.forward(tape, &bound, &input, &coords)?;
            let ce = tape.cross_entropy(out.logits, &targets)?;
            let probs = tape.softmax(out.logits)?;
            let dice = tape.soft_dice(probs, &targets)?;
            let pen = tape.deformation_penalty(out.deformation)?;
            tape.weighted_sum(&[(ce, 0.5), (dice, 1.0), (pen, 0.01)])
        },
        &params,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(1, 3);
    let mut model = ImplicitModel::new(cfg.clone(), 18).unwrap();
    let id = model.head.store.find("head.correct.bias").unwrap();
    model.head.store.get_mut(id).value.data_mut()[1] = 0.25;
    let path = dir.path().join("model.snn");
    model.save(&path).unwrap();
    let back = ImplicitModel::load(cfg.clone(), &path).unwrap();
    assert_eq!(back, model);
    assert_eq!(std::fs::read(&path).unwrap(), back.checkpoint_bytes());

    let cfg_path = dir.path().join("model.json");
    cfg.save(&cfg_path).unwrap();
    assert_eq!(ModelConfig::load(&cfg_path).unwrap(), cfg);

    let mut wider = cfg;
    wider.head.hidden = vec![9, 8];
    assert!(matches!(ImplicitModel::load(wider, &path), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::new(1, 5);
    cfg.encoder.stage_channels = vec![8];
    assert!(cfg.validate().is_err());
    cfg.encoder.stage_channels = vec![16, 8];
    assert!(cfg.validate().is_err());
    assert!(ModelConfig::new(1, 1).validate().is_err());
}

#[test]
fn template_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(1, 3);
    let model = ImplicitModel::new(cfg.clone(), 4).unwrap();
    let path = dir.path().join("t.snn");
    model.template.save(&path).unwrap();
    let back = TemplateNet::load(cfg.template.clone(), 3, &path).unwrap();
    assert_eq!(back, model.template);

    // a full model checkpoint also carries the template
    let full = dir.path().join("m.snn");
    model.save(&full).unwrap();
    assert_eq!(TemplateNet::load(cfg.template.clone(), 3, &full).unwrap(), model.template);

    let err = TemplateNet::load(cfg.template, 4, &path).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)));
}
