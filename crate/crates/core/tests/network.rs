use volflow::flow::FlowState;
use volflow::net::{HeadMode, NetConfig, VelocityNet};
use volflow::tensor::Stack;

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k * k + cout
}

fn block(cin: usize, cout: usize) -> usize {
    let proj = if cin != cout { conv(cin, cout, 1) } else { 0 };
    conv(cin, cout, 3) + 2 * cout + conv(cout, cout, 3) + 2 * cout + proj
}

/// Parameter count written out from the layer list rather than the registry.
fn closed_form(cfg: &NetConfig) -> usize {
    let w: Vec<usize> = cfg.expansion_rates.iter().map(|r| r * cfg.stem_channels).collect();
    let nb = cfg.blocks_per_scale;
    let mut n = conv(cfg.in_frames, cfg.stem_channels, 1);
    let mut widths = Vec::new();
    let mut c = cfg.stem_channels;
    for &wl in &w[..3] {
        for _ in 0..nb {
            n += block(c, wl);
            widths.push(wl);
            c = wl;
        }
        n += conv(wl, wl, 3);
    }
    for _ in 0..=nb {
        n += block(c, w[3]);
        widths.push(w[3]);
        c = w[3];
    }
    for l in (0..3).rev() {
        n += conv(c, w[l], 3);
        let mut cin = 2 * w[l];
        for _ in 0..nb {
            n += block(cin, w[l]);
            widths.push(w[l]);
            cin = w[l];
        }
        c = w[l];
    }
    let out = match cfg.head {
        HeadMode::PerFrame => cfg.in_frames,
        HeadMode::Shared => 1,
    };
    n += conv(c, c, 3) + conv(c, out, 1);
    let film_out: usize = widths.iter().map(|x| 2 * x).sum();
    n + cfg.film_hidden * cfg.code_dim + cfg.film_hidden + film_out * cfg.film_hidden + film_out
}

#[test]
fn parameter_count_matches_closed_form() {
    let default = NetConfig::default();
    assert_eq!(VelocityNet::<f32>::init(&default, 0).unwrap().param_count(), 187_720);
    assert_eq!(closed_form(&default), 187_720);
    for (stem, frames, blocks, head) in [(4, 2, 1, HeadMode::PerFrame), (8, 3, 2, HeadMode::Shared), (16, 8, 1, HeadMode::PerFrame)] {
        let cfg = NetConfig {
            stem_channels: stem,
            in_frames: frames,
            blocks_per_scale: blocks,
            head,
            spatial: [8, 8, 8],
            ..NetConfig::default()
        };
        let net = VelocityNet::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(net.param_count(), closed_form(&cfg), "{cfg:?}");
    }
}

#[test]
fn output_shape_matches_input_for_several_configs() {
    for (frames, spatial) in [(1, [8, 8, 8]), (3, [16, 8, 8]), (8, [8, 16, 24])] {
        let cfg = NetConfig {
            in_frames: frames,
            spatial,
            stem_channels: 4,
            ..NetConfig::default()
        };
        let mut net = VelocityNet::<f64>::init(&cfg, 2).unwrap();
        // Perturb the zero-initialized layers so the output is non-trivial.
        for p in net.params_mut().iter_mut() {
            for (i, v) in p.data.iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let n: usize = frames * spatial.iter().product::<usize>();
        let x = Stack::from_vec(frames, spatial, (0..n).map(|i| (i % 13) as f64 / 13.0).collect()).unwrap();
        let y = net.forward(&FlowState::new(x.clone(), 0.3, None).unwrap(), &[0.1; 16]).unwrap();
        assert_eq!((y.frames(), y.dims()), (x.frames(), x.dims()));
        assert!(y.data().iter().any(|v| *v != 0.0));
    }
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let cfg = NetConfig {
        in_frames: 2,
        spatial: [8, 8, 8],
        stem_channels: 4,
        ..NetConfig::default()
    };
    let mut net = VelocityNet::<f64>::init(&cfg, 3).unwrap();
    for p in net.params_mut().iter_mut() {
        for (i, v) in p.data.iter_mut().enumerate() {
            *v += 0.02 * ((i % 5) as f64 - 2.0);
        }
    }
    let x = Stack::from_vec(2, [8, 8, 8], (0..1024).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
    let code = [0.3; 16];
    let (_, trace) = net.forward_trace(&x, &code).unwrap();
    let dout = Stack::from_vec(2, [8, 8, 8], (0..1024).map(|i| ((i * 3) % 5) as f64 - 2.0).collect()).unwrap();
    let g1 = net.backward_trace(&trace, &dout).unwrap();
    let g3 = net.backward_trace(&trace, &dout.scale(3.0)).unwrap();
    for (a, b) in g1.iter().zip(g3.iter()) {
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((3.0 * u - v).abs() <= 1e-9 * (1.0 + v.abs()), "{}", a.name);
        }
    }
}
