use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semgan::losses::{seg_consistency_loss, AdvMode};
use semgan::models::{Discriminator, DiscriminatorCfg, Generator, GeneratorCfg, Segmenter, SegmenterCfg};
use semgan::types::SegMask;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data: Vec<f32> = (0..n * 3 * h * w).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    Tensor::from_vec(data, (n, 3, h, w), &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn desk_disc() -> DiscriminatorCfg {
    DiscriminatorCfg { n_layers: 2, base_width: 16, residual_blocks: 0 }
}

fn conv(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

#[test]
fn generator_keeps_shape_and_range() {
    let g = Generator::new(GeneratorCfg::desk(), &mut rng(0)).unwrap();
    for side in [64, 256] {
        let y = g.forward(&input(1, side, side, 1)).unwrap();
        assert_eq!(y.dims(), [1, 3, side, side]);
        assert!(values(&y).iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let y = g.forward(&input(2, 32, 48, 2)).unwrap();
    assert_eq!(y.dims(), [2, 3, 32, 48]);
}

#[test]
fn generator_rejects_sizes_off_the_grid() {
    let g = Generator::new(GeneratorCfg { n_res_blocks: 1, base_width: 4 }, &mut rng(0)).unwrap();
    assert!(g.forward(&input(1, 30, 32, 0)).is_err());
    assert!(g.forward(&input(1, 32, 34, 0)).is_err());
}

#[test]
fn forwards_are_bitwise_reproducible() {
    let cfg = GeneratorCfg { n_res_blocks: 2, base_width: 8 };
    let g1 = Generator::new(cfg, &mut rng(7)).unwrap();
    let g2 = Generator::new(cfg, &mut rng(7)).unwrap();
    let x = input(2, 32, 32, 3);
    let y = values(&g1.forward(&x).unwrap());
    assert_eq!(y, values(&g1.forward(&x).unwrap()));
    assert_eq!(y, values(&g2.forward(&x).unwrap()));

    let s = Segmenter::new(SegmenterCfg::desk(5), &mut rng(7)).unwrap();
    let a = values(&s.forward(&x, false).unwrap());
    assert_eq!(a, values(&s.forward(&x, false).unwrap()));
}

#[test]
fn patch_discriminator_map_sizes() {
    let d = Discriminator::new(DiscriminatorCfg::desk(), AdvMode::Lsgan, &mut rng(0)).unwrap();
    // 64 -> 32 -> 16 -> 8 (stride 2), -> 7 (stride 1), -> 6 (head)
    assert_eq!(d.forward(&input(1, 64, 64, 0)).unwrap().dims(), [1, 1, 6, 6]);
    assert_eq!(DiscriminatorCfg::default().output_size(64, 64), Some((6, 6)));
    assert_eq!(DiscriminatorCfg::default().output_size(256, 256), Some((30, 30)));
    assert_eq!(d.forward(&input(2, 256, 256, 0)).unwrap().dims(), [2, 1, 30, 30]);
    assert!(d.forward(&input(1, 16, 16, 0)).is_err());

    let r = Discriminator::new(DiscriminatorCfg { residual_blocks: 2, ..DiscriminatorCfg::desk() }, AdvMode::Lsgan, &mut rng(0)).unwrap();
    assert_eq!(r.forward(&input(1, 64, 64, 0)).unwrap().dims(), [1, 1, 16, 16]);
}

#[test]
fn bce_discriminator_scores() {
    let d = Discriminator::new(desk_disc(), AdvMode::Bce, &mut rng(0)).unwrap();
    let s = values(&d.forward(&input(2, 32, 32, 4)).unwrap());
    assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
    d.params().zero_all().unwrap();
    let s = values(&d.forward(&input(2, 32, 32, 4)).unwrap());
    assert!(s.iter().all(|&v| v == 0.5));
}

#[test]
fn segmenter_logits_at_input_resolution() {
    let s = Segmenter::new(SegmenterCfg::desk(4), &mut rng(0)).unwrap();
    assert_eq!(s.forward(&input(1, 64, 64, 0), false).unwrap().dims(), [1, 4, 64, 64]);
    assert_eq!(s.forward(&input(1, 36, 20, 0), true).unwrap().dims(), [1, 4, 36, 20]);
    let full = Segmenter::new(SegmenterCfg::full(19), &mut rng(0)).unwrap();
    assert_eq!(full.forward(&input(1, 256, 256, 0), false).unwrap().dims(), [1, 19, 256, 256]);
}

#[test]
fn zeroed_segmenter_gives_ln_k() {
    let k = 4;
    let s = Segmenter::new(SegmenterCfg::desk(k), &mut rng(0)).unwrap();
    s.params().zero_all().unwrap();
    let logits = s.forward(&input(1, 16, 16, 0), false).unwrap();
    assert!(values(&logits).iter().all(|&v| v == 0.0));
    let mask = SegMask::new(ndarray::Array2::from_shape_fn((16, 16), |(y, x)| ((y + x) % k) as u8), k).unwrap();
    let loss = seg_consistency_loss(&logits.to_dtype(DType::F64).unwrap(), &[&mask], None).unwrap();
    assert!((loss.value.to_scalar::<f64>().unwrap() - (k as f64).ln()).abs() < 1e-9);
}

#[test]
fn parameter_counts() {
    let gen = |n: usize, w: usize| {
        conv(3, w, 7) + conv(w, 2 * w, 3) + conv(2 * w, 4 * w, 3) + 2 * n * conv(4 * w, 4 * w, 3)
            + conv(4 * w, 2 * w, 3) + conv(2 * w, w, 3) + conv(w, 3, 7)
    };
    for cfg in [GeneratorCfg::default(), GeneratorCfg::desk(), GeneratorCfg { n_res_blocks: 3, base_width: 8 }] {
        let g = Generator::new(cfg, &mut rng(0)).unwrap();
        assert_eq!(g.params().num_parameters(), gen(cfg.n_res_blocks, cfg.base_width));
    }
    assert_eq!(Generator::new(GeneratorCfg::default(), &mut rng(0)).unwrap().params().num_parameters(), 11_378_179);

    let disc = |l: usize, w: usize| {
        let mut total = conv(3, w, 4);
        let mut width = w;
        for n in 1..=l {
            let next = w << n.min(3);
            total += conv(width, next, 4);
            width = next;
        }
        total + conv(width, 1, 4)
    };
    for cfg in [DiscriminatorCfg::default(), DiscriminatorCfg::desk(), desk_disc()] {
        let d = Discriminator::new(cfg, AdvMode::Lsgan, &mut rng(0)).unwrap();
        assert_eq!(d.params().num_parameters(), disc(cfg.n_layers, cfg.base_width));
    }
    assert_eq!(Discriminator::new(DiscriminatorCfg::default(), AdvMode::Bce, &mut rng(0)).unwrap().params().num_parameters(), 2_764_737);

    let desk_seg = |w: usize, k: usize| {
        let ch: Vec<usize> = [1, 2, 4, 6, 6].iter().map(|m| m * w).collect();
        let conv_bn = |a, b| conv(a, b, 3) + 2 * b;
        let mut total = conv_bn(3, ch[0]) + conv(ch[0], k, 1);
        for i in 1..ch.len() {
            total += conv_bn(ch[i - 1], ch[i]) + conv_bn(ch[i], ch[i]);
            total += ch[i] * ch[i - 1] * 4 + ch[i - 1] + conv_bn(ch[i - 1], ch[i - 1]);
        }
        total
    };
    let s = Segmenter::new(SegmenterCfg::desk(5), &mut rng(0)).unwrap();
    assert_eq!(s.params().num_parameters(), desk_seg(16, 5));
    // the desk backbone is meant to be around half a million parameters
    assert!((300_000..800_000).contains(&desk_seg(16, 5)));
}

/// Max |a - b| over the central half of two `[1, C, H, W]` maps, with `b`
/// read `shift` columns to the right. Padding effects sit at fixed positions
/// near the border and do not move with the content, so they are left out.
fn shifted_gap(a: &Tensor, b: &Tensor, shift: usize) -> f32 {
    let (_, c, h, w) = a.dims4().unwrap();
    let (a, b) = (values(a), values(b));
    let mut worst = 0f32;
    for ch in 0..c {
        for y in h / 4..h - h / 4 {
            for x in w / 4..w - w / 4 - shift {
                let i = (ch * h + y) * w;
                worst = worst.max((a[i + x] - b[i + x + shift]).abs());
            }
        }
    }
    worst
}

/// A textured patch on a flat background, optionally moved right, kept well
/// away from the border.
fn scene(shift: usize) -> Tensor {
    let (h, w) = (128, 160);
    let mut r = rng(11);
    let patch: Vec<f32> = (0..3 * 24 * 24).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let mut data = vec![-0.2f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..24 {
            for x in 0..24 {
                data[(c * h + 52 + y) * w + 64 + shift + x] = patch[(c * 24 + y) * 24 + x];
            }
        }
    }
    Tensor::from_vec(data, (1, 3, h, w), &Device::Cpu).unwrap()
}

#[test]
fn networks_are_translation_covariant() {
    let g = Generator::new(GeneratorCfg { n_res_blocks: 3, base_width: 8 }, &mut rng(1)).unwrap();
    let d = Discriminator::new(desk_disc(), AdvMode::Lsgan, &mut rng(2)).unwrap();
    let s = Segmenter::new(SegmenterCfg { base_width: 8, ..SegmenterCfg::desk(5) }, &mut rng(3)).unwrap();
    // one stride unit of each network: 4 px, 4 px (one score), 16 px
    let cases: [(&str, usize, usize, Box<dyn Fn(&Tensor) -> Tensor>); 3] = [
        ("generator", 4, 4, Box::new(|x| g.forward(x).unwrap())),
        ("discriminator", 4, 1, Box::new(|x| d.forward(x).unwrap())),
        ("segmenter", 16, 16, Box::new(|x| s.forward(x, false).unwrap())),
    ];
    for (name, px, out_shift, f) in cases {
        let (base, moved) = (f(&scene(0)), f(&scene(px)));
        let aligned = shifted_gap(&base, &moved, out_shift);
        let unaligned = shifted_gap(&base, &moved, 0);
        assert!(aligned < 1e-2 && aligned < 0.05 * unaligned, "{name}: aligned {aligned}, unaligned {unaligned}");
    }
}

#[test]
fn gradients_reach_every_parameter() {
    let x = input(2, 16, 16, 5);
    let g = Generator::new(GeneratorCfg { n_res_blocks: 3, base_width: 8 }, &mut rng(0)).unwrap();
    let d = Discriminator::new(desk_disc(), AdvMode::Bce, &mut rng(1)).unwrap();
    let s = Segmenter::new(SegmenterCfg { base_width: 8, ..SegmenterCfg::desk(5) }, &mut rng(2)).unwrap();
    let outputs = [
        (g.params(), g.forward(&x).unwrap()),
        (d.params(), d.forward(&x).unwrap()),
        (s.params(), s.forward(&x, true).unwrap()),
    ];
    for (store, y) in outputs {
        // a non-symmetric readout so no gradient cancels by construction
        let weights = Tensor::arange(0f32, y.elem_count() as f32, &Device::Cpu).unwrap().reshape(y.dims()).unwrap();
        let grads = (y * weights).unwrap().sum_all().unwrap().backward().unwrap();
        for p in store.trainable() {
            let gr = grads.get(p.var.as_tensor()).unwrap_or_else(|| panic!("{} has no gradient", p.name));
            assert!(values(gr).iter().all(|v| v.is_finite()), "{} gradient not finite", p.name);
        }
    }
}
