use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use embedheight::autodiff::{Conv2dOptions, Padding, Tape, Tensor};
use embedheight::nets::{Network, NetworkSpec, Variant};

fn filled(shape: Vec<usize>, k: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| (i as f32 * k).sin()).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3");
    for &(cin, cout, hw) in &[(64usize, 32usize, 64usize), (32, 32, 64), (128, 128, 16)] {
        let x = filled(vec![4, cin, hw, hw], 0.37);
        let w = filled(vec![cout, cin, 3, 3], 0.11);
        let b = filled(vec![cout], 0.5);
        let opts = Conv2dOptions::same(3, Padding::Reflect);
        let id = format!("{cin}to{cout}_{hw}px");
        g.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| {
                let mut t = Tape::no_grad();
                let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
                t.conv2d(xv, wv, Some(bv), opts).unwrap()
            })
        });
        g.bench_function(BenchmarkId::new("forward_backward", &id), |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.param(x.clone()), t.param(w.clone()), t.param(b.clone()));
                let y = t.conv2d(xv, wv, Some(bv), opts).unwrap();
                let s = t.sum(y);
                t.backward(s).unwrap()
            })
        });
    }
    g.finish();
}

fn network_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("network_step");
    g.sample_size(10);
    for variant in [Variant::Unet, Variant::UnetPlusPlus] {
        let spec = NetworkSpec {
            variant,
            depth: 3,
            base_channels: 8,
            ..NetworkSpec::default()
        };
        let net = Network::<f32>::build(&spec).unwrap();
        let x = filled(vec![8, 64, 32, 32], 0.07);
        let target = vec![0.5f32; 8 * 32 * 32];
        let mask = vec![true; target.len()];
        g.bench_function(variant.name(), |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let (y, params) = net.forward(&mut t, xv).unwrap();
                let loss = t.mse_loss(y, &target, &mask).unwrap();
                let grads = t.backward(loss).unwrap();
                params.len() + grads.get(params[0]).map_or(0, |d| d.len())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv, network_step);
criterion_main!(benches);
