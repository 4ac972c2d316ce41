use super::*;
use crate::rng::SeededRng;

fn toy_arch(res: usize) -> ArchConfig {
    ArchConfig {
        channel_base: 256,
        channel_max: 16,
        latent_dim: 16,
        ..ArchConfig::toy(res)
    }
}

/// Sets every noise strength to a nonzero value, as after some training.
fn perturb_noise_strengths(g: &mut Generator, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let idx: Vec<usize> = (0..g.params().len())
        .filter(|&i| g.params().name(i).ends_with("noise_strength"))
        .collect();
    for i in idx {
        for v in g.params_mut().get_mut(i).data_mut() {
            *v = 0.5 + 0.1 * rng.normal();
        }
    }
}

fn random_wplus(g: &Generator, seed: u64) -> LatentWPlus {
    let mut rng = SeededRng::new(seed);
    LatentWPlus::new((0..g.num_ws()).map(|_| rng.normals(g.arch().latent_dim)).collect()).unwrap()
}

fn checkpoint(g: Generator, gates: NoiseGateConfig) -> GeneratorCheckpoint {
    let mut ck = GeneratorCheckpoint::new(g, gates).unwrap();
    ck.w_mean = Some(ck.generator.estimate_w_mean(256, 0).unwrap());
    ck
}

#[test]
fn map_latent_is_deterministic_and_checks_dimension() {
    let g = Generator::new(&toy_arch(16), 1).unwrap();
    let z = LatentZ::from_seed(3, 16);
    assert_eq!(g.map_latent(&z).unwrap(), g.map_latent(&z).unwrap());
    let bad = LatentZ::from_seed(3, 100);
    assert!(matches!(g.map_latent(&bad), Err(Error::InvalidArgument(_))));
}

#[test]
fn identity_mapping_scales_basis_vector() {
    // 1-layer, 4-dim mapping whose effective weight is the identity.
    let arch = ArchConfig {
        latent_dim: 4,
        mapping_layers: 1,
        mapping_lr_mult: 1.0,
        ..toy_arch(8)
    };
    let mut g = Generator::new(&arch, 0).unwrap();
    let wi = g.params().index_of("mapping.fc0.weight").unwrap();
    let bi = g.params().index_of("mapping.fc0.bias").unwrap();
    // runtime gain is 1/sqrt(4) = 0.5, so store 2·I
    let w = g.params_mut().get_mut(wi).data_mut();
    w.fill(0.0);
    for k in 0..4 {
        w[k * 4 + k] = 2.0;
    }
    g.params_mut().get_mut(bi).data_mut().fill(0.0);
    let out = g.map_latent(&LatentZ::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    // e1 normalized to radius sqrt(4) = 2, then leaky-ReLU gain sqrt(2)
    let expected = 2.0 * std::f32::consts::SQRT_2;
    assert!((out.values()[0] - expected).abs() < 1e-5, "{:?}", out.values());
    assert!(out.values()[1..].iter().all(|v| v.abs() < 1e-7));
}

#[test]
fn gated_sites_never_influence_output() {
    let arch = toy_arch(64);
    let mut g = Generator::new(&arch, 2).unwrap();
    perturb_noise_strengths(&mut g, 9);
    let gates = NoiseGateConfig::coarse_off(&arch);
    let w = random_wplus(&g, 4);
    let a = sample_noise(10, &arch);
    let mut b = sample_noise(11, &arch);
    for (site, buf) in arch.noise_sites().iter().zip(b.buffers.iter_mut()) {
        if gates.is_enabled(site.resolution) {
            *buf = a.buffers[site.index].clone();
        }
    }
    let ia = g.synthesize(&w, &a, &gates).unwrap();
    let ib = g.synthesize(&w, &b, &gates).unwrap();
    let bits = |i: &ImageTensor| i.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ia), bits(&ib));
}

#[test]
fn all_gates_on_noise_changes_output() {
    let arch = toy_arch(16);
    let mut g = Generator::new(&arch, 3).unwrap();
    perturb_noise_strengths(&mut g, 1);
    let gates = NoiseGateConfig::all_on(&arch);
    let w = random_wplus(&g, 5);
    let a = g.synthesize(&w, &sample_noise(1, &arch), &gates).unwrap();
    let b = g.synthesize(&w, &sample_noise(2, &arch), &gates).unwrap();
    assert!(a.mse(&b) > 0.0);
}

#[test]
fn all_gates_off_output_depends_on_latent_only() {
    let arch = toy_arch(16);
    let mut g = Generator::new(&arch, 3).unwrap();
    perturb_noise_strengths(&mut g, 1);
    let gates = NoiseGateConfig::all_off(&arch);
    let w = random_wplus(&g, 5);
    let a = g.synthesize(&w, &sample_noise(1, &arch), &gates).unwrap();
    let b = g.synthesize(&w, &NoiseBuffers::zeros(&arch), &gates).unwrap();
    assert_eq!(a, b);
}

#[test]
fn output_shape_and_range_at_256() {
    let arch = ArchConfig {
        channel_base: 256,
        channel_max: 8,
        latent_dim: 8,
        ..ArchConfig::toy(256)
    };
    let g = Generator::new(&arch, 0).unwrap();
    assert_eq!(g.num_ws(), 14);
    let img = g
        .synthesize(&random_wplus(&g, 1), &sample_noise(0, &arch), &NoiseGateConfig::coarse_off(&arch))
        .unwrap();
    assert_eq!(img.size(), 256);
    assert_eq!(img.pixels().len(), 256 * 256 * 3);
    assert!(img.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn synthesize_rejects_bad_shapes() {
    let arch = toy_arch(16);
    let g = Generator::new(&arch, 0).unwrap();
    let gates = NoiseGateConfig::all_on(&arch);
    let short = LatentWPlus::new(vec![vec![0.0; 16]; 3]).unwrap();
    assert!(g.synthesize(&short, &sample_noise(0, &arch), &gates).is_err());
    let other = sample_noise(0, &toy_arch(32));
    assert!(g.synthesize(&random_wplus(&g, 0), &other, &gates).is_err());
    let wrong_gates = NoiseGateConfig::all_on(&toy_arch(32));
    assert!(g.synthesize(&random_wplus(&g, 0), &sample_noise(0, &arch), &wrong_gates).is_err());
}

#[test]
fn batch_and_single_synthesis_agree_bitwise() {
    let arch = toy_arch(16);
    let mut g = Generator::new(&arch, 4).unwrap();
    perturb_noise_strengths(&mut g, 2);
    let gates = NoiseGateConfig::all_on(&arch);
    let ws: Vec<LatentWPlus> = (0..3).map(|i| random_wplus(&g, i)).collect();
    let ns: Vec<NoiseBuffers> = (0..3).map(|i| sample_noise(i, &arch)).collect();
    let refs: Vec<&NoiseBuffers> = ns.iter().collect();
    let batch = g.synthesize_batch(&ws, &refs, &gates).unwrap();
    for i in 0..3 {
        assert_eq!(batch[i], g.synthesize(&ws[i], &ns[i], &gates).unwrap());
    }
}

#[test]
fn generate_is_deterministic_and_psi_zero_collapses() {
    let arch = toy_arch(16);
    let ck = checkpoint(Generator::new(&arch, 5).unwrap(), NoiseGateConfig::all_off(&arch));
    let (a, wa, _) = generate(1, 2, 0.7, &ck).unwrap();
    let (b, wb, _) = generate(1, 2, 0.7, &ck).unwrap();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    let (c, _, _) = generate(100, 2, 0.0, &ck).unwrap();
    let (d, _, _) = generate(200, 2, 0.0, &ck).unwrap();
    assert_eq!(c, d);
}

#[test]
fn coarse_noise_suppression_localizes_noise_effects() {
    // Same network and style path; only the gate configuration differs.
    let arch = toy_arch(64);
    let mut g = Generator::new(&arch, 6).unwrap();
    perturb_noise_strengths(&mut g, 3);
    let coarse_diff = |gates: &NoiseGateConfig| {
        let mut total = 0.0f64;
        for s in 0..4u64 {
            let w = random_wplus(&g, 40 + s);
            let a = g.synthesize(&w, &sample_noise(2 * s, &arch), gates).unwrap();
            let b = g.synthesize(&w, &sample_noise(2 * s + 1, &arch), gates).unwrap();
            let pa = crate::tensor::box_downsample(&a.to_chw(), 3, 64, 64, 32, 32);
            let pb = crate::tensor::box_downsample(&b.to_chw(), 3, 64, 64, 32, 32);
            total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / pa.len() as f64;
        }
        total / 4.0
    };
    let gated = coarse_diff(&NoiseGateConfig::coarse_off(&arch));
    let all_on = coarse_diff(&NoiseGateConfig::all_on(&arch));
    assert!(all_on > 0.0);
    assert!(gated < 10.0 * all_on, "gated {gated} vs all-on {all_on}");
    assert!(gated < all_on, "gated {gated} vs all-on {all_on}");
}

#[test]
fn discriminator_contracts() {
    let arch = toy_arch(16);
    let d = Discriminator::new(&arch, 7).unwrap();
    let imgs: Vec<ImageTensor> = (0..3)
        .map(|i| ImageTensor::new(16, SeededRng::new(i).normals(16 * 16 * 3).iter().map(|v| v.tanh()).collect()).unwrap())
        .collect();
    let s1 = d.discriminate(&imgs).unwrap();
    assert_eq!(s1.len(), 3);
    assert_eq!(s1, d.discriminate(&imgs).unwrap());
    let zero = d.discriminate(&[ImageTensor::constant(16, [0.0; 3])]).unwrap();
    assert!(zero[0].is_finite());
    assert!(d.discriminate(&[ImageTensor::constant(8, [0.0; 3])]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let arch = toy_arch(16);
    let mut ck = checkpoint(Generator::new(&arch, 8).unwrap(), NoiseGateConfig::coarse_off(&arch));
    ck.discriminator = Some(Discriminator::new(&arch, 9).unwrap());
    ck.ema_decay = 0.99;
    let back = GeneratorCheckpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.generator.params(), ck.generator.params());
    assert_eq!(back.discriminator.unwrap().params(), ck.discriminator.as_ref().unwrap().params());
    assert_eq!(back.gates, ck.gates);
    assert_eq!(back.w_mean, ck.w_mean);
    assert_eq!(back.ema_decay, 0.99);
    let (a, _, _) = generate(3, 4, 0.5, &ck).unwrap();
    let again = GeneratorCheckpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(generate(3, 4, 0.5, &again).unwrap().0, a);
}
