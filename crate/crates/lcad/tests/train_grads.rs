use lcad::config::RunConfig;
use lcad::train::PixelStage;
use lcad_grad::nn::Graph;
use lcad_grad::{Adam, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[test]
fn finetune_gradients_reach_luminance_path() {
    let cfg = RunConfig::from_str_checked("pixel_widths=8,12,16").unwrap();
    let mut stage = PixelStage::new(&cfg, 5).unwrap();
    stage.store.set_trainable_prefix("pix.enc.", false);
    stage.store.set_trainable_prefix("pix.dec.", false);
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let img = Tensor::randn([3, 64, 64], &mut rng).map(|v| 0.5 + 0.2 * v.tanh());
    let gray = Tensor::randn([1, 64, 64], &mut rng).map(|v| 0.5 + 0.2 * v.tanh());
    let loss_cfg = lcad::compression::PixelLossCfg::default();

    let run_loss = |store: &lcad_grad::ParamStore| -> (f64, Vec<(lcad_grad::ParamId, Tensor)>) {
        let tape = Tape::new();
        let g = Graph::new(&tape, store);
        let x = tape.constant(img.clone());
        let z = stage.model.encode(&g, &x).unwrap();
        let grayv = tape.constant(gray.clone());
        let pyr = stage.model.luminance(&g, &grayv).unwrap();
        let xt = stage.model.decode(&g, &z, Some(&pyr)).unwrap();
        let out = lcad::compression::pixel_loss(&g, &stage.model, &x, &xt, &loss_cfg).unwrap();
        let v = out.total.value().data()[0];
        let grads = tape.backward(&out.total);
        (v, g.param_grads(&grads))
    };
    let (l0, grads) = run_loss(&stage.store);
    eprintln!("initial loss {l0}");
    let mut lum_grads = 0;
    let mut inj_grads = 0;
    let mut max_lum = 0.0f64;
    for (id, g) in &grads {
        let name = stage.store.name(*id);
        if name.starts_with("pix.lum.") { lum_grads += 1; max_lum = max_lum.max(g.max_abs()); }
        if name.starts_with("pix.inj.") { inj_grads += 1; }
    }
    eprintln!("lum grads: {lum_grads} (max {max_lum:.3e}), inj grads: {inj_grads}, total {}", grads.len());
    assert!(lum_grads > 0 && inj_grads > 0, "grads must reach luminance path");

    // apply 20 Adam steps; loss must move
    let mut adam = Adam::new(1e-3);
    let mut losses = vec![l0];
    for _ in 0..20 {
        let (v, grads) = run_loss(&stage.store);
        let filtered: Vec<_> = grads.into_iter()
            .filter(|(id, _)| { let n = stage.store.name(*id); n.starts_with("pix.lum.") || n.starts_with("pix.inj.") })
            .collect();
        assert!(!filtered.is_empty());
        adam.step(&mut stage.store, &filtered);
        losses.push(v);
    }
    eprintln!("loss trajectory: first {:.5} last {:.5}", losses[0], losses.last().unwrap());
    assert!(losses.last().unwrap() < &losses[0], "loss must decrease");
}
