use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ovd_core::datapipe::{synth_dataset, SynthSpec};
use ovd_core::encoders::{contrastive_loss, EncoderConfig, Vocabulary};
use ovd_core::head::HeadConfig;
use ovd_core::model::{Model, ModelConfig, Stage};
use ovd_core::nn::{init, Graph, Tensor};
use ovd_core::train::{Pretrainer, TrainConfig, TrainStage};

#[test]
fn loss_is_near_uniform_when_temperature_is_large() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for b in [4usize, 8, 16] {
        let mut g = Graph::new();
        let zi = g.constant(init::normal(&mut rng, &[b, 8], 1.0));
        let zt = g.constant(init::normal(&mut rng, &[b, 8], 1.0));
        let lt = g.constant(Tensor::scalar(5.0));
        let loss = contrastive_loss(&mut g, zi, zt, lt).unwrap();
        let v = g.value(loss).item();
        let ln_b = (b as f64).ln();
        assert!((v - ln_b).abs() <= 0.2 * ln_b, "B={b}: {v} vs {ln_b}");
    }
}

#[test]
fn initial_batch_loss_is_in_range() {
    let d = synth_dataset(&SynthSpec {
        n_train: 16,
        n_eval: 0,
        max_objects: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            patch_size: 8,
            depth: 1,
            width: 16,
            n_heads: 2,
            mlp_dim: 32,
            text_depth: 1,
            text_width: 16,
            text_heads: 2,
            text_mlp_dim: 32,
            ..EncoderConfig::default()
        },
        head: HeadConfig::default(),
    };
    let vocab = Vocabulary::build(d.train_captions.iter().map(String::as_str));
    let model = Model::init(cfg, vocab, Stage::Pretrain, 0).unwrap();
    let images: Vec<_> = d.train.iter().map(|e| e.image.clone()).collect();
    let tc = TrainConfig {
        stage: TrainStage::Pretrain,
        steps: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut t = Pretrainer::new(model, tc, &images, &d.train_captions).unwrap();
    let (g, loss) = t.batch_loss(&(0..8).collect::<Vec<_>>()).unwrap();
    let v = g.value(loss).item();
    assert!((0.0..=2.0 * 8f64.ln() + 1.0).contains(&v), "{v}");
}
