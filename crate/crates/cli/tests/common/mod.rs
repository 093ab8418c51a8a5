use ovd_core::datapipe::PromptTemplates;
use ovd_core::encoders::{EncoderConfig, Vocabulary};
use ovd_core::head::HeadConfig;
use ovd_core::imaging::Image;
use ovd_core::model::{Model, ModelConfig, Stage};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 4,
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
    }
}

pub fn tiny_detector() -> Model {
    let t = PromptTemplates::default();
    let vocab = Vocabulary::build(t.all().chain(["red circle", "blue square", "green cross"]));
    Model::init(tiny_config(), vocab, Stage::Detection, 3).unwrap()
}

pub fn test_image(side: usize) -> Image {
    let mut img = Image::filled(side, side, 3, 0.5);
    for y in side / 4..side / 2 {
        for x in side / 4..side / 2 {
            img.set(y, x, 0, 1.0);
            img.set(y, x, 1, 0.0);
            img.set(y, x, 2, 0.0);
        }
    }
    img
}
