use imlkit::datagen;
use imlkit::model::{sample_losses, IMLModel, LossWeights, ModelConfig};
use imlkit::nn::GradStore;
use rand::SeedableRng;

fn main() {
    let data = datagen::generate_mixed(1, (128, 128), 0.0, 42).unwrap();
    let model = IMLModel::<f32>::new(ModelConfig::default());
    let w = LossWeights::default();
    // warm up
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut gs = GradStore::new();
    sample_losses(&model, &data[0], &w, &mut rng, 1.0, &mut gs).unwrap();
    let t0 = std::time::Instant::now();
    for i in 0..6 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(i);
        let mut gs = GradStore::new();
        sample_losses(&model, &data[(i % 4) as usize], &w, &mut rng, 1.0, &mut gs).unwrap();
    }
    println!("train fwd+bwd per sample @128: {:?}", t0.elapsed() / 6);
    let t0 = std::time::Instant::now();
    for i in 0..6 {
        model.predict(&data[(i % 4) as usize].image, 0.5).unwrap();
    }
    println!("predict per sample @128: {:?}", t0.elapsed() / 6);
}
