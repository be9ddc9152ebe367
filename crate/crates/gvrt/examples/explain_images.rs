//! Train briefly, then ask the model to describe held-out images in words:
//! greedy decoding conditioned on the projected visual embedding and the
//! predicted class distribution, scored by the frozen reward model.

use gvrt::data::split::{build_split_plan, SplitMode};
use gvrt::data::synth::{generate, SynthSpec};
use gvrt::explainer::reward;
use gvrt::nn;
use gvrt::trainer::{fit, TrainConfig};

fn main() -> Result<(), gvrt::GvrtError> {
    let ds = generate(&SynthSpec {
        num_classes: 3,
        num_domains: 3,
        image_size: 16,
        samples_per_class_per_domain: 10,
        seed: 5,
    })?;
    let plan = build_split_plan(&ds, SplitMode::MultiSource, &[2], 0.3, 0.25, 0)?;

    let cfg = TrainConfig {
        steps: 200,
        eval_interval: 50,
        batch_per_domain: 6,
        image_size: 16,
        conv_channels_1: 4,
        conv_channels_2: 8,
        feature_dim: 24,
        d_joint: 12,
        d_text: 48,
        gen_embed_dim: 8,
        gen_hidden: 12,
        max_len: 12,
        lr_backbone: 1e-3,
        lr_new: 1e-2,
        reward_epochs: 150,
        ..TrainConfig::default()
    };
    let result = fit(&cfg, &ds, &plan)?;
    let mut state = result.state;
    state.restore(&result.best.params)?;

    let generator = state.generator.as_ref().expect("full objective trains a generator");
    let heads = state.heads.as_ref().expect("full objective trains projections");
    let rm = state.reward_model.as_ref().expect("full objective trains a reward model");
    let k = state.num_classes;

    // Describe the first few held-out test images of the target domain.
    let target = plan.target_domains[0];
    let test_ids = &plan.domains[target as usize].test[..4];
    let per_image = ds.channels * ds.height * ds.width;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for &id in test_ids {
        let s = ds.get(id, target).expect("test ids exist in the target domain");
        images.extend_from_slice(&s.image);
        labels.push(s.label);
    }
    assert_eq!(images.len(), test_ids.len() * per_image);

    let pass = state.encoder.forward(&images, test_ids.len())?;
    let g_x = heads.g_proj.forward(&pass.features);
    let category = nn::softmax(&pass.logits, k);
    let decoded = generator.greedy_decode(&g_x, &category, test_ids.len(), cfg.max_len)?;

    println!("held-out domain: {}\n", ds.domain_names[target as usize]);
    for (row, &id) in test_ids.iter().enumerate() {
        let predicted = nn::argmax(&pass.logits[row * k..(row + 1) * k]);
        let sentence = state.vocab.decode(&decoded[row]);
        let score = reward(rm, &decoded[row], labels[row] as usize);
        println!("image {id}:");
        println!("  true class:      {}", ds.class_names[labels[row] as usize]);
        println!("  predicted class: {}", ds.class_names[predicted]);
        println!("  explanation:     \"{sentence}\"");
        println!("  reward:          {score:.3}\n");
    }
    Ok(())
}
