use candle_core::{DType, Tensor, Var};
use promptseg::backbone::{BinaryMask, GeometryPreset, ImageEmbedding};
use promptseg::data::synth::{synth_generate, SynthConfig};
use promptseg::losses::{total_loss, LossTargets, LossWeights, Predictions};
use promptseg::model::PromptSegmenter;
use promptseg::nn::Params;
use promptseg::peft::{param_group, FreezeMode};
use promptseg::ppn::PpnConfig;
use promptseg::training::AdamW;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn setup(num_classes: usize) -> (PromptSegmenter, ImageEmbedding, BinaryMask) {
    let model = PromptSegmenter::new(
        GeometryPreset::desk(),
        PpnConfig {
            num_classes,
            tokens_per_class: 8,
        },
        11,
        DType::F64,
    )
    .unwrap();
    let samples = synth_generate(&SynthConfig {
        empty_fraction: 0.0,
        ..SynthConfig::new(4, 1)
    })
    .unwrap();
    let emb = model.backbone.encode_image(&samples[0].image).unwrap();
    (model, emb, samples[0].masks[0].clone())
}

fn loss(model: &PromptSegmenter, emb: &ImageEmbedding, mask: &BinaryMask, class_id: usize) -> Tensor {
    let out = model.forward_learned(&emb.0.unsqueeze(0).unwrap(), &[class_id], None).unwrap();
    let targets = LossTargets::from_masks(&[mask], model.geometry().mask_prompt_size, DType::F64).unwrap();
    let pred = Predictions {
        mask_prompt_logits: &out.bundle.mask_prompt,
        mask_logits: &out.decoded.mask_logits,
        boxes: &out.bundle.boxes,
        objectness: &out.decoded.objectness,
    };
    total_loss(&pred, &targets, &LossWeights::default()).unwrap().total
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Replaces every `ppn.*` parameter with a variable.
fn ppn_vars(model: &mut PromptSegmenter) -> Vec<(String, Var)> {
    let mut vars = Vec::new();
    for (name, t) in model.named_params() {
        if name.starts_with("ppn.") {
            let v = Var::from_tensor(t).unwrap();
            *t = v.as_tensor().clone();
            vars.push((name, v));
        }
    }
    vars
}

fn set_element(var: &Var, index: usize, value: f64) {
    let t = var.as_tensor();
    let mut data: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
    data[index] = value;
    var.set(&Tensor::from_vec(data, t.shape(), t.device()).unwrap()).unwrap();
}

#[test]
fn end_to_end_ppn_gradients_match_central_differences() {
    let (mut model, emb, mask) = setup(1);
    let vars = ppn_vars(&mut model);
    let grads = loss(&model, &emb, &mask, 0).backward().unwrap();

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    // spread the picks over tokens, box head, mask head and the rest
    let pools: [&dyn Fn(&str) -> bool; 4] = [
        &|n| n.contains("class_tokens"),
        &|n| n.contains("box_head"),
        &|n| n.contains("mask_"),
        &|n| !n.contains("class_tokens") && !n.contains("box_head") && !n.contains("mask_"),
    ];
    let mut checked = 0;
    for pick in 0..10 {
        let pool: Vec<&(String, Var)> = vars.iter().filter(|(n, _)| pools[pick % 4](n)).collect();
        let (name, var) = pool[rng.random_range(0..pool.len())];
        let n = var.as_tensor().elem_count();
        let i = rng.random_range(0..n);
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let x0: f64 = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i];
        set_element(var, i, x0 + h);
        let up = scalar(&loss(&model, &emb, &mask, 0));
        set_element(var, i, x0 - h);
        let down = scalar(&loss(&model, &emb, &mask, 0));
        set_element(var, i, x0);
        let fd = (up - down) / (2.0 * h);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
        assert!(rel <= 1e-3, "{name}[{i}]: autodiff {} vs central difference {fd} (rel {rel:e})", g[i]);
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn other_classes_receive_no_gradient() {
    let (mut model, emb, mask) = setup(3);
    let vars = ppn_vars(&mut model);
    let grads = loss(&model, &emb, &mask, 1).backward().unwrap();
    for (name, var) in &vars {
        let g = grads.get(var.as_tensor());
        match name.as_str() {
            "ppn.class_tokens.1" => {
                let g = g.expect("active class has a gradient");
                assert!(scalar(&g.abs().unwrap().sum_all().unwrap()) > 0.0);
            }
            "ppn.class_tokens.0" | "ppn.class_tokens.2" => {
                if let Some(g) = g {
                    assert_eq!(scalar(&g.abs().unwrap().sum_all().unwrap()), 0.0, "{name}");
                }
            }
            _ => {}
        }
    }
}

#[test]
fn ppn_only_leaves_frozen_tensors_without_gradient() {
    let (mut model, emb, mask) = setup(1);
    let lrs = BTreeMap::from([
        (promptseg::peft::ParamGroup::Ppn, 1e-4),
        (promptseg::peft::ParamGroup::Decoder, 1e-5),
    ]);
    let _opt = AdamW::attach(&mut model, |n| param_group(n, FreezeMode::PpnOnly), lrs, 0.1).unwrap();
    let grads = loss(&model, &emb, &mask, 0).backward().unwrap();
    let mut trainable = 0;
    let mut frozen = 0;
    for (name, t) in model.named_params() {
        match (name.starts_with("ppn."), grads.get(t)) {
            (true, Some(g)) => {
                let v: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
                assert!(v.iter().all(|x| x.is_finite()), "{name}");
                trainable += 1;
            }
            (true, None) => panic!("{name} has no gradient"),
            (false, Some(g)) => {
                assert_eq!(scalar(&g.abs().unwrap().sum_all().unwrap()), 0.0, "{name}");
                frozen += 1;
            }
            (false, None) => frozen += 1,
        }
    }
    assert!(trainable > 10 && frozen > 10);
}
