// scratch probe: toy training timing + learnability (deleted before ship)
use ovcoser_core::backbone::{build_backbone, BackboneConfig, StubOptions};
use ovcoser_core::data::toyset::{generate, ToySpec};
use ovcoser_core::decoder::{Decoder, DecoderConfig};
use ovcoser_core::harness::{evaluate_samples, EvalConfig, EvalSample, GtSample, OptimizerConfig, Trainer};
use ovcoser_core::objectives::{GroundTruth, LossConfig};
use ovcoser_core::prompts::{class_embeddings, PromptTemplateSet};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let width: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let gain: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4.0);

    let spec = ToySpec::default();
    let set = generate(&spec);
    let bb_cfg = BackboneConfig {
        kind: "stub".into(),
        seed: 1337,
        adapter: None,
        stub: StubOptions {
            planted_classes: set.classes.clone(),
            planted_gain: gain,
            ..Default::default()
        },
    };
    let backbone = build_backbone(&bb_cfg).unwrap();
    let dec_cfg = DecoderConfig {
        width,
        heads: 2,
        iterations: 2,
        se_stages: [2, 3].into_iter().collect(),
        ..DecoderConfig::default()
    };
    let decoder = Decoder::new(dec_cfg, backbone.spec(), 7).unwrap();
    println!("trainable params: {}", decoder.trainable_scalar_count());
    let opt = OptimizerConfig { lr, ..Default::default() };
    let mut trainer = Trainer::new(decoder, &opt);

    let train_embeds =
        class_embeddings(backbone.as_ref(), &PromptTemplateSet::camo(), &set.classes).unwrap();
    let train: Vec<GtSample> = set
        .train
        .iter()
        .map(|s| GtSample {
            image_id: s.image_id.clone(),
            image: s.image.clone(),
            gt: GroundTruth {
                mask: s.mask.clone(),
                edge: Some(ovcoser_core::data::make_edge_gt(&s.mask)),
                depth: Some(s.depth.clone()),
            },
        })
        .collect();

    let t0 = Instant::now();
    let loss_cfg = LossConfig::default();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        // simple deterministic shuffle
        for i in (1..order.len()).rev() {
            let j = (i * 2654435761 + epoch * 97) % (i + 1);
            order.swap(i, j);
        }
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(4) {
            let batch: Vec<GtSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let stats = trainer.train_step(backbone.as_ref(), &train_embeds, &batch, &loss_cfg).unwrap();
            total += stats.breakdown.total;
            steps += 1;
        }
        println!("epoch {epoch}: mean loss {:.4} ({:.1}s elapsed)", total / steps as f64, t0.elapsed().as_secs_f64());
    }

    // eval with unseen template phrasings
    let eval_templates = PromptTemplateSet::new(
        "eval_unseen",
        vec![
            "A snapshot of the <class> hidden in plain sight.".into(),
            "An image of the <class> blending into the scene.".into(),
        ],
    )
    .unwrap();
    let eval_embeds = class_embeddings(backbone.as_ref(), &eval_templates, &set.classes).unwrap();
    let eval: Vec<EvalSample> = set
        .test
        .iter()
        .map(|s| EvalSample {
            image_id: s.image_id.clone(),
            image: s.image.clone(),
            gt_mask: s.mask.clone(),
            class_index: s.class_index,
        })
        .collect();
    let out = evaluate_samples(backbone.as_ref(), &trainer.decoder, &eval_embeds, &eval, &EvalConfig::default(), None).unwrap();
    println!(
        "eval: acc {:.3} cIoU {:.3} cSm {:.3} cMAE {:.3} | total {:.1}s",
        out.report.accuracy(),
        out.report.aggregate.iou,
        out.report.aggregate.s_measure,
        out.report.aggregate.mae,
        t0.elapsed().as_secs_f64()
    );
    // also: ideal-mask classification accuracy (planted signal sanity)
    let ideal_cfg = EvalConfig { ideal_masks: true, ..Default::default() };
    let out = evaluate_samples(backbone.as_ref(), &trainer.decoder, &eval_embeds, &eval, &ideal_cfg, None).unwrap();
    println!("ideal-mask acc {:.3}", out.report.accuracy());
}
// (appended) quick planted-signal diagnostic
#[allow(dead_code)]
fn unused() {}
