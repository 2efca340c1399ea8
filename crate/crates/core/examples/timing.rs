// scratch timing probe (deleted before ship)
use ovcoser_core::autograd::Tape;
use ovcoser_core::backbone::{build_backbone, BackboneConfig, StubOptions};
use ovcoser_core::data::toyset::{generate, ToySpec};
use ovcoser_core::decoder::{BoundParams, Decoder, DecoderConfig};
use ovcoser_core::objectives::{total_loss_traced, GroundTruth, LossConfig};
use ovcoser_core::prompts::{class_embeddings, PromptTemplateSet};
use std::time::Instant;

fn main() {
    let spec = ToySpec::default();
    let set = generate(&spec);
    let bb_cfg = BackboneConfig {
        kind: "stub".into(), seed: 1337, adapter: None,
        stub: StubOptions { planted_classes: set.classes.clone(), planted_gain: 16.0, ..Default::default() },
    };
    let backbone = build_backbone(&bb_cfg).unwrap();
    let dec_cfg = DecoderConfig { width: 16, heads: 2, iterations: 2, se_stages: [2,3].into_iter().collect(), ..DecoderConfig::default() };
    let decoder = Decoder::new(dec_cfg, backbone.spec(), 7).unwrap();
    let embeds = class_embeddings(backbone.as_ref(), &PromptTemplateSet::camo(), &set.classes).unwrap();
    let s = &set.train[0];
    let gt = GroundTruth { mask: s.mask.clone(), edge: Some(ovcoser_core::data::make_edge_gt(&s.mask)), depth: Some(s.depth.clone()) };

    let reps = 10;
    let t0 = Instant::now();
    let mut pyr = None;
    for _ in 0..reps { pyr = Some(backbone.encode_image(&s.image).unwrap()); }
    println!("encode_image: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);
    let pyr = pyr.unwrap();

    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let bound = BoundParams::bind(decoder.params(), &tape, true);
        let _tr = decoder.decode_traced(&tape, &bound, &pyr, &embeds, backbone.projection_matrix()).unwrap();
    }
    println!("decode fwd: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let bound = BoundParams::bind(decoder.params(), &tape, true);
        let tr = decoder.decode_traced(&tape, &bound, &pyr, &embeds, backbone.projection_matrix()).unwrap();
        let _loss = total_loss_traced(&tape, &tr, &gt, &LossConfig::default()).unwrap();
    }
    println!("decode+loss fwd: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let bound = BoundParams::bind(decoder.params(), &tape, true);
        let tr = decoder.decode_traced(&tape, &bound, &pyr, &embeds, backbone.projection_matrix()).unwrap();
        let loss = total_loss_traced(&tape, &tr, &gt, &LossConfig::default()).unwrap();
        let grads = tape.backward(loss.total);
        let mut acc = ovcoser_core::decoder::empty_grad_acc(decoder.params());
        bound.accumulate_grads(decoder.params(), &grads, &mut acc);
    }
    println!("full fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);
}
