// scratch diagnostic for the planted class signal (deleted before ship)
use ovcoser_core::backbone::{build_backbone, BackboneConfig, StubOptions, planted_palette};
use ovcoser_core::data::toyset::{generate, ToySpec};
use ovcoser_core::prompts::{class_embeddings, PromptTemplateSet};
use ovcoser_core::recognize;

fn main() {
    let spec = ToySpec::default();
    let set = generate(&spec);
    println!("classes: {:?}", set.classes);
    for (c, d) in set.classes.iter().zip(planted_palette(&set.classes)) {
        println!("  dir {c}: {:?}", d);
    }
    let bb_cfg = BackboneConfig {
        kind: "stub".into(),
        seed: 1337,
        adapter: None,
        stub: StubOptions { planted_classes: set.classes.clone(), planted_gain: 24.0, ..Default::default() },
    };
    let backbone = build_backbone(&bb_cfg).unwrap();
    let embeds = class_embeddings(backbone.as_ref(), &PromptTemplateSet::camo(), &set.classes).unwrap();

    let mut correct = 0;
    for s in set.test.iter() {
        let pyr = backbone.encode_image(&s.image).unwrap();
        let l5 = pyr.level(5);
        let pooled = recognize::masked_average_pool(l5, &s.mask).unwrap();
        let pred = recognize::classify(backbone.as_ref(), &pooled, &embeds).unwrap();
        let ok = pred.class_index == s.class_index;
        if ok { correct += 1; }
        println!(
            "{:>18} true={} pred={} corr={:?} pooled_norm={:.2}",
            s.image_id,
            s.class_index,
            pred.class_index,
            pred.correlation.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            pooled.iter().map(|v| v * v).sum::<f64>().sqrt()
        );
    }
    println!("ideal-mask accuracy {}/{}", correct, set.test.len());

    // sanity: object-cell injection magnitude for one sample
    let s = &set.test[0];
    let pyr = backbone.encode_image(&s.image).unwrap();
    let l5 = pyr.level(5);
    println!("stage5 dims {:?}", l5.dim());
    // mask downsampled occupancy per stage-5 cell
    let (_, h5, w5) = l5.dim();
    let r = s.mask.dim().0;
    let patch = r / h5;
    for cy in 0..h5 {
        for cx in 0..w5 {
            let mut occ = 0.0;
            for y in 0..patch { for x in 0..patch { occ += s.mask[(cy*patch+y, cx*patch+x)]; } }
            print!("{:.2} ", occ / (patch*patch) as f64);
        }
        println!();
    }
}
