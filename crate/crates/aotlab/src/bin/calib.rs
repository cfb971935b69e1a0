// Temporary calibration harness; not part of the deliverable.
use std::time::Instant;

use aotlab::data::clip::{make_labeled, DirectionLabel, LabeledClip};
use aotlab::data::synthetic::{gen_synthetic, SyntheticKind, SyntheticSpec};
use aotlab::data::vqa::{pick_template, render_vqa};
use aotlab::encoder::{Encoder, EncoderConfig};
use aotlab::llm::{eval_vqa_grids, finetune_vqa, Decoder, TuneConfig};
use aotlab::probe::{eval_probe_grids, train_probe, ProbeTrainConfig};
use aotlab::projector::{Projector, ProjectorConfig};
use aotlab::{seeds, FeatureGrid};

fn synth_labeled(n: usize, seed: u64, noise: f64) -> Vec<LabeledClip> {
    let clip_seed = seeds::substream(seed, "data-clips");
    let mut coin_rng = seeds::rng(seeds::substream(seed, "data-coins"));
    let mut tpl_rng = seeds::rng(seeds::substream(seed, "data-templates"));
    (0..n)
        .map(|i| {
            let spec = SyntheticSpec::new(
                SyntheticKind::FallingDot,
                16,
                (32, 32),
                noise,
                seeds::for_index(clip_seed, i as u64),
            );
            let mut l = make_labeled(gen_synthetic(&spec).unwrap(), &mut coin_rng);
            l.template_id = Some(pick_template(&mut tpl_rng));
            l
        })
        .collect()
}

fn encode_all(enc: &Encoder, clips: &[LabeledClip], layer: usize) -> Vec<(FeatureGrid, DirectionLabel)> {
    clips
        .iter()
        .map(|l| (enc.encode(&l.clip, layer).unwrap(), l.label))
        .collect()
}

fn paired_eval_grids(
    enc: &Encoder,
    n_pairs: usize,
    seed: u64,
    noise: f64,
    layer: usize,
) -> Vec<(FeatureGrid, DirectionLabel, String)> {
    let clip_seed = seeds::substream(seed, "eval-clips");
    let mut items = Vec::new();
    for i in 0..n_pairs {
        let spec = SyntheticSpec::new(
            SyntheticKind::FallingDot,
            16,
            (32, 32),
            noise,
            seeds::for_index(clip_seed, i as u64),
        );
        let clip = gen_synthetic(&spec).unwrap();
        let rev = aotlab::data::clip::reverse_clip(&clip);
        items.push((
            enc.encode(&clip, layer).unwrap(),
            DirectionLabel::F,
            clip.source_id.clone(),
        ));
        items.push((
            enc.encode(&rev, layer).unwrap(),
            DirectionLabel::B,
            clip.source_id.clone(),
        ));
    }
    items
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("all");

    if mode == "speed" || mode == "all" {
        // decoder step timing at acceptance dimensions
        let dec = Decoder::new(1);
        let sample = aotlab::data::vqa::VqaSample {
            clip_ref: "x".into(),
            template_id: 1,
            instruction: aotlab::data::vqa::TEMPLATES[0].0.into(),
            question: aotlab::data::vqa::TEMPLATES[0].1.into(),
            answer: "backward".into(),
        };
        let (ids, mask) = Decoder::encode_sample(&sample).unwrap();
        println!("seq len: {} text tokens", ids.len());
        let visual = aotlab::nn::init::normal(&mut seeds::rng(2), 8, 128, 0.4);
        let t0 = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let _ = dec.loss(Some(&visual), &ids, &mask, None).unwrap();
        }
        println!("fwd-only loss: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

        // full train step timing via finetune on a tiny set
        let enc = Encoder::new(EncoderConfig::video_centric(3)).unwrap();
        let clips = synth_labeled(8, 10, 0.05);
        let grids: Vec<_> = clips
            .iter()
            .map(|l| {
                (
                    enc.encode(&l.clip, 8).unwrap(),
                    render_vqa(l, l.template_id.unwrap()).unwrap(),
                )
            })
            .collect();
        let mut proj = Projector::new(ProjectorConfig::mlp((8, 1, 1), 128, 128, 5), 64).unwrap();
        let cfg = TuneConfig { seed: 7, ..Default::default() };
        let t0 = Instant::now();
        let _ = finetune_vqa(&grids, &dec, &mut proj, &cfg, true).unwrap();
        println!(
            "train step (batch 2): {:.1} ms/sample over 8 samples",
            t0.elapsed().as_secs_f64() * 1000.0 / 8.0
        );
    }

    if mode == "pretrain" || mode == "all" {
        let t0 = Instant::now();
        let dec = Decoder::pretrained(42);
        println!("pretrain: {:.1} s", t0.elapsed().as_secs_f64());
        for (tid, _label, instr, q, _ans) in aotlab::data::vqa::all_renderings().iter().take(4) {
            let prompt = format!("{instr}\n{q}\n");
            let out = dec.generate(None, &prompt, None, 12).unwrap();
            println!("template {tid}: generated {:?} -> {:?}", out, aotlab::llm::parse_answer(&out));
        }
    }

    if mode == "probe" || mode == "all" {
        let t0 = Instant::now();
        let enc = Encoder::new(EncoderConfig::video_centric(42)).unwrap();
        println!("video-centric encoder construction: {:.1} s", t0.elapsed().as_secs_f64());
        let train = synth_labeled(2000, 100, 0.05);
        let t0 = Instant::now();
        let feats = encode_all(&enc, &train, 8);
        println!("encode 2000 train clips: {:.1} s", t0.elapsed().as_secs_f64());
        let pcfg = ProbeTrainConfig { seed: 11, ..Default::default() };
        let t0 = Instant::now();
        let params = train_probe(&feats, &pcfg).unwrap();
        println!("train probe: {:.1} s", t0.elapsed().as_secs_f64());
        let eval = paired_eval_grids(&enc, 500, 200, 0.05, 8);
        let items: Vec<_> = eval.iter().map(|(g, l, _)| (g.clone(), *l)).collect();
        let acc = eval_probe_grids(&params, &items).unwrap();
        println!("video-centric probe paired accuracy (layer 8): {acc:.4}");

        // frame-centric
        let fenc = Encoder::new(EncoderConfig::frame_centric(42)).unwrap();
        let ftrain = encode_all(&fenc, &train, 8);
        let fparams = train_probe(&ftrain, &pcfg).unwrap();
        let feval = paired_eval_grids(&fenc, 250, 200, 0.05, 8);
        let fitems: Vec<_> = feval.iter().map(|(g, l, _)| (g.clone(), *l)).collect();
        let facc = eval_probe_grids(&fparams, &fitems).unwrap();
        println!("frame-centric probe paired accuracy: {facc:.4}");
    }

    if mode == "layers" || mode == "all" {
        let noise: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.05);
        println!("layers at noise {noise}");
        let enc = Encoder::new(EncoderConfig::video_centric(42)).unwrap();
        let train = synth_labeled(2000, 100, noise);
        for layer in 1..=8 {
            let feats = encode_all(&enc, &train, layer);
            let pcfg = ProbeTrainConfig { seed: seeds::for_layer(11, layer), ..Default::default() };
            let params = train_probe(&feats, &pcfg).unwrap();
            let eval = paired_eval_grids(&enc, 250, 200, noise, layer);
            let items: Vec<_> = eval.iter().map(|(g, l, _)| (g.clone(), *l)).collect();
            let acc = eval_probe_grids(&params, &items).unwrap();
            println!("layer {layer}: probe paired accuracy {acc:.4}");
        }
    }

    if mode == "vqa" || mode == "all" {
        let t_all = Instant::now();
        let enc = Encoder::new(EncoderConfig::video_centric(42)).unwrap();
        let n_train: usize = args
            .get(2)
            .and_then(|s| s.parse().ok())
            .unwrap_or(1000);
        let clips = synth_labeled(n_train, 300, 0.25);
        let t0 = Instant::now();
        let data: Vec<_> = clips
            .iter()
            .map(|l| {
                (
                    enc.encode(&l.clip, 8).unwrap(),
                    render_vqa(l, l.template_id.unwrap()).unwrap(),
                )
            })
            .collect();
        println!("encode+render {n_train}: {:.1} s", t0.elapsed().as_secs_f64());
        let dec = Decoder::pretrained(42);
        let eval = paired_eval_grids(&enc, 150, 400, 0.25, 8);

        for (name, pcfg) in [
            ("time-preserved (8,1,1)", ProjectorConfig::mlp((8, 1, 1), 128, 128, 5)),
            ("time-compressed (1,2,2)", ProjectorConfig::mlp((1, 2, 2), 128, 128, 5)),
            ("q-former 8", ProjectorConfig::qformer(8, 128, 128, 5)),
        ] {
            let mut proj = Projector::new(pcfg, 64).unwrap();
            let cfg = TuneConfig { seed: 7, learning_rate: 3e-4, ..Default::default() };
            let t0 = Instant::now();
            let lora = finetune_vqa(&data, &dec, &mut proj, &cfg, true).unwrap();
            let tt = t0.elapsed().as_secs_f64();
            let (acc, preds) = eval_vqa_grids(&dec, Some(&lora), &proj, &eval, 99).unwrap();
            println!(
                "{name}: acc {acc:.4} (train {tt:.0}s) sample gen: {:?}",
                &preds[0].generated_text
            );
        }
        println!("vqa total: {:.0} s", t_all.elapsed().as_secs_f64());
    }
}
