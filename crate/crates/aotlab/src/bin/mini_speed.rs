extern crate blas_src;
use aotlab::llm::Decoder;
fn main() {
    let dec = Decoder::new(1);
    let sample = aotlab::data::vqa::VqaSample {
        clip_ref: "x".into(),
        template_id: 1,
        instruction: aotlab::data::vqa::TEMPLATES[0].0.into(),
        question: aotlab::data::vqa::TEMPLATES[0].1.into(),
        answer: "backward".into(),
    };
    let (ids, mask) = Decoder::encode_sample(&sample).unwrap();
    let visual = aotlab::nn::init::normal(&mut aotlab::seeds::rng(2), 8, 128, 0.4);
    for _ in 0..3 {
        let _ = dec.loss(Some(&visual), &ids, &mask, None).unwrap();
    }
}
