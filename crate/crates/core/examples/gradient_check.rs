//! Central finite differences against the hand-written backward pass, on the
//! text prompt and the token-net bias of a tiny backbone.

use incpl::adaptation::AdaptationState;
use incpl::backbone::{BackendConfig, ImageSample, ToyBackend};
use incpl::objective::{
    combined_loss, ContextPair, ForwardCounter, LiveSet, LossInputs, Objective,
};
use incpl::prompts::{ClassVocabulary, PromptConfig, PromptState};
use incpl::token_net::TokenNetParams;
use ndarray::Array3;

const H: f64 = 1e-5;

fn loss(
    b: &ToyBackend,
    v: &ClassVocabulary,
    p: &PromptState,
    t: &TokenNetParams,
    test: &ImageSample,
    ctx: &[ContextPair<'_>],
) -> f64 {
    let inputs = LossInputs {
        backend: b,
        prompts: p,
        theta: t,
        vocab: v,
    };
    combined_loss(
        test,
        ctx,
        &inputs,
        Objective::ContextAware,
        0.4,
        LiveSet::NONE,
        &mut ForwardCounter::default(),
    )
    .unwrap()
    .breakdown
    .total
}

fn main() -> incpl::Result<()> {
    let backend = ToyBackend::new(BackendConfig::tiny())?;
    let vocab = ClassVocabulary::new(vec!["rose".into(), "tulip".into()], &backend)?;
    let state = AdaptationState::new(&backend, &PromptConfig::default(), 0)?;
    let img = |k: f64| {
        ImageSample::new(
            format!("img{k}"),
            Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
                ((c + 2 * y + 3 * x) as f64 * k).sin() * 0.4 + 0.5
            }),
        )
    };
    let (test, c0) = (img(0.3), img(0.7));
    let ctx = [ContextPair {
        image: &c0,
        label: Some(1),
    }];
    let inputs = LossInputs {
        backend: &backend,
        prompts: &state.prompts,
        theta: &state.theta,
        vocab: &vocab,
    };
    let eval = combined_loss(
        &test,
        &ctx,
        &inputs,
        Objective::ContextAware,
        0.4,
        LiveSet::ALL,
        &mut ForwardCounter::default(),
    )?;

    let gt = eval.grads.text.expect("text prompt is live");
    let mut worst: f64 = 0.0;
    for (idx, &analytic) in gt.indexed_iter() {
        let mut p = state.prompts.clone();
        p.text.tokens[idx] += H;
        let plus = loss(&backend, &vocab, &p, &state.theta, &test, &ctx);
        p.text.tokens[idx] -= 2.0 * H;
        let minus = loss(&backend, &vocab, &p, &state.theta, &test, &ctx);
        let numeric = (plus - minus) / (2.0 * H);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    println!(
        "text prompt: {} coordinates, max relative error {worst:.2e}",
        gt.len()
    );

    let gb = eval.grads.theta.expect("token net is live").bias;
    let mut worst: f64 = 0.0;
    for (i, &analytic) in gb.iter().enumerate() {
        let mut t = state.theta.clone();
        t.bias[i] += H;
        let plus = loss(&backend, &vocab, &state.prompts, &t, &test, &ctx);
        t.bias[i] -= 2.0 * H;
        let minus = loss(&backend, &vocab, &state.prompts, &t, &test, &ctx);
        let numeric = (plus - minus) / (2.0 * H);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    println!(
        "token-net bias: {} coordinates, max relative error {worst:.2e}",
        gb.len()
    );
    Ok(())
}
