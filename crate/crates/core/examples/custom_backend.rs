//! Drive adaptation with an encoder that lives outside the crate. The host
//! only provides forward embeddings and vector-Jacobian products; here a
//! mean-pooled linear map stands in for it.

use std::sync::Arc;

use incpl::adaptation::{run_stream, LabeledImage, StreamConfig};
use incpl::backbone::{
    BackendConfig, CallbackBackend, CallbackHooks, DualEncoder, ForwardFn, ImageSample,
    PatchTokens, VjpFn,
};
use incpl::context::ContextStore;
use incpl::prompts::ClassVocabulary;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// `x -> W mean(x)` and its VJP.
fn linear(w: Arc<Array2<f64>>) -> (ForwardFn, VjpFn) {
    let w2 = Arc::clone(&w);
    (
        Box::new(move |x| Ok(w.dot(&x.mean_axis(Axis(0)).unwrap()))),
        Box::new(move |x, up| {
            let row = w2.t().dot(&up) / x.nrows() as f64;
            Array2::from_shape_fn(x.dim(), |(_, j)| row[j])
        }),
    )
}

fn main() -> incpl::Result<()> {
    let cfg = BackendConfig::tiny();
    let (d, m, joint) = (cfg.d_v, cfg.m, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let proj = Arc::new(random(d, cfg.patch_dim(), &mut rng));
    let cls = random(1, d, &mut rng).row(0).to_owned();
    let words: Arc<Array2<f64>> = Arc::new(random(64, d, &mut rng) * 0.1);
    let (encode_image, image_vjp) = linear(Arc::new(random(joint, d, &mut rng)));
    let (encode_text, text_vjp) = linear(Arc::new(random(joint, d, &mut rng)));
    let psize = cfg.patch_size();
    let grid = cfg.grid();

    let hooks = CallbackHooks {
        patchify: Box::new(move |img: &ImageSample| {
            let mut patches = Array2::zeros((m, d));
            for p in 0..m {
                let (gy, gx) = (p / grid, p % grid);
                let flat: Array1<f64> = img
                    .pixels
                    .slice(ndarray::s![
                        ..,
                        gy * psize.0..(gy + 1) * psize.0,
                        gx * psize.1..(gx + 1) * psize.1
                    ])
                    .iter()
                    .copied()
                    .collect();
                patches.row_mut(p).assign(&proj.dot(&flat));
            }
            Ok(PatchTokens {
                cls: cls.clone(),
                patches,
            })
        }),
        patchify_backward: None,
        word_tokens: Box::new(move |text: &str| {
            let rows: Vec<usize> = text
                .split_whitespace()
                .map(|w| w.bytes().map(usize::from).sum::<usize>() % 64)
                .collect();
            words.select(Axis(0), &rows)
        }),
        encode_image,
        image_vjp,
        encode_text,
        text_vjp,
        weight_digest: Box::new(|| "host-model-v1".into()),
    };
    let sos = random(1, d, &mut rng).row(0).to_owned();
    let eos = random(1, d, &mut rng).row(0).to_owned();
    let backend = CallbackBackend::new(cfg.clone(), joint, sos, eos, hooks)?;

    let names: Vec<String> = ["rose", "tulip", "iris"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let vocab = ClassVocabulary::new(names.clone(), &backend)?;
    let mut images = |prefix: &str, n: usize| -> Vec<LabeledImage> {
        (0..n)
            .map(|i| LabeledImage {
                image: ImageSample::new(
                    format!("{prefix}{i}"),
                    Array3::from_shape_simple_fn((cfg.c_img, cfg.h, cfg.w), || rng.random()),
                ),
                class: i % 3,
            })
            .collect()
    };
    let labeled = images("labeled", 6);
    let test = images("test", 9);
    let store = ContextStore::new(labeled.iter().map(|l| l.class).collect(), &names, 0)?;
    let mut config = StreamConfig {
        adaptation: Default::default(),
        prompt: Default::default(),
        context: Default::default(),
    };
    config.context.n_context = 2;
    let out = run_stream(&backend, &vocab, &test, &labeled, &store, &config)?;
    println!(
        "{}/{} on random images through the callback backend",
        out.correct, out.total
    );
    println!(
        "forward calls {:?}, backbone digest {}",
        out.counter,
        backend.weight_digest()
    );
    Ok(())
}
