//! One forward pass of both streams on a synthetic video, with the loss
//! breakdown and a look at the attention weights.
//!
//! ```text
//! cargo run --release --example forward_pass
//! ```

use ecm::data::{generate_synthetic_corpus, SyntheticCorpusSpec};
use ecm::model::{ecm_forward, EcmParams, ModelConfig, DEFAULT_K_RATIO};
use ecm::objective::objective;
use ecm::training::AblationFlags;

fn main() -> ecm::Result<()> {
    let spec = SyntheticCorpusSpec {
        n_train: 1,
        n_test: 1,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&spec)?;
    let video = &corpus.train[0];
    let c = corpus.categories.len();

    let flags = AblationFlags::default();
    let shape = flags.model_shape(spec.feature_dim, c, &ModelConfig { hidden: 32 });
    let params = EcmParams::init(&shape, 0);
    println!("{} parameters", params.num_parameters());

    let out = ecm_forward(&video.features, &params, DEFAULT_K_RATIO)?;
    println!("CAS {:?}", out.cas.scores().dim());
    println!("attention {:?}", out.weights.action.dim());
    println!("aggregated {:?}", out.agg.action.dim());
    let residual = (&out.weights.action + &out.weights.background - 1.0)
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    println!("max |W_a + W_b - 1| = {residual:e}");

    println!("\nlabel {:?}", video.record.labels);
    println!("s_e        {:.3}", out.s_e);
    println!("s_o        {:.3}", out.post.s_o);
    println!("s_tilde_o  {:.3}", out.post.s_tilde_o);

    let label = video.record.label(c)?;
    let (loss, _) = objective(&out, &label, &flags.loss_weights(0.05, 5.0))?;
    println!(
        "\ncls_e {:.4}  cls_o {:.4}  c2c {:.4}  a2c {:.4}  total {:.4}",
        loss.cls_e, loss.cls_o, loss.c2c, loss.a2c, loss.total
    );
    Ok(())
}
