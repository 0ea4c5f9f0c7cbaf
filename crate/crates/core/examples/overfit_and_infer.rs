//! Trains the default model on a tiny corpus until it memorizes it, then
//! reads the training images back with greedy decoding.
//!
//! Takes a minute or two on one core.

use otsnet::config::RunConfig;
use otsnet::train::{evaluate, stack_images, synth_generate, Trainer};
use otsnet::OtsNet;

fn main() -> otsnet::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 60;
    cfg.train.batch_size = 16;
    cfg.train.lr = 1e-3;
    cfg.train.seed = 1;
    let data = synth_generate(48, 3, &cfg.data.spec)?;

    let mut net = OtsNet::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(&net, cfg.train.clone(), data.len())?;
    let per_epoch = cfg.train.steps_per_epoch(data.len());
    trainer.fit(&mut net, &data, |log, _| {
        if (log.step + 1) % (10 * per_epoch) == 0 {
            println!("epoch {:>3}  l_vq {:.4}  l_sq {:.4}  τ {:.3}", log.epoch + 1, log.loss.vq, log.loss.sq, log.tau);
        }
        Ok(())
    })?;

    let (metrics, _) = evaluate(&net, &data, 1)?;
    println!("train sequence accuracy {:.3}, char accuracy {:.3}", metrics.sequence_accuracy(), metrics.char_accuracy());

    let images = stack_images(data.iter().take(6).map(|s| &s.image))?;
    for (s, r) in data.iter().zip(net.recognize(&images)?) {
        println!("{:>6} -> {:<6} confidence {:.3} ({:?})", s.text, r.text(), r.mean_confidence(), r.stop);
    }
    Ok(())
}
