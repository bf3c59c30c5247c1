// Throwaway timing probe for the training step pipeline.

use std::time::Instant;

use vidpolicy::config::RunConfig;
use vidpolicy::datapipe::{pair_episodes_weighted, BatchSampler, Corpus, Split};
use vidpolicy::losses::LossMask;
use vidpolicy::trainer::Trainer;

fn main() {
    let run = RunConfig::preset("desk").unwrap();
    let t0 = Instant::now();
    let corpus = Corpus::load(std::path::Path::new("/root/runs/corpus")).unwrap();
    println!("corpus load: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let pairs =
        pair_episodes_weighted(&corpus.manifest, Split::Train, 3, run.train.mixture(), 7).unwrap();
    println!("pairing: {:?}", t0.elapsed());

    let ranges = run.env.action_ranges();
    let mut sampler = BatchSampler::new(&corpus, &pairs, ranges, &run.model, 1).unwrap();
    let b = run.train.batch_size;

    let t0 = Instant::now();
    let mut batches = Vec::new();
    for _ in 0..3 {
        batches.push(sampler.next_batch(b).unwrap());
    }
    println!("next_batch x3: {:?} ({:?}/batch)", t0.elapsed(), t0.elapsed() / 3);

    let mut trainer = Trainer::new(&run).unwrap();
    let batch = batches.pop().unwrap();
    let t0 = Instant::now();
    let patches = trainer.model.patchify_batch::<f32>(batch.frames.view()).unwrap();
    println!("patchify: {:?}", t0.elapsed());

    let ids: Vec<Vec<usize>> = batch
        .instructions
        .iter()
        .map(|s| trainer.model.text.tokenize(s).unwrap())
        .collect();
    let t0 = Instant::now();
    let (acts, caches) = trainer.model.train_forward::<f32>(&trainer.params, &patches, &ids);
    println!("train_forward: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let (_bundle, grads) = vidpolicy::losses::training_losses(
        &mut trainer.params,
        &trainer.model.cfg.clone(),
        &acts,
        &batch.targets,
        &trainer.head_vv,
        &trainer.head_vt,
        LossMask::all(),
    )
    .unwrap();
    println!("losses+grads: {:?}", t0.elapsed());

    let t0 = Instant::now();
    trainer.model.train_backward::<f32>(&mut trainer.params, &caches, &grads);
    println!("train_backward: {:?}", t0.elapsed());
}
