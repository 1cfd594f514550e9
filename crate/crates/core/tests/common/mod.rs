#![allow(dead_code)]

use cutie_core::data::synth::{synth_generate, SynthSpec};
use cutie_core::data::ClassSet;
use cutie_core::gridder::{AugmentParams, GridShape};
use cutie_core::model::{Checkpoint, CutieConfig, CutieModel};
use cutie_core::nn::Tensor;
use cutie_core::tokenizer::build_vocab;
use cutie_core::trainer::{prepare, training_accuracy, Example, TrainConfig, Trainer};

/// Direct SAME-padded convolution with an odd kernel, one multiply-add at a
/// time.
pub fn dense_conv(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = <[usize; 4]>::try_from(input.shape()).unwrap();
    let [o, ci, kh, kw] = <[usize; 4]>::try_from(weight.shape()).unwrap();
    assert_eq!(c, ci);
    assert!(kh % 2 == 1 && kw % 2 == 1);
    let (x, k) = (input.data(), weight.data());
    let mut out = vec![0.0; n * o * h * w];
    for s in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = y as isize + i as isize - (kh / 2) as isize;
                                let xs = xx as isize + j as isize - (kw / 2) as isize;
                                if yy < 0 || xs < 0 || yy >= h as isize || xs >= w as isize {
                                    continue;
                                }
                                acc += k[((oc * c + ic) * kh + i) * kw + j]
                                    * x[((s * c + ic) * h + yy as usize) * w + xs as usize];
                            }
                        }
                    }
                    out[((s * o + oc) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, h, w], out).unwrap()
}

/// Kernel with `rate - 1` zeros inserted between taps, so that a dense
/// convolution with it equals an atrous convolution with the original.
pub fn dilate_kernel(weight: &Tensor<f64>, rate: usize) -> Tensor<f64> {
    let [o, c, kh, kw] = <[usize; 4]>::try_from(weight.shape()).unwrap();
    let (dh, dw) = ((kh - 1) * rate + 1, (kw - 1) * rate + 1);
    let mut out = vec![0.0; o * c * dh * dw];
    for oc in 0..o {
        for ic in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    out[((oc * c + ic) * dh + i * rate) * dw + j * rate] =
                        weight.data()[((oc * c + ic) * kh + i) * kw + j];
                }
            }
        }
    }
    Tensor::from_vec(&[o, c, dh, dw], out).unwrap()
}

pub const OVERFIT_GRID: usize = 32;

/// The eight-document overfitting setup: reduced model (E=32, trunk 64).
pub fn overfit_setup(seed: u64) -> (Checkpoint<f32>, Vec<Example>, TrainConfig) {
    let docs = synth_generate(&SynthSpec::new(8, 3)).unwrap();
    let classes = ClassSet::receipts();
    let vocab = build_vocab(&docs, 2000).unwrap();
    let examples = prepare(&docs, &vocab, &classes);
    let config = CutieConfig {
        vocab_size: vocab.len(),
        embedding_dim: 32,
        trunk_channels: 64,
        ..CutieConfig::default()
    };
    let mut ck = Checkpoint::new(CutieModel::build(config, seed).unwrap());
    ck.vocab = Some(vocab);
    ck.classes = Some(classes);
    let train = TrainConfig {
        max_steps: 0,
        batch_size: 4,
        augment: false,
        grid: AugmentParams {
            mean_rows: OVERFIT_GRID,
            mean_cols: OVERFIT_GRID,
            sigma: 0.0,
            min: 8,
            max: 128,
        },
        seed,
        checkpoint_interval: 0,
        log_interval: 0,
        ..TrainConfig::default()
    };
    (ck, examples, train)
}

pub struct OverfitRun {
    pub checkpoint: Checkpoint<f32>,
    pub steps: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub finite: bool,
}

/// Trains in chunks of 25 steps until every training piece is classified
/// correctly and the batch loss is below 0.01, or `max_steps` is reached.
pub fn overfit_run(seed: u64, max_steps: u64) -> OverfitRun {
    let (ck, examples, config) = overfit_setup(seed);
    let mut trainer = Trainer::new(ck, config).unwrap();
    let shape = GridShape::new(OVERFIT_GRID, OVERFIT_GRID).unwrap();
    let (mut loss, mut accuracy, mut finite) = (f64::NAN, 0.0, true);
    while trainer.step() < max_steps {
        trainer.config.max_steps = (trainer.step() + 25).min(max_steps);
        let log = trainer.run(&examples, &mut ()).unwrap();
        finite &= log.iter().all(|e| e.loss.is_finite());
        loss = log.last().unwrap().loss;
        accuracy = training_accuracy(&trainer.checkpoint.model, &examples, shape).unwrap();
        if accuracy == 1.0 && loss < 0.01 {
            break;
        }
    }
    OverfitRun {
        steps: trainer.step(),
        checkpoint: trainer.checkpoint,
        loss,
        accuracy,
        finite,
    }
}
