//! Prototypical-network few-shot classifier over the encoder.
//!
//! Prototypes are per-class means of support embeddings; queries are
//! classified by a softmax over negative squared Euclidean distances
//! (fixed temperature 1). Episodic training optimizes the mean query
//! cross-entropy with Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::nn::{build_encoder, Encoder, EncoderConfig, EncoderVars};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tape::Var;
use crate::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// `[n_way, repr_dim]`, rows in `class_ids` order.
    pub prototypes: Tensor,
    pub class_ids: Vec<usize>,
}

/// Per-class mean of support embeddings. Classes appear in first-seen
/// order; every class must contribute the same number of rows.
pub fn compute_prototypes(support_reprs: &Tensor, support_labels: &[usize]) -> Result<PrototypeSet> {
    let s = support_reprs.shape();
    if s.len() != 2 || s[0] != support_labels.len() {
        return Err(Error::Dimension(format!(
            "{} labels against embeddings {s:?}",
            support_labels.len()
        )));
    }
    let d = s[1];
    let mut class_ids: Vec<usize> = Vec::new();
    for &l in support_labels {
        if !class_ids.contains(&l) {
            class_ids.push(l);
        }
    }
    let k_shot = support_labels.len() / class_ids.len();
    let mut counts = vec![0usize; class_ids.len()];
    let mut sums = vec![0.0f64; class_ids.len() * d];
    for (row, &l) in support_labels.iter().enumerate() {
        let c = class_ids.iter().position(|&id| id == l).unwrap();
        counts[c] += 1;
        for j in 0..d {
            sums[c * d + j] += support_reprs.data()[row * d + j];
        }
    }
    if counts.iter().any(|&n| n != k_shot) {
        return Err(Error::Contract(format!(
            "unbalanced support: class counts {counts:?}"
        )));
    }
    for v in sums.iter_mut() {
        *v /= k_shot as f64;
    }
    Ok(PrototypeSet { prototypes: Tensor::new(vec![class_ids.len(), d], sums)?, class_ids })
}

/// Softmax over negative squared Euclidean distances to each prototype.
pub fn classify_query(query_repr: &Tensor, prototypes: &PrototypeSet) -> Result<Vec<f64>> {
    let d = prototypes.prototypes.shape()[1];
    if query_repr.numel() != d {
        return Err(Error::Dimension(format!(
            "query of {} dims against prototypes of {d}",
            query_repr.numel()
        )));
    }
    let n_way = prototypes.class_ids.len();
    let q = query_repr.data();
    let mut logits = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let p = &prototypes.prototypes.data()[c * d..(c + 1) * d];
        let dist2: f64 = q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        logits.push(-dist2);
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Episode loss and accuracy computed from a `[S+Q, d]` representation
/// batch already on the tape (support rows first). Shared by episodic
/// training and by the masked-feature path, which substitutes its own
/// representations.
pub fn episode_loss_from_reprs(tape: &mut Tape, reprs: Var, episode: &Episode) -> Result<(Var, f64)> {
    let n_support = episode.support_ids.len();
    let n_query = episode.query_ids.len();
    let shape = tape.shape(reprs).to_vec();
    if shape.len() != 2 || shape[0] != n_support + n_query {
        return Err(Error::Dimension(format!(
            "episode of {} samples against representations {shape:?}",
            n_support + n_query
        )));
    }
    let n_way = episode.n_way;
    let support_z = tape.slice_rows(reprs, 0, n_support)?;
    let query_z = tape.slice_rows(reprs, n_support, n_support + n_query)?;

    // Prototypes as a fixed averaging matrix over support rows.
    let mut avg = vec![0.0f64; n_way * n_support];
    for (row, &label) in episode.support_labels.iter().enumerate() {
        let c = episode.class_ids.iter().position(|&id| id == label).ok_or_else(|| {
            Error::Contract(format!("support label {label} missing from episode classes"))
        })?;
        avg[c * n_support + row] = 1.0 / episode.k_shot as f64;
    }
    let avg = tape.input(Tensor::new(vec![n_way, n_support], avg)?);
    let protos = tape.matmul(avg, support_z)?;

    // Squared distances via |q|^2 + |p|^2 - 2 q.p.
    let pt = tape.transpose2d(protos)?;
    let qp = tape.matmul(query_z, pt)?;
    let q2 = tape.mul(query_z, query_z)?;
    let q2 = tape.sum_axis(q2, 1)?;
    let q2 = tape.reshape(q2, vec![n_query, 1])?;
    let p2 = tape.mul(protos, protos)?;
    let p2 = tape.sum_axis(p2, 1)?;
    let p2 = tape.reshape(p2, vec![1, n_way])?;
    let cross = tape.mul_scalar(qp, 2.0)?;
    let sums = tape.add(q2, p2)?;
    let dist2 = tape.sub(sums, cross)?;
    let logits = tape.neg(dist2)?;
    let logp = tape.log_softmax(logits, 1)?;

    let mut onehot = vec![0.0f64; n_query * n_way];
    let mut targets = Vec::with_capacity(n_query);
    for (row, &label) in episode.query_labels.iter().enumerate() {
        let c = episode.class_ids.iter().position(|&id| id == label).ok_or_else(|| {
            Error::Contract(format!("query label {label} missing from episode classes"))
        })?;
        onehot[row * n_way + c] = 1.0;
        targets.push(c);
    }
    let oh = tape.input(Tensor::new(vec![n_query, n_way], onehot)?);
    let picked = tape.mul(logp, oh)?;
    let per_query = tape.sum_axis(picked, 1)?;
    let mean = tape.mean_all(per_query)?;
    let loss = tape.neg(mean)?;

    // Accuracy from the logits values (argmax, first index wins ties).
    let logit_vals = tape.data(logits);
    let mut correct = 0usize;
    for (row, &target) in targets.iter().enumerate() {
        let row_vals = &logit_vals[row * n_way..(row + 1) * n_way];
        let mut best = 0usize;
        for (j, &v) in row_vals.iter().enumerate() {
            if v > row_vals[best] {
                best = j;
            }
        }
        if best == target {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / n_query.max(1) as f64;
    Ok((loss, accuracy))
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeEval {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean query cross-entropy and accuracy for one episode under an encoder.
pub fn episode_loss(encoder: &Encoder, episode: &Episode) -> Result<EpisodeEval> {
    let mut tape = Tape::new();
    let vars = encoder.register(&mut tape, false);
    let (loss, accuracy) = forward_episode(&mut tape, encoder, &vars, episode)?;
    Ok(EpisodeEval { loss: tape.item(loss), accuracy })
}

/// Forward the episode's support+query batch and evaluate the loss on a
/// caller-provided tape.
pub fn forward_episode(
    tape: &mut Tape,
    encoder: &Encoder,
    vars: &EncoderVars,
    episode: &Episode,
) -> Result<(Var, f64)> {
    let mut batch = episode.support_images.data().to_vec();
    batch.extend_from_slice(episode.query_images.data());
    let s = episode.support_images.shape();
    let total = episode.support_ids.len() + episode.query_ids.len();
    let images = tape.input(Tensor::new(vec![total, s[1], s[2], s[3]], batch)?);
    let out = encoder.forward(tape, vars, images)?;
    episode_loss_from_reprs(tape, out.representation, episode)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtonetConfig {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub lr: f64,
}

impl Default for ProtonetConfig {
    fn default() -> Self {
        ProtonetConfig { episodes: 2000, n_way: 5, k_shot: 1, n_query: 5, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeStat {
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Episodic training from scratch. Returns the trained encoder and the
/// per-episode log.
pub fn train_protonet(
    dataset: &Dataset,
    enc_cfg: &EncoderConfig,
    cfg: &ProtonetConfig,
    seed: u64,
) -> Result<(Encoder, Vec<EpisodeStat>)> {
    let mut encoder = build_encoder(enc_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6570697364); // episode stream
    let mut state = AdamState::for_params(encoder.params());
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut stats = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let episode = sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.n_query, &mut rng)?;
        let mut tape = Tape::new();
        let vars = encoder.register(&mut tape, true);
        let (loss, accuracy) = forward_episode(&mut tape, &encoder, &vars, &episode)
            .map_err(|e| Error::Training { episode: ep, reason: e.to_string() })?;
        let loss_val = tape.item(loss);
        if !loss_val.is_finite() {
            return Err(Error::Training { episode: ep, reason: "non-finite loss".into() });
        }
        tape.backward(loss).map_err(|e| Error::Training { episode: ep, reason: e.to_string() })?;
        let grads: Vec<Vec<f64>> = vars_grads(&tape, &vars);
        adam_step(encoder.params_mut(), &grads, &mut state, &adam)?;
        stats.push(EpisodeStat { episode: ep, loss: loss_val, accuracy });
    }
    Ok((encoder, stats))
}

fn vars_grads(tape: &Tape, vars: &EncoderVars) -> Vec<Vec<f64>> {
    vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
}

/// `episode,loss,accuracy` rows.
pub fn training_log_csv(stats: &[EpisodeStat]) -> String {
    let mut out = String::from("episode,loss,accuracy\n");
    for s in stats {
        out.push_str(&format!("{},{},{}\n", s.episode, s.loss, s.accuracy));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};

    #[test]
    fn one_shot_prototypes_are_support_embeddings() {
        let reprs = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.7).sin());
        let labels = [5usize, 9, 2];
        let protos = compute_prototypes(&reprs, &labels).unwrap();
        assert_eq!(protos.class_ids, vec![5, 9, 2]);
        assert_eq!(
            protos.prototypes.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            reprs.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn identical_supports_give_that_vector() {
        let row = [0.4f64, -1.0, 2.5];
        let mut data = row.to_vec();
        data.extend_from_slice(&row);
        let reprs = Tensor::new(vec![2, 3], data).unwrap();
        let protos = compute_prototypes(&reprs, &[1, 1]).unwrap();
        assert_eq!(protos.prototypes.data(), &row);
    }

    #[test]
    fn three_shot_matches_mean_oracle() {
        let reprs = Tensor::from_fn(vec![6, 2], |i| (i as f64 * 1.3).cos());
        let labels = [0usize, 0, 0, 1, 1, 1];
        let protos = compute_prototypes(&reprs, &labels).unwrap();
        for c in 0..2 {
            for j in 0..2 {
                let mean = (0..3).map(|k| reprs.data()[(c * 3 + k) * 2 + j]).sum::<f64>() / 3.0;
                let got = protos.prototypes.data()[c * 2 + j];
                assert!((got - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unbalanced_support_is_contract_error() {
        let reprs = Tensor::zeros(vec![3, 2]);
        assert!(matches!(
            compute_prototypes(&reprs, &[0, 0, 1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn query_at_prototype_wins() {
        let protos = PrototypeSet {
            prototypes: Tensor::new(vec![3, 2], vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0]).unwrap(),
            class_ids: vec![4, 5, 6],
        };
        let probs = classify_query(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), &protos).unwrap();
        assert!(probs[0] > 0.99);
    }

    #[test]
    fn equidistant_prototypes_uniform() {
        let protos = PrototypeSet {
            prototypes: Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            class_ids: vec![0, 1, 2],
        };
        let probs = classify_query(&Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap(), &protos).unwrap();
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distances_one_two_three_match_softmax_oracle() {
        let protos = PrototypeSet {
            prototypes: Tensor::new(vec![3, 1], vec![1.0, 2.0f64.sqrt(), 3.0f64.sqrt()]).unwrap(),
            class_ids: vec![0, 1, 2],
        };
        let probs = classify_query(&Tensor::new(vec![1], vec![0.0]).unwrap(), &protos).unwrap();
        // Direct softmax of (-1, -2, -3).
        let exps = [(-1.0f64).exp(), (-2.0f64).exp(), (-3.0f64).exp()];
        let total: f64 = exps.iter().sum();
        for (p, e) in probs.iter().zip(&exps) {
            assert!((p - e / total).abs() < 1e-12);
        }
        let s: f64 = probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classification_translation_invariant() {
        let q = Tensor::new(vec![2], vec![0.3, -0.4]).unwrap();
        let protos = PrototypeSet {
            prototypes: Tensor::new(vec![2, 2], vec![1.0, 0.0, -0.5, 2.0]).unwrap(),
            class_ids: vec![0, 1],
        };
        let base = classify_query(&q, &protos).unwrap();
        let shift = [13.5, -7.25];
        let q2 = Tensor::new(vec![2], vec![0.3 + shift[0], -0.4 + shift[1]]).unwrap();
        let shifted = PrototypeSet {
            prototypes: Tensor::new(
                vec![2, 2],
                vec![1.0 + shift[0], 0.0 + shift[1], -0.5 + shift[0], 2.0 + shift[1]],
            )
            .unwrap(),
            class_ids: vec![0, 1],
        };
        let moved = classify_query(&q2, &shifted).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn fake_episode(n_way: usize, k_shot: usize, n_query: usize) -> Episode {
        // Images are unused by episode_loss_from_reprs; keep them tiny.
        let img = |n: usize| Tensor::zeros(vec![n, 3, 4, 4]);
        let class_ids: Vec<usize> = (0..n_way).collect();
        let support_labels: Vec<usize> = class_ids.iter().flat_map(|&c| std::iter::repeat_n(c, k_shot)).collect();
        let query_labels: Vec<usize> = class_ids.iter().flat_map(|&c| std::iter::repeat_n(c, n_query)).collect();
        Episode {
            n_way,
            k_shot,
            n_query,
            class_ids,
            support_ids: (0..n_way * k_shot).collect(),
            query_ids: (0..n_way * n_query).map(|i| 100 + i).collect(),
            support_labels,
            query_labels,
            support_images: img(n_way * k_shot),
            query_images: img(n_way * n_query),
        }
    }

    #[test]
    fn perfect_separation_loss_near_zero() {
        let ep = fake_episode(3, 1, 1);
        let mut tape = Tape::new();
        // Queries sit exactly on their prototypes, 20 apart.
        let mut reprs = Vec::new();
        for c in 0..3 {
            reprs.extend([20.0 * c as f64, 0.0]);
        }
        for c in 0..3 {
            reprs.extend([20.0 * c as f64, 0.0]);
        }
        let r = tape.input(Tensor::new(vec![6, 2], reprs).unwrap());
        let (loss, acc) = episode_loss_from_reprs(&mut tape, r, &ep).unwrap();
        assert!(tape.item(loss) < 1e-9);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn constant_encoder_gives_log_nway() {
        let ep = fake_episode(5, 1, 2);
        let mut tape = Tape::new();
        let r = tape.input(Tensor::full(vec![15, 4], 0.33));
        let (loss, acc) = episode_loss_from_reprs(&mut tape, r, &ep).unwrap();
        assert!((tape.item(loss) - 5.0f64.ln()).abs() < 1e-12);
        // Ties resolve to the first class; exactly the class-0 queries win.
        assert!((acc - 0.2).abs() < 1e-12);
    }

    #[test]
    fn episode_loss_matches_composed_oracle() {
        // Chain compute_prototypes -> classify_query -> cross-entropy by
        // hand and compare against the tape path through a real encoder.
        let cfg = DatasetConfig { n_classes: 5, samples_per_class: 3, image_size: 16, noise_level: 0.2 };
        let ds = generate_dataset(&cfg, 17).unwrap();
        let enc_cfg = EncoderConfig {
            input_channels: 3,
            input_size: 16,
            stem_channels: 4,
            block_channels: vec![4, 8],
            tap_index: 0,
            repr_dim: 8,
        };
        let enc = build_encoder(&enc_cfg, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&ds, 5, 1, 2, &mut rng).unwrap();
        let eval = episode_loss(&enc, &ep).unwrap();

        let sup = enc.encoder_forward(&ep.support_images).unwrap().representation;
        let qry = enc.encoder_forward(&ep.query_images).unwrap().representation;
        let protos = compute_prototypes(&sup, &ep.support_labels).unwrap();
        let d = qry.shape()[1];
        let mut nll = 0.0;
        for (row, &label) in ep.query_labels.iter().enumerate() {
            let q = Tensor::new(vec![d], qry.data()[row * d..(row + 1) * d].to_vec()).unwrap();
            let probs = classify_query(&q, &protos).unwrap();
            let c = protos.class_ids.iter().position(|&id| id == label).unwrap();
            nll -= probs[c].ln();
        }
        nll /= ep.query_labels.len() as f64;
        assert!((eval.loss - nll).abs() < 1e-10, "{} vs {nll}", eval.loss);
    }

    #[test]
    fn short_training_runs_and_logs() {
        let cfg = DatasetConfig { n_classes: 5, samples_per_class: 4, image_size: 16, noise_level: 0.2 };
        let ds = generate_dataset(&cfg, 19).unwrap();
        let enc_cfg = EncoderConfig {
            input_channels: 3,
            input_size: 16,
            stem_channels: 4,
            block_channels: vec![4, 8],
            tap_index: 0,
            repr_dim: 8,
        };
        let train = ProtonetConfig { episodes: 12, n_way: 5, k_shot: 1, n_query: 1, lr: 1e-3 };
        let (enc, stats) = train_protonet(&ds, &enc_cfg, &train, 7).unwrap();
        assert_eq!(stats.len(), 12);
        assert!(stats.iter().all(|s| s.loss.is_finite()));
        assert!(enc.params().iter().all(|p| p.is_finite()));
        let csv = training_log_csv(&stats);
        assert!(csv.starts_with("episode,loss,accuracy\n"));
        assert_eq!(csv.lines().count(), 13);
    }
}
