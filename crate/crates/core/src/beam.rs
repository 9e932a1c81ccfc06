//! Inference: length-synchronous beam search over the decoder, then
//! reconstruction rescoring of the finished hypotheses.

use alloc::string::String;
use alloc::vec::Vec;

use crate::decoder::{DecoderParams, StepState};
use crate::encoder::EncodedImage;
use crate::error::{Error, Result};
use crate::model::CaptionModel;
use crate::reconstructor::ReconstructorParams;
use crate::tape::log_softmax;
use crate::vocab::{TokenSequence, Vocabulary, BOS, EOS};

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// BOS-prefixed token ids.
    pub ids: Vec<usize>,
    /// Exact sum of per-step log-softmax scores.
    pub log_lik: f64,
    pub state: StepState,
    /// Hidden state after each word step; parallel to ids[1..].
    pub trace: Vec<Vec<f64>>,
    pub finished: bool,
}

/// Expands every live hypothesis over the full vocabulary each step and
/// keeps the top `beam_width` by total log-likelihood; finished hypotheses
/// are frozen but keep competing in the beam. `max_len` counts generated
/// tokens (EOS included, BOS not); hypotheses that reach it without EOS
/// are force-terminated. Exact ties order lexicographically by ids.
pub fn beam_search(
    decoder: &DecoderParams,
    enc: &EncodedImage,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>> {
    if beam_width < 1 {
        return Err(Error::invalid("beam_search: beam_width must be >= 1"));
    }
    if max_len < 2 {
        return Err(Error::invalid("beam_search: max_len must be >= 2"));
    }
    let vocab = decoder.dims.vocab;
    let mut beam = alloc::vec![BeamHypothesis {
        ids: alloc::vec![BOS],
        log_lik: 0.0,
        state: decoder.warm_start(enc)?,
        trace: Vec::new(),
        finished: false,
    }];

    for _ in 0..max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<BeamHypothesis> = Vec::with_capacity(beam.len() * vocab);
        for hyp in beam {
            if hyp.finished {
                candidates.push(hyp);
                continue;
            }
            let x = decoder.embedding_row(*hyp.ids.last().unwrap());
            let state = decoder.gru_step(x, &hyp.state)?;
            let scores = log_softmax(&decoder.step_logits(&state.h)?);
            for (tok, &ls) in scores.iter().enumerate() {
                let mut ids = hyp.ids.clone();
                ids.push(tok);
                let mut trace = hyp.trace.clone();
                trace.push(state.h.clone());
                let generated = ids.len() - 1;
                candidates.push(BeamHypothesis {
                    ids,
                    log_lik: hyp.log_lik + ls,
                    state: state.clone(),
                    trace,
                    finished: tok == EOS || generated == max_len,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_lik
                .total_cmp(&a.log_lik)
                .then_with(|| a.ids.cmp(&b.ids))
        });
        candidates.truncate(beam_width);
        beam = candidates;
    }

    debug_assert!(beam.iter().all(|h| h.finished));
    Ok(beam)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCaption {
    pub ids: Vec<usize>,
    pub log_lik: f64,
    pub recon_score: f64,
    /// log_lik + λ_test · recon_score.
    pub combined: f64,
    /// 0-based position after sorting.
    pub rank: usize,
}

/// Scores each hypothesis's reconstruction against `targets` and sorts by
/// combined score desc; ties go to higher log-likelihood, then
/// lexicographic ids.
pub fn rescore_candidates(
    rec: &ReconstructorParams,
    hyps: &[BeamHypothesis],
    lambda_test: f64,
    targets: &[Vec<f64>],
) -> Result<Vec<RankedCaption>> {
    if hyps.is_empty() {
        return Err(Error::invalid("rescore_candidates: no hypotheses"));
    }
    let mut out = Vec::with_capacity(hyps.len());
    for h in hyps {
        let r = rec.reconstruct(&h.trace, targets)?.score;
        out.push(RankedCaption {
            ids: h.ids.clone(),
            log_lik: h.log_lik,
            recon_score: r,
            combined: h.log_lik + lambda_test * r,
            rank: 0,
        });
    }
    out.sort_by(|a, b| {
        b.combined
            .total_cmp(&a.combined)
            .then_with(|| b.log_lik.total_cmp(&a.log_lik))
            .then_with(|| a.ids.cmp(&b.ids))
    });
    for (i, c) in out.iter_mut().enumerate() {
        c.rank = i;
    }
    Ok(out)
}

/// Full pipeline for one image: encode, beam-search, rescore against the
/// image's own feature, decode the winner to text.
pub fn caption_image(
    model: &CaptionModel,
    vocab: &Vocabulary,
    image: &[f64],
    beam_width: usize,
    max_len: usize,
    lambda_test: f64,
) -> Result<(String, Vec<RankedCaption>)> {
    let enc = model.encoder.encode(image)?;
    let hyps = beam_search(&model.decoder, &enc, beam_width, max_len)?;
    let targets = alloc::vec![enc.f];
    let ranked = rescore_candidates(&model.reconstructor, &hyps, lambda_test, &targets)?;
    let text = vocab.decode(&TokenSequence {
        ids: ranked[0].ids.clone(),
    });
    Ok((text, ranked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderDims;
    use crate::model::ModelConfig;
    use crate::reconstructor::PoolTag;
    use crate::tape::log_softmax_pick;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_decoder(vocab: usize, seed: u64) -> DecoderParams {
        let dims = DecoderDims {
            vocab,
            d_e: 4,
            d_h: 5,
            d_v: 3,
            d_a: 2,
        };
        DecoderParams::init(dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn tiny_enc(seed: u64) -> EncodedImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        EncodedImage {
            f: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            a: (0..2).map(|_| rng.random_range(0.05..0.95)).collect(),
        }
    }

    #[test]
    fn certain_model_emits_one_caption_with_zero_log_lik() {
        let mut dec = tiny_decoder(6, 1);
        dec.visit_mut(&mut |_, t| t.data_mut().fill(0.0));
        // logits = E·(v·h + b); with v = 0 they reduce to E·b, constant
        // over steps — rig them to put all mass on EOS
        dec.out_b.data_mut()[0] = 1.0;
        for e in 0..4 {
            dec.embed.data_mut()[EOS * 4 + e] = if e == 0 { 2000.0 } else { 0.0 };
        }
        let hyps = beam_search(&dec, &tiny_enc(1), 3, 8).unwrap();
        assert_eq!(hyps[0].ids, vec![BOS, EOS]);
        assert_eq!(hyps[0].log_lik, 0.0);
        assert!(hyps[0].finished);
    }

    #[test]
    fn width_one_is_greedy_argmax_decoding() {
        let dec = tiny_decoder(7, 2);
        let enc = tiny_enc(2);
        let max_len = 6;
        let beam = beam_search(&dec, &enc, 1, max_len).unwrap();
        assert_eq!(beam.len(), 1);

        // independent greedy loop
        let mut state = dec.warm_start(&enc).unwrap();
        let mut ids = vec![BOS];
        let mut ll = 0.0;
        loop {
            let x = dec.embedding_row(*ids.last().unwrap());
            state = dec.gru_step(x, &state).unwrap();
            let scores = log_softmax(&dec.step_logits(&state.h).unwrap());
            let (best, best_ls) = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            ids.push(best);
            ll += best_ls;
            if best == EOS || ids.len() - 1 == max_len {
                break;
            }
        }
        assert_eq!(beam[0].ids, ids);
        assert!((beam[0].log_lik - ll).abs() < 1e-12);
    }

    #[test]
    fn full_width_beam_equals_exhaustive_enumeration() {
        let dec = tiny_decoder(5, 3);
        let enc = tiny_enc(3);
        let max_len = 4;
        let beam = beam_search(&dec, &enc, 5usize.pow(4), max_len).unwrap();

        // enumerate every terminated sequence and score it independently
        // with a scalar step loop
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut count = 0usize;
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(gen) = stack.pop() {
            let terminated =
                gen.last() == Some(&EOS) || gen.len() == max_len;
            if terminated {
                count += 1;
                let mut state = dec.warm_start(&enc).unwrap();
                let mut prev = BOS;
                let mut ll = 0.0;
                for &tok in &gen {
                    state = dec.gru_step(dec.embedding_row(prev), &state).unwrap();
                    ll += log_softmax_pick(&dec.step_logits(&state.h).unwrap(), tok);
                    prev = tok;
                }
                let mut ids = vec![BOS];
                ids.extend_from_slice(&gen);
                let better = match &best {
                    None => true,
                    Some((bll, bids)) => {
                        ll > *bll || (ll == *bll && ids < *bids)
                    }
                };
                if better {
                    best = Some((ll, ids));
                }
                continue;
            }
            for tok in 0..5 {
                let mut next = gen.clone();
                next.push(tok);
                stack.push(next);
            }
        }
        // 1 + 4 + 16 sequences ending in EOS plus 4^3·5 of full length
        assert_eq!(count, 341);
        assert_eq!(beam.len(), count);
        let (want_ll, want_ids) = best.unwrap();
        assert_eq!(beam[0].ids, want_ids);
        assert!((beam[0].log_lik - want_ll).abs() < 1e-10);
    }

    #[test]
    fn returned_likelihoods_match_teacher_forced_scoring() {
        let dec = tiny_decoder(9, 4);
        let enc = tiny_enc(4);
        let hyps = beam_search(&dec, &enc, 4, 7).unwrap();
        let mut checked = 0;
        for h in &hyps {
            assert!(h.finished);
            assert_eq!(h.trace.len(), h.ids.len() - 1);
            assert_eq!(h.state.h, *h.trace.last().unwrap());
            if *h.ids.last().unwrap() == EOS {
                let (ll, trace) = dec.decode_teacher_forced(&enc, &h.ids).unwrap();
                assert!((ll - h.log_lik).abs() < 1e-10);
                assert_eq!(trace, h.trace);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn beam_is_sorted_and_within_width() {
        let dec = tiny_decoder(8, 5);
        let hyps = beam_search(&dec, &tiny_enc(5), 3, 6).unwrap();
        assert!(hyps.len() <= 3 && !hyps.is_empty());
        for w in hyps.windows(2) {
            assert!(w[0].log_lik >= w[1].log_lik);
        }
        for h in &hyps {
            assert!(*h.ids.last().unwrap() == EOS || h.ids.len() - 1 == 6);
        }
    }

    #[test]
    fn degenerate_weight_preserves_likelihood_order() {
        let dec = tiny_decoder(8, 6);
        let enc = tiny_enc(6);
        let rec =
            ReconstructorParams::init(PoolTag::Mean, 5, 3, &mut ChaCha8Rng::seed_from_u64(6))
                .unwrap();
        let hyps = beam_search(&dec, &enc, 4, 6).unwrap();
        let ranked = rescore_candidates(&rec, &hyps, 0.0, &[enc.f.clone()]).unwrap();
        assert_eq!(ranked.len(), hyps.len());
        for (i, (r, h)) in ranked.iter().zip(&hyps).enumerate() {
            assert_eq!(r.ids, h.ids);
            assert_eq!(r.combined, r.log_lik);
            assert_eq!(r.rank, i);
        }
    }

    #[test]
    fn equal_likelihood_candidates_rank_by_reconstruction() {
        // identity reconstructor with last-pooling: R is decided by the
        // final hidden state alone
        let mut rec =
            ReconstructorParams::init(PoolTag::Last, 3, 3, &mut ChaCha8Rng::seed_from_u64(7))
                .unwrap();
        rec.w.data_mut().fill(0.0);
        for i in 0..3 {
            rec.w.data_mut()[i * 3 + i] = 1.0;
        }
        rec.b.data_mut().fill(0.0);
        let target = vec![1.0, 0.0, 0.0];
        let mk = |ids: Vec<usize>, last: Vec<f64>| BeamHypothesis {
            ids,
            log_lik: -2.0,
            state: StepState {
                h: last.clone(),
                c: vec![],
            },
            trace: vec![vec![0.0; 3], last],
            finished: true,
        };
        let hyps = vec![
            mk(vec![BOS, 4, EOS], vec![0.0, 0.0, 0.0]), // R = -1/3
            mk(vec![BOS, 5, EOS], vec![1.0, 0.0, 0.0]), // R = 0 (best)
            mk(vec![BOS, 6, EOS], vec![3.0, 0.0, 0.0]), // R = -4/3
        ];
        let ranked = rescore_candidates(&rec, &hyps, 1.0, &[target]).unwrap();
        let order: Vec<usize> = ranked.iter().map(|r| r.ids[1]).collect();
        assert_eq!(order, vec![5, 4, 6]);
        assert_eq!(ranked[0].recon_score, 0.0);
        for r in &ranked {
            assert!((r.combined - (r.log_lik + r.recon_score)).abs() < 1e-15);
        }
    }

    #[test]
    fn growing_test_weight_weakly_promotes_the_best_reconstruction() {
        let dec = tiny_decoder(8, 8);
        let enc = tiny_enc(8);
        let rec =
            ReconstructorParams::init(PoolTag::Mean, 5, 3, &mut ChaCha8Rng::seed_from_u64(8))
                .unwrap();
        let hyps = beam_search(&dec, &enc, 5, 6).unwrap();
        let targets = [enc.f.clone()];
        let base = rescore_candidates(&rec, &hyps, 0.0, &targets).unwrap();
        let best_r_ids = base
            .iter()
            .max_by(|a, b| a.recon_score.total_cmp(&b.recon_score))
            .unwrap()
            .ids
            .clone();
        let mut last_rank = usize::MAX;
        for lambda in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let ranked = rescore_candidates(&rec, &hyps, lambda, &targets).unwrap();
            let rank = ranked.iter().position(|r| r.ids == best_r_ids).unwrap();
            assert!(rank <= last_rank, "λ={lambda}: rank {rank} > {last_rank}");
            last_rank = rank;
        }
    }

    #[test]
    fn empty_hypothesis_list_is_rejected() {
        let rec =
            ReconstructorParams::init(PoolTag::Mean, 5, 3, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap();
        assert!(rescore_candidates(&rec, &[], 1.0, &[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn caption_pipeline_is_deterministic() {
        use crate::encoder::EncoderDims;
        let cfg = ModelConfig {
            encoder: EncoderDims {
                grid: 8,
                c1: 2,
                c2: 3,
                d_v: 4,
                d_a: 3,
            },
            vocab: 10,
            d_e: 4,
            d_h: 5,
            pooling: PoolTag::Mean,
        };
        let model = CaptionModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let vocab = Vocabulary::build(
            &[
                alloc::string::String::from("a red square"),
                alloc::string::String::from("a blue circle above"),
            ],
            1,
            10,
        )
        .unwrap();
        let image = vec![0.5; 8 * 8 * 3];
        let (text_a, ranked_a) =
            caption_image(&model, &vocab, &image, 3, 8, 1.0).unwrap();
        let (text_b, ranked_b) =
            caption_image(&model, &vocab, &image, 3, 8, 1.0).unwrap();
        assert_eq!(text_a, text_b);
        assert_eq!(ranked_a.len(), ranked_b.len());
        for (a, b) in ranked_a.iter().zip(&ranked_b) {
            assert_eq!(a, b);
        }
        assert_eq!(ranked_a[0].rank, 0);
    }

    #[test]
    fn invalid_widths_are_rejected() {
        let dec = tiny_decoder(6, 11);
        assert!(beam_search(&dec, &tiny_enc(11), 0, 4).is_err());
        assert!(beam_search(&dec, &tiny_enc(11), 2, 1).is_err());
    }
}
