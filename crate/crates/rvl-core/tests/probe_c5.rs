//! Scratch probe: watch toy training converge. Not part of CI.

use std::collections::BTreeMap;
use std::time::Instant;

use rvl_core::tokenizer::tokenize;
use rvl_core::toymodel::{
    generate_toy_corpus, train_run, ToyEncoders, ToyScene, TrainConfig, TrainResources,
};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stage-1-only recall@{1,5,10} both directions over `scenes`.
fn stage1_recall(enc: &ToyEncoders, scenes: &[ToyScene], res: &TrainResources) -> [f64; 6] {
    let pairs: Vec<_> = scenes
        .iter()
        .map(|s| {
            let seq = tokenize(&s.caption, &res.vocab, enc.config.max_len).unwrap();
            enc.encode_pair(s, &seq).unwrap()
        })
        .collect();
    let m = scenes.len();
    let mut hits = [0usize; 6];
    for q in 0..m {
        for (dir, base) in [(0usize, 0usize), (1, 3)] {
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    if dir == 0 {
                        dot(pairs[q].img_cls_proj.data(), pairs[j].txt_cls_proj.data())
                    } else {
                        dot(pairs[q].txt_cls_proj.data(), pairs[j].img_cls_proj.data())
                    }
                })
                .collect();
            let rank = (0..m)
                .filter(|&j| {
                    scores[j] > scores[q] || (scores[j] == scores[q] && j < q)
                })
                .count();
            for (c, cut) in [1usize, 5, 10].into_iter().enumerate() {
                if rank < cut {
                    hits[base + c] += 1;
                }
            }
        }
    }
    hits.map(|h| h as f64 / m as f64)
}

/// ritm head forward per cross-state row, logit diffs averaged over rows.
fn match_logit_diff(enc: &ToyEncoders, cross: &rvl_core::tensor::Tensor) -> f64 {
    let d = enc.config.d;
    let ff = enc.config.ff;
    let w1 = enc.params.get("ritm_w");
    let b1 = enc.params.get("ritm_b");
    let w2 = enc.params.get("ritm_o_w");
    let b2 = enc.params.get("ritm_o_b");
    let mut acc = 0.0;
    for r in 0..cross.rows() {
        let x = cross.row(r);
        let mut h = vec![0.0; ff];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = b1.data()[j];
            for i in 0..d {
                s += x[i] * w1.row(i)[j];
            }
            *hj = s.tanh();
        }
        let mut logits = [b2.data()[0], b2.data()[1]];
        for (i, hi) in h.iter().enumerate() {
            logits[0] += hi * w2.row(i)[0];
            logits[1] += hi * w2.row(i)[1];
        }
        acc += logits[1] - logits[0];
    }
    acc / cross.rows() as f64
}

#[test]
#[ignore]
fn probe_default_run() {
    let cfg = TrainConfig {
        eval_every: 4,
        epochs: 50,
        lr: 0.01,
        d: 40,
        ff: 96,
        proj: 28,
        queue_capacity: 128,
        stage_noisy_frac: 0.8,
        ..TrainConfig::default()
    };
    let res = TrainResources::bundled();
    let t0 = Instant::now();
    let out = train_run(&cfg, &res, &mut std::io::sink()).unwrap();
    let dt = t0.elapsed();

    // epoch means per component
    let mut sums: BTreeMap<usize, (f64, f64, f64, f64, f64, f64, usize)> = BTreeMap::new();
    for r in out.timeline.iter().filter(|r| r.total.is_some()) {
        let e = sums.entry(r.epoch).or_default();
        e.0 += r.itc.unwrap_or(0.0);
        e.1 += r.ritc.unwrap_or(0.0);
        e.2 += r.ritm.unwrap_or(0.0);
        e.3 += r.mlm.unwrap_or(0.0);
        e.4 += r.rlm.unwrap_or(0.0);
        e.5 += r.total.unwrap_or(0.0);
        e.6 += 1;
    }
    println!("epoch    itc    ritc    ritm     mlm     rlm   total");
    for (ep, (itc, ritc, ritm, mlm, rlm, total, n)) in &sums {
        let n = *n as f64;
        println!(
            "{ep:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            itc / n,
            ritc / n,
            ritm / n,
            mlm / n,
            rlm / n,
            total / n
        );
    }
    let first = sums.values().next().unwrap();
    let last = sums.values().last().unwrap();
    let ratio = |a: f64, b: f64, n1: usize, n2: usize| (b / n2 as f64) / (a / n1 as f64);
    println!(
        "last/first: itc {:.3} ritc {:.3} ritm {:.3} mlm {:.3} rlm {:.3} total {:.3}",
        ratio(first.0, last.0, first.6, last.6),
        ratio(first.1, last.1, first.6, last.6),
        ratio(first.2, last.2, first.6, last.6),
        ratio(first.3, last.3, first.6, last.6),
        ratio(first.4, last.4, first.6, last.6),
        ratio(first.5, last.5, first.6, last.6),
    );
    for r in out.timeline.iter().filter(|r| r.r1_i2t.is_some()) {
        println!(
            "eval epoch {:>3}: r1_i2t {:.3} r1_t2i {:.3} rlm_acc {:.3}",
            r.epoch,
            r.r1_i2t.unwrap(),
            r.r1_t2i.unwrap(),
            r.rlm_acc.unwrap()
        );
    }
    println!(
        "final: r1_i2t {:.3} r5 {:.3} r10 {:.3} | r1_t2i {:.3} | rlm acc {:.3} (chance {:.3}, n {})",
        out.retrieval.r1_i2t,
        out.retrieval.r5_i2t,
        out.retrieval.r10_i2t,
        out.retrieval.r1_t2i,
        out.rlm.accuracy,
        out.rlm.chance,
        out.rlm.total
    );

    // diagnostics: temperature, stage-1-only recall on eval and a train slice
    let corpus = generate_toy_corpus(cfg.seed, cfg.n_train, cfg.n_eval, cfg.noise_rate);
    let tau = out.encoders.params.get("log_temp").item().exp();
    println!("final temperature: {tau:.4}");
    let s1e = stage1_recall(&out.encoders, &corpus.eval, &res);
    println!(
        "stage1 eval : i2t r1 {:.3} r5 {:.3} r10 {:.3} | t2i r1 {:.3} r5 {:.3} r10 {:.3}",
        s1e[0], s1e[1], s1e[2], s1e[3], s1e[4], s1e[5]
    );
    let s1t = stage1_recall(&out.encoders, &corpus.train[..200], &res);
    println!(
        "stage1 train: i2t r1 {:.3} r5 {:.3} r10 {:.3} | t2i r1 {:.3} r5 {:.3} r10 {:.3}",
        s1t[0], s1t[1], s1t[2], s1t[3], s1t[4], s1t[5]
    );

    // match-head separation: true pair vs shifted pair vs rewritten pair
    let enc = &out.encoders;
    let (mut pos, mut neg, mut rew) = (Vec::new(), Vec::new(), Vec::new());
    for (i, scene) in corpus.eval.iter().enumerate() {
        let seq = tokenize(&scene.caption, &res.vocab, enc.config.max_len).unwrap();
        let p = enc.encode_pair(scene, &seq).unwrap();
        pos.push(match_logit_diff(enc, &p.cross_states));
        let other = &corpus.eval[(i + 7) % corpus.eval.len()];
        let n = enc.encode_pair(other, &seq).unwrap();
        neg.push(match_logit_diff(enc, &n.cross_states));
        if let Ok(rw) = rvl_core::rewriter::rewrite_sentence(
            &scene.caption,
            &res.graph,
            &res.quantifiers,
            &res.function_words,
            1234 + i as u64,
        ) {
            let rseq = tokenize(&rw.rewritten, &res.vocab, enc.config.max_len).unwrap();
            let r = enc.encode_pair(scene, &rseq).unwrap();
            rew.push(match_logit_diff(enc, &r.cross_states));
        }
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        (m, sd)
    };
    let (pm, psd) = stats(&pos);
    let (nm, nsd) = stats(&neg);
    let (rm, rsd) = stats(&rew);
    println!("match logit diff: pos {pm:+.4} ({psd:.4}) | neg {nm:+.4} ({nsd:.4}) | rew {rm:+.4} ({rsd:.4})");

    // image sensitivity of the cross states: same caption, two images
    let mut sens = Vec::new();
    for (i, scene) in corpus.eval.iter().take(50).enumerate() {
        let seq = tokenize(&scene.caption, &res.vocab, enc.config.max_len).unwrap();
        let a = enc.encode_pair(scene, &seq).unwrap();
        let other = &corpus.eval[(i + 31) % corpus.eval.len()];
        let b = enc.encode_pair(other, &seq).unwrap();
        for r in 0..a.cross_states.rows() {
            let ra = a.cross_states.row(r);
            let rb = b.cross_states.row(r);
            let dn: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let nn: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            sens.push(dn / nn);
        }
    }
    let (sm, ssd) = stats(&sens);
    println!("cross-state image sensitivity (rel): {sm:.4} ({ssd:.4})");

    // attention sharpness: per text position, |w0 - 0.5| under 2 image keys,
    // scores being head-projected cosines at fixed sharpness 10
    let d = enc.config.d;
    let proj_dim = enc.config.proj;
    let mut sharp = Vec::new();
    for scene in corpus.eval.iter().take(50) {
        let seq = tokenize(&scene.caption, &res.vocab, enc.config.max_len).unwrap();
        let p = enc.encode_pair(scene, &seq).unwrap();
        let head = |row: &[f64], w: &rvl_core::tensor::Tensor, b: &rvl_core::tensor::Tensor| {
            let mut y: Vec<f64> = (0..proj_dim)
                .map(|j| b.data()[j] + (0..d).map(|i| row[i] * w.row(i)[j]).sum::<f64>())
                .collect();
            let n = y.iter().map(|x| x * x).sum::<f64>().sqrt();
            y.iter_mut().for_each(|x| *x /= n);
            y
        };
        let (wv, bv) = (enc.params.get("head_v_w"), enc.params.get("head_v_b"));
        let (ww, bw) = (enc.params.get("head_w_w"), enc.params.get("head_w_b"));
        let k0 = head(p.img_token_states.row(0), wv, bv);
        let k1 = head(p.img_token_states.row(1), wv, bv);
        for r in 0..p.txt_token_states.rows() {
            let q = head(p.txt_token_states.row(r), ww, bw);
            let s0: f64 = q.iter().zip(&k0).map(|(a, b)| a * b).sum::<f64>() * 10.0;
            let s1: f64 = q.iter().zip(&k1).map(|(a, b)| a * b).sum::<f64>() * 10.0;
            let w0 = 1.0 / (1.0 + (s1 - s0).exp());
            sharp.push((w0 - 0.5).abs());
        }
    }
    let (am, asd) = stats(&sharp);
    println!("attention sharpness |w0-0.5|: {am:.4} ({asd:.4})");

    // hinge autopsy: min token sim of true vs rewritten caption, argmin words
    let mut margins = Vec::new();
    let mut viol_true: BTreeMap<String, usize> = BTreeMap::new();
    let mut viol_rew: BTreeMap<String, usize> = BTreeMap::new();
    let (ww, bw) = (enc.params.get("head_w_w"), enc.params.get("head_w_b"));
    let head = |row: &[f64]| {
        let mut y: Vec<f64> = (0..proj_dim)
            .map(|j| bw.data()[j] + (0..d).map(|i| row[i] * ww.row(i)[j]).sum::<f64>())
            .collect();
        let n = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        y.iter_mut().for_each(|x| *x /= n);
        y
    };
    for (i, scene) in corpus.eval.iter().enumerate() {
        let Ok(rw) = rvl_core::rewriter::rewrite_sentence(
            &scene.caption,
            &res.graph,
            &res.quantifiers,
            &res.function_words,
            909 + i as u64,
        ) else {
            continue;
        };
        let min_sim = |caption: &str, other: &ToyScene| -> (f64, String) {
            let seq = tokenize(caption, &res.vocab, enc.config.max_len).unwrap();
            let p = enc.encode_pair(other, &seq).unwrap();
            let words: Vec<&str> = caption.split_whitespace().collect();
            let mut best = (f64::INFINITY, String::new());
            for (w, word) in words.iter().enumerate() {
                let q = head(p.txt_token_states.row(w + 1));
                let s = dot(&q, p.img_cls_proj.data());
                if s < best.0 {
                    best = (s, word.to_string());
                }
            }
            best
        };
        let (mg, wg) = min_sim(&scene.caption, scene);
        let (mh, wh) = min_sim(&rw.rewritten, scene);
        margins.push(mg - mh);
        if mg - mh < 0.2 {
            *viol_true.entry(wg).or_default() += 1;
            *viol_rew.entry(wh).or_default() += 1;
        }
    }
    margins.sort_by(f64::total_cmp);
    let q = |f: f64| margins[((margins.len() - 1) as f64 * f) as usize];
    let viol = margins.iter().filter(|&&m| m < 0.2).count();
    println!(
        "ritc margin min(g)-min(gh): p10 {:+.3} p50 {:+.3} p90 {:+.3} | violations {}/{}",
        q(0.1),
        q(0.5),
        q(0.9),
        viol,
        margins.len()
    );
    let top = |m: &BTreeMap<String, usize>| -> Vec<String> {
        let mut v: Vec<_> = m.iter().collect();
        v.sort_by_key(|(_, c)| std::cmp::Reverse(**c));
        v.into_iter().take(6).map(|(w, c)| format!("{w}:{c}")).collect()
    };
    println!("  argmin(true) in violations: {}", top(&viol_true).join(" "));
    println!("  argmin(rew)  in violations: {}", top(&viol_rew).join(" "));

    // rerank error anatomy: what outranks the true caption for failed queries
    let pairs: Vec<_> = corpus
        .eval
        .iter()
        .map(|s| {
            let seq = tokenize(&s.caption, &res.vocab, enc.config.max_len).unwrap();
            (enc.encode_pair(s, &seq).unwrap(), seq)
        })
        .collect();
    let m = corpus.eval.len();
    let mut shown = 0;
    for qi in 0..m {
        if shown >= 12 {
            break;
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            dot(pairs[qi].0.img_cls_proj.data(), pairs[b].0.txt_cls_proj.data())
                .total_cmp(&dot(pairs[qi].0.img_cls_proj.data(), pairs[a].0.txt_cls_proj.data()))
        });
        let short = &order[..16];
        let score = |j: usize| {
            let p = enc.encode_pair(&corpus.eval[qi], &pairs[j].1).unwrap();
            let words = corpus.eval[j].caption.split_whitespace().count();
            // sum over word rows only, mirroring the eval scorer
            (1..=words)
                .map(|r| {
                    let one = p.cross_states.row(r).to_vec();
                    let t = rvl_core::tensor::Tensor::matrix(1, enc.config.d, one);
                    match_logit_diff(enc, &t)
                })
                .sum::<f64>()
        };
        let best = short.iter().copied().max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        if best != qi {
            println!("  i2t miss: true [{}] got [{}]", corpus.eval[qi].caption, corpus.eval[best].caption);
            shown += 1;
        }
    }
    println!("wall time: {dt:?}");
}
