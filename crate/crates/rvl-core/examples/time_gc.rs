use rvl_core::toymodel::{train_run, TrainConfig, TrainResources};

fn main() {
    let res = TrainResources::bundled();
    let no_rlm = TrainConfig { disable_rlm: true, ..TrainConfig::default() };
    let out = train_run(&no_rlm, &res, &mut std::io::sink()).unwrap();
    println!(
        "no-rlm: r1 {:.3}/{:.3} rlm_acc {:.3} chance {:.3}",
        out.retrieval.r1_i2t, out.retrieval.r1_t2i, out.rlm.accuracy, out.rlm.chance
    );
    let rand_word = TrainConfig { hsr_random_word: true, ..TrainConfig::default() };
    let out = train_run(&rand_word, &res, &mut std::io::sink()).unwrap();
    println!(
        "random-word: r1 {:.3}/{:.3} rlm_acc {:.3}",
        out.retrieval.r1_i2t, out.retrieval.r1_t2i, out.rlm.accuracy
    );
}
