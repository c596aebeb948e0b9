// temporary probe: pair-pretrained teacher, all arms
use std::path::Path;
use std::time::Instant;
use xlkd::checkpoint::*;
use xlkd::config::RunConfig;
use xlkd::data::generate_bundle;
use xlkd::eval::*;
use xlkd::train::*;

fn main() {
    let cfg = RunConfig::default();
    let bundle = generate_bundle(&cfg.data_params()).unwrap();
    let corpus = MultilingualCorpus::new(bundle.corpora.clone(), bundle.seq_len).unwrap();

    let cache = Path::new("/tmp/probe_teacher");
    let teacher = if let Ok(Some(stem)) = latest_stem(cache) {
        load_checkpoint(cache, &stem).unwrap().model
    } else {
        let t0 = Instant::now();
        let out = run_mlm(&cfg.teacher_model_config(), &corpus, &cfg.mlm_job(), None, &mut NullObserver).unwrap();
        println!("teacher in {:?}, final loss {:.4}", t0.elapsed(), out.logs.last().unwrap().loss);
        save_checkpoint(cache, &step_stem(3000), &out.model, 3000, None).unwrap();
        load_checkpoint(cache, &step_stem(3000)).unwrap().model
    };

    let ctx = ExperimentContext { cfg: &cfg, teacher: &teacher, corpus: &corpus, bundle: &bundle };
    for seed in [1u64, 2] {
        for arm in [ExperimentArm::Teacher, ExperimentArm::Light, ExperimentArm::Drop, ExperimentArm::Uniform, ExperimentArm::RandomInit, ExperimentArm::NoFreeze] {
            let t0 = Instant::now();
            let out = run_arm(arm, seed, &ctx, None).unwrap();
            let r = &out.report;
            println!("s{seed} {:<12} en {:.3} xl {:.3} ({:.0?})", arm.name(), r.per_language[0].1, r.cross_lingual_avg, t0.elapsed());
        }
    }
}
