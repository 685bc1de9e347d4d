// scratch: full-loop retest after decoder fix (deleted before finishing)
use elue::agent::*;
use elue::embed::*;
use elue::envsim::*;
use elue::replay::TaskBuffer;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn eval_return(agent: &AgentNets, embed: &EmbedNets, tasks: &[TaskSpec], episodes: usize) -> Vec<f64> {
    let mut per_ep = vec![0.0; episodes];
    let mut dummy = StdRng::seed_from_u64(0);
    for task in tasks {
        let mut belief = embed.prior();
        for ep in 0..episodes {
            let mut st = reset(task);
            let mut ret = 0.0;
            loop {
                let s = agent.act(&st.position, &belief.features(), ActMode::Mean, &mut dummy).unwrap();
                let a = [s.action[0], s.action[1]];
                let (r, next, done) = step(task, &st, a).unwrap();
                belief = embed.belief_update(&belief, &Transition { state: st.position, action: a, reward: r, next_state: next.position }).unwrap();
                ret += r;
                st = next;
                if done { break; }
            }
            per_ep[ep] += ret / tasks.len() as f64;
        }
    }
    per_ep
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gamma: f64 = args[1].parse().unwrap();
    let beta: f64 = args[2].parse().unwrap();
    let pretrain: usize = args[3].parse().unwrap();
    let iters: usize = args[4].parse().unwrap();
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(11);

    let mut init = StdRng::seed_from_u64(seed);
    let mut embed = EmbedNets::new(EmbedConfig::default(), &mut init);
    let mut agent = AgentNets::new(AgentConfig::default(), &mut init);
    let tasks = sample_tasks(TaskFamily::RadialGoal, 16, 5).unwrap();
    let eval_tasks = sample_tasks(TaskFamily::RadialGoal, 8, 77).unwrap();
    let mut buffers: Vec<TaskBuffer> = tasks.iter().map(|t| TaskBuffer::with_default_capacity(t.task_id)).collect();
    let mut crng = StdRng::seed_from_u64(seed + 1000);
    let mut trng = StdRng::seed_from_u64(seed + 2000);
    let lr_rl: f64 = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let meta_batch: usize = std::env::args().nth(7).and_then(|s| s.parse().ok()).unwrap_or(4);
    let lr_embed: f64 = std::env::args().nth(8).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let hyper = Hyperparams { gamma, beta, lr_actor: lr_rl, lr_q: lr_rl, lr_v: lr_rl, lr_embed, meta_batch, ..Hyperparams::default() };
    let opts = TrainStepOpts { update_embedding: lr_embed > 0.0, prior_belief_only: false };

    let collect = |agent: &AgentNets, embed: &EmbedNets, buffers: &mut Vec<TaskBuffer>, crng: &mut StdRng, steps: usize, idxs: &[usize]| {
        for &i in idxs {
            let task = &tasks[i];
            let mut belief = embed.prior();
            let mut st = reset(task);
            for _ in 0..steps {
                let s = agent.act(&st.position, &belief.features(), ActMode::Sample, crng).unwrap();
                let a = [s.action[0], s.action[1]];
                let (r, next, done) = step(task, &st, a).unwrap();
                let t = Transition { state: st.position, action: a, reward: r, next_state: next.position };
                buffers[i].add(t);
                belief = embed.belief_update(&belief, &t).unwrap();
                st = if done { reset(task) } else { next };
            }
        }
    };
    let all: Vec<usize> = (0..16).collect();
    collect(&agent, &embed, &mut buffers, &mut crng, 64, &all);
    let po = PretrainOpts { steps: pretrain, tasks_per_step: 4, k_min: 4, k_max: 64, targets_per_context: 16, lr: 3e-4 };
    pretrain_embedding(&mut embed, &buffers, &po, &mut trng).unwrap();
    print!("g{gamma} b{beta} pre{pretrain} s{seed}:");
    for iter in 0..iters {
        let picked = elue::embed::sample_indices(16, 8, &mut crng);
        collect(&agent, &embed, &mut buffers, &mut crng, 64, &picked);
        for _ in 0..250 {
            train_step(&mut agent, &mut embed, &buffers, &hyper, &opts, &mut trng).unwrap();
        }
        if iter % 10 == 9 || iter == iters - 1 {
            let evals = eval_return(&agent, &embed, &eval_tasks, 2);
            // sigma diagnostics at origin with a mid-training belief
            let ctx = buffers[0].sample_context(32, 32, &mut trng.clone()).unwrap();
            let b = embed.encode(&ctx).unwrap();
            let a = agent.act(&[0.0, 0.0], &b.features(), ActMode::Mean, &mut trng.clone()).unwrap();
            let a2 = agent.act(&[0.0, 0.0], &b.features(), ActMode::Sample, &mut trng.clone()).unwrap();
            print!(" it{iter}:({:.1},{:.1},lw{:.0},|a-am|{:.2})", evals[0], evals[1], a.log_prob_w,
                ((a2.action[0]-a.action[0]).powi(2)+(a2.action[1]-a.action[1]).powi(2)).sqrt());
        }
    }
    println!();
}
