use flowtint::dpo::{dpo_loss, sft_loss, DpoCase, DpoConfig, PairTensors};
use flowtint::flow::{combined_loss, distill_loss, model_fm_loss, standard_normal, FmCase, PromptSource};
use flowtint::micronet::{Group, GroupSet, ModelParams, NetConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

/// Initialized params with every tensor jittered so zero-initialized parts
/// (control projections, adapter up-weights) carry signal.
fn lively(seed: u64) -> ModelParams {
    let mut p = ModelParams::init(NetConfig::tiny(), seed).unwrap();
    p.reset_lora(seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for (_, _, t) in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.15..0.15);
        }
    }
    p
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn close(analytic: f64, numeric: f64, what: &str) -> Result<(), String> {
    let diff = (analytic - numeric).abs();
    let rel = diff / analytic.abs().max(numeric.abs());
    if diff <= 1e-8 || rel <= 1e-4 {
        Ok(())
    } else {
        Err(format!("{what}: analytic {analytic} vs numeric {numeric}"))
    }
}

/// Central differences over every `stride`-th entry of each trainable tensor;
/// frozen tensors must carry exactly zero gradient. Returns the number of
/// entries compared.
fn check(
    p: &ModelParams,
    grads: &ModelParams,
    trainable: GroupSet,
    stride: usize,
    loss: impl Fn(&ModelParams) -> f64,
) -> Result<usize, String> {
    let mut checked = 0;
    for (group, name, g) in grads.tensors() {
        if !trainable.contains(group) {
            if g.data().iter().any(|&v| v != 0.0) {
                return Err(format!("{name} is frozen but has gradient"));
            }
            continue;
        }
        for i in (0..g.len()).step_by(stride) {
            let eval = |delta: f64| {
                let mut q = p.clone();
                let t = q.tensors_mut().into_iter().find(|(_, n, _)| *n == name).unwrap().2;
                t.data_mut()[i] += delta;
                loss(&q)
            };
            close(g.data()[i], (eval(H) - eval(-H)) / (2.0 * H), &format!("{name}[{i}]"))?;
            checked += 1;
        }
    }
    if checked < 20 {
        return Err(format!("only {checked} entries checked"));
    }
    Ok(checked)
}

struct Data {
    x0: Tensor,
    eps: Tensor,
    cond: Tensor,
    gray_rgb: Tensor,
}

fn data(cfg: &NetConfig, seed: u64) -> Data {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let x0 = uniform(&mut rng, &[3, s, s]);
    let eps = standard_normal(&mut rng, &[3, s, s]);
    let cond = uniform(&mut rng, &[1, s, s]);
    let gray_rgb = Tensor::from_vec(&[3, s, s], cond.data().repeat(3)).unwrap();
    Data { x0, eps, cond, gray_rgb }
}

pub fn flow_loss_reference_prompt() -> Result<usize, String> {
    let p = lively(1);
    let d = data(&p.cfg, 2);
    let case = FmCase {
        x0: &d.x0,
        eps: &d.eps,
        t: 0.37,
        cond: &d.cond,
        prompt: PromptSource::Reference(&d.x0),
        control_scale: 0.0,
        use_lora: false,
    };
    let trainable = GroupSet::of(&[Group::Trunk, Group::PromptRef]);
    let g = model_fm_loss(&p, &case, trainable).unwrap().grads.unwrap();
    check(&p, &g, trainable, 3, |q| model_fm_loss(q, &case, GroupSet::empty()).unwrap().value)
}

pub fn flow_loss_control_branch() -> Result<usize, String> {
    let p = lively(3);
    let d = data(&p.cfg, 4);
    let prompt = [0.3, -0.2, 0.5, 0.1];
    let case = FmCase {
        x0: &d.x0,
        eps: &d.eps,
        t: 0.71,
        cond: &d.cond,
        prompt: PromptSource::Fixed(&prompt),
        control_scale: 0.8,
        use_lora: true,
    };
    let trainable = GroupSet::of(&[Group::Control]);
    let g = model_fm_loss(&p, &case, trainable).unwrap().grads.unwrap();
    check(&p, &g, trainable, 3, |q| model_fm_loss(q, &case, GroupSet::empty()).unwrap().value)
}

pub fn distillation_and_combined_losses() -> Result<usize, String> {
    let p = lively(5);
    let d = data(&p.cfg, 6);
    let trainable = GroupSet::of(&[Group::Prompt]);
    let dist = distill_loss(&p, &d.gray_rgb, &d.x0, trainable).unwrap();
    let n = check(&p, dist.grads.as_ref().unwrap(), trainable, 1, |q| {
        distill_loss(q, &d.gray_rgb, &d.x0, GroupSet::empty()).unwrap().value
    })?;

    let case = FmCase {
        x0: &d.x0,
        eps: &d.eps,
        t: 0.52,
        cond: &d.cond,
        prompt: PromptSource::Student(&d.gray_rgb),
        control_scale: 1.0,
        use_lora: false,
    };
    let total = |q: &ModelParams, tr: GroupSet| {
        let fm = model_fm_loss(q, &case, tr).unwrap();
        combined_loss(fm, distill_loss(q, &d.gray_rgb, &d.x0, tr).unwrap(), 0.1)
    };
    let c = total(&p, trainable);
    Ok(n + check(&p, c.grads.as_ref().unwrap(), trainable, 1, |q| total(q, GroupSet::empty()).value)?)
}

fn pair(cfg: &NetConfig, seed: u64) -> (PairTensors, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let winner = uniform(&mut rng, &[3, s, s]);
    let loser = Tensor::from_vec(&[3, s, s], winner.data().iter().map(|v| 0.5 + 0.3 * (v - 0.5)).collect()).unwrap();
    let cond = uniform(&mut rng, &[1, s, s]);
    let cond_rgb = Tensor::from_vec(&[3, s, s], cond.data().repeat(3)).unwrap();
    let eps_w = standard_normal(&mut rng, &[3, s, s]);
    let eps_l = standard_normal(&mut rng, &[3, s, s]);
    (PairTensors { cond, winner, loser, cond_rgb }, eps_w, eps_l)
}

pub fn preference_loss_adapters_and_trunk() -> Result<usize, String> {
    let policy = lively(7);
    let reference = lively(8).merge_lora();
    let (pt, eps_w, eps_l) = pair(&policy.cfg, 9);
    let prompt = [0.2, 0.1, -0.4, 0.3];
    let case = DpoCase { pair: &pt, t: 0.66, eps_w: &eps_w, eps_l: &eps_l, prompt: &prompt, control_scale: 1.0 };
    // a small beta keeps sigmoid(-z) away from saturation
    let cfg = DpoConfig { beta: 0.05, ..DpoConfig::default() };
    let mut n = 0;
    for trainable in [GroupSet::of(&[Group::Lora]), GroupSet::of(&[Group::Trunk])] {
        let l = dpo_loss(&policy, &reference, &case, &cfg, trainable).unwrap();
        if l.z.abs() > 10.0 {
            return Err(format!("sigmoid saturated, z = {}", l.z));
        }
        n += check(&policy, l.loss.grads.as_ref().unwrap(), trainable, 2, |q| {
            dpo_loss(q, &reference, &case, &cfg, GroupSet::empty()).unwrap().loss.value
        })?;
    }
    Ok(n)
}

pub fn supervised_winner_loss() -> Result<usize, String> {
    let policy = lively(10);
    let (pt, eps_w, eps_l) = pair(&policy.cfg, 11);
    let prompt = [0.0, 0.4, -0.1, 0.2];
    let case = DpoCase { pair: &pt, t: 0.81, eps_w: &eps_w, eps_l: &eps_l, prompt: &prompt, control_scale: 1.0 };
    let trainable = GroupSet::of(&[Group::Lora]);
    let g = sft_loss(&policy, &case, trainable).unwrap().grads.unwrap();
    check(&policy, &g, trainable, 1, |q| sft_loss(q, &case, GroupSet::empty()).unwrap().value)
}
